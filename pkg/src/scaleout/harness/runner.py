"""One-job runners: the full elastic stack, and a direct launch for comparison."""

import logging
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from scaleout.coordinator import JobPhase, JobSpec, start_coordinator
from scaleout.monitor import LocalProcessProvisioner, ScalingPolicy, run_monitor

log = logging.getLogger("scaleout.harness")


@dataclass
class StackRunResult:
    """Outcome of one job under the elastic stack."""

    final_phase: str
    wall_s: float
    checkpoint_cost_s: float
    relaunch_cost_s: float
    rounds: int
    epochs: int
    fail_reason: str | None = None
    transitions: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.final_phase == "Complete"


def _phase_mono(transitions, phase_to):
    for entry in transitions:
        if entry["phase_to"] == phase_to:
            return entry["mono"]
    return None


def run_stack_job(
    *,
    job_name: str,
    workload_command: list,
    working_dir: Path,
    from_ranks: int,
    schedule: tuple = (),
    baseline_hint_s: float = 60.0,
    timestep: float = 0.1,
    adapter: str = "parint",
    checkpoint_grace: float = 30.0,
    checkpoint_timeout: float | None = None,
    relaunch_delay: float = 0.0,
    provision_timeout: float = 120.0,
    job_timeout: float = 900.0,
) -> StackRunResult:
    """Run one job end to end: coordinator, local agents, monitor schedule."""
    working_dir = Path(working_dir)
    working_dir.mkdir(parents=True, exist_ok=True)
    spec = JobSpec(
        job_name=job_name,
        initial_ranks=from_ranks,
        workload_command=[str(part) for part in workload_command],
        working_dir=working_dir,
        adapter=adapter,
        heartbeat_timestep=timestep,
        checkpoint_grace=checkpoint_grace,
    )
    coord_kwargs = {}
    if checkpoint_timeout is not None:
        coord_kwargs["checkpoint_timeout"] = checkpoint_timeout
    coord = start_coordinator(
        spec,
        provision_timeout=provision_timeout,
        relaunch_delay=relaunch_delay,
        **coord_kwargs,
    )
    provisioner = LocalProcessProvisioner(job_name, working_dir, coord.address, timestep)
    policy = ScalingPolicy(
        baseline_duration=baseline_hint_s, from_ranks=from_ranks, schedule=schedule
    )
    poll = min(0.25, max(0.02, timestep / 4.0))
    try:
        provisioner.spawn_initial(from_ranks)
        run_monitor(
            policy,
            provisioner,
            coord.address,
            job_name=job_name,
            poll_interval=poll,
            startup_timeout=job_timeout,
        )
        coord.wait_for_phase(JobPhase.COMPLETE, JobPhase.FAILED, timeout=job_timeout)
        provisioner.wait_all(timeout=max(10.0, 3 * timestep))
    finally:
        provisioner.terminate_all()
        transitions = coord.transitions
        rounds = coord.rounds
        epochs = len(coord.launches)
        final_phase = coord.phase.value
        fail_reason = coord.fail_reason
        coord.stop()

    started = _phase_mono(transitions, "Running")
    ended = transitions[-1]["mono"] if transitions else None
    wall = (ended - started) if (started is not None and ended is not None) else 0.0
    checkpoint_cost = sum(r.checkpoint_s or 0.0 for r in rounds)
    relaunch_cost = sum(
        (r.running_mono - r.barrier_mono)
        for r in rounds
        if r.running_mono is not None and r.barrier_mono is not None
    )
    return StackRunResult(
        final_phase=final_phase,
        wall_s=wall,
        checkpoint_cost_s=checkpoint_cost,
        relaunch_cost_s=relaunch_cost,
        rounds=len(rounds),
        epochs=epochs,
        fail_reason=fail_reason,
        transitions=transitions,
    )


def run_direct(
    workload_command: list,
    ranks: int,
    working_dir: Path,
    *,
    timeout: float = 900.0,
) -> float:
    """Launch the workload ranks as plain processes; return the wall time."""
    working_dir = Path(working_dir)
    working_dir.mkdir(parents=True, exist_ok=True)
    command = [str(part) for part in workload_command]
    procs = []
    start = time.perf_counter()
    try:
        for rank in range(ranks):
            env = dict(os.environ)
            env["KUB_RANK"] = str(rank)
            env["KUB_WORLD_SIZE"] = str(ranks)
            env["KUB_JOB_DIR"] = str(working_dir)
            with open(working_dir / f"direct-{rank}.log", "ab") as sink:
                procs.append(
                    subprocess.Popen(
                        command, cwd=working_dir, env=env,
                        stdout=sink, stderr=subprocess.STDOUT,
                    )
                )
        deadline = start + timeout
        for rank, proc in enumerate(procs):
            remaining = max(0.1, deadline - time.perf_counter())
            code = proc.wait(timeout=remaining)
            if code != 0:
                raise RuntimeError(f"direct rank {rank} exited {code}")
    finally:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
                proc.wait()
    return time.perf_counter() - start
