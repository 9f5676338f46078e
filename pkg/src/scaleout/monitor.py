"""Monitor: time-based scaling policy, provisioning, and the Scale RPC.

The monitor is a client of the coordinator.  It polls activeServer,
measures elapsed time from the moment the job first reports Running,
and fires each schedule entry once: first the Scale RPC (so the
coordinator knows how many newcomers to expect), then the provisioner
starts that many new executor agents.  It returns a report when the
job reaches Complete or Failed.

Provisioners are pluggable.  LocalProcessProvisioner starts real agent
processes on this machine; NullProvisioner starts nothing and lets the
test environment supply agents by other means.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import transport
from .coordinator import ScaleCommand
from .transport import RpcError, TransportError

log = logging.getLogger(__name__)


class ProvisionFailure(Exception):
    """The provisioner could not start the requested agents."""


@dataclass(frozen=True)
class ScheduleEntry:
    scaling_point: float
    to_ranks: int


@dataclass
class ScalingPolicy:
    """When to grow the job, expressed against a measured baseline."""

    baseline_duration: float
    from_ranks: int
    schedule: tuple = ()
    fired: set = field(default_factory=set, compare=False)

    def __post_init__(self):
        self.schedule = tuple(
            entry if isinstance(entry, ScheduleEntry) else ScheduleEntry(*entry)
            for entry in self.schedule
        )
        if self.baseline_duration <= 0:
            raise ValueError("baseline_duration must be positive")
        if self.from_ranks < 1:
            raise ValueError("from_ranks must be at least 1")
        previous_point = 0.0
        previous_world = self.from_ranks
        for entry in self.schedule:
            if not 0.0 < entry.scaling_point < 1.0:
                raise ValueError(f"scaling point {entry.scaling_point} outside (0,1)")
            if entry.scaling_point <= previous_point:
                raise ValueError("scaling points must be strictly increasing")
            if entry.to_ranks <= previous_world:
                raise ValueError(
                    f"target {entry.to_ranks} does not grow the world of {previous_world}"
                )
            previous_point = entry.scaling_point
            previous_world = entry.to_ranks

    def exhausted(self) -> bool:
        """True once every schedule entry has fired or been skipped."""
        return len(self.fired) >= len(self.schedule)


def evaluate_policy(
    elapsed: float, policy: ScalingPolicy, current_world: int
) -> ScaleCommand | None:
    """Return the ScaleCommand for the first due, unfired schedule entry."""
    for idx, entry in enumerate(policy.schedule):
        if idx in policy.fired:
            continue
        if entry.scaling_point * policy.baseline_duration > elapsed:
            return None
        policy.fired.add(idx)
        if entry.to_ranks <= current_world:
            log.warning("schedule entry %d target %d already reached", idx, entry.to_ranks)
            continue
        return ScaleCommand(nodes=entry.to_ranks, mode="absolute")
    return None


@dataclass
class MonitorRound:
    scaling_point: float
    target_world: int
    fired_at_s: float
    scale_s: float
    provision_s: float
    nodes: list


@dataclass
class MonitorReport:
    final_phase: str
    rounds: list
    running_to_end_s: float


class LocalProcessProvisioner:
    """Starts executor agents as local OS processes."""

    def __init__(
        self,
        job_name: str,
        job_dir: Path,
        coordinator_addr: tuple[str, int],
        heartbeat_timestep: float,
        *,
        python: str = sys.executable,
        stagger: float = 0.0,
        max_missed_probes: int | None = None,
    ):
        self.job_name = job_name
        self.job_dir = Path(job_dir)
        self.coordinator_addr = coordinator_addr
        self.heartbeat_timestep = heartbeat_timestep
        self.python = python
        self.stagger = stagger
        self.max_missed_probes = max_missed_probes
        self.processes: list[subprocess.Popen] = []
        self._next_scale_index = 0

    def _spawn(self, node_name: str) -> None:
        command = [
            self.python,
            "-m",
            "scaleout.executor",
            "--name",
            node_name,
            "--coordinator",
            transport.format_address(self.coordinator_addr),
            "--listen",
            "127.0.0.1:0",
            "--timestep",
            str(self.heartbeat_timestep),
            "--job-dir",
            str(self.job_dir),
        ]
        if self.max_missed_probes is not None:
            command += ["--max-missed", str(self.max_missed_probes)]
        log_path = self.job_dir / f"{node_name}.log"
        try:
            with open(log_path, "ab") as sink:
                proc = subprocess.Popen(command, stdout=sink, stderr=subprocess.STDOUT)
        except OSError as exc:
            raise ProvisionFailure(f"cannot start agent {node_name}: {exc}") from exc
        self.processes.append(proc)

    def spawn_initial(self, count: int) -> list[str]:
        """Start the initial worker agents, staggered if configured."""
        names = []
        for index in range(count):
            name = f"{self.job_name}-worker-{index}"
            self._spawn(name)
            names.append(name)
            if self.stagger > 0 and index + 1 < count:
                time.sleep(self.stagger)
        return names

    def provision(self, count: int, job: str, context: dict | None = None) -> list[str]:
        names = []
        for _ in range(count):
            name = f"{self.job_name}-scale-{self._next_scale_index}"
            self._next_scale_index += 1
            self._spawn(name)
            names.append(name)
        return names

    def wait_all(self, timeout: float) -> list[int | None]:
        """Wait for every spawned agent to exit; None marks a straggler."""
        deadline = time.perf_counter() + timeout
        codes: list[int | None] = []
        for proc in self.processes:
            remaining = max(0.0, deadline - time.perf_counter())
            try:
                codes.append(proc.wait(timeout=remaining))
            except subprocess.TimeoutExpired:
                codes.append(None)
        return codes

    def terminate_all(self) -> None:
        for proc in self.processes:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.processes:
            if proc.poll() is None:
                try:
                    proc.wait(timeout=2.0)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.wait()


class NullProvisioner:
    """Records provision requests; agents arrive by other means."""

    def __init__(self, on_provision=None):
        self.requests: list[tuple[int, str]] = []
        self.on_provision = on_provision

    def provision(self, count: int, job: str, context: dict | None = None) -> list[str]:
        self.requests.append((count, job))
        if self.on_provision is not None:
            return list(self.on_provision(count, job, context) or [])
        return []


def run_monitor(
    policy: ScalingPolicy,
    provisioner,
    coordinator_addr: tuple[str, int],
    *,
    job_name: str = "",
    poll_interval: float = 0.5,
    startup_timeout: float | None = 300.0,
    rpc_timeout: float = 5.0,
    max_missed_probes: int = 6,
) -> MonitorReport:
    """Drive one job's scaling schedule; return when it ends."""
    rounds: list[MonitorRound] = []
    world = policy.from_ranks

    def probe() -> str:
        return transport.call(
            coordinator_addr, "activeServer", {}, timeout=rpc_timeout
        )["phase"]

    # wait for the job to start running
    start_deadline = (
        None if startup_timeout is None else time.perf_counter() + startup_timeout
    )
    while True:
        try:
            phase = probe()
        except TransportError:
            phase = None
        if phase == "Running":
            break
        if phase in ("Complete", "Failed"):
            return MonitorReport(final_phase=phase, rounds=rounds, running_to_end_s=0.0)
        if start_deadline is not None and time.perf_counter() > start_deadline:
            raise TimeoutError(f"job never reached Running (last saw {phase})")
        time.sleep(poll_interval)

    running_since = time.perf_counter()
    misses = 0
    while True:
        try:
            phase = probe()
            misses = 0
        except TransportError as exc:
            misses += 1
            if misses >= max_missed_probes:
                raise TransportError(f"coordinator unreachable: {exc}") from exc
            time.sleep(poll_interval)
            continue
        if phase in ("Complete", "Failed"):
            return MonitorReport(
                final_phase=phase,
                rounds=rounds,
                running_to_end_s=time.perf_counter() - running_since,
            )
        if phase == "Running":
            elapsed = time.perf_counter() - running_since
            cmd = evaluate_policy(elapsed, policy, world)
            if cmd is not None:
                target = cmd.target_world(world)
                t0 = time.perf_counter()
                # Scale first so the coordinator expects the newcomers
                transport.call(
                    coordinator_addr,
                    "Scale",
                    {"nodes": cmd.nodes, "mode": cmd.mode},
                    timeout=rpc_timeout,
                )
                t1 = time.perf_counter()
                nodes = provisioner.provision(
                    target - world, job_name, {"target_world": target}
                )
                t2 = time.perf_counter()
                rounds.append(
                    MonitorRound(
                        scaling_point=elapsed / policy.baseline_duration,
                        target_world=target,
                        fired_at_s=elapsed,
                        scale_s=t1 - t0,
                        provision_s=t2 - t1,
                        nodes=list(nodes),
                    )
                )
                world = target
        # tight polling is only needed while a schedule entry can still fire;
        # watching for completion afterwards must not contend with the job
        time.sleep(poll_interval if not policy.exhausted() else max(poll_interval, 0.25))


def _parse_schedule_entry(text: str) -> ScheduleEntry:
    point_text, _, ranks_text = text.partition(":")
    try:
        return ScheduleEntry(scaling_point=float(point_text), to_ranks=int(ranks_text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected POINT:RANKS, got {text!r}") from None


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="monitor", description="Fire a time-based scaling schedule at a coordinator."
    )
    parser.add_argument("--coordinator", required=True, help="coordinator HOST:PORT")
    parser.add_argument(
        "--schedule",
        action="append",
        type=_parse_schedule_entry,
        default=[],
        metavar="POINT:RANKS",
        help="fire at POINT of the baseline, growing to RANKS (repeatable)",
    )
    parser.add_argument("--baseline", type=float, required=True, help="baseline duration in seconds")
    parser.add_argument("--provisioner", choices=["local", "null"], default="local")
    parser.add_argument("--from-ranks", type=int, required=True, help="world size at launch")
    parser.add_argument("--job", default="job", help="job name (local provisioner)")
    parser.add_argument("--job-dir", default=".", help="shared job directory (local provisioner)")
    parser.add_argument("--timestep", type=float, default=10.0, help="agent heartbeat (local provisioner)")
    parser.add_argument("--poll-interval", type=float, default=0.5)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    coordinator_addr = transport.parse_host_port(args.coordinator)
    policy = ScalingPolicy(
        baseline_duration=args.baseline,
        from_ranks=args.from_ranks,
        schedule=tuple(args.schedule),
    )
    if args.provisioner == "local":
        provisioner = LocalProcessProvisioner(
            args.job, Path(args.job_dir), coordinator_addr, args.timestep
        )
    else:
        provisioner = NullProvisioner()
    report = run_monitor(
        policy,
        provisioner,
        coordinator_addr,
        job_name=args.job,
        poll_interval=args.poll_interval,
    )
    for rnd in report.rounds:
        log.info(
            "round to %d fired at %.2fs (scale %.3fs, provision %.3fs)",
            rnd.target_world,
            rnd.fired_at_s,
            rnd.scale_s,
            rnd.provision_s,
        )
    log.info("job finished as %s after %.2fs", report.final_phase, report.running_to_end_s)
    return 0 if report.final_phase == "Complete" else 1


if __name__ == "__main__":
    sys.exit(main())
