"""Experiment definitions: baselines, overhead, scaling matrix, sensitivity."""

import csv
import dataclasses
import json
import logging
import math
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from scaleout.harness.model import scaled_duration
from scaleout.harness.runner import run_direct, run_stack_job

log = logging.getLogger("scaleout.harness")

CSV_COLUMNS = (
    "experiment",
    "scenario_from",
    "scenario_to",
    "scaling_point",
    "rep",
    "baseline_s",
    "scaled_s",
    "speedup",
    "checkpoint_cost_s",
    "relaunch_cost_s",
    "status",
)

# a workload must run several timesteps for overhead to be measurable
MIN_TIMESTEPS_PER_RUN = 5

WORKLOAD_KINDS = ("parint", "simulated")


@dataclass
class ExperimentConfig:
    """Mirrors the harness config file."""

    workload: dict
    scenarios: list = field(default_factory=lambda: [(2, 4), (2, 6), (4, 6)])
    scaling_points: list = field(default_factory=lambda: [0.3, 0.5, 0.7])
    repetitions: int = 3
    timestep: float = 0.1
    timesteps: list | None = None
    checkpoint_grace: float = 30.0
    relaunch_delay: float = 0.0
    nloops: list = field(default_factory=lambda: [16, 32, 64])
    job_timeout: float = 900.0

    def validate(self) -> None:
        kind = self.workload.get("kind")
        if kind not in WORKLOAD_KINDS:
            raise ValueError(f"unknown workload kind: {kind!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        for point in self.scaling_points:
            if not 0.0 < point < 1.0:
                raise ValueError(f"scaling point {point} outside (0,1)")
        for r0, r1 in self.scenarios:
            if r0 < 1 or r1 <= r0:
                raise ValueError(f"scenario must grow: {r0} -> {r1}")
        if self.timestep <= 0:
            raise ValueError("timestep must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fields = dict(data)
        if "scenarios" in fields:
            fields["scenarios"] = [tuple(pair) for pair in fields["scenarios"]]
        cfg = cls(**fields)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


@dataclass
class ExperimentResult:
    """One CSV row."""

    experiment: str
    scenario_from: int
    scenario_to: int
    scaling_point: float
    rep: int
    baseline_s: float
    scaled_s: float
    speedup: float
    checkpoint_cost_s: float
    relaunch_cost_s: float
    status: str

    def as_row(self) -> list:
        return [
            self.experiment,
            self.scenario_from,
            self.scenario_to,
            self.scaling_point,
            self.rep,
            self.baseline_s,
            self.scaled_s,
            self.speedup,
            self.checkpoint_cost_s,
            self.relaunch_cost_s,
            self.status,
        ]


@dataclass
class OverheadReport:
    timestep: float
    direct_s: float
    stack_s: float

    @property
    def overhead(self) -> float:
        return self.stack_s / self.direct_s - 1.0


@dataclass
class RunOutcome:
    ok: bool
    wall_s: float = 0.0
    checkpoint_cost_s: float = 0.0
    relaunch_cost_s: float = 0.0
    detail: str = ""


def write_results_csv(path, results) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for result in results:
            writer.writerow(result.as_row())


def read_results_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


# -- workload sizing ----------------------------------------------------

_RATE_PROBE = (
    "import sys, time\n"
    "from scaleout.workloads.parint import advance_block, initial_value\n"
    "n, nloop, budget = int(sys.argv[1]), int(sys.argv[2]), float(sys.argv[3])\n"
    "values = [initial_value(i) for i in range(n)]\n"
    "advance_block(values, nloop, 1)\n"
    "done = 0\n"
    "start = time.perf_counter()\n"
    "while time.perf_counter() - start < budget:\n"
    "    advance_block(values, nloop, 1)\n"
    "    done += n\n"
    "print(done / (time.perf_counter() - start))\n"
)


def measure_aggregate_rate(
    array_size: int, nloop: int, ranks: int, *, probe_s: float = 0.6
) -> float:
    """Element-iterations per second with `ranks` concurrent processes.

    Summing per-process rates is correct whether the processes share one
    core or spread across several.
    """
    per_rank = max(1, array_size // max(1, ranks))
    procs = [
        subprocess.Popen(
            [sys.executable, "-c", _RATE_PROBE, str(per_rank), str(nloop), str(probe_s)],
            stdout=subprocess.PIPE,
            text=True,
        )
        for _ in range(ranks)
    ]
    total = 0.0
    for proc in procs:
        out, _ = proc.communicate(timeout=60.0)
        if proc.returncode != 0:
            raise RuntimeError(f"rate probe exited {proc.returncode}")
        total += float(out.strip())
    return total


def calibrate_outer_iters(
    array_size: int, nloop: int, ranks: int, target_s: float, *, spawn_allowance: float = 0.4
) -> int:
    """Pick the iteration count that makes a `ranks`-wide run last ~target_s."""
    rate = measure_aggregate_rate(array_size, nloop, ranks)
    budget = max(0.5, target_s - spawn_allowance)
    return max(1, round(budget * rate / array_size))


# -- drivers -------------------------------------------------------------


class SimulatedDriver:
    """Synthesizes run durations from the analytic model; no processes."""

    def __init__(self, baseline_s: float, cost_fraction: float = 0.0):
        if baseline_s <= 0:
            raise ValueError("baseline_s must be positive")
        if cost_fraction < 0:
            raise ValueError("cost_fraction must be non-negative")
        self.baseline_s = baseline_s
        self.cost_fraction = cost_fraction

    def baseline(self, ranks: int, tag: str) -> RunOutcome:
        return RunOutcome(ok=True, wall_s=self.baseline_s)

    def scaled(
        self, r0: int, r1: int, point: float, baseline_s: float, tag: str
    ) -> RunOutcome:
        wall = scaled_duration(baseline_s, point, r0, r1, self.cost_fraction)
        return RunOutcome(
            ok=True,
            wall_s=wall,
            checkpoint_cost_s=self.cost_fraction * baseline_s,
            relaunch_cost_s=0.0,
        )


class StackDriver:
    """Runs the PARINT workload under the real elastic stack."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        workload = cfg.workload
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.array_size = int(workload.get("array_size", 100_000))
        self.nloop = int(workload.get("nloop", 32))
        self.target_baseline_s = workload.get("target_baseline_s")
        self._outer_iters = workload.get("outer_iters")
        self.checkpoint_name = workload.get("checkpoint", "parint.ckpt")
        self.calibration_ranks = int(workload.get("calibration_ranks", 2))
        if self._outer_iters is None and self.target_baseline_s is None:
            raise ValueError("parint workload needs outer_iters or target_baseline_s")

    @property
    def outer_iters(self) -> int:
        if self._outer_iters is None:
            self._outer_iters = calibrate_outer_iters(
                self.array_size, self.nloop, self.calibration_ranks,
                float(self.target_baseline_s),
            )
            log.info(
                "calibrated outer_iters=%d for ~%.1fs at N=%d nloop=%d",
                self._outer_iters, self.target_baseline_s, self.array_size, self.nloop,
            )
        return int(self._outer_iters)

    def command(self) -> list:
        return [
            sys.executable, "-m", "scaleout.workloads.parint",
            "--array-size", str(self.array_size),
            "--nloop", str(self.nloop),
            "--outer-iters", str(self.outer_iters),
            "--checkpoint", self.checkpoint_name,
        ]

    def _run(self, tag, ranks, schedule, baseline_hint_s) -> RunOutcome:
        result = run_stack_job(
            job_name=tag,
            workload_command=self.command(),
            working_dir=self.out_dir / "jobs" / tag,
            from_ranks=ranks,
            schedule=schedule,
            baseline_hint_s=baseline_hint_s,
            timestep=self.cfg.timestep,
            adapter="parint",
            checkpoint_grace=self.cfg.checkpoint_grace,
            relaunch_delay=self.cfg.relaunch_delay,
            job_timeout=self.cfg.job_timeout,
        )
        if not result.ok:
            log.warning("job %s ended %s: %s", tag, result.final_phase, result.fail_reason)
        return RunOutcome(
            ok=result.ok,
            wall_s=result.wall_s,
            checkpoint_cost_s=result.checkpoint_cost_s,
            relaunch_cost_s=result.relaunch_cost_s,
            detail=result.fail_reason or "",
        )

    def baseline(self, ranks: int, tag: str) -> RunOutcome:
        hint = float(self.target_baseline_s or 60.0)
        return self._run(tag, ranks, (), hint)

    def scaled(
        self, r0: int, r1: int, point: float, baseline_s: float, tag: str
    ) -> RunOutcome:
        return self._run(tag, r0, ((point, r1),), baseline_s)


def make_driver(cfg: ExperimentConfig, out_dir):
    kind = cfg.workload.get("kind")
    if kind == "simulated":
        return SimulatedDriver(
            baseline_s=float(cfg.workload.get("baseline_s", 100.0)),
            cost_fraction=float(cfg.workload.get("cost_fraction", 0.0)),
        )
    return StackDriver(cfg, out_dir)


# -- experiments ----------------------------------------------------------


def _point_tag(point: float) -> str:
    return f"p{int(round(point * 100)):02d}"


def run_baseline(cfg: ExperimentConfig, ranks: int, out_dir, *, driver=None) -> float:
    """Median baseline wall time over the configured repetitions."""
    driver = driver or make_driver(cfg, out_dir)
    walls = []
    for rep in range(cfg.repetitions):
        outcome = driver.baseline(ranks, f"base-{ranks}-r{rep}")
        if not outcome.ok:
            raise RuntimeError(f"baseline run failed: {outcome.detail}")
        walls.append(outcome.wall_s)
    return statistics.median(walls)


def _baseline_rows(experiment, driver, ranks, reps):
    """Run `reps` baselines at `ranks`; returns (rows, median or None)."""
    rows = []
    walls = []
    for rep in range(reps):
        outcome = driver.baseline(ranks, f"{experiment}-base{ranks}-r{rep}")
        if outcome.ok:
            walls.append(outcome.wall_s)
            rows.append(
                ExperimentResult(
                    experiment, ranks, ranks, 0.0, rep,
                    outcome.wall_s, outcome.wall_s, 1.0, 0.0, 0.0, "baseline",
                )
            )
        else:
            rows.append(
                ExperimentResult(
                    experiment, ranks, ranks, 0.0, rep, 0.0, 0.0, 0.0, 0.0, 0.0, "failed",
                )
            )
    return rows, (statistics.median(walls) if walls else None)


def _matrix_rows(experiment, cfg, driver) -> list:
    results = []
    baselines = {}
    for ranks in sorted({scenario[0] for scenario in cfg.scenarios}):
        rows, median = _baseline_rows(experiment, driver, ranks, cfg.repetitions)
        results.extend(rows)
        baselines[ranks] = median
    for r0, r1 in cfg.scenarios:
        base = baselines[r0]
        for point in cfg.scaling_points:
            for rep in range(cfg.repetitions):
                if base is None:
                    results.append(
                        ExperimentResult(
                            experiment, r0, r1, point, rep,
                            0.0, 0.0, 0.0, 0.0, 0.0, "failed",
                        )
                    )
                    continue
                tag = f"{experiment}-{r0}to{r1}-{_point_tag(point)}-r{rep}"
                outcome = driver.scaled(r0, r1, point, base, tag)
                if outcome.ok and outcome.wall_s > 0:
                    results.append(
                        ExperimentResult(
                            experiment, r0, r1, point, rep,
                            base, outcome.wall_s, base / outcome.wall_s,
                            outcome.checkpoint_cost_s, outcome.relaunch_cost_s, "ok",
                        )
                    )
                else:
                    results.append(
                        ExperimentResult(
                            experiment, r0, r1, point, rep,
                            base, 0.0, 0.0, 0.0, 0.0, "failed",
                        )
                    )
    return results


def run_scaling_matrix(cfg: ExperimentConfig, out_dir, *, driver=None) -> list:
    """Scenario x scaling-point grid; emits results.csv under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    driver = driver or make_driver(cfg, out_dir)
    results = _matrix_rows("matrix", cfg, driver)
    write_results_csv(out_dir / "results.csv", results)
    return results


def run_sensitivity(cfg: ExperimentConfig, out_dir, *, nloops=None) -> list:
    """The 2->6 scenario swept over arithmetic-intensity settings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for nloop in nloops or cfg.nloops:
        workload = {**cfg.workload, "nloop": int(nloop)}
        if workload.get("target_baseline_s") is not None:
            # re-size the run so every intensity setting lasts about as long
            workload["outer_iters"] = None
        sub = dataclasses.replace(cfg, workload=workload, scenarios=[(2, 6)])
        driver = make_driver(sub, out_dir)
        results.extend(_matrix_rows(f"sensitivity-nloop{int(nloop)}", sub, driver))
    write_results_csv(out_dir / "results.csv", results)
    return results


def run_overhead_experiment(
    cfg: ExperimentConfig, out_dir, *, timesteps=None
) -> list[OverheadReport]:
    """Stack-vs-direct wall time for the same workload; emits results.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.workload.get("kind") != "parint":
        raise ValueError("overhead experiment needs the parint workload")
    driver = StackDriver(cfg, out_dir)
    ranks = int(cfg.workload.get("ranks", 2))
    command = driver.command()

    reports = []
    rows = []
    for index, timestep in enumerate(timesteps or cfg.timesteps or [cfg.timestep]):
        sub = dataclasses.replace(cfg, timestep=float(timestep))
        stack_driver = StackDriver(sub, out_dir)
        stack_driver._outer_iters = driver.outer_iters
        # min over repetitions: background load only ever inflates a run,
        # so the fastest pair is the cleanest overhead estimate
        best_direct = math.inf
        best_stack = math.inf
        for rep in range(max(1, cfg.repetitions)):
            direct_s = run_direct(
                command, ranks, out_dir / "jobs" / f"direct-ts{index}-r{rep}",
                timeout=cfg.job_timeout,
            )
            if direct_s < MIN_TIMESTEPS_PER_RUN * timestep:
                raise ValueError(
                    f"workload ran {direct_s:.2f}s, too short for a {timestep}s timestep "
                    f"(needs at least {MIN_TIMESTEPS_PER_RUN}x)"
                )
            outcome = stack_driver.baseline(ranks, f"overhead-ts{index}-r{rep}")
            if not outcome.ok:
                raise RuntimeError(f"stack run failed: {outcome.detail}")
            best_direct = min(best_direct, direct_s)
            best_stack = min(best_stack, outcome.wall_s)
            rows.append(
                ExperimentResult(
                    f"overhead-ts{timestep:g}", ranks, ranks, 0.0, rep,
                    direct_s, outcome.wall_s, direct_s / outcome.wall_s, 0.0, 0.0, "ok",
                )
            )
        report = OverheadReport(timestep=timestep, direct_s=best_direct, stack_s=best_stack)
        reports.append(report)
        log.info(
            "timestep %.3gs: direct %.2fs stack %.2fs overhead %.3f",
            timestep, best_direct, best_stack, report.overhead,
        )
    write_results_csv(out_dir / "results.csv", rows)
    return reports
