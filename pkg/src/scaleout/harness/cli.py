"""Command line entry point for the experiment harness."""

import argparse
import logging
import sys
from pathlib import Path

from scaleout.harness.experiments import (
    ExperimentConfig,
    run_overhead_experiment,
    run_scaling_matrix,
    run_sensitivity,
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="harness", description="Run elastic-scaling experiments and emit CSV."
    )
    parser.add_argument(
        "experiment", choices=("overhead", "matrix", "sensitivity"),
        help="which experiment family to run",
    )
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--out", required=True, help="output directory for results.csv and job logs")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config)
    except (OSError, ValueError) as exc:
        print(f"harness: bad config: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.experiment == "overhead":
        reports = run_overhead_experiment(cfg, out_dir)
        for report in reports:
            print(
                f"timestep {report.timestep:g}s: direct {report.direct_s:.2f}s, "
                f"stack {report.stack_s:.2f}s, overhead {report.overhead:+.3f}"
            )
        return 0

    if args.experiment == "matrix":
        results = run_scaling_matrix(cfg, out_dir)
    else:
        results = run_sensitivity(cfg, out_dir)

    ok = sum(1 for r in results if r.status == "ok")
    baseline = sum(1 for r in results if r.status == "baseline")
    failed = sum(1 for r in results if r.status == "failed")
    print(
        f"{args.experiment}: {ok} scaled rows, {baseline} baseline rows, "
        f"{failed} failed; wrote {out_dir / 'results.csv'}"
    )
    return 0 if failed == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
