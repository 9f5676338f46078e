"""Run one elastic job end to end on local processes.

A 2-rank PARINT job is scaled to 3 ranks at 40% of its expected runtime:
checkpoint barrier, admission of the new executor, relaunch. The final
checkpoint is compared byte for byte against an uninterrupted 1-rank run.

Run with: python3 demos/02_single_scaling_round.py
"""

import sys
import tempfile
from pathlib import Path

from scaleout.harness.runner import run_direct, run_stack_job


def parint_command(outer_iters: int) -> list:
    return [
        sys.executable, "-m", "scaleout.workloads.parint",
        "--array-size", "20000",
        "--nloop", "8",
        "--outer-iters", str(outer_iters),
        "--checkpoint", "parint.ckpt",
    ]


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="scaleout-demo-") as tmp:
        root = Path(tmp)
        command = parint_command(600)

        print("reference: uninterrupted single process ...")
        direct_s = run_direct(command, 1, root / "reference", timeout=300.0)
        expected = (root / "reference" / "parint.ckpt").read_bytes()
        print(f"  finished in {direct_s:.1f}s")

        print("elastic: 2 ranks, scale to 3 at the 40% mark ...")
        result = run_stack_job(
            job_name="demo",
            workload_command=command,
            working_dir=root / "job",
            from_ranks=2,
            schedule=((0.4, 3),),
            baseline_hint_s=max(1.5, direct_s),
            timestep=0.1,
        )
        if not result.ok:
            print(f"  job failed: {result.fail_reason}")
            return 1
        print(f"  finished in {result.wall_s:.1f}s, {result.rounds} scaling round")
        print(f"  checkpoint barrier cost {result.checkpoint_cost_s:.2f}s, "
              f"relaunch cost {result.relaunch_cost_s:.2f}s")

        print("\nphase trace:")
        for entry in result.transitions:
            print(f"  {entry['phase_from']:>20} -> {entry['phase_to']:<15} ({entry['reason']})")

        actual = (root / "job" / "parint.ckpt").read_bytes()
        print(f"\noutput byte-identical to reference: {actual == expected}")
        return 0 if actual == expected else 1


if __name__ == "__main__":
    sys.exit(main())
