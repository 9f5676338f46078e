"""Print the analytic speedup model across the experiment grid.

A job scaled from r0 to r1 ranks at fraction p of its baseline runtime,
paying a cost fraction c for the scaling round, finishes in
T_base * (p + c + (1 - p) * r0 / r1). Earlier scaling and a bigger target
help; a costly round late in the run can make the job slower overall.

Run with: python3 demos/04_speedup_model.py
"""

import sys

from scaleout.harness.model import ideal_speedup


def main() -> int:
    points = (0.3, 0.5, 0.7)
    scenarios = ((2, 4), (2, 6), (4, 6))

    print("free scaling (c = 0):")
    header = "  scenario " + "".join(f"  p={p:<5}" for p in points)
    print(header)
    for r0, r1 in scenarios:
        row = "".join(f"  {ideal_speedup(p, r0, r1):<7.3f}" for p in points)
        print(f"  {r0}->{r1:<6}{row}")

    print("\nsame grid with a 12% round cost (c = 0.12):")
    print(header)
    for r0, r1 in scenarios:
        row = "".join(f"  {ideal_speedup(p, r0, r1, c=0.12):<7.3f}" for p in points)
        print(f"  {r0}->{r1:<6}{row}")

    worst = ideal_speedup(0.7, 4, 6, c=0.12)
    print(f"\n4->6 at p=0.7 with c=0.12 gives {worst:.3f}: the scaled run loses.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
