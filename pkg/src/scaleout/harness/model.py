"""Analytic speedup model for a job scaled mid-run.

A perfectly parallel workload scaled from r0 to r1 ranks at fraction p of
its baseline runtime, paying checkpoint and relaunch costs worth c of the
baseline, finishes in T_base * (p + c + (1 - p) * r0 / r1).
"""


def ideal_speedup(p: float, r0: int, r1: int, c: float = 0.0) -> float:
    """Model speedup over the unscaled baseline."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"scaling point must be in (0, 1), got {p}")
    if r0 < 1 or r1 <= r0:
        raise ValueError(f"need r1 > r0 >= 1, got r0={r0} r1={r1}")
    if c < 0.0:
        raise ValueError(f"cost fraction must be non-negative, got {c}")
    return 1.0 / (p + c + (1.0 - p) * (r0 / r1))


def scaled_duration(baseline_s: float, p: float, r0: int, r1: int, c: float = 0.0) -> float:
    """Model wall time of the scaled run with baseline T_base."""
    if baseline_s <= 0:
        raise ValueError("baseline_s must be positive")
    return baseline_s / ideal_speedup(p, r0, r1, c)
