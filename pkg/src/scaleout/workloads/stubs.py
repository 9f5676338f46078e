"""Small stand-in workloads used by tests and demos.

Real applications are not reproducible at desk scale, so three stubs
cover the behaviours the control plane cares about:

* ``sleep`` just sleeps; handy for barrier and liveness tests.
* ``sigterm`` counts ticks and, on SIGTERM, writes its counter to a
  state file and exits 0.  Started again with ``--resume`` it continues
  from that counter exactly.
* ``sleeper`` mimics a periodic-restart-file application: it writes
  ``cm1rst_NNNNNN`` files as it goes and starts after the interval
  named by the ``irst`` parameter in ``namelist.input`` when present.

Run as ``python -m scaleout.workloads.stubs <name> ...``.
"""

from __future__ import annotations

import argparse
import json
import re
import signal
import sys
import threading
import time
from pathlib import Path


def _arm(signum) -> threading.Event:
    stop = threading.Event()
    signal.signal(signum, lambda _signum, _frame: stop.set())
    return stop


def run_sleep(args) -> int:
    time.sleep(args.seconds)
    return args.exit_code


def run_sigterm_stub(args) -> int:
    stop = _arm(signal.SIGTERM)
    state_path = Path(args.state)
    start = 0
    if args.resume:
        # ranks admitted mid-job get the resume flag but have no state yet
        if state_path.exists():
            start = json.loads(state_path.read_text())["count"]
        else:
            print(f"sigterm stub: no state at {state_path}, starting fresh", file=sys.stderr)
    count = start
    for _ in range(start, args.ticks):
        if stop.is_set():
            break
        time.sleep(args.tick_seconds)
        count += 1
        if args.tick_log:
            with open(args.tick_log, "a", encoding="utf-8") as handle:
                handle.write(f"tick {count}\n")
    state_path.write_text(json.dumps({"count": count}) + "\n")
    return 0


def _read_irst(path: Path) -> int:
    if not path.exists():
        return 0
    for line in path.read_text().splitlines():
        match = re.match(r"^\s*irst\s*=\s*([0-9]+)\s*$", line)
        if match:
            return int(match.group(1))
    return 0


def run_sleeper(args) -> int:
    stop = _arm(signal.SIGTERM)
    work_dir = Path(args.dir)
    irst = _read_irst(work_dir / "namelist.input")
    for interval in range(irst + 1, args.intervals + 1):
        if stop.is_set():
            break
        time.sleep(args.interval_seconds)
        restart = work_dir / f"cm1rst_{interval:06d}"
        restart.write_text(json.dumps({"interval": interval}) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stubs", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    sleep_cmd = commands.add_parser("sleep", help="sleep for a fixed duration")
    sleep_cmd.add_argument("--seconds", type=float, required=True)
    sleep_cmd.add_argument("--exit-code", type=int, default=0)

    sigterm_cmd = commands.add_parser("sigterm", help="tick counter checkpointed by SIGTERM")
    sigterm_cmd.add_argument("--ticks", type=int, required=True)
    sigterm_cmd.add_argument("--tick-seconds", type=float, required=True)
    sigterm_cmd.add_argument("--state", required=True)
    sigterm_cmd.add_argument("--tick-log", default=None)
    sigterm_cmd.add_argument("--resume", action="store_true")

    sleeper_cmd = commands.add_parser("sleeper", help="periodic restart-file writer")
    sleeper_cmd.add_argument("--intervals", type=int, required=True)
    sleeper_cmd.add_argument("--interval-seconds", type=float, required=True)
    sleeper_cmd.add_argument("--dir", default=".")

    args = parser.parse_args(argv)
    if args.command == "sleep":
        return run_sleep(args)
    if args.command == "sigterm":
        return run_sigterm_stub(args)
    return run_sleeper(args)


if __name__ == "__main__":
    sys.exit(main())
