"""How relaunch commands are prepared for applications that cannot be
signalled into a resumable state by SIGUSR1 alone.

Two strategies exist. Flag-append adapters add a resume token to the
command line once. Restart-file-edit adapters point a config file at the
newest restart dump before every relaunch.

Run with: python3 demos/03_adapters.py
"""

import sys
import tempfile
from pathlib import Path

from scaleout.workloads.adapters import (
    TransformContext,
    find_latest_restart,
    get_adapter,
    transform_restart_command,
)


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="scaleout-demo-") as tmp:
        work = Path(tmp)

        flag = get_adapter("sigterm-flag")
        ctx = TransformContext(working_dir=work)
        command = ["gmx", "mdrun", "-deffnm", "run"]
        once = transform_restart_command(command, flag, ctx)
        twice = transform_restart_command(once, flag, ctx)
        print(f"original : {command}")
        print(f"relaunch : {once}")
        print(f"again    : {twice}  (idempotent: {once == twice})")

        edit = get_adapter("restart-file-edit")
        (work / "namelist.input").write_text("&param\n irst = 0\n nx = 64\n&end\n")
        for ordinal in (1, 2, 3):
            (work / f"cm1rst_{ordinal:06d}").write_bytes(b"restart dump")
        print(f"\nlatest restart ordinal: {find_latest_restart(work, 'cm1rst_')}")

        command = ["cm1.exe"]
        relaunch = transform_restart_command(command, edit, ctx)
        print(f"relaunch command unchanged: {relaunch == command}")
        print("namelist.input after transform:")
        print((work / "namelist.input").read_text())
        return 0


if __name__ == "__main__":
    sys.exit(main())
