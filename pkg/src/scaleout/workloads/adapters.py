"""Application adapters: how a workload is checkpointed and relaunched.

An adapter couples two things: which signal asks the workload to save
its state and exit, and what must change in the relaunch command (or in
the working directory) so the restarted run picks that state up.  Two
kinds exist.  A ``signal-exit`` adapter optionally appends flag tokens
to the command; a ``restart-file-edit`` adapter leaves the command
alone but points a parameter file at the newest restart file.
"""

from __future__ import annotations

import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path


class AdapterError(Exception):
    """Base class for adapter failures."""


class UnknownAdapter(AdapterError):
    """No adapter is registered under the requested id."""


class NoCheckpointFound(AdapterError):
    """The directory holds no file matching the restart prefix."""


class KeyNotFound(AdapterError):
    """The parameter file has no assignment line for the key."""


class AmbiguousKey(AdapterError):
    """The parameter file assigns the key more than once."""


@dataclass(frozen=True)
class TransformContext:
    working_dir: Path


@dataclass(frozen=True)
class AdapterSpec:
    adapter_id: str
    kind: str
    checkpoint_signal: str
    flag_tokens: tuple = ()
    edit_file: str | None = None
    edit_key: str | None = None
    restart_prefix: str | None = None

    def __post_init__(self):
        if self.kind not in ("signal-exit", "restart-file-edit"):
            raise ValueError(f"unknown adapter kind: {self.kind!r}")
        if not self.checkpoint_signal.startswith("SIG"):
            raise ValueError(f"invalid signal name: {self.checkpoint_signal!r}")
        if self.kind == "restart-file-edit":
            if not (self.edit_file and self.edit_key and self.restart_prefix):
                raise ValueError("restart-file-edit adapters need edit_file, edit_key, restart_prefix")
            if self.flag_tokens:
                raise ValueError("restart-file-edit adapters do not append flags")


ADAPTERS = {
    "parint": AdapterSpec(adapter_id="parint", kind="signal-exit", checkpoint_signal="SIGUSR1"),
    "sigterm-flag": AdapterSpec(
        adapter_id="sigterm-flag",
        kind="signal-exit",
        checkpoint_signal="SIGTERM",
        flag_tokens=("--resume",),
    ),
    "restart-file-edit": AdapterSpec(
        adapter_id="restart-file-edit",
        kind="restart-file-edit",
        checkpoint_signal="SIGTERM",
        edit_file="namelist.input",
        edit_key="irst",
        restart_prefix="cm1rst_",
    ),
}


def get_adapter(adapter_id: str) -> AdapterSpec:
    try:
        return ADAPTERS[adapter_id]
    except KeyError:
        raise UnknownAdapter(f"no adapter registered as {adapter_id!r}") from None


def find_latest_restart(directory: Path, prefix: str) -> int:
    """Return the highest ordinal among files named ``<prefix><digits>*``."""
    best = None
    for entry in Path(directory).iterdir():
        if not entry.name.startswith(prefix):
            continue
        match = re.match(r"[0-9]+", entry.name[len(prefix):])
        if match is None:
            continue
        ordinal = int(match.group(0))
        if best is None or ordinal > best:
            best = ordinal
    if best is None:
        raise NoCheckpointFound(f"no {prefix}* files in {directory}")
    return best


def rewrite_restart_parameter(path: Path, key: str, value: str) -> None:
    """Set the single ``key = ...`` line in a parameter file, atomically."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    line_re = re.compile(rf"^\s*{re.escape(key)}\s*=.*$")
    lines = text.splitlines(keepends=True)
    hits = []
    for pos, line in enumerate(lines):
        bare = line.rstrip("\r\n")
        if line_re.match(bare):
            hits.append(pos)
    if not hits:
        raise KeyNotFound(f"no '{key} = ...' line in {path}")
    if len(hits) > 1:
        raise AmbiguousKey(f"'{key}' assigned {len(hits)} times in {path}")
    pos = hits[0]
    terminator = lines[pos][len(lines[pos].rstrip("\r\n")):]
    lines[pos] = f"{key} = {value}{terminator}"
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write("".join(lines))
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def transform_restart_command(
    command: list[str], adapter: AdapterSpec, ctx: TransformContext
) -> list[str]:
    """Produce the relaunch command, applying file edits where required.

    Idempotent: applying the transform to an already-transformed command
    returns it unchanged (flags are appended at most once; file edits
    converge on the same latest ordinal).
    """
    command = list(command)
    if adapter.kind == "signal-exit":
        tokens = list(adapter.flag_tokens)
        if not tokens:
            return command
        span = len(tokens)
        for start in range(len(command) - span + 1):
            if command[start:start + span] == tokens:
                return command
        return command + tokens
    ordinal = find_latest_restart(ctx.working_dir, adapter.restart_prefix)
    rewrite_restart_parameter(
        Path(ctx.working_dir) / adapter.edit_file, adapter.edit_key, str(ordinal)
    )
    return command
