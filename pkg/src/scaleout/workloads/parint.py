"""PARINT: an iterative array kernel that checkpoints on request.

Each rank owns a contiguous block of an N-element float64 array and
applies the same per-element update for M outer iterations.  On SIGUSR1
a rank finishes its current outer iteration, writes its block to the
shared job directory, and exits 0; rank 0 additionally gathers all
blocks, advances any laggards to the newest iteration count, and writes
a single checkpoint file.  A later run started with the same arguments
resumes from that file, possibly with a different number of ranks, and
produces a final array that is bit-identical to an uninterrupted run.

The checkpoint is a fixed little-endian layout: an 8-byte magic, then
u32 version, u32 completed iterations, u64 array size, u32 world size
at checkpoint time (0 marks a final, world-independent result), then
the raw float64 payload.
"""

from __future__ import annotations

import argparse
import os
import signal
import struct
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KERNEL_A = 0.999999
KERNEL_B = 1.0e-6

CHECKPOINT_MAGIC = b"PARINTCK"
BLOCK_MAGIC = b"PARINTBK"
CHECKPOINT_VERSION = 1

_CKPT_HEADER = struct.Struct("<8sIIQI")
_BLOCK_HEADER = struct.Struct("<8sIIQQ")

FINAL_WORLD_MARK = 0


class CorruptCheckpoint(Exception):
    """A checkpoint or block file fails header or length validation."""


class GatherTimeout(Exception):
    """Rank 0 gave up waiting for sibling block files."""


@dataclass(frozen=True)
class ParintConfig:
    array_size: int
    nloop: int
    outer_iters: int
    checkpoint_path: Path

    def validate(self) -> None:
        if self.array_size < 1:
            raise ValueError("array_size must be at least 1")
        if self.nloop < 0:
            raise ValueError("nloop must be non-negative")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")


@dataclass(frozen=True)
class ParintResult:
    completed_iters: int
    checkpointed: bool
    finalized: bool
    element_updates: int


def parint_step(x: float, nloop: int) -> float:
    """Apply nloop update steps to one element, in fixed order."""
    for _ in range(nloop):
        x = x * KERNEL_A + KERNEL_B
    return x


def initial_value(index: int) -> float:
    return (index % 1000) / 1000


def block_bounds(array_size: int, world: int, rank: int) -> tuple[int, int]:
    """Contiguous block owned by a rank: [floor(rN/W), floor((r+1)N/W))."""
    return rank * array_size // world, (rank + 1) * array_size // world


def advance_block(values: list, nloop: int, iterations: int) -> int:
    """Run ``iterations`` outer iterations over a block, in place.

    Returns the number of element updates performed.  The inner loop
    must stay identical to parint_step so every code path produces the
    same bits.
    """
    a = KERNEL_A
    b = KERNEL_B
    for _ in range(iterations):
        for i in range(len(values)):
            x = values[i]
            for _ in range(nloop):
                x = x * a + b
            values[i] = x
    return iterations * len(values)


def _write_atomic(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def write_checkpoint(path: Path, completed_iters: int, world: int, payload) -> None:
    arr = np.ascontiguousarray(payload, dtype="<f8")
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, completed_iters, arr.size, world
    )
    _write_atomic(path, header + arr.tobytes())


def read_checkpoint(path: Path) -> tuple[int, int, int, np.ndarray]:
    """Return (completed_iters, array_size, world, payload) or raise."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CorruptCheckpoint(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, completed, array_size, world = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    expected = _CKPT_HEADER.size + array_size * 8
    if len(raw) != expected:
        raise CorruptCheckpoint(f"{path}: {len(raw)} bytes, expected {expected}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_CKPT_HEADER.size).copy()
    return completed, array_size, world, payload


def block_path(job_dir: Path, rank: int) -> Path:
    return Path(job_dir) / f"parint.block.{rank}"


def write_block(path: Path, completed_iters: int, lo: int, hi: int, values) -> None:
    arr = np.ascontiguousarray(values, dtype="<f8")
    if arr.size != hi - lo:
        raise ValueError(f"block has {arr.size} values for extent [{lo},{hi})")
    header = _BLOCK_HEADER.pack(BLOCK_MAGIC, CHECKPOINT_VERSION, completed_iters, lo, hi)
    _write_atomic(path, header + arr.tobytes())


def read_block(path: Path) -> tuple[int, int, int, list]:
    raw = Path(path).read_bytes()
    if len(raw) < _BLOCK_HEADER.size:
        raise CorruptCheckpoint(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, completed, lo, hi = _BLOCK_HEADER.unpack_from(raw, 0)
    if magic != BLOCK_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    expected = _BLOCK_HEADER.size + (hi - lo) * 8
    if hi < lo or len(raw) != expected:
        raise CorruptCheckpoint(f"{path}: {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f8", offset=_BLOCK_HEADER.size).tolist()
    return completed, lo, hi, values


def _gather_blocks(
    job_dir: Path, array_size: int, world: int, timeout: float | None, poll: float = 0.005
) -> dict:
    """Collect every rank's block for the current partition, waiting as needed."""
    deadline = None if timeout is None else time.perf_counter() + timeout
    found: dict[int, tuple[int, int, int, list]] = {}
    while True:
        for rank in range(world):
            if rank in found:
                continue
            try:
                completed, lo, hi, values = read_block(block_path(job_dir, rank))
            except (OSError, CorruptCheckpoint):
                continue
            if (lo, hi) != block_bounds(array_size, world, rank):
                # a leftover from an earlier, differently sized epoch
                continue
            found[rank] = (completed, lo, hi, values)
        if len(found) == world:
            return found
        if deadline is not None and time.perf_counter() > deadline:
            missing = sorted(set(range(world)) - set(found))
            raise GatherTimeout(f"no block from ranks {missing} after {timeout} s")
        time.sleep(poll)


def parint_run(
    cfg: ParintConfig,
    *,
    rank: int | None = None,
    world: int | None = None,
    job_dir: Path | None = None,
    stop_event: threading.Event | None = None,
    gather_timeout: float | None = None,
) -> ParintResult:
    """Run one rank's share of the job; see the module docstring.

    rank, world and job_dir default to KUB_RANK, KUB_WORLD_SIZE and
    KUB_JOB_DIR so the executor agent can launch this unchanged.
    """
    cfg.validate()
    rank = int(os.environ.get("KUB_RANK", "0")) if rank is None else rank
    world = int(os.environ.get("KUB_WORLD_SIZE", "1")) if world is None else world
    job_dir = Path(job_dir if job_dir is not None else os.environ.get("KUB_JOB_DIR", "."))
    if world < 1 or not 0 <= rank < world:
        raise ValueError(f"rank {rank} outside world of {world}")
    ckpt_path = Path(cfg.checkpoint_path)
    if not ckpt_path.is_absolute():
        ckpt_path = job_dir / ckpt_path

    completed = 0
    full = None
    if ckpt_path.exists():
        completed, array_size, _, full = read_checkpoint(ckpt_path)
        if array_size != cfg.array_size:
            raise CorruptCheckpoint(
                f"checkpoint holds {array_size} elements, configured {cfg.array_size}"
            )
        if completed > cfg.outer_iters:
            raise CorruptCheckpoint(
                f"checkpoint at iteration {completed} beyond configured {cfg.outer_iters}"
            )

    if completed >= cfg.outer_iters:
        # nothing left to compute; rank 0 makes sure the final form is on disk
        if rank == 0:
            write_checkpoint(ckpt_path, completed, FINAL_WORLD_MARK, full)
        return ParintResult(
            completed_iters=completed, checkpointed=False, finalized=True, element_updates=0
        )

    lo, hi = block_bounds(cfg.array_size, world, rank)
    if full is not None:
        block = full[lo:hi].tolist()
    else:
        block = [initial_value(i) for i in range(lo, hi)]

    updates = 0
    iteration = completed
    stopped = False
    while iteration < cfg.outer_iters:
        if stop_event is not None and stop_event.is_set():
            stopped = True
            break
        updates += advance_block(block, cfg.nloop, 1)
        iteration += 1

    write_block(block_path(job_dir, rank), iteration, lo, hi, block)
    finalized = False
    if rank == 0:
        found = _gather_blocks(job_dir, cfg.array_size, world, gather_timeout)
        found[rank] = (iteration, lo, hi, block)
        newest = max(entry[0] for entry in found.values())
        for other_rank, (entry_iters, _, _, entry_values) in found.items():
            if entry_iters < newest:
                # a rank that stopped earlier; advance it to the common iteration
                updates += advance_block(entry_values, cfg.nloop, newest - entry_iters)
        payload = np.empty(cfg.array_size, dtype="<f8")
        for entry_iters, entry_lo, entry_hi, entry_values in found.values():
            payload[entry_lo:entry_hi] = entry_values
        finalized = newest >= cfg.outer_iters
        world_mark = FINAL_WORLD_MARK if finalized else world
        write_checkpoint(ckpt_path, newest, world_mark, payload)
        iteration = newest
    return ParintResult(
        completed_iters=iteration,
        checkpointed=stopped,
        finalized=finalized,
        element_updates=updates,
    )


def main(argv=None) -> int:
    # a checkpoint signal can land moments after exec; hook it before anything else
    stop = threading.Event()
    signal.signal(signal.SIGUSR1, lambda signum, frame: stop.set())

    parser = argparse.ArgumentParser(
        prog="parint",
        description="Iterative array benchmark; SIGUSR1 checkpoints and exits.",
    )
    parser.add_argument("--array-size", type=int, required=True)
    parser.add_argument("--nloop", type=int, required=True)
    parser.add_argument("--outer-iters", type=int, required=True)
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--gather-timeout", type=float, default=None)
    args = parser.parse_args(argv)

    cfg = ParintConfig(
        array_size=args.array_size,
        nloop=args.nloop,
        outer_iters=args.outer_iters,
        checkpoint_path=Path(args.checkpoint),
    )
    try:
        parint_run(cfg, stop_event=stop, gather_timeout=args.gather_timeout)
    except (CorruptCheckpoint, ValueError, OSError) as exc:
        print(f"parint: {exc}", file=sys.stderr)
        return 2
    except GatherTimeout as exc:
        print(f"parint: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
