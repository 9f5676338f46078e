"""Elastic execution control plane for tightly-coupled batch jobs.

The package is organised around a small framed RPC protocol
(:mod:`scaleout.wireproto`), a coordinator that owns the job state machine
(:mod:`scaleout.coordinator`), per-host executor agents
(:mod:`scaleout.executor`), a monitor that decides when to grow the job
(:mod:`scaleout.monitor`), restartable workloads and adapters
(:mod:`scaleout.workloads`), and an experiment harness
(:mod:`scaleout.harness`).

Submodules are imported lazily by callers; importing :mod:`scaleout` itself
pulls in nothing heavy.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
