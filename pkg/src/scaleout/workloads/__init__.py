"""Restartable workloads and the adapters that checkpoint them.

:mod:`scaleout.workloads.parint` is the synthetic iterative kernel used
for measurements, :mod:`scaleout.workloads.adapters` describes how each
application family is checkpointed and restarted, and
:mod:`scaleout.workloads.stubs` holds small stand-ins for real codes.
"""
