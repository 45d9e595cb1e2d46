"""Crash-consistency laboratory: a deterministic write-back cache over
non-volatile memory, with crash injection and algorithm-directed recovery
for an iterative solver, checksummed matrix multiplication, and a Monte
Carlo lookup kernel, plus a copy-and-flush checkpoint baseline."""

from .arena import Arena, ArrayHandle
from .simcore import (
    CacheConfig,
    CacheLineEntry,
    CrashFired,
    CrashPlan,
    EventCounters,
    NvmImage,
    SimEngine,
)

__all__ = [
    "Arena",
    "ArrayHandle",
    "CacheConfig",
    "CacheLineEntry",
    "CrashFired",
    "CrashPlan",
    "EventCounters",
    "NvmImage",
    "SimEngine",
]

__version__ = "0.1.0"
