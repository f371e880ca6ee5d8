"""retroheap: a multicore managed-heap runtime with a mostly-concurrent
major collector and two interchangeable minor collectors."""

from .report import GcReport, build_report, emit_stats
from .runtime import Mutator, Runtime, RuntimeConfig
from .values import ColorMap, State, Tag, decode_scalar, encode_scalar
from .workloads import WorkloadSpec, run_workload

__all__ = [
    "ColorMap",
    "GcReport",
    "Mutator",
    "Runtime",
    "RuntimeConfig",
    "State",
    "Tag",
    "WorkloadSpec",
    "build_report",
    "decode_scalar",
    "emit_stats",
    "encode_scalar",
    "run_workload",
]
