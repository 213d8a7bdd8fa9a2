"""Instruction-level simulator and instrumentation toolkit for six hardware CFI schemes."""
from .config import ALL_SCHEMES, EntryBits, MonitorConfig, Scheme
from .instrument import InstrumentError, assign_labels, build_trampoline, instrument
from .monitors import Verdict, ff_cost, monitor_new
from .program import Program, code_size, layout, load, program_from_source
from .sim import FaultSpec, IrqPlan, RunStats, overhead, run

__all__ = [
    "ALL_SCHEMES", "EntryBits", "FaultSpec", "InstrumentError", "IrqPlan", "MonitorConfig",
    "Program", "RunStats", "Scheme", "Verdict", "assign_labels", "build_trampoline",
    "code_size", "ff_cost", "instrument", "layout", "load", "monitor_new", "overhead",
    "program_from_source", "run",
]
