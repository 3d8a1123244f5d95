"""waveunpack: rebuild packed malware stages from whole-system traces.

The pipeline replays a recorded instruction trace, follows taint from the
initial module image to find every instruction the sample is responsible
for, partitions that execution into per-process waves of dynamically
generated code, attributes API calls to the instructions that made them,
and statically reconstructs each wave into PE32 files with rebuilt import
tables and patched call sites.
"""

from .api_monitor import ApiCallRecord, ApiMonitor, ExportMap
from .pipeline import analyze, write_outputs
from .scenario_gen import SCENARIO_IDS, expected_ground_truth, generate_scenario
from .taint_engine import PropagationSet, init_taint, is_tainted_instruction, update
from .trace_model import (
    MemLoc,
    ObservedMemory,
    SystemTrace,
    TraceEvent,
    TraceFormatError,
    parse_trace,
    write_trace,
)
from .wave_collector import WaveRecord, collect_waves, verify_wave_semantics

__version__ = "0.1.0"

__all__ = [
    "ApiCallRecord", "ApiMonitor", "ExportMap", "MemLoc", "ObservedMemory",
    "PropagationSet", "SCENARIO_IDS", "SystemTrace", "TraceEvent",
    "TraceFormatError", "WaveRecord", "analyze", "collect_waves",
    "expected_ground_truth", "generate_scenario", "init_taint",
    "is_tainted_instruction", "parse_trace", "update",
    "verify_wave_semantics", "write_outputs", "write_trace",
]
