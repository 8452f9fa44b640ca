"""Flow-level data-center network simulator and RL harness for optical
topology augmentation."""

from .simulator import SimConfig, Simulator, StepReport, reset
from .topology import Topology, adjacency_state, build_fattree, build_vl2, ecmp_paths
from .workload import FlowRecord, TrafficMatrix, load_trace, synthesize_trace

__version__ = "0.1.0"

__all__ = [
    "FlowRecord",
    "SimConfig",
    "Simulator",
    "StepReport",
    "Topology",
    "TrafficMatrix",
    "adjacency_state",
    "build_fattree",
    "build_vl2",
    "ecmp_paths",
    "load_trace",
    "reset",
    "synthesize_trace",
]
