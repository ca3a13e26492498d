"""Deterministic discrete-event simulation of a PoP network."""
from .config import REFERENCE_BLOCK_SIZES, ConfigError, SimConfig, desk_scale, full_scale
from .engine import SimMetrics, SimResult, Simulation, run, simulate
from .topology import InfeasibleDegrees, build_topology, random_topology
from .transport import Network, transmit_time
from .workload import workload_generator

__all__ = [
    "REFERENCE_BLOCK_SIZES",
    "ConfigError",
    "InfeasibleDegrees",
    "Network",
    "SimConfig",
    "SimMetrics",
    "SimResult",
    "Simulation",
    "build_topology",
    "desk_scale",
    "full_scale",
    "random_topology",
    "run",
    "simulate",
    "transmit_time",
    "workload_generator",
]
