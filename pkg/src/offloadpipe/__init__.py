"""Interleaved pipeline planning and simulation for memory-constrained LLM inference."""

from .cost_model import AllocationPlan, Block, DeviceAssignment, LatencyBreakdown, total_latency
from .offline import brute_force_plan, dp_segment_allocate, fine_grained_refine, greedy_capacity_fill, plan
from .profiles import CostProfile, DeviceSpec, ModelSpec, NetworkSpec, parse_configs

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan",
    "Block",
    "CostProfile",
    "DeviceAssignment",
    "DeviceSpec",
    "LatencyBreakdown",
    "ModelSpec",
    "NetworkSpec",
    "brute_force_plan",
    "dp_segment_allocate",
    "fine_grained_refine",
    "greedy_capacity_fill",
    "parse_configs",
    "plan",
    "total_latency",
]
