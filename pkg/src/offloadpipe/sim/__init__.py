"""Discrete-event execution of allocation plans."""

from .pipeline import (
    BURSTY,
    SPORADIC,
    Event,
    SimConfig,
    Timeline,
    baseline_counts_from_plan,
    online_schedule,
    simulate,
    simulate_traditional_baseline,
)
from .validate import ValidationReport, validate_timeline
from .export import export_timeline

__all__ = [
    "BURSTY",
    "SPORADIC",
    "Event",
    "SimConfig",
    "Timeline",
    "ValidationReport",
    "baseline_counts_from_plan",
    "export_timeline",
    "online_schedule",
    "simulate",
    "simulate_traditional_baseline",
    "validate_timeline",
]
