"""Stability-matrix and caustic analysis of composite pulses on the Bloch sphere."""

from __future__ import annotations

from .pulse_dsl import LEVITT, PulseSegment, PulseSequence, parse_sequence, format_sequence, validate
from .rotating_frame import EnsembleMember, build_omega, propagate_sequence, trajectory

__version__ = "0.1.0"

__all__ = [
    "LEVITT",
    "PulseSegment",
    "PulseSequence",
    "parse_sequence",
    "format_sequence",
    "validate",
    "EnsembleMember",
    "build_omega",
    "propagate_sequence",
    "trajectory",
    "__version__",
]
