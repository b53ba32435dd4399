"""Heralded controlled-phase gate between atoms in two separate cavities."""

from .dynamics import SystemParams, closed_form_coefficients, p_no_emission
from .hilbert import StateVector, build_space
from .optics import reference_network
from .protocol import AtomInputs, DetectionPattern, GateOutcome, run_protocol, success_probability

__all__ = [
    "AtomInputs",
    "DetectionPattern",
    "GateOutcome",
    "StateVector",
    "SystemParams",
    "build_space",
    "closed_form_coefficients",
    "p_no_emission",
    "reference_network",
    "run_protocol",
    "success_probability",
]
