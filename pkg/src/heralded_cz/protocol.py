"""Heralded controlled-phase gate between two atoms in separate cavities.

Stages: product input with empty cavities, simultaneous no-jump drive
of both cavities, free decay towards the detectors, two-fold coincidence
heralding, then a local correction depending on the click pattern.

The heralded probability ``p_herald`` is conditioned on the drive stage
having emitted nothing; ``p_step1`` is that no-emission probability and
``p_total`` their product.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .dynamics import (
    SystemParams,
    closed_form_coefficients,
    decay_propagate,
    p_no_emission,
    single_system_state,
)
from .errors import ContractError, NumericError
from .hilbert import (
    Operator,
    SpaceDescriptor,
    StateVector,
    atom_operator,
    basis_state,
    boundary_weight,
    build_space,
    fidelity,
    project_vacuum,
    tensor,
)
from .optics import DETECTORS, jump_operators, reference_network

LEAK_TOL = 1e-12

CLASS_A = (frozenset({"D1", "D3"}), frozenset({"D2", "D4"}))
CLASS_B = (frozenset({"D1", "D4"}), frozenset({"D2", "D3"}))
HERALDING_PATTERNS = CLASS_A + CLASS_B


@dataclass(frozen=True)
class AtomInputs:
    alpha1: complex
    beta1: complex
    alpha2: complex
    beta2: complex

    def __post_init__(self):
        for j, (a, b) in enumerate(((self.alpha1, self.beta1), (self.alpha2, self.beta2)), 1):
            if abs(abs(a) ** 2 + abs(b) ** 2 - 1) > 1e-9:
                raise ValueError(f"atom {j} amplitudes are not normalised "
                                 f"(|alpha|^2+|beta|^2 = {abs(a) ** 2 + abs(b) ** 2:.12g})")

    @classmethod
    def uniform(cls) -> AtomInputs:
        r = 1 / math.sqrt(2)
        return cls(r, r, r, r)

    def atom(self, j: int) -> tuple[complex, complex]:
        return (self.alpha1, self.beta1) if j == 1 else (self.alpha2, self.beta2)


@dataclass(frozen=True)
class DetectionPattern:
    clicked: frozenset

    def __post_init__(self):
        object.__setattr__(self, "clicked", frozenset(self.clicked))
        bad = self.clicked - set(DETECTORS)
        if bad:
            raise ValueError(f"unknown detectors {sorted(bad)}")

    @classmethod
    def parse(cls, text: str) -> DetectionPattern:
        return cls(frozenset(p.strip() for p in text.split(",") if p.strip()))

    @property
    def is_heralding(self) -> bool:
        return self.clicked in HERALDING_PATTERNS

    @property
    def herald_class(self) -> str:
        if self.clicked in CLASS_A:
            return "A"
        if self.clicked in CLASS_B:
            return "B"
        raise ContractError(f"pattern {self} does not herald the gate")

    def __str__(self) -> str:
        return ",".join(sorted(self.clicked))


@dataclass(frozen=True)
class GateOutcome:
    pattern: DetectionPattern
    heralded_state: StateVector
    p_step1: float
    p_herald: float
    fidelity_cz: float
    corrected: bool

    @property
    def p_total(self) -> float:
        return self.p_step1 * self.p_herald


def _joint_space(params: SystemParams) -> SpaceDescriptor:
    return build_space(2, 4, params.fock_cutoff)


def prepare_inputs(inputs: AtomInputs, space: SpaceDescriptor) -> StateVector:
    """Product of the two atomic qubits with every cavity mode empty."""
    if space.atoms != (1, 2):
        raise ValueError("prepare_inputs needs the two-atom space")
    vac = (0,) * len(space.modes)
    amps = np.zeros(space.dimension, dtype=complex)
    for l1, c1 in (("gH", inputs.alpha1), ("gV", inputs.beta1)):
        for l2, c2 in (("gH", inputs.alpha2), ("gV", inputs.beta2)):
            amps[space.index_of((l1, l2) + vac)] = c1 * c2
    return StateVector(space, amps)


def _check_leakage(state: StateVector) -> None:
    if state.space.fock_cutoff > 1:
        leak = boundary_weight(state)
        if leak > LEAK_TOL:
            raise NumericError(f"{leak:.3e} of the norm sits on the Fock cutoff boundary")


def step1(inputs: AtomInputs, params: SystemParams) -> tuple[StateVector, float]:
    """Joint state after both cavities are driven for ``tau`` without emission.

    Returns the normalised product state and the probability that neither
    cavity emitted.
    """
    coeffs = closed_form_coefficients(params.omega, params.kappa, params.tau)
    parts = []
    for j in (1, 2):
        sub = build_space(1, 2, params.fock_cutoff, cavity=j)
        parts.append(single_system_state(*inputs.atom(j), coeffs, sub))
    joint = tensor(parts[0], parts[1])
    _check_leakage(joint)
    return joint, p_no_emission(params.omega, params.kappa, params.tau) ** 2


def _as_pattern(pattern: DetectionPattern | str | Iterable[str]) -> DetectionPattern:
    if isinstance(pattern, DetectionPattern):
        return pattern
    if isinstance(pattern, str):
        return DetectionPattern.parse(pattern)
    return DetectionPattern(frozenset(pattern))


def pattern_operators(pattern: DetectionPattern, space: SpaceDescriptor,
                      phases: tuple[float, float] = (0.0, 0.0)) -> tuple[Operator, Operator]:
    ops = jump_operators(reference_network(), space, phases)
    i, j = sorted(DETECTORS.index(d) for d in pattern.clicked)
    return ops[i], ops[j]


def detect_coincidence(state: StateVector, pattern: DetectionPattern | str,
                       params: SystemParams) -> tuple[StateVector, float]:
    """Heralded two-atom state and probability for one coincidence pattern.

    The probability is that of both photons reaching the pattern's
    detectors during ``[0, t_detect]``, given the drive stage emitted
    nothing. With two photons leaving independently at rate ``2 kappa``
    the pair is collected with weight ``(1 - exp(-2 kappa t))**2`` times
    ``||b_i b_j psi||^2``; each photon then survives loss with ``1 - eta``.
    The common factor ``-exp(-i(phi1 + phi2))`` is removed from the state.
    """
    pattern = _as_pattern(pattern)
    if not pattern.is_heralding:
        raise ContractError(f"pattern {{{pattern}}} does not herald the gate")
    space = state.space
    if space.atoms != (1, 2) or not space.modes:
        raise ValueError("detect_coincidence needs the joint atom-cavity space")
    evolved = decay_propagate(state, params.kappa, params.t_detect, params.phases)
    bi, bj = pattern_operators(pattern, space)
    first = bi @ (bj @ evolved)
    swapped = bj @ (bi @ evolved)
    if np.max(np.abs(first.amplitudes - swapped.amplitudes)) > 1e-12:
        raise NumericError("coincidence jumps do not commute")
    residual = first.norm_squared() - project_vacuum(first).norm_squared()
    if residual > LEAK_TOL:
        raise NumericError(f"photons left after the coincidence ({residual:.3e})")
    atoms = project_vacuum(first)
    if atoms.norm() < 1e-150:
        raise NumericError(f"pattern {{{pattern}}} has zero weight for this input")
    heralded = (atoms * -np.exp(1j * (params.phi1 + params.phi2))).normalized()

    pair_weight = (bi @ (bj @ state)).norm_squared()
    collect = -math.expm1(-2 * params.kappa * params.t_detect)
    prob = (1 - params.eta) ** 2 * collect ** 2 * pair_weight
    return heralded, prob


_SWAP_GS = np.zeros((4, 4))
for _g, _s in ((0, 2), (1, 3)):
    _SWAP_GS[_g, _s] = _SWAP_GS[_s, _g] = 1.0
_Z_GV = np.diag([1.0, -1.0, 1.0, 1.0])


def correction_unitary(pattern: DetectionPattern | str) -> tuple[np.ndarray, np.ndarray]:
    """Per-atom 4x4 correction unitaries (levels ``gH, gV, sH, sV``).

    Both classes map ``s -> g`` on each atom; class B additionally flips
    the sign of ``gV`` on atom 2.
    """
    pattern = _as_pattern(pattern)
    cls = pattern.herald_class
    u1 = _SWAP_GS.astype(complex)
    u2 = (_Z_GV @ _SWAP_GS if cls == "B" else _SWAP_GS).astype(complex)
    return u1, u2


def apply_correction(state: StateVector, pattern: DetectionPattern | str) -> StateVector:
    u1, u2 = correction_unitary(pattern)
    space = state.space
    return atom_operator(space, 1, u1) @ (atom_operator(space, 2, u2) @ state)


def ideal_cz(inputs: AtomInputs, fock_cutoff: int = 1) -> StateVector:
    """Target output of the controlled-phase gate on ground-level qubits."""
    space = build_space(2, 0, fock_cutoff)
    a1, b1, a2, b2 = inputs.alpha1, inputs.beta1, inputs.alpha2, inputs.beta2
    return (a1 * a2 * basis_state(space, ("gH", "gH"))
            + b1 * a2 * basis_state(space, ("gV", "gH"))
            + a1 * b2 * basis_state(space, ("gH", "gV"))
            - b1 * b2 * basis_state(space, ("gV", "gV")))


def run_protocol(inputs: AtomInputs, params: SystemParams,
                 pattern: DetectionPattern | str) -> GateOutcome:
    pattern = _as_pattern(pattern)
    joint, p_suc = step1(inputs, params)
    heralded, p_herald = detect_coincidence(joint, pattern, params)
    corrected = apply_correction(heralded, pattern)
    fid = fidelity(corrected, ideal_cz(inputs, params.fock_cutoff))
    return GateOutcome(pattern, corrected, p_suc, p_herald, fid, True)


def success_probability(params: SystemParams) -> float:
    """Closed-form heralding probability summed over the four patterns."""
    b = abs(closed_form_coefficients(params.omega, params.kappa, params.tau).b)
    collect = -math.expm1(-2 * params.kappa * params.t_detect)
    return (1 - params.eta) ** 2 * b ** 4 * collect ** 2 / 2


CSV_COLUMNS = ("omega", "kappa", "tau", "t_detect", "phi1", "phi2", "eta", "pattern",
               "p_step1", "p_herald", "p_total", "fidelity_cz")


def fmt_float(x: float) -> str:
    """Shortest text that round-trips to the same double."""
    return repr(float(x))


def outcome_row(params: SystemParams, outcome: GateOutcome) -> list[str]:
    vals = [params.omega, params.kappa, params.tau, params.t_detect,
            params.phi1, params.phi2, params.eta]
    return ([fmt_float(v) for v in vals] + [str(outcome.pattern)]
            + [fmt_float(v) for v in (outcome.p_step1, outcome.p_herald,
                                      outcome.p_total, outcome.fidelity_cz)])


def rows_to_csv(rows: Iterable[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()
