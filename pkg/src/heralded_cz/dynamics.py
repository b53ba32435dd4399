"""Single atom-cavity dynamics and a master-equation reference solver.

Rate convention
---------------
The no-jump generator is ``H - i*kappa*sum(a^dag a)``, so a photon
amplitude decays as ``exp(-kappa t)`` and its intensity as
``exp(-2 kappa t)``. The matching Lindblad dissipator therefore uses rate
``2*kappa`` per mode, and the quantum-jump unravelling applies the
detector operators with the same ``2*kappa`` rate. This is the only
place the factor of two is introduced.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as ssla

from .errors import NumericError
from .hilbert import (
    Operator,
    SpaceDescriptor,
    StateVector,
    atom_transition,
    mode_annihilator,
    number_operator,
)

EXPM_MAX_DIM = 300
CRITICAL_GUARD = 1e-6


@dataclass(frozen=True)
class SystemParams:
    """Physical knobs of the protocol.

    Rates are in inverse time units; ``phi1``/``phi2`` are the propagation
    phases from each cavity to the detectors; ``eta`` is the overall
    per-photon loss probability.
    """

    omega: float
    kappa: float
    tau: float
    t_detect: float
    phi1: float = 0.0
    phi2: float = 0.0
    eta: float = 0.0
    fock_cutoff: int = 1

    def __post_init__(self):
        for name in ("omega", "kappa", "tau", "t_detect", "phi1", "phi2", "eta"):
            val = getattr(self, name)
            if not math.isfinite(val):
                raise ValueError(f"{name} must be finite, got {val}")
        for name in ("omega", "kappa", "tau", "t_detect"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if int(self.fock_cutoff) != self.fock_cutoff or self.fock_cutoff < 1:
            raise ValueError(f"fock_cutoff must be an integer >= 1, got {self.fock_cutoff}")

    @property
    def phases(self) -> tuple[float, float]:
        return (self.phi1, self.phi2)


@dataclass(frozen=True)
class NoJumpCoefficients:
    """Normalised no-jump amplitudes: ``a`` on ``|g;0>``, ``-i b`` on ``|s;1>``."""

    a: complex
    b: complex
    omega_kappa: complex


def _cavity_modes(atom: int) -> tuple[str, str]:
    return (f"c{atom}H", f"c{atom}V")


def effective_hamiltonian(space: SpaceDescriptor, omega: float, atom: int) -> Operator:
    """Raman-type atom-cavity coupling for one atom and its own cavity."""
    mode_h, mode_v = _cavity_modes(atom)
    terms = []
    for mode, g, s in ((mode_h, "gH", "sH"), (mode_v, "gV", "sV")):
        a = mode_annihilator(space, mode)
        lower = a @ atom_transition(space, atom, s, g)  # a |g><s|
        terms.append(lower + lower.dag())
    return omega * (terms[0] + terms[1])


def no_jump_generator(space: SpaceDescriptor, omega: float, kappa: float, atom: int) -> Operator:
    n_cav = number_operator(space, _cavity_modes(atom))
    return effective_hamiltonian(space, omega, atom) - 1j * kappa * n_cav


def decay_generator(space: SpaceDescriptor, kappa: float) -> Operator:
    """Drives off: pure cavity decay ``-i kappa N`` over every mode in ``space``."""
    return -1j * kappa * number_operator(space)


def drive_generator(space: SpaceDescriptor, omega: float, kappa: float) -> Operator:
    """Drives on for every atom in ``space`` (sum of per-atom no-jump generators)."""
    gens = [no_jump_generator(space, omega, kappa, j) for j in space.atoms]
    out = gens[0]
    for g in gens[1:]:
        out = out + g
    return out


def _rk4(matrix: sp.csr_matrix, psi: np.ndarray, duration: float, steps: int) -> np.ndarray:
    h = duration / steps
    a = -1j * matrix
    for _ in range(steps):
        k1 = a @ psi
        k2 = a @ (psi + 0.5 * h * k1)
        k3 = a @ (psi + 0.5 * h * k2)
        k4 = a @ (psi + h * k3)
        psi = psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return psi


def evolve_no_jump(state: StateVector, generator: Operator, duration: float,
                   steps: int = 1) -> StateVector:
    """Apply ``exp(-i G duration)`` without renormalising.

    Up to ``EXPM_MAX_DIM`` the propagator for ``duration/steps`` is a dense
    scaling-and-squaring matrix exponential applied ``steps`` times. Larger
    spaces fall back to classical RK4 with ``steps`` sparse steps; pick
    ``steps`` so that doubling it leaves the result unchanged.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if duration < 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    psi = state.amplitudes
    if duration == 0:
        return StateVector(state.space, psi)
    if state.space.dimension <= EXPM_MAX_DIM:
        prop = sla.expm(-1j * generator.to_dense() * (duration / steps))
        for _ in range(steps):
            psi = prop @ psi
    else:
        psi = _rk4(generator.matrix, psi, duration, steps)
    if not np.all(np.isfinite(psi)):
        raise NumericError("non-finite amplitudes in no-jump evolution")
    return StateVector(state.space, psi)


def _scaled_trig(omega_kappa: complex, kappa: float, tau: float) -> tuple[complex, complex, float]:
    """``(c, s, log_scale)`` with ``exp(log_scale) * (c, s)`` equal to
    ``exp(-kappa tau/2) * (cos(w tau), sin(w tau)/w)`` for complex ``w``.

    Keeping the scale as a logarithm avoids underflow for long drives. Uses
    the series limit near critical damping, where ``w -> 0``.
    """
    x = omega_kappa * tau
    if abs(x) < CRITICAL_GUARD:
        x2 = x * x
        return (1 - x2 / 2 + x2 * x2 / 24), tau * (1 - x2 / 6 + x2 * x2 / 120), -0.5 * kappa * tau
    if abs(x.imag) > 30.0:
        # long overdamped drive: pull the growing exponential into the scale
        grow = abs(x.imag)
        ep = cmath.exp(1j * x - grow)
        em = cmath.exp(-1j * x - grow)
        return 0.5 * (ep + em), (ep - em) / (2j * omega_kappa), grow - 0.5 * kappa * tau
    return cmath.cos(x), cmath.sin(x) / omega_kappa, -0.5 * kappa * tau


def _unnormalised_pair(omega: float, kappa: float, tau: float):
    """``(u, v, w, log_scale)``: no-jump amplitudes are ``exp(log_scale) * (u, v)``."""
    if omega < 0 or kappa < 0 or tau < 0:
        raise ValueError("omega, kappa and tau must be non-negative")
    omega_kappa = cmath.sqrt(omega * omega - kappa * kappa / 4)
    cos_s, sinc_s, log_scale = _scaled_trig(omega_kappa, kappa, tau)
    u = cos_s + 0.5 * kappa * sinc_s
    v = omega * sinc_s
    return u, v, omega_kappa, log_scale


def closed_form_coefficients(omega: float, kappa: float, tau: float) -> NoJumpCoefficients:
    """Normalised no-jump amplitudes after driving one cavity for ``tau``.

    With ``w = sqrt(omega^2 - kappa^2/4)`` (complex in the overdamped
    regime) the unnormalised pair is ``cos(w tau) + kappa sin(w tau)/(2w)``
    and ``omega sin(w tau)/w``, times ``exp(-kappa tau/2)``.
    """
    u, v, omega_kappa, _ = _unnormalised_pair(omega, kappa, tau)
    nrm = math.hypot(abs(u), abs(v))
    if nrm == 0.0 or not math.isfinite(nrm):
        raise NumericError(f"no-jump amplitudes degenerate at omega={omega}, "
                           f"kappa={kappa}, tau={tau}")
    return NoJumpCoefficients(complex(u / nrm), complex(v / nrm), omega_kappa)


def p_no_emission(omega: float, kappa: float, tau: float) -> float:
    """Probability that one cavity emits no photon while driven for ``tau``."""
    u, v, _, log_scale = _unnormalised_pair(omega, kappa, tau)
    return min(1.0, math.exp(2 * log_scale) * (abs(u) ** 2 + abs(v) ** 2))


def single_system_state(alpha: complex, beta: complex, coeffs: NoJumpCoefficients,
                        space: SpaceDescriptor) -> StateVector:
    """Normalised atom-cavity state after a no-jump drive period."""
    if abs(abs(alpha) ** 2 + abs(beta) ** 2 - 1) > 1e-9:
        raise ValueError("|alpha|^2 + |beta|^2 must equal 1")
    if len(space.atoms) != 1 or len(space.modes) != 2:
        raise ValueError("single_system_state needs a one-atom, two-mode space")
    amps = np.zeros(space.dimension, dtype=complex)
    a, b = coeffs.a, coeffs.b
    amps[space.index_of(("gH", 0, 0))] = alpha * a
    amps[space.index_of(("sH", 1, 0))] = -1j * alpha * b
    amps[space.index_of(("gV", 0, 0))] = beta * a
    amps[space.index_of(("sV", 0, 1))] = -1j * beta * b
    return StateVector(space, amps).normalized()


def _cavity_photon_counts(space: SpaceDescriptor) -> dict[int, np.ndarray]:
    counts = {}
    for j in space.atoms:
        cols = [space.mode_index(m) for m in _cavity_modes(j) if m in space.modes]
        counts[j] = space.photon_numbers[:, cols].sum(axis=1)
    return counts


def decay_propagate(state: StateVector, kappa: float, t: float,
                    phases: tuple[float, float] = (0.0, 0.0)) -> StateVector:
    """Free cavity decay plus propagation phases, renormalised.

    Each photon from cavity ``j`` picks up ``exp(-kappa t - i phi_j)``.
    """
    space = state.space
    exponent = np.zeros(space.dimension, dtype=complex)
    for j, n in _cavity_photon_counts(space).items():
        exponent += n * (-kappa * t - 1j * phases[j - 1])
    out = StateVector(space, state.amplitudes * np.exp(exponent))
    if out.norm() == 0.0:
        raise NumericError("state fully decayed to zero norm")
    return out.normalized()


def density_matrix(state: StateVector) -> np.ndarray:
    psi = state.normalized().amplitudes
    return np.outer(psi, psi.conj())


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the trace norm of ``rho - sigma``."""
    diff = rho - sigma
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T)))))


def liouvillian(generator: sp.spmatrix, jumps: list[sp.spmatrix], rate: float) -> sp.csr_matrix:
    """Superoperator on row-major ``vec(rho)`` for ``-i(G rho - rho G^dag) + rate sum a rho a^dag``.

    Uses ``vec(A rho B) = (A kron B^T) vec(rho)``.
    """
    dim = generator.shape[0]
    eye = sp.identity(dim, dtype=complex, format="csr")
    sup = -1j * (sp.kron(generator, eye) - sp.kron(eye, generator.conj()))
    for a in jumps:
        sup = sup + rate * sp.kron(a, a.conj())
    return sup.tocsr()


def lindblad_oracle(initial: StateVector | np.ndarray, params: SystemParams, horizon: float,
                    steps: int = 1, space: SpaceDescriptor | None = None) -> np.ndarray:
    """Integrate the master equation for the two-step protocol up to ``horizon``.

    Drives are on for ``t < tau`` and off afterwards. The dissipator uses
    the cavity annihilators at rate ``2 kappa``; by unitarity of the
    detector network this equals the detector-mode dissipator. Each
    segment is split into ``steps`` pieces, each propagated with the sparse
    action of the superoperator exponential on ``vec(rho)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if isinstance(initial, StateVector):
        space = initial.space
        rho = density_matrix(initial)
    else:
        if space is None:
            raise ValueError("space is required for a density-matrix input")
        rho = np.array(initial, dtype=complex)
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    dim = space.dimension
    jumps = [mode_annihilator(space, m).matrix for m in space.modes]
    segments = []
    t_on = min(horizon, params.tau)
    if t_on > 0:
        segments.append((drive_generator(space, params.omega, params.kappa), t_on))
    if horizon > params.tau:
        segments.append((decay_generator(space, params.kappa), horizon - params.tau))
    vec = rho.reshape(-1)
    for gen, duration in segments:
        sup = liouvillian(gen.matrix, jumps, 2 * params.kappa)
        for _ in range(steps):
            vec = ssla.expm_multiply(sup * (duration / steps), vec)
    rho = vec.reshape(dim, dim)
    drift = abs(np.trace(rho) - 1.0)
    if not np.all(np.isfinite(rho)) or drift > 1e-8:
        raise NumericError(f"master-equation trace drifted by {drift:.3e}; "
                           f"retry with steps={2 * steps}")
    return 0.5 * (rho + rho.conj().T)
