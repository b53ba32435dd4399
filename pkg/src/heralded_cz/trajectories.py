"""Quantum-jump Monte Carlo for the heralded gate.

Between clicks a trajectory follows the no-jump generator; the waiting
time to the next click is drawn by inverting the survival function
``S(t) = ||exp(-iGt) psi||^2``. With the drives on, ``S`` is tabulated on
1024 uniform knots per (state, horizon) from an exact Krylov-reduced
propagator and the jump time is refined inside the bracketing knot
interval with Brent's method to 1e-12. With the drives off the generator
is diagonal, ``S`` is an explicit sum of exponentials and the jump time
comes from a monotone Newton iteration. The detector is chosen with
probability proportional to ``||b_j psi(t)||^2``.

Every trajectory owns a Philox counter-based stream seeded with
``base_seed + index``, so results do not depend on scheduling or on how
work is split across processes.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import IO, Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import brentq

from .dynamics import SystemParams, decay_generator, drive_generator
from .errors import NumericError
from .hilbert import Operator, StateVector, build_space, fidelity, project_vacuum
from .optics import DETECTORS, jump_operators, reference_network
from .protocol import (
    AtomInputs,
    DetectionPattern,
    HERALDING_PATTERNS,
    correction_unitary,
    ideal_cz,
    prepare_inputs,
)

N_KNOTS = 1024
TIME_TOL = 1e-12
_CACHE_SIZE = 64


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


class _DiagonalEvolution:
    """No-jump evolution under a diagonal generator."""

    def __init__(self, diag: np.ndarray, groups: np.ndarray, rates: np.ndarray,
                 psi: np.ndarray):
        self.diag = diag
        self.psi = psi
        self.rates = rates
        self.weights = np.bincount(groups, weights=np.abs(psi) ** 2, minlength=len(rates))
        self._terms = [(float(r), float(w)) for r, w in zip(rates, self.weights) if w > 0]

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-np.multiply.outer(t, self.rates)) @ self.weights

    def survival_at(self, t: float) -> float:
        exp = math.exp
        return sum(w * exp(-r * t) for r, w in self._terms)

    def invert(self, target: float, horizon: float) -> float:
        """Solve ``S(t) = target`` on ``[0, horizon]`` by Newton's method.

        ``S`` is a positive combination of decaying exponentials, hence
        convex and decreasing; Newton from ``t = 0`` approaches the root
        monotonically from below and never leaves the bracket.
        """
        exp = math.exp
        t = 0.0
        for _ in range(200):
            s_val = 0.0
            slope = 0.0
            for r, w in self._terms:
                e = w * exp(-r * t)
                s_val += e
                slope += r * e
            if slope <= 0.0:
                break
            step = (s_val - target) / slope
            t += step
            if step <= TIME_TOL * max(1.0, t):
                break
        return min(t, horizon)

    def state_at(self, t: float) -> np.ndarray:
        return self.psi * np.exp(-1j * self.diag * t)


class _KrylovEvolution:
    """No-jump evolution restricted to the Krylov space of ``psi``.

    The Arnoldi iteration stops when the space is invariant, so the
    reduced propagator is exact; it is evaluated through an eigen
    decomposition, or through ``expm`` when that is ill-conditioned.
    """

    def __init__(self, gen: sp.csr_matrix, psi: np.ndarray):
        scale = max(1.0, float(abs(gen).sum(axis=1).max()))
        basis = [psi / np.linalg.norm(psi)]
        images = []
        while True:
            w = gen @ basis[-1]
            images.append(w)
            if len(basis) == psi.shape[0]:
                break
            q = np.array(basis).T
            for _ in range(2):
                w = w - q @ (q.conj().T @ w)
            nrm = np.linalg.norm(w)
            if nrm < 1e-12 * scale:
                break
            basis.append(w / nrm)
        self.q = np.array(basis).T
        self.g_red = self.q.conj().T @ np.array(images).T
        self.psi_red = self.q.conj().T @ psi
        lam, vec = np.linalg.eig(self.g_red)
        if np.linalg.cond(vec) < 1e8:
            self.lam, self.vec = lam, vec
            self.coef = np.linalg.solve(vec, self.psi_red)
        else:
            self.lam = None

    def _reduced(self, t):
        t = np.asarray(t, dtype=float)
        if self.lam is not None:
            phases = np.exp(-1j * np.multiply.outer(t, self.lam)) * self.coef
            return phases @ self.vec.T
        flat = np.atleast_1d(t)
        out = np.array([sla.expm(-1j * self.g_red * s) @ self.psi_red for s in flat])
        return out.reshape(t.shape + (len(self.psi_red),))

    def survival(self, t):
        red = self._reduced(t)
        return np.sum(red.real ** 2 + red.imag ** 2, axis=-1)

    def survival_at(self, t: float) -> float:
        return float(self.survival(t))

    def state_at(self, t: float) -> np.ndarray:
        return self.q @ self._reduced(t)


class JumpProcess:
    """A no-jump generator together with its detector jump operators."""

    def __init__(self, generator: Operator, jump_ops: Sequence[Operator]):
        self.generator = generator
        self.jump_ops = tuple(jump_ops)
        gen = generator.matrix
        self.dim = gen.shape[0]
        offdiag = gen - sp.diags(gen.diagonal())
        offdiag.eliminate_zeros()
        self.is_diagonal = offdiag.nnz == 0
        if self.is_diagonal:
            self.diag = gen.diagonal()
            rates = -2.0 * self.diag.imag
            self.rates, self.groups = np.unique(np.round(rates, 14), return_inverse=True)
        self.stacked = sp.vstack([j.matrix for j in self.jump_ops]).tocsr()
        self._cache: OrderedDict = OrderedDict()

    def evolution(self, psi: np.ndarray):
        key = psi.tobytes()
        ev = self._cache.get(key)
        if ev is None:
            if self.is_diagonal:
                ev = _DiagonalEvolution(self.diag, self.groups, self.rates, psi)
            else:
                ev = _KrylovEvolution(self.generator.matrix, psi)
            ev.curves = {}
            self._cache[key] = ev
            if len(self._cache) > _CACHE_SIZE:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(key)
        return ev

    def _curve(self, ev, horizon: float):
        curve = ev.curves.get(horizon)
        if curve is None:
            knots = np.linspace(0.0, horizon, N_KNOTS + 1)
            emitted = 1.0 - ev.survival(knots)
            # enforce monotonicity against round-off before bracketing
            curve = (knots, np.maximum.accumulate(emitted))
            ev.curves[horizon] = curve
        return curve

    def sample(self, psi: np.ndarray, horizon: float, rng: np.random.Generator):
        """Draw the next click within ``horizon``; ``None`` if there is none."""
        u = rng.random()
        if horizon <= 0:
            return None
        ev = self.evolution(psi)
        if self.is_diagonal:
            # exact exponential sum: no table needed
            if u >= 1.0 - ev.survival_at(horizon):
                return None
            t_jump = ev.invert(1.0 - u, horizon)
        else:
            knots, emitted = self._curve(ev, horizon)
            if u >= emitted[-1]:
                return None
            k = int(np.searchsorted(emitted, u, side="left"))
            if k == 0:
                t_jump = 0.0
            else:
                t_jump = brentq(lambda s: 1.0 - ev.survival_at(s) - u,
                                knots[k - 1], knots[k], xtol=TIME_TOL)
        psi_t = ev.state_at(t_jump)
        amps = (self.stacked @ psi_t).reshape(len(self.jump_ops), self.dim)
        weights = np.sum(np.abs(amps) ** 2, axis=1)
        total = weights.sum()
        if not total > 0.0:
            raise NumericError(f"no jump amplitude at sampled time {t_jump!r}")
        j = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
        j = min(j, len(weights) - 1)
        post = amps[j] / math.sqrt(weights[j])
        return t_jump, j, post

    def advance(self, psi: np.ndarray, duration: float) -> np.ndarray:
        out = self.evolution(psi).state_at(duration)
        return out / np.linalg.norm(out)


_PROCESS_CACHE: dict = {}


def sample_jump(state: StateVector, jump_ops: Sequence[Operator], generator: Operator,
                horizon: float, rng: np.random.Generator):
    """Sample one click; returns ``(time, detector_index, post_state)`` or ``None``."""
    key = (id(generator), tuple(id(j) for j in jump_ops))
    entry = _PROCESS_CACHE.get(key)
    if entry is None:
        if len(_PROCESS_CACHE) > 16:
            _PROCESS_CACHE.clear()
        # keep the operator objects alive so their ids stay unique
        entry = (JumpProcess(generator, jump_ops), generator, tuple(jump_ops))
        _PROCESS_CACHE[key] = entry
    res = entry[0].sample(state.normalized().amplitudes, horizon, rng)
    if res is None:
        return None
    t, j, post = res
    return t, j, StateVector(state.space, post)


@dataclass(frozen=True)
class _Stages:
    space: object
    drive: JumpProcess
    decay: JumpProcess


@lru_cache(maxsize=8)
def _stages(params: SystemParams) -> _Stages:
    space = build_space(2, 4, params.fock_cutoff)
    jumps = jump_operators(reference_network(), space, params.phases)
    return _Stages(space,
                   JumpProcess(drive_generator(space, params.omega, params.kappa), jumps),
                   JumpProcess(decay_generator(space, params.kappa), jumps))


@lru_cache(maxsize=32)
def _initial_state(inputs: AtomInputs, fock_cutoff: int) -> np.ndarray:
    return prepare_inputs(inputs, build_space(2, 4, fock_cutoff)).amplitudes


@lru_cache(maxsize=64)
def _gate_check(inputs: AtomInputs, fock_cutoff: int, pattern: DetectionPattern):
    """Dense (vacuum-projection -> correction) map and the ideal target."""
    u1, u2 = correction_unitary(pattern)
    target = ideal_cz(inputs, fock_cutoff)
    return np.kron(u1, u2), target


def _heralded_fidelity(final: StateVector, inputs: AtomInputs, fock_cutoff: int,
                       pattern: DetectionPattern) -> float:
    corr, target = _gate_check(inputs, fock_cutoff, pattern)
    atoms = project_vacuum(final)
    return fidelity(StateVector(target.space, corr @ atoms.amplitudes), target)


def _unravel(psi: np.ndarray, process: JumpProcess, duration: float, t0: float,
             rng: np.random.Generator, stop_on_jump: bool = False):
    """Evolve one trajectory over a segment; returns ``(psi, [(t, j), ...])``."""
    events = []
    elapsed = 0.0
    while True:
        res = process.sample(psi, duration - elapsed, rng)
        if res is None:
            return process.advance(psi, duration - elapsed), events
        t, j, psi = res
        elapsed += t
        events.append((t0 + elapsed, j))
        if stop_on_jump:
            return psi, events


@dataclass(frozen=True)
class TrajectoryRecord:
    """One stochastic run of the protocol.

    ``events`` are registered clicks ``(time, detector)`` with time measured
    from the start of the drive stage; photons removed by loss are counted
    in ``n_lost`` only.
    """

    seed: int
    events: tuple[tuple[float, str], ...]
    survived_step1: bool
    heralded_pattern: DetectionPattern | None
    final_state: StateVector
    n_lost: int = 0
    fidelity_cz: float | None = None

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "survived_step1": self.survived_step1,
            "events": [{"t": t, "detector": d} for t, d in self.events],
            "pattern": None if self.heralded_pattern is None else str(self.heralded_pattern),
            "fidelity_cz": self.fidelity_cz,
        })


def run_trajectory(inputs: AtomInputs, params: SystemParams, seed: int) -> TrajectoryRecord:
    """Drive stage, aborted by any emission, then free decay with click recording."""
    stages = _stages(params)
    rng = make_rng(seed)
    psi = _initial_state(inputs, params.fock_cutoff)

    psi, emissions = _unravel(psi, stages.drive, params.tau, 0.0, rng, stop_on_jump=True)
    if emissions:
        kept, n_lost = _apply_loss(emissions, params.eta, rng)
        return TrajectoryRecord(seed, kept, False, None, StateVector(stages.space, psi), n_lost)

    psi, emissions = _unravel(psi, stages.decay, params.t_detect, params.tau, rng)
    kept, n_lost = _apply_loss(emissions, params.eta, rng)
    clicked = frozenset(d for _, d in kept)
    pattern = None
    fid = None
    final = StateVector(stages.space, psi)
    if len(kept) == 2 and clicked in HERALDING_PATTERNS:
        pattern = DetectionPattern(clicked)
        fid = _heralded_fidelity(final, inputs, params.fock_cutoff, pattern)
    return TrajectoryRecord(seed, kept, True, pattern, final, n_lost, fid)


def _apply_loss(emissions, eta: float, rng: np.random.Generator):
    kept = []
    n_lost = 0
    for t, j in emissions:
        if rng.random() < eta:
            n_lost += 1
        else:
            kept.append((t, DETECTORS[j]))
    return tuple(kept), n_lost


@dataclass(frozen=True)
class EstimateWithError:
    mean: float
    stderr: float
    n_samples: int

    @classmethod
    def from_indicators(cls, flags: np.ndarray) -> EstimateWithError:
        flags = np.asarray(flags, dtype=float)
        n = flags.size
        if n == 0:
            return cls(0.0, 0.0, 0)
        std = float(np.std(flags, ddof=1)) if n > 1 else 0.0
        return cls(float(flags.mean()), std / math.sqrt(n), n)


def _herald_summary(args) -> list[tuple[bool, str | None]]:
    inputs, params, seeds = args
    out = []
    for s in seeds:
        rec = run_trajectory(inputs, params, s)
        out.append((rec.survived_step1,
                    None if rec.heralded_pattern is None else str(rec.heralded_pattern)))
    return out


def _chunked_map(fn: Callable, inputs, params, seeds: Sequence[int], jobs: int) -> list:
    if jobs <= 1 or len(seeds) < 2:
        return fn((inputs, params, list(seeds)))
    size = math.ceil(len(seeds) / (4 * jobs))
    chunks = [list(seeds[i:i + size]) for i in range(0, len(seeds), size)]
    out = []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for part in pool.map(fn, [(inputs, params, c) for c in chunks]):
            out.extend(part)
    return out


def herald_outcomes(inputs: AtomInputs, params: SystemParams, n: int, base_seed: int,
                    jobs: int = 1) -> list[tuple[bool, str | None]]:
    """``(survived_step1, pattern)`` per trajectory, in seed order."""
    seeds = [base_seed + i for i in range(n)]
    return _chunked_map(_herald_summary, inputs, params, seeds, jobs)


def estimate_heralding(inputs: AtomInputs, params: SystemParams, n: int, base_seed: int = 0,
                       jobs: int = 1) -> EstimateWithError:
    """Heralding frequency among trajectories whose drive stage emitted nothing.

    This is the Monte Carlo counterpart of ``success_probability``, which is
    likewise conditioned on the drive stage.
    """
    if n < 100:
        raise ValueError(f"n must be >= 100, got {n}")
    outcomes = herald_outcomes(inputs, params, n, base_seed, jobs)
    flags = [pat is not None for ok, pat in outcomes if ok]
    return EstimateWithError.from_indicators(np.array(flags, dtype=float))


def _final_states(args) -> np.ndarray:
    inputs, params, seeds, horizon = args
    stages = _stages(params)
    psi0 = _initial_state(inputs, params.fock_cutoff)
    t_on = min(horizon, params.tau)
    out = np.empty((len(seeds), stages.space.dimension), dtype=complex)
    for row, s in enumerate(seeds):
        rng = make_rng(s)
        psi, _ = _unravel(psi0, stages.drive, t_on, 0.0, rng)
        if horizon > params.tau:
            psi, _ = _unravel(psi, stages.decay, horizon - params.tau, params.tau, rng)
        out[row] = psi
    return out


def unconditional_average(inputs: AtomInputs, params: SystemParams, n: int, horizon: float,
                          base_seed: int = 0, jobs: int = 1) -> np.ndarray:
    """Trajectory-averaged density matrix at ``horizon``, nothing post-selected."""
    if n < 1000:
        raise ValueError(f"n must be >= 1000, got {n}")
    seeds = [base_seed + i for i in range(n)]
    if jobs <= 1:
        states = _final_states((inputs, params, seeds, horizon))
    else:
        size = math.ceil(n / (4 * jobs))
        chunks = [seeds[i:i + size] for i in range(0, n, size)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            states = np.vstack(list(pool.map(
                _final_states, [(inputs, params, c, horizon) for c in chunks])))
    rho = states.T @ states.conj() / n
    return 0.5 * (rho + rho.conj().T)


def write_log(records, fh: IO[str]) -> None:
    for rec in records:
        fh.write(rec.to_json() + "\n")
