"""Basis, states and operators for atoms in two-mode optical cavities.

Each atom has four long-lived levels ``gH, gV, sH, sV`` (the excited
levels are adiabatically eliminated and never appear). Each cavity has
two polarisation modes ``c{j}H`` and ``c{j}V`` truncated at
``fock_cutoff`` photons.

Basis ordering
--------------
Tensor factors are ordered atom-major: all atoms first (by index), then
all modes (``c1H, c1V, c2H, c2V``). Within a factor, atom levels follow
``gH, gV, sH, sV`` and photon numbers run ``0..fock_cutoff``. The flat
index is the C-order (row-major) ravel of the factor indices, so the
last mode varies fastest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

ATOM_LEVELS: tuple[str, ...] = ("gH", "gV", "sH", "sV")
MODE_LABELS: tuple[str, ...] = ("c1H", "c1V", "c2H", "c2V")
NORM_TOL = 1e-12


def _cavity_modes(cavity: int) -> tuple[str, str]:
    return (f"c{cavity}H", f"c{cavity}V")


@dataclass(frozen=True)
class SpaceDescriptor:
    """Joint Hilbert space of ``atoms`` and ``modes`` with a Fock cutoff."""

    atoms: tuple[int, ...]
    modes: tuple[str, ...]
    fock_cutoff: int

    def __post_init__(self):
        if self.fock_cutoff < 1:
            raise ValueError(f"fock_cutoff must be >= 1, got {self.fock_cutoff}")

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(f"atom{j}" for j in self.atoms) + self.modes

    @property
    def dims(self) -> tuple[int, ...]:
        n = self.fock_cutoff + 1
        return (len(ATOM_LEVELS),) * len(self.atoms) + (n,) * len(self.modes)

    @property
    def dimension(self) -> int:
        return int(np.prod(self.dims))

    def factor_index(self, name: str) -> int:
        try:
            return self.factor_names.index(name)
        except ValueError:
            raise ValueError(f"no factor {name!r} in space with factors "
                             f"{self.factor_names}") from None

    def label_of(self, index: int) -> tuple:
        """Label tuple ``(level, ..., n_mode, ...)`` of a flat basis index."""
        if not 0 <= index < self.dimension:
            raise IndexError(f"basis index {index} out of range")
        digits = np.unravel_index(index, self.dims)
        n_at = len(self.atoms)
        return (tuple(ATOM_LEVELS[d] for d in digits[:n_at])
                + tuple(int(d) for d in digits[n_at:]))

    def index_of(self, label: Sequence) -> int:
        if len(label) != len(self.dims):
            raise ValueError(f"label {label!r} has wrong length")
        n_at = len(self.atoms)
        digits = [ATOM_LEVELS.index(lv) for lv in label[:n_at]]
        for n in label[n_at:]:
            if not 0 <= int(n) <= self.fock_cutoff:
                raise ValueError(f"photon number {n} exceeds cutoff")
            digits.append(int(n))
        return int(np.ravel_multi_index(digits, self.dims))

    def label_string(self, index: int) -> str:
        """Compact label, e.g. ``'gH,sV;0,1,0,0'``."""
        lab = self.label_of(index)
        n_at = len(self.atoms)
        atoms = ",".join(lab[:n_at])
        if not self.modes:
            return atoms
        return atoms + ";" + ",".join(str(n) for n in lab[n_at:])

    @cached_property
    def photon_numbers(self) -> np.ndarray:
        """Array ``(dimension, n_modes)`` of photon numbers per basis state."""
        grids = np.indices(self.dims).reshape(len(self.dims), -1).T
        return grids[:, len(self.atoms):].copy()

    @cached_property
    def atom_levels(self) -> np.ndarray:
        """Array ``(dimension, n_atoms)`` of level indices per basis state."""
        grids = np.indices(self.dims).reshape(len(self.dims), -1).T
        return grids[:, : len(self.atoms)].copy()

    def mode_index(self, mode: str) -> int:
        try:
            return self.modes.index(mode)
        except ValueError:
            raise ValueError(f"unknown mode {mode!r}; space has {self.modes}") from None


def build_space(n_atoms: int, n_modes: int, fock_cutoff: int = 1,
                cavity: int = 1) -> SpaceDescriptor:
    """Construct a space descriptor.

    ``n_atoms=1`` gives a single atom-cavity system for ``cavity``;
    ``n_atoms=2`` gives the joint two-cavity system. ``n_modes=0`` drops
    the photonic factors entirely (atom-only space, used for heralded
    atomic states).

    >>> build_space(2, 4, 1).dimension
    256
    """
    if n_atoms not in (1, 2):
        raise ValueError(f"n_atoms must be 1 or 2, got {n_atoms}")
    if fock_cutoff < 1:
        raise ValueError(f"fock_cutoff must be >= 1, got {fock_cutoff}")
    if n_atoms == 1:
        if cavity not in (1, 2):
            raise ValueError(f"cavity must be 1 or 2, got {cavity}")
        if n_modes not in (0, 2):
            raise ValueError(f"a single system has 0 or 2 modes, got {n_modes}")
        modes = _cavity_modes(cavity) if n_modes else ()
        return SpaceDescriptor((cavity,), modes, fock_cutoff)
    if n_modes not in (0, 4):
        raise ValueError(f"the joint system has 0 or 4 modes, got {n_modes}")
    return SpaceDescriptor((1, 2), MODE_LABELS if n_modes else (), fock_cutoff)


def _check_array(amplitudes: np.ndarray, space: SpaceDescriptor) -> np.ndarray:
    arr = np.array(amplitudes, dtype=complex).reshape(-1)
    if arr.shape[0] != space.dimension:
        raise ValueError(f"amplitude length {arr.shape[0]} does not match "
                         f"dimension {space.dimension}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class StateVector:
    """Possibly unnormalised pure state on ``space``."""

    space: SpaceDescriptor
    amplitudes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "amplitudes", _check_array(self.amplitudes, self.space))

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def normalized(self) -> StateVector:
        nrm = self.norm()
        if nrm == 0.0:
            raise ValueError("cannot normalise the zero vector")
        return StateVector(self.space, self.amplitudes / nrm)

    def inner(self, other: StateVector) -> complex:
        """``<self|other>``."""
        _same_space(self.space, other.space)
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def __add__(self, other: StateVector) -> StateVector:
        _same_space(self.space, other.space)
        return StateVector(self.space, self.amplitudes + other.amplitudes)

    def __sub__(self, other: StateVector) -> StateVector:
        _same_space(self.space, other.space)
        return StateVector(self.space, self.amplitudes - other.amplitudes)

    def __mul__(self, scalar: complex) -> StateVector:
        return StateVector(self.space, self.amplitudes * scalar)

    __rmul__ = __mul__

    def amplitude(self, label: Sequence) -> complex:
        return complex(self.amplitudes[self.space.index_of(label)])


def basis_state(space: SpaceDescriptor, label: Sequence) -> StateVector:
    amps = np.zeros(space.dimension, dtype=complex)
    amps[space.index_of(label)] = 1.0
    return StateVector(space, amps)


def _same_space(a: SpaceDescriptor, b: SpaceDescriptor) -> None:
    if a != b:
        raise ValueError(f"space mismatch: {a} vs {b}")


@dataclass(frozen=True, eq=False)
class Operator:
    """Sparse complex operator on ``space`` (CSR storage)."""

    space: SpaceDescriptor
    matrix: sp.csr_matrix = field(repr=False)

    def __post_init__(self):
        mat = sp.csr_matrix(self.matrix, dtype=complex)
        d = self.space.dimension
        if mat.shape != (d, d):
            raise ValueError(f"operator shape {mat.shape} does not match dimension {d}")
        mat.sum_duplicates()
        object.__setattr__(self, "matrix", mat)

    def dag(self) -> Operator:
        return Operator(self.space, self.matrix.conj().T.tocsr())

    def __matmul__(self, other):
        if isinstance(other, StateVector):
            _same_space(self.space, other.space)
            return StateVector(self.space, self.matrix @ other.amplitudes)
        if isinstance(other, Operator):
            _same_space(self.space, other.space)
            return Operator(self.space, self.matrix @ other.matrix)
        return NotImplemented

    def __add__(self, other: Operator) -> Operator:
        _same_space(self.space, other.space)
        return Operator(self.space, self.matrix + other.matrix)

    def __sub__(self, other: Operator) -> Operator:
        _same_space(self.space, other.space)
        return Operator(self.space, self.matrix - other.matrix)

    def __mul__(self, scalar: complex) -> Operator:
        return Operator(self.space, self.matrix * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> Operator:
        return Operator(self.space, -self.matrix)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def max_abs(self) -> float:
        """Largest absolute matrix element (0 for the zero operator)."""
        return float(np.max(np.abs(self.matrix.data), initial=0.0))


def identity(space: SpaceDescriptor) -> Operator:
    return Operator(space, sp.identity(space.dimension, dtype=complex, format="csr"))


def _embed(space: SpaceDescriptor, factor: int, local: sp.spmatrix) -> Operator:
    mats = [sp.identity(d, dtype=complex, format="csr") for d in space.dims]
    mats[factor] = sp.csr_matrix(local, dtype=complex)
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return Operator(space, out)


def mode_annihilator(space: SpaceDescriptor, mode: str) -> Operator:
    """Bosonic annihilator for ``mode``, truncated at the space's cutoff."""
    if mode not in space.modes:
        raise ValueError(f"unknown mode {mode!r}; space has {space.modes}")
    n = space.fock_cutoff + 1
    local = sp.diags(np.sqrt(np.arange(1, n, dtype=float)), offsets=1, shape=(n, n))
    return _embed(space, space.factor_index(mode), local)


def number_operator(space: SpaceDescriptor, modes: Iterable[str] | None = None) -> Operator:
    """Total photon number over ``modes`` (all modes by default)."""
    modes = space.modes if modes is None else tuple(modes)
    cols = [space.mode_index(m) for m in modes]
    counts = space.photon_numbers[:, cols].sum(axis=1) if cols else np.zeros(space.dimension)
    return Operator(space, sp.diags(counts.astype(complex), format="csr"))


def atom_transition(space: SpaceDescriptor, atom: int, source: str, target: str) -> Operator:
    """``|target><source|`` acting on atom ``atom``."""
    if atom not in space.atoms:
        raise ValueError(f"atom {atom} not in space (atoms {space.atoms})")
    for lv in (source, target):
        if lv not in ATOM_LEVELS:
            raise ValueError(f"unknown level {lv!r}; expected one of {ATOM_LEVELS}")
    local = sp.csr_matrix(([1.0], ([ATOM_LEVELS.index(target)], [ATOM_LEVELS.index(source)])),
                          shape=(4, 4))
    return _embed(space, space.factor_index(f"atom{atom}"), local)


def atom_operator(space: SpaceDescriptor, atom: int, local: np.ndarray) -> Operator:
    """Embed a 4x4 single-atom matrix (level order ``gH, gV, sH, sV``)."""
    if atom not in space.atoms:
        raise ValueError(f"atom {atom} not in space (atoms {space.atoms})")
    local = np.asarray(local)
    if local.shape != (4, 4):
        raise ValueError(f"single-atom matrix must be 4x4, got {local.shape}")
    return _embed(space, space.factor_index(f"atom{atom}"), sp.csr_matrix(local))


def tensor(left: StateVector, right: StateVector) -> StateVector:
    """Product state of two disjoint subsystems, in the joint basis ordering."""
    ls, rs = left.space, right.space
    if ls.fock_cutoff != rs.fock_cutoff:
        raise ValueError("fock cutoffs differ")
    if set(ls.atoms) & set(rs.atoms) or set(ls.modes) & set(rs.modes):
        raise ValueError("subsystems overlap")
    atoms = tuple(sorted(ls.atoms + rs.atoms))
    modes = tuple(m for m in MODE_LABELS if m in ls.modes + rs.modes)
    if atoms != (1, 2) or len(modes) not in (0, 4):
        raise ValueError(f"product of {ls.factor_names} and {rs.factor_names} "
                         "is not a registered joint space")
    joint = SpaceDescriptor(atoms, modes, ls.fock_cutoff)
    outer = np.multiply.outer(left.amplitudes.reshape(ls.dims),
                              right.amplitudes.reshape(rs.dims))
    names = ls.factor_names + rs.factor_names
    perm = [names.index(n) for n in joint.factor_names]
    return StateVector(joint, outer.transpose(perm).reshape(-1))


def fidelity(a: StateVector, b: StateVector) -> float:
    """Normalisation- and global-phase-insensitive overlap ``|<a|b>|^2/(|a|^2|b|^2)``."""
    na, nb = a.norm_squared(), b.norm_squared()
    if na == 0.0 or nb == 0.0:
        raise ValueError("fidelity undefined for a zero vector")
    return min(1.0, abs(a.inner(b)) ** 2 / (na * nb))


def project_vacuum(state: StateVector) -> StateVector:
    """Amplitudes with every mode empty, as a state on the atom-only space."""
    space = state.space
    atom_space = SpaceDescriptor(space.atoms, (), space.fock_cutoff)
    if not space.modes:
        return state
    mask = ~space.photon_numbers.any(axis=1)
    return StateVector(atom_space, state.amplitudes[mask])


def boundary_weight(state: StateVector) -> float:
    """Squared norm on basis states with any mode at the Fock cutoff."""
    space = state.space
    if not space.modes:
        return 0.0
    mask = (space.photon_numbers == space.fock_cutoff).any(axis=1)
    return float(np.sum(np.abs(state.amplitudes[mask]) ** 2))


def dump_amplitudes(state: StateVector, fh: IO[str]) -> None:
    """Write a JSON-lines amplitude dump (header, then nonzero amplitudes)."""
    space = state.space
    header = {
        "factors": list(space.factor_names),
        "atom_levels": list(ATOM_LEVELS),
        "modes": list(space.modes),
        "fock_cutoff": space.fock_cutoff,
        "dimension": space.dimension,
        "ordering": "row-major over factors; last factor fastest",
    }
    fh.write(json.dumps(header) + "\n")
    for i in np.flatnonzero(state.amplitudes):
        amp = state.amplitudes[i]
        rec = {"basis_label": space.label_string(int(i)),
               "re": float(amp.real), "im": float(amp.imag)}
        fh.write(json.dumps(rec) + "\n")


def load_amplitudes(fh: IO[str]) -> StateVector:
    lines = [ln for ln in fh if ln.strip()]
    header = json.loads(lines[0])
    atoms = tuple(int(f[4:]) for f in header["factors"] if f.startswith("atom"))
    space = SpaceDescriptor(atoms, tuple(header["modes"]), int(header["fock_cutoff"]))
    amps = np.zeros(space.dimension, dtype=complex)
    for ln in lines[1:]:
        rec = json.loads(ln)
        levels, _, photons = rec["basis_label"].partition(";")
        label = levels.split(",") + ([int(n) for n in photons.split(",")] if photons else [])
        amps[space.index_of(label)] = complex(rec["re"], rec["im"])
    return StateVector(space, amps)
