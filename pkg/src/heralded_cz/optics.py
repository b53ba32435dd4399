"""Linear-optics network from the cavity outputs to four detectors.

Matrices act on annihilation operators: a transform ``B`` maps the
cavity output modes ``(c1H, c1V, c2H, c2V)`` to detector modes via
``b_j = sum_m B[j, m] a_m``. Serialised matrices are row-major in this
mode order.

Netlist format, one element per line, ``#`` starts a comment::

    kind  in1,in2[,...][>out1,out2,...]  [parameter]

``phase`` takes one port and a phase in radians, ``qwp`` an ``H,V``
port pair and the fast-axis angle, ``pbs`` either an ``H,V`` pair (split
into two spatial outputs) or two ``H,V`` pairs (transmits H, reflects V).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import CalibrationError, NetlistSyntaxError, NetworkTopologyError
from .hilbert import MODE_LABELS, Operator, SpaceDescriptor, mode_annihilator

DETECTORS: tuple[str, ...] = ("D1", "D2", "D3", "D4")
UNITARITY_TOL = 1e-9

_ARITY = {"phase": (1,), "qwp": (2,), "pbs": (2, 4)}

REFERENCE_NETLIST = """\
# Cavity-1 arm: quarter-wave plate at pi/4 between phase trims; together they
# rotate (c1H, c1V) into the diagonal basis.
phase c1V   1.5707963267948966
qwp   c1H,c1V 0.7853981633974483
phase c1V   1.5707963267948966
phase c1H  -0.7853981633974483
phase c1V  -0.7853981633974483

# Central PBS: arm a carries c1H and c2V, arm b carries c2H and c1V.
pbs c1H,c1V,c2H,c2V>aH,aV,bH,bV

# Arm a: diagonal-basis analysis, then split onto D1/D2.
phase aV    1.5707963267948966
qwp   aH,aV 0.7853981633974483
phase aV    1.5707963267948966
phase aH   -0.7853981633974483
phase aV   -0.7853981633974483
pbs aH,aV>D1,D2

# Arm b: same analyser onto D3/D4.
phase bV    1.5707963267948966
qwp   bH,bV 0.7853981633974483
phase bV    1.5707963267948966
phase bH   -0.7853981633974483
phase bV   -0.7853981633974483
pbs bH,bV>D3,D4
"""


@dataclass(frozen=True)
class NetworkElement:
    kind: str
    ports: tuple[str, ...]
    outputs: tuple[str, ...] | None = None
    parameter: float = 0.0

    def __post_init__(self):
        if self.kind not in _ARITY:
            raise ValueError(f"unknown element kind {self.kind!r}")
        if len(self.ports) not in _ARITY[self.kind]:
            raise NetworkTopologyError(
                f"{self.kind} takes {' or '.join(map(str, _ARITY[self.kind]))} ports, "
                f"got {len(self.ports)}")
        if self.outputs is not None and len(self.outputs) != len(self.ports):
            raise NetworkTopologyError(
                f"{self.kind}: {len(self.ports)} inputs but {len(self.outputs)} outputs")

    def local_matrix(self) -> np.ndarray:
        """Matrix on the element's own ports (rows: outputs, cols: inputs)."""
        if self.kind == "phase":
            return np.array([[np.exp(1j * self.parameter)]])
        if self.kind == "qwp":
            return qwp_matrix(self.parameter)
        if len(self.ports) == 2:
            return np.eye(2, dtype=complex)
        # inputs (1H, 1V, 2H, 2V) -> outputs (aH, aV, bH, bV):
        # a = (1H transmitted, 2V reflected), b = (2H transmitted, 1V reflected)
        perm = np.zeros((4, 4), dtype=complex)
        for out, inp in enumerate((0, 3, 2, 1)):
            perm[out, inp] = 1.0
        return perm


def qwp_matrix(theta: float) -> np.ndarray:
    """Quarter-wave plate with fast axis at ``theta`` (H/V basis)."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    return rot.T @ np.diag([1.0, 1j]) @ rot


@dataclass(frozen=True, eq=False)
class ModeTransform:
    matrix: np.ndarray
    input_modes: tuple[str, ...] = MODE_LABELS
    output_modes: tuple[str, ...] = DETECTORS

    def unitarity_residual(self) -> float:
        m = self.matrix
        return float(np.max(np.abs(m @ m.conj().T - np.eye(m.shape[0]))))

    def to_json(self) -> str:
        rows = [[[float(z.real), float(z.imag)] for z in row] for row in self.matrix]
        return json.dumps({"input_modes": list(self.input_modes),
                           "output_modes": list(self.output_modes),
                           "matrix": rows})

    @classmethod
    def from_json(cls, text: str) -> ModeTransform:
        obj = json.loads(text)
        mat = np.array([[complex(re_, im) for re_, im in row] for row in obj["matrix"]])
        return cls(mat, tuple(obj["input_modes"]), tuple(obj["output_modes"]))


def compose_network(elements: Sequence[NetworkElement],
                    inputs: Sequence[str] = MODE_LABELS) -> ModeTransform:
    """Multiply element matrices along the dataflow from ``inputs``.

    Rows of the result follow the final live ports; if those are the four
    detectors they are sorted ``D1..D4``.
    """
    live = list(inputs)
    mat = np.eye(len(live), dtype=complex)
    for el in elements:
        if len(set(el.ports)) != len(el.ports):
            dup = next(p for p in el.ports if el.ports.count(p) > 1)
            raise NetworkTopologyError(f"{el.kind}: port {dup!r} consumed twice", dup)
        for p in el.ports:
            if p not in live:
                raise NetworkTopologyError(f"{el.kind}: port {p!r} is not a live mode", p)
        rows = [live.index(p) for p in el.ports]
        outputs = el.outputs or el.ports
        others = set(live) - set(el.ports)
        for p in outputs:
            if p in others or outputs.count(p) > 1:
                raise NetworkTopologyError(f"{el.kind}: output port {p!r} already exists", p)
        step = np.eye(len(live), dtype=complex)
        step[np.ix_(rows, rows)] = el.local_matrix()
        mat = step @ mat
        for r, name in zip(rows, outputs):
            live[r] = name
    if sorted(live) == list(DETECTORS):
        order = [live.index(d) for d in DETECTORS]
        mat, live = mat[order], list(DETECTORS)
    return ModeTransform(mat, tuple(inputs), tuple(live))


_PORT_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def parse_netlist(text: str) -> list[NetworkElement]:
    elements = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        tokens = [(m.start() + 1, m.group()) for m in re.finditer(r"\S+", line)]
        if not tokens:
            continue
        (kcol, kind), rest = tokens[0], tokens[1:]
        if kind not in _ARITY:
            raise NetlistSyntaxError(f"unknown element kind {kind!r}", lineno, kcol)
        if not rest:
            raise NetlistSyntaxError(f"{kind} needs a port list", lineno, kcol + len(kind))
        pcol, ptext = rest[0]
        ins, _, outs = ptext.partition(">")
        ports = tuple(ins.split(","))
        outputs = tuple(outs.split(",")) if outs else None
        for name in ports + (outputs or ()):
            if not _PORT_RE.match(name):
                raise NetlistSyntaxError(f"bad port name {name!r}", lineno,
                                         pcol + max(ptext.find(name), 0))
        param = 0.0
        if kind in ("phase", "qwp"):
            if len(rest) != 2:
                raise NetlistSyntaxError(f"{kind} needs exactly one numeric parameter",
                                         lineno, pcol + len(ptext))
            vcol, vtext = rest[1]
            try:
                param = float(vtext)
            except ValueError:
                raise NetlistSyntaxError(f"not a number: {vtext!r}", lineno, vcol) from None
        elif len(rest) != 1:
            raise NetlistSyntaxError("pbs takes no parameter", lineno, rest[1][0])
        try:
            elements.append(NetworkElement(kind, ports, outputs, param))
        except NetworkTopologyError as exc:
            raise NetlistSyntaxError(str(exc), lineno, pcol) from None
    return elements


def reference_network() -> ModeTransform:
    """The reference detector transform, written out row by row."""
    h, r = 0.5, 1 / math.sqrt(2)
    mat = np.array([
        [h, h, 0, r],
        [h, h, 0, -r],
        [h, -h, r, 0],
        [-h, h, r, 0],
    ], dtype=complex)
    return ModeTransform(mat)


def reference_netlist_elements() -> list[NetworkElement]:
    return parse_netlist(REFERENCE_NETLIST)


def _cavity_of(mode: str) -> int:
    return int(mode[1])


def jump_operators(transform: ModeTransform, space: SpaceDescriptor,
                   phases: tuple[float, float] = (0.0, 0.0)) -> tuple[Operator, ...]:
    """Detector-mode annihilators on the joint space, with path phases.

    ``b_j = sum_m B[j, m] exp(-i phi_cavity(m)) a_m``.
    """
    resid = transform.unitarity_residual()
    if resid > UNITARITY_TOL:
        raise CalibrationError(f"transform is not unitary (residual {resid:.3e})")
    if tuple(space.modes) != tuple(transform.input_modes):
        raise ValueError(f"space modes {space.modes} do not match transform inputs "
                         f"{transform.input_modes}")
    annihilators = [mode_annihilator(space, m).matrix for m in transform.input_modes]
    weights = np.array([np.exp(-1j * phases[_cavity_of(m) - 1]) for m in transform.input_modes])
    ops = []
    for row in transform.matrix:
        acc = sp.csr_matrix((space.dimension, space.dimension), dtype=complex)
        for coef, w, a in zip(row, weights, annihilators):
            if coef != 0:
                acc = acc + (coef * w) * a
        ops.append(Operator(space, acc))
    return tuple(ops)
