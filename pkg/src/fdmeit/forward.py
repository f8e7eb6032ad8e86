"""Complete-electrode-model forward solver.

The potential u solves div(sigma grad u) = 0 with zero flux off the
electrodes and u + z sigma du/dn = V_l on electrode l.  Discretised with P1
elements, the unknowns are the nodal potentials plus one voltage per
electrode.  Electrodes with z == 0 are shunt electrodes: their nodes are
merged into the electrode voltage unknown.

Mesh coordinates are millimetres; everything here is assembled in SI.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from math import factorial
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh, MeshError, facet_measures

logger = logging.getLogger(__name__)

MM = 1e-3
DEFAULT_AMPLITUDE = 165e-6


class SolverError(RuntimeError):
    """Numerical failure of a forward solve."""


# -- conductivity ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConductivityField:
    """Per-element conductivity in S/m."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)) or (v <= 0).any():
            bad = np.flatnonzero(~(v > 0) | ~np.isfinite(v))
            raise ValueError(f"conductivity must be positive and finite (element {bad[0]} = {v[bad[0]]})")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, mesh: Mesh, sigma: float = 0.2) -> "ConductivityField":
        return cls(np.full(mesh.n_elements, float(sigma)))

    def __len__(self):
        return len(self.values)

    def __mul__(self, k: float) -> "ConductivityField":
        return ConductivityField(self.values * k)

    __rmul__ = __mul__

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()


# -- protocol ----------------------------------------------------------------


@dataclass(frozen=True)
class InjectionTone:
    source: int
    sink: int
    amplitude: float = DEFAULT_AMPLITUDE
    frequency: float = 2000.0

    def __post_init__(self):
        if self.source == self.sink:
            raise ValueError(f"injection source and sink must differ (both {self.source})")
        if self.amplitude < 0:
            raise ValueError(f"injection amplitude must be >= 0, got {self.amplitude}")
        if not 10.0 <= self.frequency <= 100e3:
            raise ValueError(f"injection frequency {self.frequency} Hz outside 10 Hz - 100 kHz")


@dataclass(frozen=True)
class Protocol:
    """Simultaneous injection tones, each with its own measurement pairs."""

    injections: tuple[InjectionTone, ...]
    measurements: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self):
        inj = tuple(self.injections)
        meas = tuple(tuple((int(p), int(n)) for p, n in pairs) for pairs in self.measurements)
        if len(inj) != len(meas):
            raise ValueError("one measurement list is required per injection")
        for pairs in meas:
            for p, n in pairs:
                if p == n:
                    raise ValueError(f"measurement pair {p}-{n} uses one electrode twice")
        object.__setattr__(self, "injections", inj)
        object.__setattr__(self, "measurements", meas)

    @property
    def n_measurements(self) -> int:
        return sum(len(m) for m in self.measurements)

    def flat(self) -> list[tuple[int, tuple[int, int]]]:
        """(injection index, measurement pair) in injection-major order."""
        return [(i, pair) for i, pairs in enumerate(self.measurements) for pair in pairs]

    @property
    def electrode_ids(self) -> set[int]:
        ids = set()
        for t in self.injections:
            ids |= {t.source, t.sink}
        for pairs in self.measurements:
            for pair in pairs:
                ids |= set(pair)
        return ids

    @property
    def frequencies(self) -> list[float]:
        return [t.frequency for t in self.injections]

    def check_against(self, mesh: Mesh) -> None:
        missing = self.electrode_ids - set(mesh.electrode_ids)
        if missing:
            raise ValueError(f"protocol references electrodes missing from the mesh: {sorted(missing)}")

    def digest(self) -> str:
        return hashlib.sha256(format_protocol(self).encode()).hexdigest()


def hinged_protocol(amplitude: float = DEFAULT_AMPLITUDE, frequencies=(2000.0, 4000.0, 6000.0)) -> Protocol:
    """Drive 1-6, 2-3, 4-5 simultaneously; record 2-5, 1-4, 3-6 for each."""
    pairs = ((2, 5), (1, 4), (3, 6))
    inj = tuple(
        InjectionTone(s, k, amplitude, f) for (s, k), f in zip(((1, 6), (2, 3), (4, 5)), frequencies)
    )
    return Protocol(inj, (pairs,) * 3)


def two_electrode_protocol(amplitude: float = DEFAULT_AMPLITUDE, frequency: float = 2000.0) -> Protocol:
    """Single-chamber drive and measurement between electrodes 1 and 2."""
    return Protocol((InjectionTone(1, 2, amplitude, frequency),), (((1, 2),),))


def format_protocol(protocol: Protocol) -> str:
    lines = ["EITPROT 1"]
    for tone, pairs in zip(protocol.injections, protocol.measurements):
        lines.append(f"inject {tone.source} {tone.sink} {tone.amplitude * 1e6!r} {tone.frequency!r}")
        lines += [f"measure {p} {n}" for p, n in pairs]
    return "\n".join(lines) + "\n"


def save_protocol(protocol: Protocol, path) -> None:
    Path(path).write_text(format_protocol(protocol))


def load_protocol(path) -> Protocol:
    """Parse ``EITPROT 1``: ``inject src snk amp_uA freq_hz`` then ``measure pos neg`` lines."""
    path = Path(path)
    injections, measurements = [], []
    header = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        f = line.split()
        try:
            if not header:
                if f != ["EITPROT", "1"]:
                    raise ValueError("expected header 'EITPROT 1'")
                header = True
            elif f[0] == "inject" and len(f) == 5:
                injections.append(InjectionTone(int(f[1]), int(f[2]), float(f[3]) * 1e-6, float(f[4])))
                measurements.append([])
            elif f[0] == "measure" and len(f) == 3:
                if not injections:
                    raise ValueError("'measure' before any 'inject'")
                measurements[-1].append((int(f[1]), int(f[2])))
            else:
                raise ValueError(f"unrecognised line {line!r}")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not injections:
        raise ValueError(f"{path}: no injections")
    return Protocol(tuple(injections), tuple(tuple(m) for m in measurements))


# -- geometry cache -----------------------------------------------------------


class _Geometry:
    """P1 basis gradients and measures in SI units."""

    def __init__(self, mesh: Mesh):
        pts = mesh.nodes * MM
        p = pts[mesh.elements]
        d = mesh.dimension
        edges = p[:, 1:, :] - p[:, :1, :]
        # column i of inv(edges) is the gradient of barycentric coordinate i+1
        g = np.linalg.inv(edges)
        grads = np.empty((len(p), d + 1, d))
        grads[:, 1:, :] = g.transpose(0, 2, 1)
        grads[:, 0, :] = -grads[:, 1:, :].sum(axis=1)
        self.grads = grads
        self.volumes = np.abs(np.linalg.det(edges)) / factorial(d)


@dataclass(frozen=True, eq=False)
class FieldSolution:
    """Nodal potentials and electrode voltages (V) for one injection."""

    potentials: np.ndarray
    electrode_voltages: dict[int, float]
    electrode_currents: dict[int, float]

    def voltage(self, pos: int, neg: int) -> float:
        return self.electrode_voltages[pos] - self.electrode_voltages[neg]


GROUNDINGS = ("electrodes", "node")


@dataclass(eq=False)
class CemSystem:
    """Assembled CEM system for one mesh and conductivity.

    ``matrix`` is the gauge-free (singular) symmetric system over the
    reduced unknowns; ``grounded`` adds the gauge constraint.  With the
    default ``"electrodes"`` grounding the electrode voltages sum to zero and
    the system stays symmetric positive definite; ``"node"`` fixes the
    potential of node 0 instead.
    """

    mesh: Mesh
    sigma: ConductivityField
    grounding: str
    dof_of_node: np.ndarray
    electrode_dof: dict[int, int]
    n_dofs: int
    matrix: sp.csr_matrix
    _stiffness_map: np.ndarray = field(repr=False)
    _stiffness_unit: np.ndarray = field(repr=False)
    _stiffness_elem: np.ndarray = field(repr=False)
    _geometry: _Geometry = field(repr=False)

    @cached_property
    def grounded(self) -> sp.csc_matrix:
        A = self.matrix.tocsc()
        if self.grounding == "electrodes":
            e = np.array(sorted(self.electrode_dof.values()))
            scale = float(np.abs(A.diagonal()).mean())
            rows, cols = np.meshgrid(e, e, indexing="ij")
            G = sp.csc_matrix((np.full(rows.size, scale), (rows.ravel(), cols.ravel())), shape=A.shape)
            return (A + G).tocsc()
        keep = self._node_ground_keep
        return A[keep][:, keep].tocsc()

    @cached_property
    def _node_ground_keep(self) -> np.ndarray:
        keep = np.ones(self.n_dofs, dtype=bool)
        keep[self.dof_of_node[0]] = False
        return keep

    @cached_property
    def factor(self):
        try:
            return splu(self.grounded, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverError(
                f"singular CEM system with grounding={self.grounding!r} "
                f"({self.n_dofs} unknowns, {len(self.electrode_dof)} electrodes): {exc}"
            ) from None

    def is_symmetric(self, rtol: float = 1e-12) -> bool:
        A = self.matrix
        diff = abs(A - A.T).max() if A.nnz else 0.0
        return diff <= rtol * abs(A).max()

    def rhs(self, currents: dict[int, float]) -> np.ndarray:
        b = np.zeros(self.n_dofs)
        for eid, i in currents.items():
            b[self.electrode_dof[eid]] += i
        return b

    def solve_dofs(self, b: np.ndarray) -> np.ndarray:
        """Solve for one or more right-hand sides (columns)."""
        b = np.asarray(b, dtype=np.float64)
        if self.grounding == "electrodes":
            x = self.factor.solve(b)
        else:
            keep = self._node_ground_keep
            x = np.zeros_like(b)
            x[keep] = self.factor.solve(b[keep])
        if not np.all(np.isfinite(x)):
            raise SolverError(f"non-finite solution with grounding={self.grounding!r}")
        return x

    def node_potentials(self, x: np.ndarray) -> np.ndarray:
        return x[self.dof_of_node]

    def electrode_voltages(self, x: np.ndarray) -> dict[int, float]:
        return {eid: float(x[d]) for eid, d in self.electrode_dof.items()}

    def electrode_currents(self, x: np.ndarray) -> dict[int, float]:
        r = self.matrix @ x
        return {eid: float(r[d]) for eid, d in self.electrode_dof.items()}

    def with_sigma(self, sigma: ConductivityField) -> "CemSystem":
        """Same structure, new conductivity; only entries of changed elements are touched."""
        if len(sigma) != self.mesh.n_elements:
            raise ValueError("conductivity does not match the mesh")
        changed = np.flatnonzero(sigma.values != self.sigma.values)
        data = self.matrix.data.copy()
        sel = np.isin(self._stiffness_elem, changed)
        delta = (sigma.values - self.sigma.values)[self._stiffness_elem[sel]]
        np.add.at(data, self._stiffness_map[sel], self._stiffness_unit[sel] * delta)
        matrix = sp.csr_matrix((data, self.matrix.indices, self.matrix.indptr), shape=self.matrix.shape)
        return CemSystem(
            self.mesh, sigma, self.grounding, self.dof_of_node, self.electrode_dof, self.n_dofs,
            matrix, self._stiffness_map, self._stiffness_unit, self._stiffness_elem, self._geometry,
        )


def _dof_layout(mesh: Mesh):
    shunt_nodes = {}
    for e in mesh.electrodes:
        if e.z == 0:
            for n in e.nodes.tolist():
                if n in shunt_nodes:
                    raise MeshError(f"shunt electrodes {shunt_nodes[n]} and {e.id} share node {n}")
                shunt_nodes[n] = e.id
    dof_of_node = np.empty(mesh.n_nodes, dtype=np.int64)
    free = np.array([n not in shunt_nodes for n in range(mesh.n_nodes)])
    n_free = int(free.sum())
    dof_of_node[free] = np.arange(n_free)
    electrode_dof = {e.id: n_free + k for k, e in enumerate(mesh.electrodes)}
    for n, eid in shunt_nodes.items():
        dof_of_node[n] = electrode_dof[eid]
    return dof_of_node, electrode_dof, n_free + mesh.n_electrodes


def assemble_cem_system(mesh: Mesh, sigma: ConductivityField, grounding: str = "electrodes") -> CemSystem:
    """Assemble the CEM system for ``mesh`` and ``sigma``."""
    if len(sigma) != mesh.n_elements:
        raise ValueError(f"conductivity has {len(sigma)} entries for {mesh.n_elements} elements")
    if mesh.n_electrodes < 2:
        raise MeshError("the complete electrode model needs at least two electrodes")
    if grounding not in GROUNDINGS:
        raise ValueError(f"grounding must be one of {GROUNDINGS}")
    geo = _Geometry(mesh)
    dof_of_node, electrode_dof, n = _dof_layout(mesh)
    d1 = mesh.dimension + 1

    # stiffness: K = sum_e sigma_e vol_e G_e G_e^T
    local = np.einsum("eik,ejk->eij", geo.grads, geo.grads) * geo.volumes[:, None, None]
    edofs = dof_of_node[mesh.elements]
    k_rows = np.repeat(edofs, d1, axis=1).ravel()
    k_cols = np.tile(edofs, (1, d1)).ravel()
    k_unit = local.ravel()
    k_elem = np.repeat(np.arange(mesh.n_elements), d1 * d1)

    rows, cols, vals = [k_rows], [k_cols], [k_unit * sigma.values[k_elem]]
    nf = mesh.dimension
    mass_ref = (np.ones((nf, nf)) + np.eye(nf)) / (nf * (nf + 1))
    for e in mesh.electrodes:
        if e.z == 0:
            continue
        area = facet_measures(mesh.nodes * MM, e.facets)
        fd = dof_of_node[e.facets]
        ed = electrode_dof[e.id]
        m = area[:, None, None] * mass_ref[None] / e.z
        rows.append(np.repeat(fd, nf, axis=1).ravel())
        cols.append(np.tile(fd, (1, nf)).ravel())
        vals.append(m.ravel())
        load = np.repeat(area / nf, nf) / e.z
        rows += [fd.ravel(), np.full(fd.size, ed), np.array([ed])]
        cols += [np.full(fd.size, ed), fd.ravel(), np.array([ed])]
        vals += [-load, -load, np.array([area.sum() / e.z])]

    r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    A = sp.csr_matrix((v, (r, c)), shape=(n, n))
    A.sum_duplicates()
    A.sort_indices()
    # map each stiffness COO entry to its CSR data slot for incremental updates
    k_map = _csr_positions(A, k_rows, k_cols)
    return CemSystem(mesh, sigma, grounding, dof_of_node, electrode_dof, n, A, k_map, k_unit, k_elem, geo)


def _csr_positions(A: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # CSR keys are sorted once indices are sorted, so a searchsorted finds each slot
    csr_rows = np.repeat(np.arange(A.shape[0]), np.diff(A.indptr))
    csr_keys = csr_rows * A.shape[1] + A.indices
    return np.searchsorted(csr_keys, rows * A.shape[1] + cols)


def solve_injection(system: CemSystem, inj: InjectionTone) -> FieldSolution:
    """Potentials and electrode voltages for current ``inj.amplitude`` from source to sink."""
    for eid in (inj.source, inj.sink):
        if eid not in system.electrode_dof:
            raise ValueError(f"injection electrode {eid} not in mesh")
    if inj.amplitude == 0:
        return FieldSolution(
            np.zeros(system.mesh.n_nodes),
            {eid: 0.0 for eid in system.electrode_dof},
            {eid: 0.0 for eid in system.electrode_dof},
        )
    b = system.rhs({inj.source: inj.amplitude, inj.sink: -inj.amplitude})
    x = system.solve_dofs(b)
    return FieldSolution(system.node_potentials(x), system.electrode_voltages(x), system.electrode_currents(x))


def unique_pairs(pairs: Sequence[tuple[int, int]]) -> list[tuple[int, int]]:
    seen: dict[tuple[int, int], None] = {}
    for p in pairs:
        seen.setdefault(tuple(p), None)
    return list(seen)


def pair_fields(system: CemSystem, pairs: Sequence[tuple[int, int]], amplitudes: Sequence[float] | None = None) -> np.ndarray:
    """Solve all drive pairs at once; returns dof vectors as columns."""
    amplitudes = [1.0] * len(pairs) if amplitudes is None else amplitudes
    B = np.zeros((system.n_dofs, len(pairs)))
    for k, ((s, t), a) in enumerate(zip(pairs, amplitudes)):
        B[:, k] = system.rhs({s: a, t: -a})
    return system.solve_dofs(B)


def forward_all(mesh: Mesh, sigma: ConductivityField, protocol: Protocol, system: CemSystem | None = None) -> np.ndarray:
    """Protocol voltages V_pos - V_neg in injection-major order."""
    protocol.check_against(mesh)
    system = system or assemble_cem_system(mesh, sigma)
    X = pair_fields(
        system,
        [(t.source, t.sink) for t in protocol.injections],
        [t.amplitude for t in protocol.injections],
    )
    out = np.empty(protocol.n_measurements)
    for m, (i, (p, n)) in enumerate(protocol.flat()):
        out[m] = X[system.electrode_dof[p], i] - X[system.electrode_dof[n], i]
    return out


def transfer_impedance(system: CemSystem, drive: tuple[int, int], measure: tuple[int, int]) -> float:
    x = pair_fields(system, [drive])[:, 0]
    return float(x[system.electrode_dof[measure[0]]] - x[system.electrode_dof[measure[1]]])


def element_gradients(system: CemSystem, x: np.ndarray) -> np.ndarray:
    """Per-element potential gradient (V/m) for dof vector(s) ``x``.

    ``x`` may be (n_dofs,) or (n_dofs, k); the result is (M, d) or (M, d, k).
    """
    u = x[system.dof_of_node]
    ue = u[system.mesh.elements]
    if ue.ndim == 2:
        return np.einsum("eid,ei->ed", system._geometry.grads, ue)
    return np.einsum("eid,eik->edk", system._geometry.grads, ue)

