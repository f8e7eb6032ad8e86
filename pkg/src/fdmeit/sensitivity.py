"""Adjoint sensitivity (Jacobian) of protocol voltages to element conductivity."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import (
    CemSystem,
    ConductivityField,
    Protocol,
    assemble_cem_system,
    element_gradients,
    pair_fields,
    unique_pairs,
)
from .mesh import Mesh


@dataclass(frozen=True, eq=False)
class Jacobian:
    """Measurement-by-column sensitivity in V per (S/m).

    Columns are mesh elements, or voxels after :func:`aggregate_to_hex`.
    """

    matrix: np.ndarray
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("Jacobian must be a 2D matrix")
        if not np.all(np.isfinite(m)):
            raise ValueError("Jacobian has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


def compute_jacobian(
    mesh: Mesh, sigma: ConductivityField, protocol: Protocol, system: CemSystem | None = None
) -> Jacobian:
    """J[m, k] = -int_k grad(u_drive) . grad(u_meas) dV.

    u_drive solves the measurement's injection at its amplitude and u_meas a
    unit current through the measurement pair.  One solve per distinct drive
    and per distinct measurement pair, sharing one factorisation.
    """
    protocol.check_against(mesh)
    system = system or assemble_cem_system(mesh, sigma)
    drives = [(t.source, t.sink) for t in protocol.injections]
    Xd = pair_fields(system, drives, [t.amplitude for t in protocol.injections])
    meas = unique_pairs([pair for _, pair in protocol.flat()])
    Xm = pair_fields(system, meas)
    Gd = element_gradients(system, Xd)
    Gm = element_gradients(system, Xm)
    vol = system._geometry.volumes
    col = {pair: k for k, pair in enumerate(meas)}
    J = np.empty((protocol.n_measurements, mesh.n_elements))
    for m, (i, pair) in enumerate(protocol.flat()):
        J[m] = -np.einsum("ed,ed->e", Gd[:, :, i], Gm[:, :, col[pair]]) * vol
    prov = {"mesh": mesh.digest(), "sigma": sigma.digest(), "protocol": protocol.digest()}
    return Jacobian(J, prov)


def sensitivity_map(J: Jacobian, measurement_index: int, volumes: np.ndarray | None = None) -> np.ndarray:
    """One row of J as a per-column field; divided by ``volumes`` when given (density)."""
    if not 0 <= measurement_index < J.shape[0]:
        raise IndexError(f"measurement index {measurement_index} outside 0..{J.shape[0] - 1}")
    row = np.array(J.matrix[measurement_index])
    if volumes is not None:
        row = row / volumes
    return row


@dataclass(frozen=True, eq=False)
class HexSubdomain:
    """Axis-aligned voxel grid; only voxels holding an element centroid are kept.

    ``element_voxel[e]`` is the column of element ``e`` (-1 outside) and
    ``weights[e]`` its share of that voxel's conductivity (1 inside, 0 outside).
    """

    origin: np.ndarray
    voxel_size: float
    grid_shape: tuple[int, ...]
    voxel_index: np.ndarray
    element_voxel: np.ndarray
    weights: np.ndarray

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_index)

    def voxel_centres(self) -> np.ndarray:
        ijk = np.stack(np.unravel_index(self.voxel_index, self.grid_shape), axis=1)
        return self.origin + (ijk + 0.5) * self.voxel_size

    def to_elements(self, voxel_values: np.ndarray) -> np.ndarray:
        """Broadcast voxel values back onto elements (0 outside the subdomain)."""
        out = np.zeros(len(self.element_voxel))
        inside = self.element_voxel >= 0
        out[inside] = np.asarray(voxel_values)[self.element_voxel[inside]] * self.weights[inside]
        return out

    def aggregation_matrix(self) -> np.ndarray:
        W = np.zeros((len(self.element_voxel), self.n_voxels))
        inside = np.flatnonzero(self.element_voxel >= 0)
        W[inside, self.element_voxel[inside]] = self.weights[inside]
        return W


def build_hex_subdomain(mesh: Mesh, voxel_size: float, bounds=None) -> HexSubdomain:
    centroids = mesh.centroids
    if bounds is None:
        lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    shape = tuple(int(max(1, np.ceil((h - l) / voxel_size - 1e-9))) for l, h in zip(lo, hi))
    ijk = np.floor((centroids - lo) / voxel_size).astype(np.int64)
    inside = np.all((centroids >= lo) & (centroids <= hi), axis=1)
    ijk = np.clip(ijk, 0, np.array(shape) - 1)
    flat = np.full(mesh.n_elements, -1, dtype=np.int64)
    flat[inside] = np.ravel_multi_index(tuple(ijk[inside].T), shape)
    if not inside.any():
        raise ValueError("voxel grid does not intersect the mesh")
    occupied, compact = np.unique(flat[inside], return_inverse=True)
    element_voxel = np.full(mesh.n_elements, -1, dtype=np.int64)
    element_voxel[inside] = compact
    weights = inside.astype(np.float64)
    return HexSubdomain(lo, float(voxel_size), shape, occupied, element_voxel, weights)


def aggregate_to_hex(J: Jacobian, mesh: Mesh, voxel_size: float = 5.0, bounds=None) -> tuple[Jacobian, HexSubdomain]:
    """Sum element columns into the voxel holding each element centroid.

    A voxel's conductivity change applies to all of its elements, so its
    column is the weighted sum of their columns; sensitivity mass over the
    covered elements is conserved.
    """
    if J.shape[1] != mesh.n_elements:
        raise ValueError("Jacobian columns do not match mesh elements")
    if not voxel_size > mesh.edge_lengths().min():
        raise ValueError(f"voxel size {voxel_size} must exceed the smallest element edge")
    sub = build_hex_subdomain(mesh, voxel_size, bounds)
    inside = np.flatnonzero(sub.element_voxel >= 0)
    out = np.zeros((J.shape[0], sub.n_voxels))
    cols = J.matrix[:, inside] * sub.weights[inside]
    for r in range(J.shape[0]):
        out[r] = np.bincount(sub.element_voxel[inside], weights=cols[r], minlength=sub.n_voxels)
    prov = dict(J.provenance, voxel_size=repr(float(voxel_size)))
    return Jacobian(out, prov), sub


# -- file format ---------------------------------------------------------------


def save_jacobian(J: Jacobian, path) -> None:
    """``EITJAC 1`` text header, then row-major little-endian float64."""
    header = ["EITJAC 1", f"rows {J.shape[0]}", f"cols {J.shape[1]}"]
    header += [f"{k} {v}" for k, v in sorted(J.provenance.items())]
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(J.matrix, dtype="<f8").tobytes())


def load_jacobian(path) -> Jacobian:
    data = Path(path).read_bytes()
    pos, meta = 0, {}
    first = True
    while True:
        nl = data.index(b"\n", pos)
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            if line != "EITJAC 1":
                raise ValueError(f"{path}: expected header 'EITJAC 1'")
            first = False
            continue
        if line == "end":
            break
        key, _, value = line.partition(" ")
        meta[key] = value
    rows, cols = int(meta.pop("rows")), int(meta.pop("cols"))
    body = data[pos:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols * 8} data bytes, found {len(body)}")
    return Jacobian(np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy(), meta)
