"""Structured simplicial meshes for boxes and the two actuator geometries."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ElectrodePatch, Mesh, MeshError, simplex_measures

TOP, BOTTOM = "max", "min"


@dataclass(frozen=True)
class ElectrodeSpec:
    """Rectangular electrode on a planar boundary face.

    ``axis``/``side`` choose the face (e.g. axis 2, side "max" is the top of
    a 3D box).  ``center`` and ``size`` give the in-plane rectangle over the
    remaining axes in their natural order; ``size=None`` covers the whole face.
    """

    id: int
    axis: int
    side: str = TOP
    center: tuple[float, ...] | None = None
    size: tuple[float, ...] | None = None
    z: float = 1e-3

    def in_plane_axes(self, dim: int) -> list[int]:
        return [a for a in range(dim) if a != self.axis]

    def bounds(self, dim: int) -> list[tuple[float, float]] | None:
        if self.size is None:
            return None
        if self.center is None or len(self.center) != dim - 1 or len(self.size) != dim - 1:
            raise MeshError(f"electrode {self.id}: center and size need {dim - 1} entries")
        return [(c - s / 2, c + s / 2) for c, s in zip(self.center, self.size)]


def axis_points(
    start: float,
    stop: float,
    h: float | Callable[[float], float],
    required: Sequence[float] = (),
) -> np.ndarray:
    """Grid coordinates on [start, stop] that hit every required point.

    Each gap between consecutive required points is split uniformly into
    ceil(gap / h) cells; ``h`` may depend on the gap midpoint.
    """
    tol = 1e-9 * max(1.0, abs(stop - start))
    pts = sorted({start, stop, *(r for r in required if start + tol < r < stop - tol)})
    merged = [pts[0]]
    for p in pts[1:]:
        if p - merged[-1] > tol:
            merged.append(p)
    merged[-1] = stop
    out = [merged[0]]
    for a, b in zip(merged, merged[1:]):
        step = h((a + b) / 2) if callable(h) else h
        n = max(1, math.ceil((b - a) / step - 1e-9))
        out.extend(a + (b - a) * np.arange(1, n + 1) / n)
    out[-1] = stop
    return np.asarray(out, dtype=np.float64)


def _kuhn_templates(dim: int) -> np.ndarray:
    """Local vertex bit-vectors of the dim! simplices sharing the cell diagonal."""
    out = []
    for perm in itertools.permutations(range(dim)):
        verts = [np.zeros(dim, dtype=np.int64)]
        for a in perm:
            v = verts[-1].copy()
            v[a] = 1
            verts.append(v)
        out.append(np.array(verts))
    return np.array(out)


def structured_simplices(shape: Sequence[int], mirror: Sequence[bool] | None = None) -> np.ndarray:
    """Element connectivity of a structured grid with ``shape`` nodes per axis.

    Cells on the far half of a mirrored axis use the reflected decomposition,
    so the mesh is exactly mirror symmetric about that axis' midplane when
    the node coordinates are.
    """
    shape = tuple(int(s) for s in shape)
    dim = len(shape)
    mirror = tuple(mirror) if mirror is not None else (False,) * dim
    cells = np.stack(
        np.meshgrid(*[np.arange(s - 1) for s in shape], indexing="ij"), axis=-1
    ).reshape(-1, dim)
    flip = np.zeros_like(cells, dtype=bool)
    for a in range(dim):
        if mirror[a]:
            ncell = shape[a] - 1
            flip[:, a] = 2 * cells[:, a] + 1 > ncell
    elements = []
    for template in _kuhn_templates(dim):
        bits = np.where(flip[:, None, :], 1 - template[None, :, :], template[None, :, :])
        idx = cells[:, None, :] + bits
        elements.append(np.ravel_multi_index(tuple(idx[..., a] for a in range(dim)), shape))
    return np.stack(elements, axis=1).reshape(-1, dim + 1)


def _orient(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    elements = elements.copy()
    neg = simplex_measures(nodes, elements) < 0
    elements[neg, -2], elements[neg, -1] = elements[neg, -1], elements[neg, -2].copy()
    return elements


def _grid_nodes(axes: Sequence[np.ndarray]) -> np.ndarray:
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def attach_electrodes(mesh: Mesh, specs: Sequence[ElectrodeSpec]) -> Mesh:
    """Return ``mesh`` with electrodes built from boundary facets matching ``specs``."""
    faces = mesh.boundary_faces
    pts = mesh.nodes[faces]
    centroid = pts.mean(axis=1)
    scale = float(np.ptp(mesh.nodes, axis=0).max())
    tol = 1e-9 * scale
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    patches = []
    for spec in specs:
        plane = hi[spec.axis] if spec.side == TOP else lo[spec.axis]
        on_plane = np.all(np.abs(pts[:, :, spec.axis] - plane) <= tol, axis=1)
        sel = on_plane
        bounds = spec.bounds(mesh.dimension)
        if bounds is not None:
            for a, (b0, b1) in zip(spec.in_plane_axes(mesh.dimension), bounds):
                if b0 < lo[a] - tol or b1 > hi[a] + tol:
                    raise MeshError(f"electrode {spec.id}: rectangle [{b0:g}, {b1:g}] overhangs the face along axis {a}")
                sel = sel &(centroid[:, a] > b0 - tol) & (centroid[:, a] < b1 + tol)
        if not sel.any():
            raise MeshError(f"electrode {spec.id}: no boundary facets inside its rectangle")
        patches.append(ElectrodePatch(spec.id, faces[sel], spec.z))
    return mesh.with_electrodes(patches)


def _electrode_breaks(specs: Sequence[ElectrodeSpec], dim: int) -> list[list[float]]:
    breaks: list[list[float]] = [[] for _ in range(dim)]
    for spec in specs:
        bounds = spec.bounds(dim)
        if bounds is None:
            continue
        for a, (b0, b1) in zip(spec.in_plane_axes(dim), bounds):
            breaks[a] += [b0, b1]
    return breaks


def generate_box_mesh(
    lengths: Sequence[float],
    target_edge_length: float,
    electrodes: Sequence[ElectrodeSpec] = (),
    mirror: Sequence[bool] | None = None,
) -> Mesh:
    """Structured mesh of the box [0, L0] x [0, L1] (x [0, L2]).

    Uses two triangles per square or six tetrahedra per cube.  Grid lines are
    inserted at electrode rectangle edges so patch areas are exact.
    """
    lengths = [float(v) for v in lengths]
    if len(lengths) not in (2, 3):
        raise MeshError("box must be 2D or 3D")
    if min(lengths) <= 0:
        raise MeshError(f"box lengths must be positive, got {lengths}")
    if not target_edge_length > 0:
        raise MeshError("target edge length must be positive")
    if target_edge_length > min(lengths) * (1 + 1e-12):
        raise MeshError(
            f"target edge length {target_edge_length} exceeds the smallest box dimension {min(lengths)}"
        )
    dim = len(lengths)
    mirror = tuple(mirror) if mirror is not None else (False,) * dim
    breaks = _electrode_breaks(electrodes, dim)
    axes = []
    for a, L in enumerate(lengths):
        req = breaks[a] + ([L / 2] if mirror[a] else [])
        axes.append(axis_points(0.0, L, target_edge_length, req))
    nodes = _grid_nodes(axes)
    elements = _orient(nodes, structured_simplices([len(x) for x in axes], mirror))
    mesh = Mesh(nodes, elements, region_tags=np.ones(len(elements), dtype=np.int64),
                region_names={1: "domain"})
    if electrodes:
        mesh = attach_electrodes(mesh, electrodes)
    return mesh


# -- hinged actuator ------------------------------------------------------


@dataclass(frozen=True)
class HingedActuatorParams:
    """Inflated double-hinge actuator, dimensions in mm.

    The hinge is a diamond-shaped constriction: the conductive channel tapers
    linearly from the full width to ``hinge_width`` at the hinge axis over
    ``hinge_length / 2`` on either side.
    """

    length: float = 200.0
    width: float = 50.0
    thickness: float = 8.0
    hinge_length: float = 20.0
    hinge_width: float = 10.0
    electrode_size: tuple[float, float] = (2.0, 2.0)
    electrode_inset: float = 8.0
    contact_impedance: float = 1e-3
    target_edge_length: float = 5.0
    hinge_edge_length: float = 2.0
    thickness_cells: int = 2

    @property
    def hinge_centres(self) -> tuple[float, float]:
        return (self.length / 3, 2 * self.length / 3)

    def electrode_specs(self) -> list[ElectrodeSpec]:
        (c1, c2), half = self.hinge_centres, self.hinge_length / 2
        yc = self.width / 2
        xs = {
            1: (c1 - half - self.electrode_inset, TOP),
            2: (c1 - half - self.electrode_inset, BOTTOM),
            3: (c1 + half + self.electrode_inset, TOP),
            4: (c2 - half - self.electrode_inset, BOTTOM),
            5: (c2 + half + self.electrode_inset, TOP),
            6: (c2 + half + self.electrode_inset, BOTTOM),
        }
        return [
            ElectrodeSpec(eid, axis=2, side=side, center=(x, yc), size=self.electrode_size,
                          z=self.contact_impedance)
            for eid, (x, side) in xs.items()
        ]


HINGED_REGIONS = {1: "chamber-1", 2: "hinge-1", 3: "chamber-2", 4: "hinge-2", 5: "chamber-3"}


def generate_hinged_actuator_mesh(params: HingedActuatorParams | None = None) -> Mesh:
    """Three saline chambers joined by two diamond-constricted hinges, six electrodes."""
    p = params or HingedActuatorParams()
    if p.hinge_width >= p.width:
        raise MeshError(f"hinge width {p.hinge_width} must be smaller than actuator width {p.width}")
    if min(p.length, p.width, p.thickness, p.hinge_length, p.hinge_width) <= 0:
        raise MeshError("actuator dimensions must be positive")
    half = p.hinge_length / 2
    centres = p.hinge_centres
    if centres[0] - half <= 0 or centres[1] + half >= p.length or centres[0] + half >= centres[1] - half:
        raise MeshError("hinges do not fit along the actuator length")
    specs = p.electrode_specs()
    for s in specs:
        x, y = s.center
        ex, ey = s.size
        in_chamber = all(abs(x - c) >= half + ex / 2 for c in centres)
        if not (in_chamber and ex / 2 <= x <= p.length - ex / 2 and ey / 2 <= y <= p.width - ey / 2):
            raise MeshError(f"electrode {s.id} does not fit inside a chamber")

    def in_hinge(x):
        return any(abs(x - c) < half for c in centres)

    breaks = _electrode_breaks(specs, 3)
    xreq = breaks[0] + [c + o for c in centres for o in (-half, 0.0, half)] + [p.length / 2]
    xs = axis_points(0.0, p.length, lambda m: p.hinge_edge_length if in_hinge(m) else p.target_edge_length, xreq)
    ys = axis_points(0.0, p.width, p.target_edge_length, breaks[1] + [p.width / 2])
    zs = np.linspace(0.0, p.thickness, max(1, p.thickness_cells) + 1)
    nodes = _grid_nodes([xs, ys, zs])

    def local_width(x):
        w = np.full_like(x, p.width)
        for c in centres:
            t = np.clip(np.abs(x - c) / half, 0.0, 1.0)
            w = np.minimum(w, p.hinge_width + (p.width - p.hinge_width) * t)
        return w

    yc = p.width / 2
    nodes[:, 1] = yc + (nodes[:, 1] - yc) * local_width(nodes[:, 0]) / p.width
    elements = _orient(nodes, structured_simplices([len(xs), len(ys), len(zs)], (True, False, False)))
    cx = nodes[elements].mean(axis=1)[:, 0]
    tags = np.full(len(elements), 1, dtype=np.int64)
    tags[cx > centres[0] - half] = 2
    tags[cx > centres[0] + half] = 3
    tags[cx > centres[1] - half] = 4
    tags[cx > centres[1] + half] = 5
    mesh = Mesh(nodes, elements, region_tags=tags, region_names=HINGED_REGIONS)
    return attach_electrodes(mesh, specs)


# -- finger chamber -------------------------------------------------------


@dataclass(frozen=True)
class FingerChamberParams:
    """One hydraulic chamber of the finger, dimensions in mm.

    ``length`` runs along the finger, ``width`` across it; the two electrodes
    sit on the top film on either side of the chamber centre, mirrored about
    the mid-width plane.
    """

    length: float = 10.0
    width: float = 25.0
    thickness: float = 5.0
    electrode_size: tuple[float, float] = (2.0, 2.0)
    electrode_inset: float = 3.0
    contact_impedance: float = 1e-3
    target_edge_length: float = 1.25

    def electrode_specs(self) -> list[ElectrodeSpec]:
        xc = self.length / 2
        return [
            ElectrodeSpec(1, axis=2, side=TOP, center=(xc, self.electrode_inset),
                          size=self.electrode_size, z=self.contact_impedance),
            ElectrodeSpec(2, axis=2, side=TOP, center=(xc, self.width - self.electrode_inset),
                          size=self.electrode_size, z=self.contact_impedance),
        ]


def generate_finger_chamber_mesh(params: FingerChamberParams | None = None) -> Mesh:
    """Single hydraulic finger chamber with two electrodes across its centre."""
    p = params or FingerChamberParams()
    if min(p.length, p.width, p.thickness) <= 0:
        raise MeshError("chamber dimensions must be positive")
    ex, ey = p.electrode_size
    if ex > p.length or p.electrode_inset - ey / 2 < 0 or 2 * p.electrode_inset + ey > p.width:
        raise MeshError("electrodes do not fit on the chamber")
    h = min(p.target_edge_length, p.thickness)
    mesh = generate_box_mesh(
        (p.length, p.width, p.thickness), h, electrodes=p.electrode_specs(), mirror=(True, True, False)
    )
    return Mesh(mesh.nodes, mesh.elements, mesh.electrodes,
                np.ones(mesh.n_elements, dtype=np.int64), {1: "chamber"})


def mirror_map(mesh: Mesh, axis: int, tol: float = 1e-9):
    """Node and electrode permutations of the reflection about ``axis``' midplane.

    Returns ``(node_perm, electrode_perm)`` or raises MeshError if the mesh is
    not mirror symmetric.
    """
    lo, hi = mesh.nodes[:, axis].min(), mesh.nodes[:, axis].max()
    reflected = mesh.nodes.copy()
    reflected[:, axis] = lo + hi - reflected[:, axis]
    scale = max(1.0, float(np.ptp(mesh.nodes, axis=0).max()))
    decimals = int(-math.log10(tol * scale)) - 1
    keys = {tuple(np.round(r, decimals)): i for i, r in enumerate(mesh.nodes.tolist())}
    node_perm = np.empty(mesh.n_nodes, dtype=np.int64)
    for i, r in enumerate(reflected):
        j = keys.get(tuple(np.round(r, decimals)))
        if j is None:
            raise MeshError(f"node {i} has no mirror image")
        node_perm[i] = j
    own = {tuple(sorted(e)) for e in mesh.elements.tolist()}
    for e in node_perm[mesh.elements].tolist():
        if tuple(sorted(e)) not in own:
            raise MeshError(f"element {e} has no mirror image")
    facet_owner = {}
    for e in mesh.electrodes:
        for f in np.sort(e.facets, axis=1).tolist():
            facet_owner[tuple(f)] = e.id
    electrode_perm = {}
    for e in mesh.electrodes:
        images = {facet_owner.get(tuple(sorted(f))) for f in node_perm[e.facets].tolist()}
        if len(images) != 1 or None in images:
            raise MeshError(f"electrode {e.id} has no mirror image")
        electrode_perm[e.id] = images.pop()
    return node_perm, electrode_perm
