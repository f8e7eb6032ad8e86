"""Simplicial mesh with electrode patches.

Coordinates are in millimetres throughout the mesh layer; the FEM layer
converts to SI when assembling.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from math import factorial

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class MeshError(ValueError):
    """Raised when a mesh violates one of its invariants."""


@dataclass(frozen=True)
class ElectrodePatch:
    """A cluster of boundary facets acting as one electrode.

    ``facets`` holds node-index tuples (triangles in 3D, segments in 2D).
    ``z`` is the contact impedance in ohm*m^2 (ohm*m in 2D); zero selects
    the shunt (perfectly conducting) model.
    """

    id: int
    facets: np.ndarray
    z: float = 1e-3

    def __post_init__(self):
        facets = np.asarray(self.facets, dtype=np.int64)
        if facets.ndim != 2:
            raise MeshError(f"electrode {self.id}: facets must be a 2D array")
        facets.setflags(write=False)
        object.__setattr__(self, "facets", facets)
        if self.z < 0 or not np.isfinite(self.z):
            raise MeshError(f"electrode {self.id}: contact impedance must be >= 0, got {self.z}")

    def __eq__(self, other):
        if not isinstance(other, ElectrodePatch):
            return NotImplemented
        return (
            self.id == other.id
            and self.z == other.z
            and np.array_equal(self.facets, other.facets)
        )

    __hash__ = None

    @property
    def nodes(self) -> np.ndarray:
        return np.unique(self.facets)


def simplex_measures(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Signed volume (3D) or area (2D) of full-dimensional simplices."""
    p = points[simplices]
    d = p.shape[2]
    edges = p[:, 1:, :] - p[:, :1, :]
    return np.linalg.det(edges) / factorial(d)


def facet_measures(points: np.ndarray, facets: np.ndarray) -> np.ndarray:
    """Unsigned measure of (d-1)-simplices embedded in d dimensions."""
    p = points[facets]
    if facets.shape[1] == 2:
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    if facets.shape[1] == 3:
        cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)
    raise ValueError(f"unsupported facet size {facets.shape[1]}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable simplicial mesh (triangles in 2D, tetrahedra in 3D).

    Invariants are checked on construction: positive element measures,
    electrode facets on the boundary, pairwise-disjoint electrodes and a
    single connected component.
    """

    nodes: np.ndarray
    elements: np.ndarray
    electrodes: tuple[ElectrodePatch, ...] = ()
    region_tags: np.ndarray | None = None
    region_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.float64)
        elements = np.array(self.elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise MeshError("nodes must be an (N, 2) or (N, 3) array")
        if elements.ndim != 2 or elements.shape[1] != nodes.shape[1] + 1:
            raise MeshError(
                f"{nodes.shape[1]}D mesh needs elements with {nodes.shape[1] + 1} nodes"
            )
        nodes.setflags(write=False)
        elements.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "electrodes", tuple(self.electrodes))
        if self.region_tags is not None:
            tags = np.array(self.region_tags, dtype=np.int64)
            if tags.shape != (len(elements),):
                raise MeshError("region_tags must have one entry per element")
            tags.setflags(write=False)
            object.__setattr__(self, "region_tags", tags)
        object.__setattr__(self, "region_names", dict(self.region_names))
        self._validate()

    # -- basic geometry -------------------------------------------------

    @property
    def dimension(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrodes)

    @cached_property
    def volumes(self) -> np.ndarray:
        """Element volumes (mm^3) or areas (mm^2) in 2D."""
        return simplex_measures(self.nodes, self.elements)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def _faces(self):
        d = self.dimension
        local = np.array(list(itertools.combinations(range(d + 1), d)))
        faces = self.elements[:, local].reshape(-1, d)
        owner = np.repeat(np.arange(self.n_elements), d + 1)
        opposite_local = np.array([sorted(set(range(d + 1)) - set(c))[0] for c in local])
        opposite = self.elements[:, opposite_local].reshape(-1)
        keys = np.sort(faces, axis=1)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        on_boundary = counts[inverse] == 1
        return faces[on_boundary], owner[on_boundary], opposite[on_boundary]

    @property
    def boundary_faces(self) -> np.ndarray:
        """Boundary facets as node tuples."""
        return self._faces[0]

    @cached_property
    def boundary_owner(self) -> np.ndarray:
        return self._faces[1]

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        """Unit outward normals of the boundary facets."""
        faces, _, opposite = self._faces
        p = self.nodes[faces]
        if self.dimension == 3:
            n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        else:
            t = p[:, 1] - p[:, 0]
            n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        inward = self.nodes[opposite] - p[:, 0]
        flip = np.einsum("ij,ij->i", n, inward) > 0
        n[flip] *= -1
        return n

    @cached_property
    def _boundary_lookup(self) -> dict[tuple[int, ...], int]:
        keys = np.sort(self.boundary_faces, axis=1)
        return {tuple(k): i for i, k in enumerate(keys.tolist())}

    def facet_index(self, facets: np.ndarray) -> np.ndarray:
        """Boundary-facet indices of node-tuple facets (-1 if not on the boundary)."""
        lookup = self._boundary_lookup
        keys = np.sort(np.asarray(facets), axis=1).tolist()
        return np.array([lookup.get(tuple(k), -1) for k in keys], dtype=np.int64)

    def electrode(self, eid: int) -> ElectrodePatch:
        for e in self.electrodes:
            if e.id == eid:
                return e
        raise KeyError(f"no electrode with id {eid}")

    def electrode_area(self, eid: int) -> float:
        """Electrode area in mm^2 (length in mm for 2D meshes)."""
        return float(facet_measures(self.nodes, self.electrode(eid).facets).sum())

    def electrode_centroid(self, eid: int) -> np.ndarray:
        e = self.electrode(eid)
        w = facet_measures(self.nodes, e.facets)
        c = self.nodes[e.facets].mean(axis=1)
        return (w[:, None] * c).sum(axis=0) / w.sum()

    @property
    def electrode_ids(self) -> list[int]:
        return [e.id for e in self.electrodes]

    def region_mask(self, name: str) -> np.ndarray:
        if self.region_tags is None:
            raise MeshError("mesh has no region tags")
        for tag, n in self.region_names.items():
            if n == name:
                return self.region_tags == tag
        raise KeyError(f"no region named {name!r}")

    def edge_lengths(self) -> np.ndarray:
        d = self.dimension
        pairs = np.array(list(itertools.combinations(range(d + 1), 2)))
        p = self.nodes[self.elements]
        return np.linalg.norm(p[:, pairs[:, 0]] - p[:, pairs[:, 1]], axis=2)

    def with_electrodes(self, electrodes) -> "Mesh":
        return Mesh(self.nodes, self.elements, tuple(electrodes), self.region_tags, self.region_names)

    def with_contact_impedance(self, z: float) -> "Mesh":
        return self.with_electrodes(ElectrodePatch(e.id, e.facets, z) for e in self.electrodes)

    # -- identity -------------------------------------------------------

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.nodes.tobytes())
        h.update(self.elements.tobytes())
        if self.region_tags is not None:
            h.update(self.region_tags.tobytes())
        for e in self.electrodes:
            h.update(f"{e.id}:{e.z!r}".encode())
            h.update(e.facets.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        tags_equal = (
            (self.region_tags is None and other.region_tags is None)
            or (
                self.region_tags is not None
                and other.region_tags is not None
                and np.array_equal(self.region_tags, other.region_tags)
            )
        )
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.elements, other.elements)
            and self.electrodes == other.electrodes
            and tags_equal
            and self.region_names == other.region_names
        )

    __hash__ = None

    # -- validation -----------------------------------------------------

    def _validate(self):
        n = self.n_nodes
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise MeshError("element references a node index out of range")
        vol = self.volumes
        bad = np.flatnonzero(~(vol > 0))
        if bad.size:
            raise MeshError(
                f"{bad.size} element(s) with non-positive measure, first is element {bad[0]} "
                f"(measure {vol[bad[0]]:.3g})"
            )
        if self.n_elements:
            k = self.elements.shape[1]
            rows = np.repeat(np.arange(self.n_elements), k)
            adj = coo_matrix(
                (np.ones(rows.size), (rows, self.elements.ravel())),
                shape=(self.n_elements, n),
            ).tocsr()
            used = np.unique(self.elements)
            graph = (adj.T @ adj)[used][:, used]
            ncomp, _ = connected_components(graph, directed=False)
            if ncomp != 1:
                raise MeshError(f"mesh is not connected ({ncomp} components)")

        seen_ids = set()
        seen_facets: dict[tuple[int, ...], int] = {}
        for e in self.electrodes:
            if e.id in seen_ids:
                raise MeshError(f"duplicate electrode id {e.id}")
            seen_ids.add(e.id)
            if e.facets.shape[0] == 0:
                raise MeshError(f"electrode {e.id} has no facets")
            if e.facets.shape[1] != self.dimension:
                raise MeshError(f"electrode {e.id}: facets must have {self.dimension} nodes")
            if e.facets.min() < 0 or e.facets.max() >= n:
                raise MeshError(f"electrode {e.id}: facet node index out of range")
            idx = self.facet_index(e.facets)
            if (idx < 0).any():
                first = e.facets[np.flatnonzero(idx < 0)[0]].tolist()
                raise MeshError(f"electrode {e.id}: facet {first} is not on the mesh boundary")
            for key in np.sort(e.facets, axis=1).tolist():
                key = tuple(key)
                if key in seen_facets:
                    raise MeshError(
                        f"electrodes {seen_facets[key]} and {e.id} share facet {list(key)}"
                    )
                seen_facets[key] = e.id
            if not self.electrode_area(e.id) > 0:
                raise MeshError(f"electrode {e.id} has zero area")
