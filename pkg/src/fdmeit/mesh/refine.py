"""Local conforming refinement by longest-edge bisection."""

from __future__ import annotations

import itertools
import logging

import numpy as np

from .core import ElectrodePatch, Mesh, MeshError, facet_measures, simplex_measures

logger = logging.getLogger(__name__)


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class _Bisector:
    """Mutable working state for one refinement call."""

    def __init__(self, mesh: Mesh):
        self.nodes = [tuple(p) for p in mesh.nodes.tolist()]
        self.elements = [tuple(e) for e in mesh.elements.tolist()]
        self.tags = list(mesh.region_tags.tolist()) if mesh.region_tags is not None else None
        self.midpoints: dict[tuple[int, int], int] = {}
        self.marked: set[tuple[int, int]] = set()
        self.pairs = list(itertools.combinations(range(mesh.dimension + 1), 2))
        self._longest: dict[tuple[int, ...], tuple[int, int]] = {}

    def length2(self, a: int, b: int) -> float:
        pa, pb = self.nodes[a], self.nodes[b]
        return sum((x - y) ** 2 for x, y in zip(pa, pb))

    def longest_edge(self, elem: tuple[int, ...]) -> tuple[int, int]:
        cached = self._longest.get(elem)
        if cached is not None:
            return cached
        # ties broken by global node ids so shared edges are chosen consistently
        best = None
        for i, j in self.pairs:
            key = _edge_key(elem[i], elem[j])
            score = (self.length2(*key), -key[0], -key[1])
            if best is None or score > best[0]:
                best = (score, key)
        self._longest[elem] = best[1]
        return best[1]

    def edges(self, elem):
        return [_edge_key(elem[i], elem[j]) for i, j in self.pairs]

    def midpoint(self, key: tuple[int, int]) -> int:
        m = self.midpoints.get(key)
        if m is None:
            pa, pb = self.nodes[key[0]], self.nodes[key[1]]
            self.nodes.append(tuple((x + y) / 2 for x, y in zip(pa, pb)))
            m = len(self.nodes) - 1
            self.midpoints[key] = m
        return m

    def run(self, seeds: list[int]):
        for k in seeds:
            self.marked.add(self.longest_edge(self.elements[k]))
        while True:
            # closure: any element touching a marked edge marks its longest edge
            changed = True
            while changed:
                changed = False
                for elem in self.elements:
                    if any(e in self.marked for e in self.edges(elem)):
                        le = self.longest_edge(elem)
                        if le not in self.marked:
                            self.marked.add(le)
                            changed = True
            new_elements, new_tags, split_any = [], [], False
            for idx, elem in enumerate(self.elements):
                le = self.longest_edge(elem)
                if le in self.marked:
                    split_any = True
                    m = self.midpoint(le)
                    for end in le:
                        child = tuple(m if v == (le[1] if end == le[0] else le[0]) else v for v in elem)
                        new_elements.append(child)
                        if self.tags is not None:
                            new_tags.append(self.tags[idx])
                else:
                    new_elements.append(elem)
                    if self.tags is not None:
                        new_tags.append(self.tags[idx])
            self.elements = new_elements
            self.tags = new_tags if self.tags is not None else None
            # marks survive only on edges some element still has to split
            alive = {e for elem in self.elements for e in self.edges(elem)}
            self.marked &= alive
            if not split_any:
                break


def _point_in_facets(points: np.ndarray, facet_pts: np.ndarray, tol: float) -> np.ndarray:
    """Index of the facet containing each point (or -1); facets are (k, d, d) coordinates."""
    k, nv, dim = facet_pts.shape
    out = np.full(len(points), -1, dtype=np.int64)
    if nv == 2:
        a, b = facet_pts[:, 0], facet_pts[:, 1]
        ab = b - a
        for i, p in enumerate(points):
            ap = p - a
            t = np.einsum("ij,ij->i", ap, ab) / np.einsum("ij,ij->i", ab, ab)
            dist = np.linalg.norm(ap - t[:, None] * ab, axis=1)
            hit = np.flatnonzero((t > -tol) & (t < 1 + tol) & (dist < tol * np.linalg.norm(ab, axis=1)))
            if hit.size:
                out[i] = hit[0]
        return out
    a, b, c = facet_pts[:, 0], facet_pts[:, 1], facet_pts[:, 2]
    v0, v1 = b - a, c - a
    n = np.cross(v0, v1)
    nn = np.linalg.norm(n, axis=1)
    d00 = np.einsum("ij,ij->i", v0, v0)
    d01 = np.einsum("ij,ij->i", v0, v1)
    d11 = np.einsum("ij,ij->i", v1, v1)
    den = d00 * d11 - d01 * d01
    scale = np.sqrt(np.maximum(d00, d11))
    for i, p in enumerate(points):
        v2 = p - a
        plane = np.abs(np.einsum("ij,ij->i", v2, n)) / nn
        d20 = np.einsum("ij,ij->i", v2, v0)
        d21 = np.einsum("ij,ij->i", v2, v1)
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        hit = np.flatnonzero((plane < tol * scale) & (v > -tol) & (w > -tol) & (v + w < 1 + tol))
        if hit.size:
            out[i] = hit[0]
    return out


def refine_near_electrodes(mesh: Mesh, radius: float, factor: float = 2.0, max_passes: int = 12) -> Mesh:
    """Bisect elements whose centroid lies within ``radius`` mm of an electrode centroid.

    Elements in range are bisected until their longest edge is at most
    ``1/factor`` of the longest in-range edge of the input.  ``factor == 1``
    returns the mesh unchanged.  Refinement is conforming and never moves
    boundary geometry; electrode patches are rebuilt from the new boundary
    facets lying inside the original patches.
    """
    if not radius > 0:
        raise MeshError(f"refinement radius must be positive, got {radius}")
    if factor < 1:
        raise MeshError(f"refinement factor must be >= 1, got {factor}")
    if factor == 1:
        return mesh
    centres = np.array([mesh.electrode_centroid(e) for e in mesh.electrode_ids]) if mesh.electrodes else np.empty((0, mesh.dimension))

    def in_range(m: Mesh) -> np.ndarray:
        if centres.size == 0:
            return np.zeros(m.n_elements, dtype=bool)
        d = np.linalg.norm(m.centroids[:, None, :] - centres[None, :, :], axis=2)
        return (d <= radius).any(axis=1)

    sel = in_range(mesh)
    if not sel.any():
        return mesh
    target = mesh.edge_lengths()[sel].max() / factor
    out = mesh
    for _ in range(max_passes):
        sel = in_range(out) & (out.edge_lengths().max(axis=1) > target * (1 + 1e-12))
        if not sel.any():
            break
        out = bisect_elements(out, np.flatnonzero(sel))
    return out


def refine_uniform(mesh: Mesh, factor: float = 2.0) -> Mesh:
    """Bisect every element until all edges shrink by ``factor``."""
    if factor == 1:
        return mesh
    target = mesh.edge_lengths().max() / factor
    out = mesh
    for _ in range(12):
        sel = out.edge_lengths().max(axis=1) > target * (1 + 1e-12)
        if not sel.any():
            break
        out = bisect_elements(out, np.flatnonzero(sel))
    return out


def bisect_elements(mesh: Mesh, elements: np.ndarray) -> Mesh:
    """Conforming longest-edge bisection of ``elements`` (plus closure)."""
    work = _Bisector(mesh)
    work.run([int(k) for k in elements])
    nodes = np.array(work.nodes)
    elems = np.array(work.elements, dtype=np.int64)
    vol = simplex_measures(nodes, elems)
    neg = vol < 0
    elems[neg, -2], elems[neg, -1] = elems[neg, -1], elems[neg, -2].copy()
    vol = np.abs(vol)
    if (vol <= 1e-14 * np.abs(mesh.volumes).max()).any():
        raise MeshError("refinement would produce degenerate elements")
    tags = np.array(work.tags, dtype=np.int64) if work.tags is not None else None
    skeleton = Mesh(nodes, elems, (), tags, mesh.region_names)

    faces = skeleton.boundary_faces
    centroids = nodes[faces].mean(axis=1)
    scale = float(np.ptp(nodes, axis=0).max())
    patches = []
    for e in mesh.electrodes:
        parent = mesh.nodes[e.facets]
        lo, hi = parent.min(axis=(0, 1)) - 1e-9 * scale, parent.max(axis=(0, 1)) + 1e-9 * scale
        near = np.flatnonzero(np.all((centroids >= lo) & (centroids <= hi), axis=1))
        hit = _point_in_facets(centroids[near], parent, 1e-9)
        child = faces[near[hit >= 0]]
        patches.append(ElectrodePatch(e.id, child, e.z))
        a_new, a_old = facet_measures(nodes, child).sum(), facet_measures(mesh.nodes, e.facets).sum()
        if abs(a_new - a_old) > 1e-9 * a_old:
            raise MeshError(f"electrode {e.id}: area changed during refinement ({a_old} -> {a_new})")
    logger.debug("bisection: %d -> %d elements", mesh.n_elements, len(elems))
    return skeleton.with_electrodes(patches)
