"""Line-oriented text mesh format (``EITMESH 1``).

::

    EITMESH 1
    dimension 3
    regions
    1 chamber-1
    nodes
    0 x y z
    elements
    0 n1 n2 n3 n4 region_tag
    electrodes
    1 z_contact a b c a b c ...

Ids are zero-based and must be consecutive; ``#`` starts a comment.
Coordinates use ``repr`` so a round trip is bit-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import ElectrodePatch, Mesh, MeshError

MAGIC = "EITMESH"
VERSION = 1


class MeshFormatError(MeshError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path, self.lineno = path, lineno


def save_mesh(mesh: Mesh, path) -> None:
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}", f"dimension {mesh.dimension}"]
    if mesh.region_names:
        lines.append("regions")
        lines += [f"{tag} {name}" for tag, name in sorted(mesh.region_names.items())]
    lines.append("nodes")
    lines += [f"{i} " + " ".join(repr(float(c)) for c in p) for i, p in enumerate(mesh.nodes.tolist())]
    lines.append("elements")
    tags = mesh.region_tags if mesh.region_tags is not None else np.zeros(mesh.n_elements, dtype=int)
    lines += [
        f"{i} " + " ".join(str(n) for n in e) + f" {t}"
        for i, (e, t) in enumerate(zip(mesh.elements.tolist(), tags.tolist()))
    ]
    lines.append("electrodes")
    for e in mesh.electrodes:
        lines.append(f"{e.id} {float(e.z)!r} " + " ".join(str(n) for n in e.facets.ravel().tolist()))
    path.write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    """Parse an ``EITMESH 1`` file; syntax and invariant errors carry line context."""
    path = Path(path)
    section = None
    dimension = None
    regions: dict[int, str] = {}
    nodes, elements, tags, electrodes = [], [], [], []
    header_seen = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if not header_seen:
            if fields[0] != MAGIC or len(fields) != 2:
                raise MeshFormatError(path, lineno, f"expected header '{MAGIC} {VERSION}'")
            if fields[1] != str(VERSION):
                raise MeshFormatError(path, lineno, f"unsupported version {fields[1]}")
            header_seen = True
            continue
        if fields[0] == "dimension":
            try:
                dimension = int(fields[1])
            except (IndexError, ValueError):
                raise MeshFormatError(path, lineno, "dimension: expected an integer") from None
            if dimension not in (2, 3):
                raise MeshFormatError(path, lineno, f"dimension: must be 2 or 3, got {dimension}")
            continue
        if len(fields) == 1 and fields[0] in ("regions", "nodes", "elements", "electrodes"):
            section = fields[0]
            continue
        if dimension is None:
            raise MeshFormatError(path, lineno, "'dimension' must precede data sections")
        try:
            if section == "regions":
                regions[int(fields[0])] = " ".join(fields[1:])
            elif section == "nodes":
                _expect(path, lineno, "nodes", fields, dimension + 1)
                _expect_id(path, lineno, "nodes", int(fields[0]), len(nodes))
                nodes.append([float(v) for v in fields[1:]])
            elif section == "elements":
                _expect(path, lineno, "elements", fields, dimension + 3)
                _expect_id(path, lineno, "elements", int(fields[0]), len(elements))
                elements.append([int(v) for v in fields[1:-1]])
                tags.append(int(fields[-1]))
            elif section == "electrodes":
                eid, z = int(fields[0]), float(fields[1])
                flat = [int(v) for v in fields[2:]]
                if not flat or len(flat) % dimension:
                    raise MeshFormatError(
                        path, lineno, f"electrodes: electrode {eid} facet list must be a multiple of {dimension} nodes"
                    )
                if not z >= 0:
                    raise MeshFormatError(path, lineno, f"electrodes: electrode {eid} needs z_contact >= 0, got {z}")
                electrodes.append((lineno, eid, z, np.array(flat).reshape(-1, dimension)))
            else:
                raise MeshFormatError(path, lineno, "data outside a section")
        except ValueError as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(path, lineno, f"{section}: {exc}") from None
    if not header_seen:
        raise MeshFormatError(path, 1, "empty file")
    try:
        base = Mesh(np.array(nodes, dtype=float).reshape(-1, dimension), np.array(elements, dtype=np.int64).reshape(-1, dimension + 1),
                    (), np.array(tags, dtype=np.int64), regions)
    except MeshError as exc:
        raise MeshFormatError(path, 0, str(exc)) from None
    patches = []
    for lineno, eid, z, facets in electrodes:
        patch = ElectrodePatch(eid, facets, z)
        idx = base.facet_index(facets)
        if (idx < 0).any():
            raise MeshFormatError(path, lineno, f"electrode {eid}: facet {facets[np.flatnonzero(idx < 0)[0]].tolist()} is not on the mesh boundary")
        patches.append(patch)
    try:
        return base.with_electrodes(patches)
    except MeshError as exc:
        raise MeshFormatError(path, 0, str(exc)) from None


def _expect(path, lineno, section, fields, n):
    if len(fields) != n:
        raise MeshFormatError(path, lineno, f"{section}: expected {n} fields, got {len(fields)}")


def _expect_id(path, lineno, section, got, want):
    if got != want:
        raise MeshFormatError(path, lineno, f"{section}: expected id {want}, got {got}")
