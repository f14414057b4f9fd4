"""Indexed triangle meshes and per-vertex differential quantities.

Coordinates are millimeters everywhere. Meshes may be open and may contain
boundary loops (skulls have holes); nothing here assumes watertightness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


def _as_readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TriMesh:
    """Immutable indexed triangle mesh with optional per-vertex albedo.

    vertices: (N, 3) float64, millimeters
    faces:    (M, 3) int64 vertex indices, non-degenerate
    albedo:   optional (N, 3) float64 RGB in [0, 1]
    """

    vertices: np.ndarray
    faces: np.ndarray
    albedo: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                bad = int(np.argmax((f < 0).any(axis=1) | (f >= len(v)).any(axis=1)))
                raise MeshError(f"face {bad} references vertex outside [0, {len(v)})")
            degen = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degen.any():
                raise MeshError(f"degenerate face {int(np.argmax(degen))}: repeated vertex index")
        object.__setattr__(self, "vertices", _as_readonly(v))
        object.__setattr__(self, "faces", _as_readonly(f))
        if self.albedo is not None:
            a = np.asarray(self.albedo, dtype=np.float64).reshape(-1, 3)
            if len(a) != len(v):
                raise MeshError(f"albedo length {len(a)} != vertex count {len(v)}")
            object.__setattr__(self, "albedo", _as_readonly(a))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if not len(self.vertices):
            raise MeshError("empty mesh has no bounding box")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))

    def with_vertices(self, vertices: np.ndarray, albedo: Optional[np.ndarray] = None) -> "TriMesh":
        """Same topology, new vertex positions (and optionally new albedo)."""
        return TriMesh(vertices, self.faces, self.albedo if albedo is None else albedo)

    def triangles(self) -> np.ndarray:
        """(M, 3, 3) corner positions."""
        return self.vertices[self.faces]


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    """Per-face normals; un-normalized vectors have twice the face area as length."""
    tri = mesh.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    if normalize:
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, lens, out=np.zeros_like(n), where=lens > 0)
    return n


def face_areas(mesh: TriMesh) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(mesh, normalize=False), axis=1)


# Normal assigned to vertices whose incident faces all have zero area
# (or that have no incident faces at all).
DEGENERATE_NORMAL = np.array([0.0, 0.0, 1.0])


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, unit length.

    Vertices whose star has zero total area fall back to +Z.
    """
    if not mesh.n_vertices:
        raise MeshError("empty mesh")
    weighted = face_normals(mesh, normalize=False)  # area-weighted by construction
    acc = np.zeros((mesh.n_vertices, 3))
    for c in range(3):
        np.add.at(acc, mesh.faces[:, c], weighted)
    lens = np.linalg.norm(acc, axis=1, keepdims=True)
    out = np.divide(acc, lens, out=np.zeros_like(acc), where=lens > 1e-300)
    dead = lens[:, 0] <= 1e-300
    out[dead] = DEGENERATE_NORMAL
    return out
