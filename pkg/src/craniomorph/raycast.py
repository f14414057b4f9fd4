"""Dense ray construction and ray-mesh intersection.

Rays probe a skull (or any target mesh) and return hit points C, skull-to-face
vectors D = origin - C, and a validity mask M. Misses carry a sentinel, never
an error; downstream math must gate on the mask.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .mesh import MeshError, TriMesh, vertex_normals
from .spatial import SpatialIndex, build_index, brute_raycast, closest_points, raycast

# In-memory sentinel is NaN; files store a large finite flag instead.
SENTINEL_FILE_VALUE = 1e30

# Self-intersection guard: ignore hits closer than this fraction of the
# target bbox diagonal along the ray.
EPS_SELF_FRACTION = 1e-6


@dataclass(frozen=True)
class RayBundle:
    """Rays from origins[i] toward targets[i]; directions are unit length."""

    origins: np.ndarray
    targets: np.ndarray
    directions: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


def make_rays(origins: np.ndarray, targets: np.ndarray) -> RayBundle:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    targets = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(origins) != len(targets):
        raise ValueError(f"origins ({len(origins)}) and targets ({len(targets)}) differ in length")
    d = targets - origins
    lens = np.linalg.norm(d, axis=1)
    if (lens < 1e-12).any():
        raise ValueError(f"zero-length ray at index {int(np.argmax(lens < 1e-12))}")
    return RayBundle(origins, targets, d / lens[:, None])


@dataclass(frozen=True)
class HitSet:
    """Ray intersection result: points, origin-to-hit vectors, validity mask.

    Invalid entries of points/vectors hold NaN and must only be read through
    the mask.
    """

    points: np.ndarray   # C, (R, 3)
    vectors: np.ndarray  # D = origin - C, (R, 3)
    mask: np.ndarray     # (R,) bool

    def __len__(self) -> int:
        return len(self.mask)

    def valid_points(self) -> np.ndarray:
        return self.points[self.mask]

    def valid_vectors(self) -> np.ndarray:
        return self.vectors[self.mask]


def _hits_from_t(origins, dirs, t, faces_hit) -> HitSet:
    mask = faces_hit >= 0
    points = np.full_like(origins, np.nan)
    points[mask] = origins[mask] + t[mask, None] * dirs[mask]
    vectors = np.full_like(origins, np.nan)
    vectors[mask] = origins[mask] - points[mask]
    return HitSet(points, vectors, mask)


def cast_rays(rays: RayBundle, target: Union[TriMesh, SpatialIndex],
              eps_self: float | None = None) -> HitSet:
    """First intersection along each ray (parameter t > eps_self, unbounded above)."""
    index = target if isinstance(target, SpatialIndex) else build_index(target)
    if eps_self is None:
        eps_self = EPS_SELF_FRACTION * index.mesh.bbox_diagonal()
    t, f = raycast(index, rays.origins, rays.directions, t_min=eps_self)
    return _hits_from_t(rays.origins, rays.directions, t, f)


def cast_rays_brute(rays: RayBundle, target: TriMesh, eps_self: float | None = None) -> HitSet:
    """All-triangle enumeration reference for cast_rays."""
    if eps_self is None:
        eps_self = EPS_SELF_FRACTION * target.bbox_diagonal()
    t, f = brute_raycast(target, rays.origins, rays.directions, t_min=eps_self)
    return _hits_from_t(rays.origins, rays.directions, t, f)


def match_by_normal_rays(source: TriMesh, target: Union[TriMesh, SpatialIndex],
                         max_distance: float | None = None):
    """Dense correspondences by casting +/- vertex-normal rays at the target.

    For each source vertex the nearer valid hit (within max_distance, default
    10% of the target bbox diagonal) becomes its correspondent; vertices whose
    rays miss fall back to the closest point on the target. Returns
    (source points, target points, fallback mask) with fallback True where the
    closest-point fallback was used.
    """
    index = target if isinstance(target, SpatialIndex) else build_index(target)
    if index.mesh.n_faces == 0:
        raise MeshError("empty target")
    if max_distance is None:
        max_distance = 0.1 * index.mesh.bbox_diagonal()
    origins = source.vertices
    normals = vertex_normals(source)
    eps_self = EPS_SELF_FRACTION * index.mesh.bbox_diagonal()
    t_pos, _ = raycast(index, origins, normals, t_min=eps_self)
    t_neg, _ = raycast(index, origins, -normals, t_min=eps_self)
    t_pos = np.where(t_pos <= max_distance, t_pos, np.inf)
    t_neg = np.where(t_neg <= max_distance, t_neg, np.inf)
    use_neg = t_neg < t_pos
    t = np.where(use_neg, t_neg, t_pos)
    hit = np.isfinite(t)
    matched = origins + np.where(use_neg, -1.0, 1.0)[:, None] * np.where(hit, t, 0.0)[:, None] * normals
    fallback = ~hit
    if fallback.any():
        p, _, _ = closest_points(index, origins[fallback])
        matched[fallback] = p
    return origins.copy(), matched, fallback


def build_skull_rays(face: TriMesh, endpoints: np.ndarray, origin_stride: int = 1) -> RayBundle:
    """Rays from (strided) face vertices toward every endpoint, row-major:
    origin index is the outer loop, endpoint index the inner one."""
    if origin_stride < 1:
        raise ValueError("origin_stride must be >= 1")
    endpoints = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    if not len(endpoints):
        raise ValueError("need at least one endpoint")
    origins = face.vertices[::origin_stride]
    n_o, n_q = len(origins), len(endpoints)
    return make_rays(np.repeat(origins, n_q, axis=0),
                     np.tile(endpoints, (n_o, 1)))


# ---------------------------------------------------------------------------
# HitSet file format: one JSON header line, then raw little-endian blocks
# (float32 points, float32 vectors, uint8 mask).
# ---------------------------------------------------------------------------

def save_hitset(hits: HitSet, path) -> None:
    header = {
        "kind": "hitset",
        "version": 1,
        "count": len(hits),
        "sentinel": SENTINEL_FILE_VALUE,
        "dtype": "<f4",
        "layout": ["points", "vectors", "mask"],
    }
    pts = np.where(hits.mask[:, None], hits.points, SENTINEL_FILE_VALUE).astype("<f4")
    vec = np.where(hits.mask[:, None], hits.vectors, SENTINEL_FILE_VALUE).astype("<f4")
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("ascii"))
        fh.write(pts.tobytes())
        fh.write(vec.tobytes())
        fh.write(hits.mask.astype("u1").tobytes())


def load_hitset(path) -> HitSet:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: bad hitset header: {e}") from e
        if header.get("kind") != "hitset":
            raise ValueError(f"{path}: not a hitset file")
        n = int(header["count"])
        body = fh.read()
    need = n * 3 * 4 * 2 + n
    if len(body) < need:
        raise ValueError(f"{path}: truncated hitset ({len(body)} bytes, need {need})")
    pts = np.frombuffer(body, "<f4", n * 3, 0).reshape(n, 3).astype(np.float64)
    vec = np.frombuffer(body, "<f4", n * 3, n * 12).reshape(n, 3).astype(np.float64)
    mask = np.frombuffer(body, "u1", n, n * 24).astype(bool)
    pts = np.where(mask[:, None], pts, np.nan)
    vec = np.where(mask[:, None], vec, np.nan)
    return HitSet(pts, vec, mask)
