"""BVH spatial index over a triangle mesh: closest-point and ray queries.

The index is immutable after construction and safe for concurrent reads.
Every query has a brute-force counterpart used as the verification oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels, _tritests
from .mesh import MeshError, TriMesh

_LEAF_SIZE = 8


@dataclass(frozen=True)
class SpatialIndex:
    """Flattened median-split AABB tree; arrays are read-only after build."""

    mesh: TriMesh
    node_lo: np.ndarray
    node_hi: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_start: np.ndarray
    node_count: np.ndarray
    tri_a: np.ndarray  # triangle corners in BVH order
    tri_b: np.ndarray
    tri_c: np.ndarray
    face_ids: np.ndarray  # BVH order -> original face index

    @property
    def n_faces(self) -> int:
        return len(self.face_ids)


def build_index(mesh: TriMesh, leaf_size: int = _LEAF_SIZE) -> SpatialIndex:
    if mesh.n_faces == 0:
        raise MeshError("cannot index an empty mesh")
    tri = mesh.triangles()
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    centroids = tri.mean(axis=1)

    order = np.arange(mesh.n_faces)
    nodes_lo, nodes_hi, left, right, start, count = [], [], [], [], [], []

    # (slice start, slice stop, node id); children patched after allocation
    def alloc(lo_s, hi_s):
        nodes_lo.append(lo_s)
        nodes_hi.append(hi_s)
        left.append(-1)
        right.append(-1)
        start.append(-1)
        count.append(0)
        return len(nodes_lo) - 1

    stack = [(0, mesh.n_faces, alloc(lo[order].min(axis=0), hi[order].max(axis=0)))]
    while stack:
        s, e, node = stack.pop()
        idx = order[s:e]
        if e - s <= leaf_size:
            start[node] = s
            count[node] = e - s
            continue
        cen = centroids[idx]
        spread = cen.max(axis=0) - cen.min(axis=0)
        axis = int(np.argmax(spread))
        if spread[axis] <= 0:  # all centroids identical; make a leaf
            start[node] = s
            count[node] = e - s
            continue
        mid = (e - s) // 2
        part = np.argsort(cen[:, axis], kind="stable")
        order[s:e] = idx[part]
        lft = order[s:s + mid]
        rgt = order[s + mid:e]
        li = alloc(lo[lft].min(axis=0), hi[lft].max(axis=0))
        ri = alloc(lo[rgt].min(axis=0), hi[rgt].max(axis=0))
        left[node] = li
        right[node] = ri
        stack.append((s, s + mid, li))
        stack.append((s + mid, e, ri))

    tri_sorted = tri[order]
    idxobj = SpatialIndex(
        mesh=mesh,
        node_lo=np.ascontiguousarray(nodes_lo, dtype=np.float64),
        node_hi=np.ascontiguousarray(nodes_hi, dtype=np.float64),
        node_left=np.array(left, dtype=np.int64),
        node_right=np.array(right, dtype=np.int64),
        node_start=np.array(start, dtype=np.int64),
        node_count=np.array(count, dtype=np.int64),
        tri_a=np.ascontiguousarray(tri_sorted[:, 0]),
        tri_b=np.ascontiguousarray(tri_sorted[:, 1]),
        tri_c=np.ascontiguousarray(tri_sorted[:, 2]),
        face_ids=order.astype(np.int64),
    )
    return idxobj


def closest_points(index: SpatialIndex, queries: np.ndarray):
    """(points, squared distances, face ids) of mesh points nearest each query."""
    queries = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    n = len(queries)
    out_p = np.empty((n, 3))
    out_d = np.empty(n)
    out_f = np.empty(n, dtype=np.int64)
    _kernels.bvh_closest_points(
        index.node_lo, index.node_hi, index.node_left, index.node_right,
        index.node_start, index.node_count,
        index.tri_a, index.tri_b, index.tri_c, index.face_ids,
        queries, out_p, out_d, out_f)
    return out_p, out_d, out_f


def closest_point(index: SpatialIndex, query) -> tuple[np.ndarray, float, int]:
    p, d, f = closest_points(index, np.asarray(query, dtype=np.float64).reshape(1, 3))
    return p[0], float(d[0]), int(f[0])


def raycast(index: SpatialIndex, origins: np.ndarray, dirs: np.ndarray, t_min: float = 0.0):
    """First-hit parameters and face ids; t = inf, face = -1 on miss."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    n = len(origins)
    out_t = np.empty(n)
    out_f = np.empty(n, dtype=np.int64)
    _kernels.bvh_raycast(
        index.node_lo, index.node_hi, index.node_left, index.node_right,
        index.node_start, index.node_count,
        index.tri_a, index.tri_b, index.tri_c, index.face_ids,
        origins, dirs, float(t_min), out_t, out_f)
    return out_t, out_f


# ---------------------------------------------------------------------------
# Brute-force reference paths (independent math, see _tritests)
# ---------------------------------------------------------------------------

def brute_closest_points(mesh: TriMesh, queries: np.ndarray, chunk: int = 256):
    if mesh.n_faces == 0:
        raise MeshError("cannot query an empty mesh")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    out_p = np.empty((len(queries), 3))
    out_d = np.empty(len(queries))
    out_f = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk, None, :]
        cand = _tritests.closest_point_on_triangles(q, a[None], b[None], c[None])
        d = np.sum((cand - q) ** 2, axis=2)
        best = np.argmin(d, axis=1)  # lowest face index on exact ties
        rows = np.arange(len(best))
        out_p[s:s + chunk] = cand[rows, best]
        out_d[s:s + chunk] = d[rows, best]
        out_f[s:s + chunk] = best
    return out_p, out_d, out_f


def brute_raycast(mesh: TriMesh, origins: np.ndarray, dirs: np.ndarray,
                  t_min: float = 0.0, chunk: int = 256):
    if mesh.n_faces == 0:
        raise MeshError("cannot query an empty mesh")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    tri = mesh.triangles()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    out_t = np.empty(len(origins))
    out_f = np.empty(len(origins), dtype=np.int64)
    for s in range(0, len(origins), chunk):
        t = _tritests.ray_triangle_hits(origins[s:s + chunk, None, :], dirs[s:s + chunk, None, :],
                                        a[None], b[None], c[None])
        t = np.where(t > t_min, t, np.inf)
        best = np.argmin(t, axis=1)  # first occurrence = lowest face id on ties
        rows = np.arange(len(best))
        bt = t[rows, best]
        out_t[s:s + chunk] = bt
        out_f[s:s + chunk] = np.where(np.isfinite(bt), best, -1)
    return out_t, out_f
