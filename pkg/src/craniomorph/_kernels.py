"""Numba kernels for BVH traversal (closest point and first-hit ray cast).

Scalar re-implementations of the primitives in _tritests.py; the two modules
deliberately share no code so they can check each other.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

EDGE_TOL = 1e-12
_STACK = 128


@njit(cache=True, error_model="numpy")
def _tri_closest(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az
    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        w = d1 / (d1 - d3)
        return ax + w * abx, ay + w * aby, az + w * abz
    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
    denom = va + vb + vc
    v = vb / denom
    w = vc / denom
    return (ax + abx * v + acx * w,
            ay + aby * v + acy * w,
            az + abz * v + acz * w)


@njit(cache=True, error_model="numpy")
def _box_sqdist(px, py, pz, lo, hi):
    d = 0.0
    for k in range(3):
        p = px if k == 0 else (py if k == 1 else pz)
        if p < lo[k]:
            d += (lo[k] - p) ** 2
        elif p > hi[k]:
            d += (p - hi[k]) ** 2
    return d


@njit(cache=True, parallel=True, error_model="numpy")
def bvh_closest_points(node_lo, node_hi, node_left, node_right, node_start, node_count,
                       va, vb, vc, face_ids, queries, out_point, out_sqd, out_face):
    for q in prange(queries.shape[0]):
        px, py, pz = queries[q, 0], queries[q, 1], queries[q, 2]
        best = np.inf
        bx = by = bz = 0.0
        bface = -1
        stack = np.empty(_STACK, dtype=np.int64)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_sqdist(px, py, pz, node_lo[node], node_hi[node]) > best:
                continue
            if node_count[node] > 0:  # leaf
                s = node_start[node]
                for i in range(s, s + node_count[node]):
                    qx, qy, qz = _tri_closest(px, py, pz,
                                              va[i, 0], va[i, 1], va[i, 2],
                                              vb[i, 0], vb[i, 1], vb[i, 2],
                                              vc[i, 0], vc[i, 1], vc[i, 2])
                    d = (qx - px) ** 2 + (qy - py) ** 2 + (qz - pz) ** 2
                    if d < best:
                        best = d
                        bx, by, bz = qx, qy, qz
                        bface = face_ids[i]
            else:
                l, r = node_left[node], node_right[node]
                dl = _box_sqdist(px, py, pz, node_lo[l], node_hi[l])
                dr = _box_sqdist(px, py, pz, node_lo[r], node_hi[r])
                if dl <= dr:  # push far child first so the near one pops first
                    if dr <= best:
                        stack[top] = r; top += 1
                    if dl <= best:
                        stack[top] = l; top += 1
                else:
                    if dl <= best:
                        stack[top] = l; top += 1
                    if dr <= best:
                        stack[top] = r; top += 1
        out_point[q, 0], out_point[q, 1], out_point[q, 2] = bx, by, bz
        out_sqd[q] = best
        out_face[q] = bface


@njit(cache=True, error_model="numpy")
def _ray_tri_t(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, cx, cy, cz):
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-300:
        return np.inf
    inv = 1.0 / det
    tx, ty, tz = ox - ax, oy - ay, oz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -EDGE_TOL:
        return np.inf
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < -EDGE_TOL or u + v > 1.0 + EDGE_TOL:
        return np.inf
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@njit(cache=True, error_model="numpy")
def _slab_tnear(ox, oy, oz, dx, dy, dz, lo, hi):
    """Ray/box entry parameter, or inf if the box is missed (t >= 0 only)."""
    tmin = -np.inf
    tmax = np.inf
    for k in range(3):
        o = ox if k == 0 else (oy if k == 1 else oz)
        d = dx if k == 0 else (dy if k == 1 else dz)
        if d == 0.0:
            if o < lo[k] or o > hi[k]:
                return np.inf
        else:
            inv = 1.0 / d
            t1 = (lo[k] - o) * inv
            t2 = (hi[k] - o) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return np.inf
    if tmax < 0.0:
        return np.inf
    return tmin if tmin > 0.0 else 0.0


@njit(cache=True, parallel=True, error_model="numpy")
def bvh_raycast(node_lo, node_hi, node_left, node_right, node_start, node_count,
                va, vb, vc, face_ids, origins, dirs, t_min,
                out_t, out_face):
    """First hit with parameter t > t_min; ties at equal t go to the lowest face id."""
    for q in prange(origins.shape[0]):
        ox, oy, oz = origins[q, 0], origins[q, 1], origins[q, 2]
        dx, dy, dz = dirs[q, 0], dirs[q, 1], dirs[q, 2]
        best_t = np.inf
        best_face = -1
        stack = np.empty(_STACK, dtype=np.int64)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _slab_tnear(ox, oy, oz, dx, dy, dz, node_lo[node], node_hi[node]) > best_t:
                continue
            if node_count[node] > 0:
                s = node_start[node]
                for i in range(s, s + node_count[node]):
                    t = _ray_tri_t(ox, oy, oz, dx, dy, dz,
                                   va[i, 0], va[i, 1], va[i, 2],
                                   vb[i, 0], vb[i, 1], vb[i, 2],
                                   vc[i, 0], vc[i, 1], vc[i, 2])
                    if t > t_min and (t < best_t or (t == best_t and face_ids[i] < best_face)):
                        best_t = t
                        best_face = face_ids[i]
            else:
                l, r = node_left[node], node_right[node]
                tl = _slab_tnear(ox, oy, oz, dx, dy, dz, node_lo[l], node_hi[l])
                tr = _slab_tnear(ox, oy, oz, dx, dy, dz, node_lo[r], node_hi[r])
                if tl <= tr:
                    if tr <= best_t:
                        stack[top] = r; top += 1
                    if tl <= best_t:
                        stack[top] = l; top += 1
                else:
                    if tl <= best_t:
                        stack[top] = l; top += 1
                    if tr <= best_t:
                        stack[top] = r; top += 1
        out_t[q] = best_t
        out_face[q] = best_face
