"""Vectorized triangle primitives: closest point and ray intersection.

These numpy implementations back the brute-force reference paths; the BVH
kernels in _kernels.py implement the same math independently in scalar form.
"""

from __future__ import annotations

import numpy as np

# Barycentric slack for edge-grazing ray hits.
EDGE_TOL = 1e-12


def closest_point_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to p on each triangle (a, b, c); all inputs (..., 3)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("...k,...k->...", ab, ap)
    d2 = np.einsum("...k,...k->...", ac, ap)
    bp = p - b
    d3 = np.einsum("...k,...k->...", ab, bp)
    d4 = np.einsum("...k,...k->...", ac, bp)
    cp = p - c
    d5 = np.einsum("...k,...k->...", ab, cp)
    d6 = np.einsum("...k,...k->...", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_uv = np.where(d1 - d3 != 0, d1 - d3, 1.0)
    v_ab = np.clip(np.where(d1 - d3 != 0, d1 / denom_uv, 0.0), 0.0, 1.0)
    denom_w = np.where(d2 - d6 != 0, d2 - d6, 1.0)
    w_ac = np.clip(np.where(d2 - d6 != 0, d2 / denom_w, 0.0), 0.0, 1.0)
    d43 = d4 - d3
    denom_bc = d43 + (d5 - d6)
    denom_bc = np.where(denom_bc != 0, denom_bc, 1.0)
    w_bc = np.clip(d43 / denom_bc, 0.0, 1.0)

    denom_in = va + vb + vc
    denom_in = np.where(denom_in != 0, denom_in, 1.0)
    v_in = vb / denom_in
    w_in = vc / denom_in

    # interior result, then overwrite with edge/vertex regions
    q = a + v_in[..., None] * ab + w_in[..., None] * ac
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    q = np.where(on_bc[..., None], b + w_bc[..., None] * (c - b), q)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    q = np.where(on_ac[..., None], a + w_ac[..., None] * ac, q)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    q = np.where(on_ab[..., None], a + v_ab[..., None] * ab, q)
    at_c = (d6 >= 0) & (d5 <= d6)
    q = np.where(at_c[..., None], c, q)
    at_b = (d3 >= 0) & (d4 <= d3)
    q = np.where(at_b[..., None], b, q)
    at_a = (d1 <= 0) & (d2 <= 0)
    q = np.where(at_a[..., None], a, q)
    return q


def ray_triangle_hits(orig: np.ndarray, direc: np.ndarray,
                      a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Moller-Trumbore parameter t (np.inf where missed); broadcasting (..., 3)."""
    e1 = b - a
    e2 = c - a
    pvec = np.cross(direc, e2)
    det = np.einsum("...k,...k->...", e1, pvec)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = orig - a
    u = np.einsum("...k,...k->...", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("...k,...k->...", direc, qvec) * inv
    t = np.einsum("...k,...k->...", e2, qvec) * inv
    hit = ok & (u >= -EDGE_TOL) & (v >= -EDGE_TOL) & (u + v <= 1.0 + EDGE_TOL)
    return np.where(hit, t, np.inf)
