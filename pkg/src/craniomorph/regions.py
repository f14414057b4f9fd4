"""Skull region labels and blended rigid edits for surgical plans."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh

BLEND_BAND_MM = 5.0


def apply_region_transform(vertices: np.ndarray, labels: np.ndarray, names: list[str],
                           region: str, transform: np.ndarray,
                           band_mm: float = BLEND_BAND_MM) -> np.ndarray:
    """Apply a rigid 3x4 transform to one labeled region, feathered over a band.

    Vertices inside the region move fully; outside, the displacement fades
    linearly to zero across band_mm of Euclidean distance from the region.
    """
    transform = np.asarray(transform, dtype=np.float64).reshape(3, 4)
    if not np.isfinite(transform).all():
        raise ValueError("transform contains non-finite values")
    if region not in names:
        raise KeyError(f"unknown region {region!r}; have {names}")
    rid = names.index(region)
    inside = labels == rid
    if not inside.any():
        raise ValueError(f"region {region!r} labels no vertices")
    moved = vertices @ transform[:, :3].T + transform[:, 3]
    disp = moved - vertices
    w = np.zeros(len(vertices))
    w[inside] = 1.0
    outside = ~inside
    if outside.any() and band_mm > 0:
        # distance from outside vertices to the region vertex set
        from scipy.spatial import cKDTree
        d, _ = cKDTree(vertices[inside]).query(vertices[outside])
        w[outside] = np.clip(1.0 - d / band_mm, 0.0, 1.0)
    return vertices + w[:, None] * disp


def plan_from_transforms(skull: TriMesh, labels: np.ndarray, names: list[str],
                         transforms: dict[str, np.ndarray],
                         band_mm: float = BLEND_BAND_MM) -> TriMesh:
    """Materialize a planned skull from per-region rigid transforms."""
    v = skull.vertices
    for region, t in transforms.items():
        v = apply_region_transform(v, labels, names, region, t, band_mm)
    return skull.with_vertices(v)


def identity_transform() -> np.ndarray:
    return np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)


def translation_transform(offset) -> np.ndarray:
    t = identity_transform()
    t[:, 3] = np.asarray(offset, dtype=np.float64)
    return t
