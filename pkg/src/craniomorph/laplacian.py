"""Sparse mesh Laplacian operators (uniform default, cotangent optional)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import MeshError, TriMesh


@dataclass(frozen=True)
class LaplacianOperator:
    """Δ as a sparse matrix over vertices; rows sum to zero.

    Uniform weighting: Δx_i = mean(neighbors) - x_i. Vertices with no
    neighbors get an all-zero row. Cotangent weighting uses the classic
    half-cotangent edge weights, normalized per row.
    """

    matrix: sp.csr_matrix
    weighting: str

    @property
    def n_vertices(self) -> int:
        return self.matrix.shape[0]


def _edge_list(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    e = np.concatenate([e, e[:, ::-1]], axis=0)  # both directions
    e = np.unique(e, axis=0)
    return e[:, 0], e[:, 1]


def build_laplacian(mesh: TriMesh, weighting: str = "uniform") -> LaplacianOperator:
    n = mesh.n_vertices
    if weighting == "uniform":
        i, j = _edge_list(mesh)
        w = np.ones(len(i))
    elif weighting == "cotangent":
        i, j, w = _cotangent_edges(mesh)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    wsum = np.zeros(n)
    np.add.at(wsum, i, w)
    inv = np.divide(1.0, wsum, out=np.zeros(n), where=wsum > 0)
    off = sp.csr_matrix((w * inv[i], (i, j)), shape=(n, n))
    diag = sp.diags((wsum > 0).astype(np.float64))
    return LaplacianOperator((off - diag).tocsr(), weighting)


def _cotangent_edges(mesh: TriMesh):
    tri = mesh.triangles()
    f = mesh.faces
    ii, jj, ww = [], [], []
    for opp in range(3):
        a, b = (opp + 1) % 3, (opp + 2) % 3
        u = tri[:, a] - tri[:, opp]
        v = tri[:, b] - tri[:, opp]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cot = np.einsum("ij,ij->i", u, v) / np.maximum(cross, 1e-300)
        cot = np.maximum(cot, 0.0)  # clamp obtuse weights; keeps weights nonnegative
        for s, t in ((a, b), (b, a)):
            ii.append(f[:, s]); jj.append(f[:, t]); ww.append(0.5 * cot)
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(ww)


def laplacian_apply(op: LaplacianOperator, field: np.ndarray) -> np.ndarray:
    """Apply Δ to a per-vertex field of shape (N,) or (N, d)."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape[0] != op.n_vertices:
        raise MeshError(f"field length {field.shape[0]} != vertex count {op.n_vertices}")
    return op.matrix @ field
