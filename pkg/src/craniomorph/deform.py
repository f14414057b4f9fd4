"""Non-rigid registration: per-vertex affine field fit with AMSGrad.

The objective is

    L = L_mesh + lambda * L_smooth + mu * L_control

where L_mesh pulls every transformed source vertex to its closest point on
the target, L_smooth is the squared mesh Laplacian of the displacement field
(rigid motions are free), and L_control pins corresponding point pairs.
All three terms are means over their point counts so the weights are
scale-free across mesh resolutions.

The affine field is parametrized around the identity with positions
normalized by the source bbox scale, so every optimizer coordinate moves
geometry at comparable rates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .laplacian import LaplacianOperator, build_laplacian
from .mesh import MeshError, TriMesh
from .spatial import SpatialIndex, build_index, closest_points


class DeformDiverged(RuntimeError):
    """Loss became non-finite; message carries the diagnostic snapshot."""


@dataclass(frozen=True)
class ControlPairs:
    """Positionally paired control points: source[i] should land on target[i]."""

    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.source, dtype=np.float64).reshape(-1, 3)
        t = np.ascontiguousarray(self.target, dtype=np.float64).reshape(-1, 3)
        if len(s) != len(t):
            raise ValueError(f"control source ({len(s)}) and target ({len(t)}) lengths differ")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)

    def __len__(self) -> int:
        return len(self.source)

    @staticmethod
    def empty() -> "ControlPairs":
        return ControlPairs(np.zeros((0, 3)), np.zeros((0, 3)))


@dataclass
class DeformConfig:
    iterations: int = 400
    learning_rate: float = 0.25
    lambda_smooth: float = 100.0      # annealed geometrically down to lambda_end
    lambda_end: float = 1.0
    anneal_stages: int = 4
    lambda_schedule: Optional[list] = None  # explicit [(start_iter, lambda), ...] override
    mu: float = 1.0
    refresh_cadence: int = 1          # recompute closest points every r iterations
    tol: float = 1e-9                 # relative loss decrease for convergence
    tol_patience: int = 5
    robust_gate: bool = True          # drop matches beyond 3x median distance
    gate_floor_fraction: float = 0.02  # times target bbox diagonal; keeps the
                                       # gate from freezing refinement once the
                                       # median residual collapses
    laplacian_weighting: str = "uniform"
    trace_path: Optional[str] = None  # CSV: iteration, L_mesh, L_smooth, L_control

    def __post_init__(self):
        if self.lambda_smooth < 0 or self.lambda_end < 0 or self.mu < 0:
            raise ValueError("weights must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def schedule(self) -> list[tuple[int, float]]:
        if self.lambda_schedule is not None:
            return [(int(i), float(v)) for i, v in self.lambda_schedule]
        stages = max(1, self.anneal_stages)
        if stages == 1 or self.lambda_smooth == 0:
            return [(0, self.lambda_smooth)]
        ratio = (self.lambda_end / self.lambda_smooth) ** (1.0 / (stages - 1)) \
            if self.lambda_smooth > 0 else 1.0
        block = max(1, self.iterations // stages)
        return [(s * block, self.lambda_smooth * ratio ** s) for s in range(stages)]

    def lambda_at(self, iteration: int) -> float:
        lam = self.schedule()[0][1]
        for start, value in self.schedule():
            if iteration >= start:
                lam = value
        return lam

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def from_json(cls, path) -> "DeformConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, data: dict) -> "DeformConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown DeformConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class AffineField:
    """Per-vertex affine transform, stored relative to the identity.

    T_i(x) = x + linear[i] @ (x - center) / scale + translation[i]

    With linear = 0 and translation = 0 the field is exactly the identity.
    """

    linear: np.ndarray       # (N, 3, 3), dimensionless
    translation: np.ndarray  # (N, 3), mm
    center: np.ndarray       # (3,)
    scale: float

    @staticmethod
    def identity(source: TriMesh) -> "AffineField":
        n = source.n_vertices
        center = source.vertices.mean(axis=0)
        scale = max(source.bbox_diagonal(), 1e-12)
        return AffineField(np.zeros((n, 3, 3)), np.zeros((n, 3)), center, scale)

    @property
    def n_vertices(self) -> int:
        return len(self.translation)

    def apply_to_vertices(self, vertices: np.ndarray) -> np.ndarray:
        """Transform vertices[i] by the i-th affine (the usual use)."""
        u = (vertices - self.center) / self.scale
        return vertices + np.einsum("nij,nj->ni", self.linear, u) + self.translation

    def apply_interpolated(self, points: np.ndarray, anchor_idx: np.ndarray,
                           anchor_w: np.ndarray) -> np.ndarray:
        """Transform free points by barycentric blends of anchor-vertex transforms.

        anchor_idx: (K, 3) vertex ids; anchor_w: (K, 3) barycentric weights.
        """
        u = (points - self.center) / self.scale
        lin = np.einsum("kc,kcij->kij", anchor_w, self.linear[anchor_idx])
        tr = np.einsum("kc,kcj->kj", anchor_w, self.translation[anchor_idx])
        return points + np.einsum("kij,kj->ki", lin, u) + tr

    def as_matrices(self) -> np.ndarray:
        """Dense (N, 3, 4) world-frame affine transforms [A | b]."""
        a = np.eye(3) + self.linear / self.scale
        b = self.translation + self.center - np.einsum("nij,j->ni", a, self.center)
        return np.concatenate([a, b[:, :, None]], axis=2)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.linear.reshape(-1), self.translation.reshape(-1)])

    def set_flat(self, params: np.ndarray) -> None:
        n = self.n_vertices
        self.linear = params[:9 * n].reshape(n, 3, 3)
        self.translation = params[9 * n:].reshape(n, 3)


@dataclass
class LossBreakdown:
    mesh: float
    smooth: float
    control: float
    total: float


@dataclass
class DeformResult:
    mesh: TriMesh
    loss: LossBreakdown
    iterations_used: int
    converged: bool
    loss_increases: int        # optimizer steps that increased the objective
    max_loss_increase: float   # largest such increase (same-correspondence steps)


# ---------------------------------------------------------------------------
# AMSGrad
# ---------------------------------------------------------------------------

@dataclass
class AmsGradState:
    """Adaptive-moment state with a max-tracked (never decreasing) second moment."""

    params: np.ndarray
    m: np.ndarray
    v: np.ndarray
    v_hat: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def init(params: np.ndarray, **kw) -> "AmsGradState":
        z = np.zeros_like(params)
        return AmsGradState(params.copy(), z.copy(), z.copy(), z.copy(), **kw)


def amsgrad_step(state: AmsGradState, gradient: np.ndarray, lr: float) -> AmsGradState:
    """One AMSGrad update; mutates and returns the state (params included)."""
    if gradient.shape != state.params.shape:
        raise ValueError(f"gradient shape {gradient.shape} != params shape {state.params.shape}")
    state.step += 1
    t = state.step
    state.m = state.beta1 * state.m + (1 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1 - state.beta2) * gradient * gradient
    np.maximum(state.v_hat, state.v, out=state.v_hat)
    m_hat = state.m / (1 - state.beta1 ** t)
    v_corr = state.v_hat / (1 - state.beta2 ** t)
    state.params -= lr * m_hat / (np.sqrt(v_corr) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

def barycentric_weights(points: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points assumed on/near triangles (a, b, c)."""
    e1 = b - a
    e2 = c - a
    p = points - a
    d11 = np.einsum("kj,kj->k", e1, e1)
    d12 = np.einsum("kj,kj->k", e1, e2)
    d22 = np.einsum("kj,kj->k", e2, e2)
    p1 = np.einsum("kj,kj->k", p, e1)
    p2 = np.einsum("kj,kj->k", p, e2)
    det = d11 * d22 - d12 * d12
    det = np.where(np.abs(det) > 1e-300, det, 1.0)
    w1 = np.clip((d22 * p1 - d12 * p2) / det, 0.0, 1.0)
    w2 = np.clip((d11 * p2 - d12 * p1) / det, 0.0, 1.0)
    w0 = np.clip(1.0 - w1 - w2, 0.0, 1.0)
    w = np.stack([w0, w1, w2], axis=1)
    return w / w.sum(axis=1, keepdims=True)


def anchor_controls(source: TriMesh, control_source: np.ndarray,
                    source_index: SpatialIndex | None = None):
    """Bind control source points to the source surface: (vertex ids (K,3), weights (K,3))."""
    if source_index is None:
        source_index = build_index(source)
    proj, _, fids = closest_points(source_index, control_source)
    tris = source.faces[fids]
    va, vb, vc = (source.vertices[tris[:, k]] for k in range(3))
    w = barycentric_weights(proj, va, vb, vc)
    return tris, w


def loss_gradient(X: TriMesh, correspondences: np.ndarray | None, weights: np.ndarray | None,
                  controls: ControlPairs, field: AffineField,
                  lam: float, mu: float, laplacian: LaplacianOperator,
                  anchor_idx: np.ndarray | None, anchor_w: np.ndarray | None):
    """Analytic loss and gradient with correspondences held fixed.

    correspondences: (N, 3) closest target points (or None to skip L_mesh);
    weights: per-vertex 0/1 gate for the mesh term.
    Returns (LossBreakdown, flat gradient aligned with field.flatten()).
    """
    V = X.vertices
    n = len(V)
    u = (V - field.center) / field.scale
    pos = field.apply_to_vertices(V)
    disp = pos - V

    g_lin = np.zeros_like(field.linear)
    g_tr = np.zeros_like(field.translation)

    # mesh term
    l_mesh = 0.0
    if correspondences is not None:
        r = pos - correspondences
        if weights is None:
            weights = np.ones(n)
        n_active = weights.sum()
        if n_active > 0:
            l_mesh = float(np.einsum("n,nj,nj->", weights, r, r) / n_active)
            g = (2.0 / n_active) * weights[:, None] * r
            g_tr += g
            g_lin += np.einsum("ni,nj->nij", g, u)

    # smoothness on the displacement field
    l_smooth = 0.0
    if lam > 0:
        ld = laplacian.matrix @ disp
        l_smooth = float(np.einsum("nj,nj->", ld, ld) / n)
        g = (2.0 / n) * (laplacian.matrix.T @ ld)
        g_tr += lam * g
        g_lin += lam * np.einsum("ni,nj->nij", g, u)

    # control term
    l_control = 0.0
    if mu > 0 and len(controls) > 0:
        pred = field.apply_interpolated(controls.source, anchor_idx, anchor_w)
        s = pred - controls.target
        k = len(controls)
        l_control = float(np.einsum("kj,kj->", s, s) / k)
        gs = (2.0 / k) * s
        uc = (controls.source - field.center) / field.scale
        for c in range(3):
            wc = anchor_w[:, c:c + 1] * gs
            np.add.at(g_tr, anchor_idx[:, c], mu * wc)
            np.add.at(g_lin, anchor_idx[:, c], mu * np.einsum("ki,kj->kij", wc, uc))

    total = l_mesh + lam * l_smooth + mu * l_control
    grad = np.concatenate([g_lin.reshape(-1), g_tr.reshape(-1)])
    return LossBreakdown(l_mesh, l_smooth, l_control, total), grad


# ---------------------------------------------------------------------------
# Main driver
# ---------------------------------------------------------------------------

def deform(X: TriMesh, X_target: TriMesh | SpatialIndex | None,
           controls: ControlPairs | None = None,
           cfg: DeformConfig | None = None) -> DeformResult:
    """Register X toward X_target under control-point constraints.

    X_target may be None to fit controls + smoothness only. The output mesh
    always has the exact face list of X.
    """
    cfg = cfg or DeformConfig()
    controls = controls if controls is not None else ControlPairs.empty()

    target_index = None
    if X_target is not None:
        target_index = X_target if isinstance(X_target, SpatialIndex) else build_index(X_target)
        if target_index.mesh.n_faces == 0:
            raise MeshError("empty target mesh")

    lap = build_laplacian(X, cfg.laplacian_weighting)
    fld = AffineField.identity(X)
    state = AmsGradState.init(fld.flatten())

    anchor_idx = anchor_w = None
    if len(controls) > 0:
        src_index = build_index(X)
        # sanity: control sources should sit on/near X
        _, sqd, _ = closest_points(src_index, controls.source)
        max_off = 0.05 * X.bbox_diagonal()
        worst = float(np.sqrt(sqd.max()))
        if worst > max_off:
            raise ValueError(
                f"control source point {int(np.argmax(sqd))} lies {worst:.2f} mm off the "
                f"source mesh (limit {max_off:.2f} mm)")
        anchor_idx, anchor_w = anchor_controls(X, controls.source, src_index)

    gate_floor = 0.0
    if target_index is not None:
        gate_floor = cfg.gate_floor_fraction * target_index.mesh.bbox_diagonal()

    corr = weights = None
    prev_total = None
    flat_patience = 0
    increases = 0
    max_increase = 0.0
    converged = False
    it = 0
    trace: list[tuple] = []
    prev_lam = None

    for it in range(cfg.iterations):
        fld.set_flat(state.params)
        lam = cfg.lambda_at(it)
        if target_index is not None and (it % max(1, cfg.refresh_cadence) == 0 or corr is None):
            pos = fld.apply_to_vertices(X.vertices)
            corr, sqd, _ = closest_points(target_index, pos)
            weights = np.ones(len(pos))
            if cfg.robust_gate:
                d = np.sqrt(sqd)
                gate = max(3.0 * np.median(d), gate_floor)
                weights = (d <= gate).astype(np.float64)
            prev_total = None  # new majorization
        if prev_lam is not None and lam != prev_lam:
            prev_total = None
            flat_patience = 0
        prev_lam = lam

        loss, grad = loss_gradient(X, corr, weights, controls, fld, lam, cfg.mu,
                                   lap, anchor_idx, anchor_w)
        if not np.isfinite(loss.total):
            raise DeformDiverged(
                f"non-finite loss at iteration {it}: mesh={loss.mesh} smooth={loss.smooth} "
                f"control={loss.control} lambda={lam} mu={cfg.mu}")
        if cfg.trace_path is not None:
            trace.append((it, loss.mesh, loss.smooth, loss.control))

        if prev_total is not None:
            if loss.total > prev_total * (1 + 1e-12):
                increases += 1
                max_increase = max(max_increase, loss.total - prev_total)
            rel = abs(prev_total - loss.total) / max(prev_total, 1e-300)
            flat_patience = flat_patience + 1 if rel < cfg.tol else 0
            if flat_patience >= cfg.tol_patience:
                converged = True
                break
        prev_total = loss.total

        if float(np.abs(grad).max()) == 0.0:
            converged = True  # exact stationary point; nothing will move
            break
        state = amsgrad_step(state, grad, cfg.learning_rate)

    fld.set_flat(state.params)
    final_pos = fld.apply_to_vertices(X.vertices)
    if target_index is not None:
        pos = final_pos
        corr, sqd, _ = closest_points(target_index, pos)
        if cfg.robust_gate:
            d = np.sqrt(sqd)
            weights = (d <= max(3.0 * np.median(d), gate_floor)).astype(np.float64)
    final_loss, _ = loss_gradient(X, corr, weights, controls, fld,
                                  cfg.lambda_at(it), cfg.mu, lap, anchor_idx, anchor_w)

    if cfg.trace_path is not None:
        with open(cfg.trace_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "L_mesh", "L_smooth", "L_control"])
            w.writerows(trace)

    out = TriMesh(final_pos, X.faces, X.albedo)
    return DeformResult(out, final_loss, it + 1, converged, increases, max_increase)
