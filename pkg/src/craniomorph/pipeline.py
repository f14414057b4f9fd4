"""Topology registration pipeline: raw face/skull scans -> template-topology
meshes with a dense tissue field.

Stages per subject:
  1. landmark similarity alignment + low-stiffness deform (initial face fit)
  2. dense normal-ray matching + deform onto the face scan
  3. occipital endpoint construction from facial landmarks
  4. dense face-to-endpoint rays intersected with both skulls; joint-mask
     control pairs drive the skull template onto the CT skull
  5. per-ray tissue vectors and the template index map
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .deform import ControlPairs, DeformConfig, deform
from .mesh import MeshError, TriMesh
from .meshio import load_mesh, save_mesh
from .raycast import (HitSet, RayBundle, build_skull_rays, cast_rays, load_hitset,
                      make_rays, match_by_normal_rays, save_hitset)
from .spatial import build_index, closest_points
from .synth import TemplateSet, default_templates

logger = logging.getLogger(__name__)

# landmark names psi-map needs to build the head frame
FRAME_LANDMARKS = ("nose_tip", "chin", "left_ear", "right_ear",
                   "left_eye_outer", "right_eye_outer")
MIN_LANDMARKS = 7
MIN_JOINT_CONTROLS = 100


class LandmarkError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """Named landmark indices on the face template plus positions on an instance."""

    template_indices: dict
    positions: dict

    def __post_init__(self):
        pos = {k: np.asarray(v, dtype=np.float64).reshape(3) for k, v in self.positions.items()}
        object.__setattr__(self, "positions", pos)

    def names(self) -> list[str]:
        common = set(self.template_indices) & set(self.positions)
        return sorted(common)

    def matched(self, template: TriMesh) -> tuple[np.ndarray, np.ndarray]:
        names = self.names()
        src = np.array([template.vertices[self.template_indices[n]] for n in names])
        dst = np.array([self.positions[n] for n in names])
        return src, dst

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(
            {k: list(map(float, v)) for k, v in self.positions.items()}, indent=2))

    @staticmethod
    def from_json(path, templates: TemplateSet) -> "LandmarkSet":
        data = json.loads(Path(path).read_text())
        return LandmarkSet(templates.landmarks, data)


@dataclass(frozen=True)
class EndpointSet:
    """Ordered ray endpoints behind the head."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(p) < 1:
            raise ValueError("need at least one endpoint")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class IndexMap:
    """Tissue-ray -> nearest skull-template-vertex assignment (length N_F * N_q)."""

    indices: np.ndarray
    valid: np.ndarray  # False where the ray itself was invalid (fallback entry)

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class RegistrationCase:
    """Template-topology face/skull pair plus the dense tissue field."""

    face: TriMesh
    skull: TriMesh
    tissue: HitSet
    n_endpoints: int
    meta: dict = field(default_factory=dict)


@dataclass
class RegistrationConfig:
    init_deform: DeformConfig = field(default_factory=lambda: DeformConfig(
        iterations=150, lambda_smooth=50.0, lambda_end=5.0, mu=20.0))
    face_deform: DeformConfig = field(default_factory=lambda: DeformConfig(
        iterations=300, lambda_smooth=100.0, lambda_end=1.0, mu=1.0))
    skull_deform: DeformConfig = field(default_factory=lambda: DeformConfig(
        iterations=300, lambda_smooth=100.0, lambda_end=1.0, mu=1.0))
    n_endpoints: int = 3
    origin_stride: int = 1


# ---------------------------------------------------------------------------
# Similarity alignment
# ---------------------------------------------------------------------------

def similarity_procrustes(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation R, scale s, translation t with dst ~ s R src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise LandmarkError("degenerate (collinear) landmark configuration")
    sign = np.sign(np.linalg.det(u @ vt))
    flip = np.diag([1.0, 1.0, sign])
    rot = u @ flip @ vt
    var_s = (xs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ flip) / var_s)
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def refine_similarity_icp(vertices: np.ndarray, target_index, scale, rot, trans,
                          iterations: int = 10, trim: float = 0.8):
    """Polish a similarity transform with trimmed closest-point iterations.

    Standard coarse-alignment stage: a seed transform fitted on localized
    correspondences extrapolates poorly to the far side of the mesh; a few
    whole-surface rigid iterations fix the global pose before the non-rigid
    solve.
    """
    for _ in range(iterations):
        moved = scale * vertices @ rot.T + trans
        corr, sqd, _ = closest_points(target_index, moved)
        d = np.sqrt(sqd)
        keep = d <= np.quantile(d, trim)
        keep &= d <= 3.0 * np.median(d) + 1e-12
        if keep.sum() < 10:
            break
        scale, rot, trans = similarity_procrustes(vertices[keep], corr[keep])
    return scale, rot, trans


def initial_face_fit(target: TriMesh, landmarks: LandmarkSet, templates: TemplateSet,
                     cfg: DeformConfig | None = None) -> TriMesh:
    """Similarity-align the face template to the landmarks, then one
    low-stiffness deform pass with landmark controls only."""
    names = landmarks.names()
    if len(names) < MIN_LANDMARKS:
        raise LandmarkError(f"need >= {MIN_LANDMARKS} landmarks, have {len(names)}")
    src, dst = landmarks.matched(templates.face)
    scale, rot, trans = similarity_procrustes(src, dst)
    aligned = scale * templates.face.vertices @ rot.T + trans
    aligned_mesh = TriMesh(aligned, templates.face.faces)
    controls = ControlPairs(scale * src @ rot.T + trans, dst)
    cfg = cfg or RegistrationConfig().init_deform
    return deform(aligned_mesh, target, controls, cfg).mesh


# ---------------------------------------------------------------------------
# psi-map: occipital ray endpoints from facial landmarks
# ---------------------------------------------------------------------------

def occipital_endpoints(landmark_positions: dict, n_endpoints: int = 3) -> EndpointSet:
    """Deterministic endpoints behind the head, built from a landmark frame.

    Frame: origin at the ear midpoint; up from chin toward the eye midpoint;
    back opposite the nose direction with the up component removed. Endpoints
    sit at {0.6..1.0} x (2 |nose - origin|) behind the origin, fanned +/-15
    degrees vertically. The construction is rigid-motion equivariant.
    """
    missing = [n for n in FRAME_LANDMARKS if n not in landmark_positions]
    if missing:
        raise LandmarkError(f"missing landmarks for endpoint construction: {missing}")
    lm = {k: np.asarray(v, dtype=np.float64) for k, v in landmark_positions.items()}
    origin = 0.5 * (lm["left_ear"] + lm["right_ear"])
    eye_mid = 0.5 * (lm["left_eye_outer"] + lm["right_eye_outer"])
    up = eye_mid - lm["chin"]
    up = up / np.linalg.norm(up)
    back = -(lm["nose_tip"] - origin)
    back = back - (back @ up) * up
    back = back / np.linalg.norm(back)
    depth = 2.0 * np.linalg.norm(lm["nose_tip"] - origin)
    # the fan reaches well below the ear line so rays from the lower face
    # meet the mandible at shallow angles instead of sailing over it
    if n_endpoints > 1:
        fractions = np.linspace(0.6, 1.0, n_endpoints)
        angles = np.deg2rad(np.linspace(-35.0, 15.0, n_endpoints))
    else:
        fractions = np.array([0.8])
        angles = np.array([np.deg2rad(-10.0)])
    dirs = np.cos(angles)[:, None] * back + np.sin(angles)[:, None] * up
    return EndpointSet(origin + dirs * (fractions * depth)[:, None])


# ---------------------------------------------------------------------------
# Face and skull registration
# ---------------------------------------------------------------------------

def _sample_albedo(scan: TriMesh, points: np.ndarray) -> Optional[np.ndarray]:
    if scan.albedo is None:
        return None
    from .deform import barycentric_weights
    idx = build_index(scan)
    proj, _, fids = closest_points(idx, points)
    tris = scan.faces[fids]
    w = barycentric_weights(proj, scan.vertices[tris[:, 0]], scan.vertices[tris[:, 1]],
                            scan.vertices[tris[:, 2]])
    alb = np.einsum("kc,kcj->kj", w, scan.albedo[tris])
    return np.clip(alb, 0.0, 1.0)


def register_face(f_init: TriMesh, scan: TriMesh, cfg: DeformConfig | None = None,
                  passes: int = 1):
    """Dense normal-ray matched deform onto the scan.

    Later passes re-derive the ray correspondences from the refined mesh,
    where the normal rays are nearly exact. Returns (registered face with
    scan-sampled albedo, fallback mask from the last matching pass).
    """
    cfg = cfg or RegistrationConfig().face_deform
    scan_index = build_index(scan)
    current = f_init
    fallback = np.zeros(f_init.n_vertices, dtype=bool)
    result = None
    for _ in range(max(1, passes)):
        p_init, p_target, fallback = match_by_normal_rays(current, scan_index)
        result = deform(current, scan_index, ControlPairs(p_init, p_target), cfg)
        current = result.mesh
    albedo = _sample_albedo(scan, current.vertices)
    face = TriMesh(current.vertices, current.faces, albedo)
    logger.info("face registration: %d/%d ray fallbacks, final loss %.3e",
                int(fallback.sum()), len(fallback), result.loss.total)
    return face, fallback


def register_skull(f_reg: TriMesh, raw_skull: TriMesh, templates: TemplateSet,
                   cfg: DeformConfig | None = None, n_endpoints: int = 3,
                   origin_stride: int = 1):
    """Deform the skull template onto the CT skull via dense face-anchored rays.

    Returns (registered skull, subject HitSet, template HitSet). The subject
    HitSet rows are ordered (face vertex j outer, endpoint k inner) and its
    vectors are the dense tissue field.
    """
    lm_subject = templates.landmark_positions(f_reg.vertices)
    lm_template = templates.landmark_positions()
    q_subject = occipital_endpoints(lm_subject, n_endpoints)
    q_template = occipital_endpoints(lm_template, n_endpoints)

    rays_subject = build_skull_rays(f_reg, q_subject.points)
    rays_template = build_skull_rays(templates.face, q_template.points)
    hits_subject = cast_rays(rays_subject, raw_skull)
    hits_template = cast_rays(rays_template, templates.skull)

    joint = hits_subject.mask & hits_template.mask
    row_sel = np.repeat(np.arange(templates.n_face) % origin_stride == 0, n_endpoints)
    control_mask = joint & row_sel
    if int(control_mask.sum()) < MIN_JOINT_CONTROLS:
        raise MeshError(f"only {int(control_mask.sum())} joint-valid ray controls "
                        f"(< {MIN_JOINT_CONTROLS})")

    # tissue-scale hits only: rays escaping through holes strike far interior
    # surfaces whose positions are lever-arm unstable; cap the hit distance
    t_template = np.linalg.norm(hits_template.vectors[control_mask], axis=1)
    t_subject = np.linalg.norm(hits_subject.vectors[control_mask], axis=1)
    near = t_template <= 2.5 * np.median(t_template)

    # coarse stage: similarity fit of the control pairs carries the template
    # into the subject frame before the non-rigid solve; whole-surface rigid
    # ICP then fixes the pose where controls cannot reach
    src = hits_template.points[control_mask][near]
    dst = hits_subject.points[control_mask][near]
    scale, rot, trans = similarity_procrustes(src, dst)
    target_index = build_index(raw_skull)
    scale, rot, trans = refine_similarity_icp(
        templates.skull.vertices, target_index, scale, rot, trans)
    src_aligned = scale * src @ rot.T + trans
    # corresponding rays must report comparable tissue distances; pairs that
    # disagree hit different structures (e.g. the inner bone table)
    t_resid = np.abs(t_subject[near] - scale * t_template[near])
    keep = t_resid <= np.maximum(6.0, 3.0 * np.median(t_resid))
    # grazing rays near the skull silhouette produce unstable hits; gate
    # residual pair distances at 3x their median
    resid = np.linalg.norm(src_aligned - dst, axis=1)
    keep &= resid <= 3.0 * np.median(resid[keep])
    n_controls = int(keep.sum())
    if n_controls < MIN_JOINT_CONTROLS:
        raise MeshError(f"only {n_controls} consistent ray controls (< {MIN_JOINT_CONTROLS})")
    skull_init = TriMesh(scale * templates.skull.vertices @ rot.T + trans,
                         templates.skull.faces)
    controls = ControlPairs(src_aligned[keep], dst[keep])
    cfg = cfg or RegistrationConfig().skull_deform
    result = deform(skull_init, target_index, controls, cfg)
    logger.info("skull registration: %d controls, %.1f%% joint-valid rays, loss %.3e",
                n_controls, 100.0 * joint.mean(), result.loss.total)
    return result.mesh, hits_subject, hits_template


def build_index_map(skull_template: TriMesh, template_hits: HitSet,
                    rays: RayBundle | None = None) -> IndexMap:
    """Nearest-skull-vertex assignment for every template ray.

    Invalid rays fall back to the skull vertex nearest the ray origin and are
    flagged, so downstream arrays keep their fixed N_F * N_q length.
    """
    tree = cKDTree(skull_template.vertices)
    indices = np.zeros(len(template_hits), dtype=np.int64)
    valid = template_hits.mask.copy()
    if valid.any():
        _, idx = tree.query(template_hits.points[valid])
        indices[valid] = idx
    if (~valid).any():
        if rays is None:
            raise ValueError("rays required to place fallback entries for invalid hits")
        _, idx = tree.query(rays.origins[~valid])
        indices[~valid] = idx
    return IndexMap(indices, valid)


def flip_augment(case: RegistrationCase, templates: TemplateSet) -> RegistrationCase:
    """Mirror a registered case across x=0 using the template symmetry maps.

    Applying it twice returns the original (exactly, up to float negation).
    """
    neg = np.array([-1.0, 1.0, 1.0])
    sym_f = templates.face_symmetry
    sym_s = templates.skull_symmetry
    if len(sym_f) != case.face.n_vertices or len(sym_s) != case.skull.n_vertices:
        raise ValueError("symmetry maps do not match case topology")
    face_v = case.face.vertices[sym_f] * neg
    albedo = None if case.face.albedo is None else case.face.albedo[sym_f]
    skull_v = case.skull.vertices[sym_s] * neg

    n_q = case.n_endpoints
    ray_perm = (sym_f[:, None] * n_q + np.arange(n_q)[None, :]).reshape(-1)
    tissue = HitSet(case.tissue.points[ray_perm] * neg,
                    case.tissue.vectors[ray_perm] * neg,
                    case.tissue.mask[ray_perm])
    meta = dict(case.meta)
    meta["flipped"] = not meta.get("flipped", False)
    return RegistrationCase(TriMesh(face_v, case.face.faces, albedo),
                            TriMesh(skull_v, case.skull.faces),
                            tissue, n_q, meta)


# ---------------------------------------------------------------------------
# Orchestration and case-directory layout
# ---------------------------------------------------------------------------

def _sha(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def register_case(face_scan: TriMesh, skull_ct: TriMesh, landmarks: LandmarkSet,
                  templates: TemplateSet, cfg: RegistrationConfig | None = None) -> RegistrationCase:
    cfg = cfg or RegistrationConfig()
    f_init = initial_face_fit(face_scan, landmarks, templates, cfg.init_deform)
    f_reg, fallback = register_face(f_init, face_scan, cfg.face_deform)
    skull, hits_subject, _ = register_skull(
        f_reg, skull_ct, templates, cfg.skull_deform, cfg.n_endpoints, cfg.origin_stride)
    meta = {
        "input_hash": _sha(face_scan.vertices, face_scan.faces, skull_ct.vertices, skull_ct.faces),
        "config": _config_fingerprint(cfg),
        "ray_fallbacks": int(fallback.sum()),
        "valid_ray_fraction": float(hits_subject.mask.mean()),
        "n_endpoints": cfg.n_endpoints,
        "paper_scale": templates.paper_scale,
    }
    return RegistrationCase(f_reg, skull, hits_subject, cfg.n_endpoints, meta)


def _config_fingerprint(cfg) -> str:
    from dataclasses import asdict
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def read_case_dir(case_dir, templates: TemplateSet):
    """Input layout: case_<id>/{face_scan.ply, skull_ct.ply, landmarks.json}."""
    case_dir = Path(case_dir)
    face = load_mesh(case_dir / "face_scan.ply")
    skull = load_mesh(case_dir / "skull_ct.ply")
    landmarks = LandmarkSet.from_json(case_dir / "landmarks.json", templates)
    return face, skull, landmarks


def write_registered(case: RegistrationCase, case_dir) -> Path:
    """Output layout: case_<id>/registered/{face.ply, skull.ply, tissue.bin, meta.json}."""
    out = Path(case_dir) / "registered"
    out.mkdir(parents=True, exist_ok=True)
    save_mesh(case.face, out / "face.ply")
    save_mesh(case.skull, out / "skull.ply")
    save_hitset(case.tissue, out / "tissue.bin")
    meta = dict(case.meta)
    meta["n_endpoints"] = case.n_endpoints
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def load_registered(case_dir) -> RegistrationCase:
    reg = Path(case_dir) / "registered"
    face = load_mesh(reg / "face.ply")
    skull = load_mesh(reg / "skull.ply")
    tissue = load_hitset(reg / "tissue.bin")
    meta = json.loads((reg / "meta.json").read_text())
    return RegistrationCase(face, skull, tissue, int(meta["n_endpoints"]), meta)
