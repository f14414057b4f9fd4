"""Procedural paired face/skull cases with exact ground truth.

Both templates are parametric surfaces over (theta, phi): theta runs from the
crown (0) to below the chin (pi), phi around the vertical axis with phi = 0
facing forward (+Z) and the mirror plane at x = 0. A case is produced by a
smooth random radial-basis warp of space shared by face and skull, plus a
tissue-thickness offset applied to the face along the template surface
normals. Because the raw "scan" meshes are resampled from the same smooth
surfaces, every raw vertex has an exact known location on the ground-truth
surface; that is what makes desk-scale oracles possible.

Realism is explicitly not a goal; exercising every code path with known
ground truth is.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .mesh import TriMesh
from .regions import apply_region_transform
from .spatial import build_index, closest_points

PAPER_N_FACE = 35709
PAPER_N_SKULL = 23208

# skull ellipsoid radii, mm
_RX, _RY, _RZ = 72.0, 92.0, 80.0
# face template clearance above the skull surface, mm-scale radial inflation
_CLEARANCE = (10.0, 8.0, 10.0)

_LANDMARK_PARAMS = {
    "nose_tip": (0.52, 0.0),
    "chin": (0.745, 0.0),
    "forehead": (0.30, 0.0),
    "mouth_center": (0.63, 0.0),
    "left_eye_outer": (0.44, 0.55),
    "left_eye_inner": (0.44, 0.28),
    "left_ear": (0.52, 0.53 * np.pi),
}
_MIRROR_LANDMARKS = {
    "left_eye_outer": "right_eye_outer",
    "left_eye_inner": "right_eye_inner",
    "left_ear": "right_ear",
}

REGION_NAMES = ["cranium", "forehead", "nasal", "left_zygoma", "right_zygoma", "mandible"]


def _bump(x, center, width):
    return np.exp(-0.5 * ((x - center) / width) ** 2)


def skull_radial_scale(theta, phi):
    """Feature field multiplying the skull ellipsoid radius."""
    t = theta / np.pi
    jaw = 0.14 * _bump(t, 0.80, 0.09) * _bump(phi, 0.0, 0.55)
    brow = 0.04 * _bump(t, 0.42, 0.05) * _bump(np.abs(phi), 0.40, 0.25)
    zygoma = 0.05 * _bump(t, 0.52, 0.06) * _bump(np.abs(phi), 0.80, 0.30)
    return 1.0 + jaw + brow + zygoma


def skull_surface(theta, phi):
    s = skull_radial_scale(theta, phi)
    st = np.sin(theta)
    return np.stack([
        s * _RX * st * np.sin(phi),
        s * _RY * np.cos(theta),
        s * _RZ * st * np.cos(phi),
    ], axis=-1)


def face_feature_scale(theta, phi):
    t = theta / np.pi
    nose = 0.13 * _bump(t, 0.52, 0.045) * _bump(phi, 0.0, 0.14)
    brow = 0.035 * _bump(t, 0.42, 0.05) * _bump(phi, 0.0, 0.55)
    lips = 0.045 * _bump(t, 0.63, 0.030) * _bump(phi, 0.0, 0.25)
    chin = 0.055 * _bump(t, 0.74, 0.05) * _bump(phi, 0.0, 0.28)
    cheek = 0.035 * _bump(t, 0.55, 0.08) * _bump(np.abs(phi), 0.52, 0.25)
    eyes = -0.025 * _bump(t, 0.44, 0.04) * _bump(np.abs(phi), 0.42, 0.16)
    return 1.0 + nose + brow + lips + chin + cheek + eyes


def face_surface(theta, phi):
    s = skull_radial_scale(theta, phi) * face_feature_scale(theta, phi)
    st = np.sin(theta)
    return np.stack([
        s * (_RX + _CLEARANCE[0]) * st * np.sin(phi),
        s * (_RY + _CLEARANCE[1]) * np.cos(theta),
        s * (_RZ + _CLEARANCE[2]) * st * np.cos(phi),
    ], axis=-1)


# the template face carries the population-nominal tissue offset, so subject
# faces differ from it only by their individual thickness deviations
NOMINAL_TISSUE = 4.0


def face_template_surface(theta, phi):
    base = face_surface(theta, phi)
    return base + _surface_normal(face_surface, theta, phi) * NOMINAL_TISSUE


def _surface_normal(surface_fn, theta, phi, h=1e-5):
    dt = (surface_fn(theta + h, phi) - surface_fn(theta - h, phi)) / (2 * h)
    dp = (surface_fn(theta, phi + h) - surface_fn(theta, phi - h)) / (2 * h)
    n = np.cross(dt, dp)  # oriented outward for our parametrization
    lens = np.linalg.norm(n, axis=-1, keepdims=True)
    # parametrization degenerates at the poles; fall back to the radial direction
    p = surface_fn(theta, phi)
    radial = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-300)
    return np.where(lens > 1e-9, n / np.maximum(lens, 1e-300), radial)


def _skull_cutout_metric(theta, phi):
    """< 1 inside regions removed from the skull shell: the two eye socket
    openings and the mouth slit that separates mandible from maxilla."""
    t = theta / np.pi
    left = ((t - 0.44) / 0.055) ** 2 + ((phi - 0.42) / 0.17) ** 2
    right = ((t - 0.44) / 0.055) ** 2 + ((phi + 0.42) / 0.17) ** 2
    mouth = ((t - 0.705) / 0.028) ** 2 + (phi / 0.60) ** 2
    return np.minimum(np.minimum(left, right), mouth)


# ---------------------------------------------------------------------------
# Template meshes
# ---------------------------------------------------------------------------

def _mirrored_phis(count: int, phi_max: float) -> np.ndarray:
    """Symmetric phi samples: phis[i] == -phis[count-1-i] bit-exactly."""
    phis = np.linspace(-phi_max, phi_max, count)
    half = count // 2
    phis[:half] = -phis[count - half:][::-1]
    if count % 2 == 1:
        phis[half] = 0.0
    return phis


def build_face_patch(n_theta: int, n_phi: int, exact_count: Optional[int] = None):
    """Elliptically masked face grid; returns (mesh, params, symmetry, kept grid map)."""
    thetas = np.linspace(0.17 * np.pi, 0.86 * np.pi, n_theta)
    phis = _mirrored_phis(n_phi, 0.55 * np.pi)
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    metric = (((tt - 0.515 * np.pi) / (0.345 * np.pi)) ** 2
              + (pp / (0.55 * np.pi)) ** 2)
    if exact_count is None:
        keep = metric <= 1.0
    else:
        keep = _keep_exact(metric, n_phi, exact_count)
    grid_id = -np.ones((n_theta, n_phi), dtype=np.int64)
    grid_id[keep] = np.arange(keep.sum())
    verts = face_template_surface(tt[keep], pp[keep])
    params = np.stack([tt[keep], pp[keep]], axis=1)
    # bit-exact mirror: the phi < 0 half copies negated coordinates from the
    # phi > 0 half; the center column gets x = 0 exactly
    mirror_grid = grid_id[:, ::-1]
    sym = mirror_grid[keep]
    neg = params[:, 1] < 0
    verts[neg] = verts[sym[neg]] * np.array([-1.0, 1.0, 1.0])
    verts[params[:, 1] == 0.0, 0] = 0.0

    faces = _grid_faces(grid_id)
    mesh = TriMesh(verts, faces)
    return mesh, params, sym, grid_id


def _keep_exact(metric: np.ndarray, n_phi: int, target: int) -> np.ndarray:
    """Symmetric mask with exactly `target` vertices: grow by mirror pairs
    (and center-column singletons) in ascending metric order."""
    nt = metric.shape[0]
    center = (n_phi - 1) // 2 if n_phi % 2 == 1 else None
    groups = []  # (metric value, [cells])
    for r in range(nt):
        for c in range((n_phi + 1) // 2):
            cm = n_phi - 1 - c
            if c == cm:
                groups.append((metric[r, c], [(r, c)]))
            else:
                groups.append((metric[r, c], [(r, c), (r, cm)]))
    groups.sort(key=lambda g: (g[0], g[1][0][0], g[1][0][1]))
    keep = np.zeros_like(metric, dtype=bool)
    count = 0
    included_singles: list = []
    skipped_pair = None
    for value, cells in groups:
        if count + len(cells) <= target:
            for r, c in cells:
                keep[r, c] = True
            count += len(cells)
            if len(cells) == 1:
                included_singles.append(cells[0])
        elif len(cells) == 2 and skipped_pair is None:
            skipped_pair = cells
        if count == target:
            break
    if count == target - 1 and included_singles and skipped_pair is not None:
        # parity fix-up: trade the last center-column cell for one mirror pair
        r, c = included_singles[-1]
        keep[r, c] = False
        for r, c in skipped_pair:
            keep[r, c] = True
        count += 1
    if count != target:
        raise ValueError(f"could not mask grid to exactly {target} vertices (got {count})")
    return keep


def _grid_faces(grid_id: np.ndarray) -> np.ndarray:
    """Two triangles per quad whose four corners are all kept.

    The quad diagonal flips across the vertical midline so the triangulation
    is itself mirror-symmetric (hole rims cut into it stay symmetric too).
    """
    a = grid_id[:-1, :-1]
    b = grid_id[:-1, 1:]
    c = grid_id[1:, :-1]
    d = grid_id[1:, 1:]
    ok = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    n_quad_cols = grid_id.shape[1] - 1
    main = np.broadcast_to(2 * np.arange(n_quad_cols) < n_quad_cols - 1, a.shape)
    fm = np.concatenate([np.stack([a[ok & main], c[ok & main], d[ok & main]], axis=1),
                         np.stack([a[ok & main], d[ok & main], b[ok & main]], axis=1)])
    anti = ~main
    fa = np.concatenate([np.stack([a[ok & anti], c[ok & anti], b[ok & anti]], axis=1),
                         np.stack([b[ok & anti], c[ok & anti], d[ok & anti]], axis=1)])
    return np.concatenate([fm, fa], axis=0)


def build_skull_shell(n_lon: int, n_rings: int, exact_count: Optional[int] = None):
    """Closed lat-long ellipsoid with feature bumps and cut eye sockets.

    Returns (mesh, params, symmetry). Socket vertices are removed entirely so
    the mesh is non-watertight with two boundary loops. With exact_count set,
    sockets are grown vertex-pair by vertex-pair until the final mesh has
    exactly that many vertices.
    """
    thetas = np.linspace(0, np.pi, n_rings + 2)[1:-1]
    ks = np.arange(n_lon)
    phis = 2 * np.pi * ks / n_lon - np.pi  # phi=0 faces forward at k = n_lon/2
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    verts = skull_surface(tt, pp).reshape(-1, 3)
    grid_id = np.arange(n_rings * n_lon).reshape(n_rings, n_lon)
    # mirror longitude k <-> (n_lon - k) % n_lon; copy the fresh half bit-exactly
    mirror_k = (n_lon - ks) % n_lon
    sym = grid_id[:, mirror_k].reshape(-1)
    stale = ks > mirror_k
    vgrid = verts.reshape(n_rings, n_lon, 3)
    vgrid[:, stale] = vgrid[:, mirror_k[stale]] * np.array([-1.0, 1.0, 1.0])
    vgrid[:, ks == mirror_k, 0] = 0.0
    verts = vgrid.reshape(-1, 3)

    top = len(verts)
    bottom = top + 1
    verts = np.concatenate([verts, skull_surface(np.array([0.0]), np.array([0.0])),
                            skull_surface(np.array([np.pi]), np.array([0.0]))])
    verts[top, 0] = verts[bottom, 0] = 0.0
    params = np.concatenate([np.stack([tt.reshape(-1), pp.reshape(-1)], axis=1),
                             [[0.0, 0.0]], [[np.pi, 0.0]]])
    sym = np.concatenate([sym, [top, bottom]])

    faces = []
    for r in range(n_rings - 1):
        i0 = grid_id[r]
        i1 = grid_id[r + 1]
        for k in range(n_lon):
            k2 = (k + 1) % n_lon
            if 2 * k < n_lon - 1:  # mirror-symmetric diagonal choice
                faces.append([i0[k], i1[k], i1[k2]])
                faces.append([i0[k], i1[k2], i0[k2]])
            else:
                faces.append([i0[k], i1[k], i0[k2]])
                faces.append([i0[k2], i1[k], i1[k2]])
    for k in range(n_lon):
        k2 = (k + 1) % n_lon
        faces.append([top, grid_id[0, k], grid_id[0, k2]])
        faces.append([bottom, grid_id[-1, k2], grid_id[-1, k]])
    faces = np.array(faces, dtype=np.int64)

    metric = _skull_cutout_metric(params[:, 0], params[:, 1])
    if exact_count is None:
        removed = metric < 0.75
    else:
        removed = _remove_exact(metric, sym, len(verts) - exact_count)
    keep_faces = ~removed[faces].any(axis=1)
    faces = faces[keep_faces]
    # drop unreferenced vertices, remap indices and symmetry
    used = np.zeros(len(verts), dtype=bool)
    used[faces.reshape(-1)] = True
    if exact_count is not None and used.sum() != exact_count:
        raise RuntimeError(
            f"socket cut stranded {int((~used & ~removed).sum())} vertices; "
            f"got {int(used.sum())} instead of {exact_count}")
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    mesh = TriMesh(verts[used], remap[faces])
    params = params[used]
    sym_used = remap[sym[used]]
    if (sym_used < 0).any():
        raise RuntimeError("socket cut broke mirror symmetry")
    return mesh, params, sym_used


def _remove_exact(metric: np.ndarray, sym: np.ndarray, n_remove: int) -> np.ndarray:
    """Mark the n_remove deepest-in-cutout vertices, symmetrically.

    Off-midline vertices go in mirror pairs; midline vertices (the mouth slit
    crosses phi = 0) go alone and fix up the parity.
    """
    if n_remove < 0:
        raise ValueError(f"cannot remove {n_remove} vertices")
    order = np.argsort(metric, kind="stable")
    removed = np.zeros(len(metric), dtype=bool)
    count = 0
    last_single = -1
    for i in order:
        if count >= n_remove:
            break
        if removed[i]:
            continue
        j = sym[i]
        if j == i:
            if count + 1 <= n_remove:
                removed[i] = True
                count += 1
                last_single = i
        elif count + 2 <= n_remove:
            removed[i] = removed[j] = True
            count += 2
    if count == n_remove - 1 and last_single >= 0:
        # trade one midline vertex for the next unremoved mirror pair
        removed[last_single] = False
        for i in order:
            j = sym[i]
            if not removed[i] and j != i and not removed[j]:
                removed[i] = removed[j] = True
                count += 1
                break
    if count != n_remove:
        raise RuntimeError(f"could only remove {count} of {n_remove} vertices")
    return removed


def _skull_region_labels(params: np.ndarray) -> np.ndarray:
    t = params[:, 0] / np.pi
    phi = params[:, 1]
    labels = np.zeros(len(params), dtype=np.int64)  # cranium
    labels[(t >= 0.30) & (t <= 0.42) & (np.abs(phi) < 0.9)] = REGION_NAMES.index("forehead")
    labels[(t > 0.44) & (t < 0.58) & (np.abs(phi) < 0.20)] = REGION_NAMES.index("nasal")
    zy = (t > 0.46) & (t < 0.62) & (np.abs(phi) > 0.55) & (np.abs(phi) < 1.15)
    labels[zy & (phi > 0)] = REGION_NAMES.index("left_zygoma")
    labels[zy & (phi < 0)] = REGION_NAMES.index("right_zygoma")
    labels[(t > 0.73) & (np.abs(phi) < 1.0)] = REGION_NAMES.index("mandible")
    return labels


@dataclass(frozen=True)
class TemplateSet:
    """Fixed-topology face and skull templates plus their companion data."""

    face: TriMesh
    skull: TriMesh
    face_params: np.ndarray   # (N_F, 2) (theta, phi)
    skull_params: np.ndarray
    face_symmetry: np.ndarray  # involutive vertex permutations (mirror x -> -x)
    skull_symmetry: np.ndarray
    landmarks: dict            # name -> face template vertex index
    skull_regions: np.ndarray  # per-vertex region label id
    region_names: tuple
    paper_scale: bool

    @property
    def n_face(self) -> int:
        return self.face.n_vertices

    @property
    def n_skull(self) -> int:
        return self.skull.n_vertices

    def landmark_positions(self, face_vertices: np.ndarray | None = None) -> dict:
        v = self.face.vertices if face_vertices is None else face_vertices
        return {name: v[i].copy() for name, i in self.landmarks.items()}


def _find_landmarks(params: np.ndarray, sym: np.ndarray) -> dict:
    out = {}
    for name, (t_frac, phi) in _LANDMARK_PARAMS.items():
        d = (params[:, 0] - t_frac * np.pi) ** 2 + (params[:, 1] - phi) ** 2
        out[name] = int(np.argmin(d))
    for left, right in _MIRROR_LANDMARKS.items():
        out[right] = int(sym[out[left]])
    return out


@lru_cache(maxsize=2)
def default_templates(paper_scale: bool = False) -> TemplateSet:
    if paper_scale:
        face, fparams, fsym, _ = build_face_patch(214, 213, exact_count=PAPER_N_FACE)
        skull, sparams, ssym = build_skull_shell(286, 82, exact_count=PAPER_N_SKULL)
    else:
        face, fparams, fsym, _ = build_face_patch(101, 101)
        skull, sparams, ssym = build_skull_shell(72, 34)
    landmarks = _find_landmarks(fparams, fsym)
    regions = _skull_region_labels(sparams)
    return TemplateSet(face, skull, fparams, sparams, fsym, ssym,
                       landmarks, regions, tuple(REGION_NAMES), paper_scale)


# ---------------------------------------------------------------------------
# Case generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    n_warp_bumps: int = 8
    warp_amplitude: float = 3.2          # mm
    warp_sigma_range: tuple = (22.0, 50.0)
    mode_scale: float = 1.0              # structured anatomy modes (jaw, vault, ...)
    pose_rotation: float = 0.10          # radians, subject frame vs template frame
    pose_scale: tuple = (0.92, 1.12)     # head size range
    pose_translation: float = 12.0       # mm
    thickness_base: float = 4.0          # mm added over the template clearance
    thickness_mod_terms: int = 3
    thickness_mod_amplitude: float = 0.30  # fraction of base
    fat_scale: float = 1.0
    asymmetry: float = 0.0               # 0 symmetric .. 1 strongly one-sided
    resample_factor: float = 1.37
    jitter_sigma: float = 0.12           # mm, raw-scan vertex noise
    inner_table_mm: float = 3.0          # CT skulls are double-walled; 0 disables
    paper_scale: bool = False
    # optional shared structure (set by generate_corpus so the whole corpus
    # spans a fixed low-dimensional family)
    warp_centers: Optional[tuple] = None
    warp_sigmas: Optional[tuple] = None
    mod_freqs: Optional[tuple] = None
    mod_phases: Optional[tuple] = None


@dataclass
class SynthCase:
    gt_face: TriMesh          # template topology, with albedo
    gt_skull: TriMesh         # template topology
    raw_face: TriMesh         # scan-like: resampled topology + jitter, with albedo
    raw_skull: TriMesh
    landmark_positions: dict  # name -> (3,) exact position on the gt surface
    thickness_offset: np.ndarray  # (N_F,) generative tissue offset, mm
    raw_face_true: np.ndarray     # pre-jitter raw face vertex positions
    raw_face_params: np.ndarray
    raw_skull_true: np.ndarray
    raw_skull_params: np.ndarray
    params: SynthParams

    def case_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.gt_face.vertices, self.gt_skull.vertices,
                  self.raw_face.vertices, self.raw_skull.vertices):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


class WarpTooStrong(ValueError):
    """Requested warp is not safely bijective; reduce amplitudes or widen sigmas."""


# structured anatomy modes: fixed spatial Gaussians with case-specific
# amplitudes (jaw protrusion/retrusion, cranial vault, brow/midface, occiput)
_MODE_CENTERS = np.array([
    [0.0, -75.0, 60.0],   # jaw / mandible
    [0.0, 80.0, 0.0],     # cranial vault
    [0.0, 12.0, 85.0],    # brow / midface
    [0.0, 10.0, -80.0],   # occiput
])
_MODE_SIGMAS = np.array([42.0, 60.0, 34.0, 48.0])
_MODE_AMP_RANGES = np.array([  # per-axis amplitude bounds, mm
    [1.0, 4.0, 7.0],
    [1.0, 4.0, 2.0],
    [1.0, 1.5, 2.5],
    [1.0, 2.0, 4.0],
])


def _draw_warp(params: SynthParams, rng: np.random.Generator):
    n = params.n_warp_bumps
    if params.warp_centers is not None:
        centers = np.asarray(params.warp_centers, dtype=np.float64).reshape(n, 3)
        sigmas = np.asarray(params.warp_sigmas, dtype=np.float64).reshape(n)
    else:
        # craniofacial deformity variation concentrates in the anterior
        # half (midface, orbits, jaw); the vault and occiput vary mildly
        centers = rng.uniform([-110, -130, -25], [110, 130, 115], size=(n, 3))
        sigmas = rng.uniform(*params.warp_sigma_range, size=n)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = dirs * (rng.uniform(0.35, 1.0, size=(n, 1)) * params.warp_amplitude)

    mode_amps = rng.uniform(-1.0, 1.0, size=_MODE_AMP_RANGES.shape) \
        * _MODE_AMP_RANGES * params.mode_scale
    centers = np.concatenate([centers, _MODE_CENTERS])
    sigmas = np.concatenate([sigmas, _MODE_SIGMAS])
    amps = np.concatenate([amps, mode_amps])

    # bijectivity: the max displacement gradient of a Gaussian bump is
    # |a| * exp(-1/2) / sigma; keep the sum of bounds under 1
    bound = float(np.sum(np.linalg.norm(amps, axis=1) * np.exp(-0.5) / sigmas))
    if bound >= 0.9:
        raise WarpTooStrong(
            f"warp displacement-gradient bound {bound:.2f} >= 0.9; "
            "reduce warp_amplitude or n_warp_bumps, or widen warp_sigma_range")
    return centers, sigmas, amps


def _draw_pose(params: SynthParams, rng: np.random.Generator):
    rotvec = rng.uniform(-params.pose_rotation, params.pose_rotation, 3)
    scale = rng.uniform(*params.pose_scale)
    trans = rng.uniform(-params.pose_translation, params.pose_translation, 3)
    from scipy.spatial.transform import Rotation
    return scale, Rotation.from_rotvec(rotvec).as_matrix(), trans


def _warp_field(x, centers, sigmas, amps, asymmetry):
    def raw(pts):
        d2 = np.sum((pts[:, None, :] - centers[None]) ** 2, axis=2)
        g = np.exp(-0.5 * d2 / sigmas[None] ** 2)
        return g @ amps
    u = raw(x)
    mirrored = x * np.array([-1.0, 1.0, 1.0])
    u_m = raw(mirrored) * np.array([-1.0, 1.0, 1.0])
    u_sym = 0.5 * (u + u_m)
    return (1.0 - asymmetry) * u_sym + asymmetry * u


def _draw_thickness(params: SynthParams, rng: np.random.Generator):
    m = params.thickness_mod_terms
    if params.mod_freqs is not None:
        freqs = np.asarray(params.mod_freqs, dtype=np.float64).reshape(m, 2)
        phases = np.asarray(params.mod_phases, dtype=np.float64).reshape(m, 2)
    else:
        freqs = rng.integers(1, 4, size=(m, 2)).astype(np.float64)
        phases = rng.uniform(0, 2 * np.pi, size=(m, 2))
    amps = rng.uniform(-1.0, 1.0, size=m) * params.thickness_mod_amplitude / max(m, 1)
    return freqs, phases, amps


def _thickness_profile(theta, phi, params: SynthParams, freqs, phases, amps):
    base = params.thickness_base
    mod = np.zeros_like(theta)
    for (ft, fp), (pt, pp_), a in zip(freqs, phases, amps):
        mod = mod + a * np.cos(ft * theta + pt) * np.cos(fp * phi + pp_)
    side = np.tanh(phi / 0.35)
    profile = params.fat_scale * base * (1.0 + mod) * (1.0 + 0.35 * params.asymmetry * side)
    return np.maximum(profile, 0.8)


def _albedo(theta, phi, tone):
    t = theta / np.pi
    base = np.stack([
        0.82 * tone * (1 - 0.08 * t),
        0.62 * tone * (1 - 0.10 * t),
        0.52 * tone * (1 - 0.05 * t),
    ], axis=-1)
    lips = _bump(t, 0.63, 0.02) * _bump(phi, 0.0, 0.22)
    base[..., 0] += 0.12 * lips
    base[..., 1] -= 0.15 * lips
    base[..., 2] -= 0.10 * lips
    brows = _bump(t, 0.405, 0.012) * _bump(np.abs(phi), 0.40, 0.22)
    base -= 0.45 * brows[..., None]
    return np.clip(base, 0.0, 1.0)


def generate_case(params: SynthParams) -> SynthCase:
    """Deterministic per seed; raises WarpTooStrong for non-bijective warps."""
    templates = default_templates(params.paper_scale)
    rng = np.random.default_rng(params.seed)
    centers, sigmas, amps = _draw_warp(params, rng)
    freqs, phases, t_amps = _draw_thickness(params, rng)
    pose_s, pose_r, pose_t = _draw_pose(params, rng)
    tone = rng.uniform(0.88, 1.10)
    jit_rng = np.random.default_rng(rng.integers(0, 2 ** 63))

    def bump_map(x):
        return x + _warp_field(x, centers, sigmas, amps, params.asymmetry)

    def pose_map(x):
        return pose_s * x @ pose_r.T + pose_t

    def warp(x):
        return pose_map(bump_map(x))

    def face_points(theta, phi):
        base = face_template_surface(theta, phi)
        n0 = _surface_normal(face_surface, theta, phi)
        dev = _thickness_profile(theta, phi, params, freqs, phases, t_amps) - NOMINAL_TISSUE
        return pose_map(bump_map(base.reshape(-1, 3))
                        + n0.reshape(-1, 3) * dev.reshape(-1, 1))

    ft, fp = templates.face_params[:, 0], templates.face_params[:, 1]
    gt_face_v = face_points(ft, fp)
    gt_face = TriMesh(gt_face_v, templates.face.faces, _albedo(ft, fp, tone))
    st, sp = templates.skull_params[:, 0], templates.skull_params[:, 1]
    gt_skull = TriMesh(warp(skull_surface(st, sp)), templates.skull.faces)

    # world-frame tissue offset (the pose scale acts on distances too)
    thickness = pose_s * _thickness_profile(ft, fp, params, freqs, phases, t_amps)
    _check_no_intersection(gt_face, gt_skull, st, sp, warp)

    # raw "scan" meshes: same smooth surfaces, resampled and jittered
    f = params.resample_factor
    if params.paper_scale:
        nt, nph = int(214 * f), int(213 * f) | 1
        raw_face_mesh, rf_params, _, _ = build_face_patch(nt, nph)
    else:
        nt, nph = int(101 * f), int(101 * f) | 1
        raw_face_mesh, rf_params, _, _ = build_face_patch(nt, nph)
    rf_true = face_points(rf_params[:, 0], rf_params[:, 1])
    rf_v = rf_true + jit_rng.normal(0, params.jitter_sigma, rf_true.shape)
    raw_face = TriMesh(rf_v, raw_face_mesh.faces, _albedo(rf_params[:, 0], rf_params[:, 1], tone))

    if params.paper_scale:
        raw_skull_mesh, rs_params, _ = build_skull_shell(int(286 * f), int(82 * f))
    else:
        raw_skull_mesh, rs_params, _ = build_skull_shell(int(72 * f), int(34 * f))
    rs_true = warp(skull_surface(rs_params[:, 0], rs_params[:, 1]))
    rs_v = rs_true + jit_rng.normal(0, params.jitter_sigma, rs_true.shape)
    raw_skull = TriMesh(rs_v, raw_skull_mesh.faces)
    if params.inner_table_mm > 0:
        # CT bone is double-walled: add an inner table offset inward, at a
        # coarser sampling, welded into the same (non-watertight) mesh
        inner_mesh, in_params, _ = build_skull_shell(int(48 * f), int(23 * f))
        n0 = _surface_normal(skull_surface, in_params[:, 0], in_params[:, 1])
        in_true = warp(skull_surface(in_params[:, 0], in_params[:, 1])
                       - n0 * params.inner_table_mm)
        in_v = in_true + jit_rng.normal(0, params.jitter_sigma, in_true.shape)
        raw_skull = TriMesh(np.concatenate([rs_v, in_v]),
                            np.concatenate([raw_skull_mesh.faces,
                                            inner_mesh.faces + len(rs_v)]))

    landmark_positions = {
        name: gt_face.vertices[idx].copy() for name, idx in templates.landmarks.items()
    }

    return SynthCase(gt_face, gt_skull, raw_face, raw_skull, landmark_positions,
                     thickness, rf_true, rf_params, rs_true, rs_params, params)


def _check_no_intersection(gt_face, gt_skull, st, sp, warp, h=1e-5):
    """Face vertices must stay on the outer side of the warped skull surface."""
    idx = build_index(gt_skull)
    cp, sqd, fids = closest_points(idx, gt_face.vertices)
    # outward normal of the warped skull at the supporting point, via the
    # nearest face normal of the ground-truth skull mesh
    tri = gt_skull.triangles()[fids]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    signed = np.einsum("ij,ij->i", gt_face.vertices - cp, n)
    if signed.min() <= 0.2:
        raise WarpTooStrong(
            f"generated face touches the skull (min signed clearance {signed.min():.3f} mm); "
            "reduce warp amplitudes or raise thickness_base")


def surgery_ground_truth(case: SynthCase, region: str, transform: np.ndarray,
                         band_mm: float = 5.0):
    """Edit the ground-truth skull and carry the face with the bone.

    Returns (planned skull, ground-truth postoperative face). The face motion
    is the plan displacement field interpolated at each face vertex's closest
    point on the preoperative skull; tissue vectors ride the bone unchanged.
    """
    templates = default_templates(case.params.paper_scale)
    planned_v = apply_region_transform(case.gt_skull.vertices, templates.skull_regions,
                                       list(templates.region_names), region, transform, band_mm)
    plan = case.gt_skull.with_vertices(planned_v)
    disp = planned_v - case.gt_skull.vertices

    idx = build_index(case.gt_skull)
    cp, _, fids = closest_points(idx, case.gt_face.vertices)
    tris = case.gt_skull.faces[fids]
    a = case.gt_skull.vertices[tris[:, 0]]
    b = case.gt_skull.vertices[tris[:, 1]]
    c = case.gt_skull.vertices[tris[:, 2]]
    from .deform import barycentric_weights
    w = barycentric_weights(cp, a, b, c)
    face_disp = (w[:, 0:1] * disp[tris[:, 0]] + w[:, 1:2] * disp[tris[:, 1]]
                 + w[:, 2:3] * disp[tris[:, 2]])
    face_after = case.gt_face.with_vertices(case.gt_face.vertices + face_disp)
    return plan, face_after


def generate_corpus(n: int, seed: int = 0, spread: dict | None = None,
                    paper_scale: bool = False) -> list[SynthCase]:
    """n cases drawn i.i.d. within `spread` ranges, sharing one warp/thickness
    structure (fixed bump centers and modulation frequencies) so the corpus
    spans a known low-dimensional shape family."""
    if n < 2:
        raise ValueError("need at least 2 cases")
    spread = dict(spread or {})
    n_bumps = int(spread.pop("n_warp_bumps", 6))
    mod_terms = int(spread.pop("thickness_mod_terms", 3))
    ranges = {
        "warp_amplitude": (2.0, 3.6),
        "fat_scale": (0.8, 1.25),
        "asymmetry": (0.0, 0.25),
        "thickness_mod_amplitude": (0.1, 0.35),
        "resample_factor": (1.25, 1.45),
        "jitter_sigma": (0.08, 0.16),
    }
    fixed = {}
    for key, val in spread.items():
        if key in ranges:
            ranges[key] = (float(val[0]), float(val[1]))
        elif key in SynthParams.__dataclass_fields__:
            fixed[key] = val  # constant across the corpus (e.g. pose_rotation=0)
        else:
            raise ValueError(f"unknown spread key {key!r}")

    root = np.random.default_rng(seed)
    base = SynthParams(seed=seed, n_warp_bumps=n_bumps, thickness_mod_terms=mod_terms, **fixed)
    centers = root.uniform([-110, -130, -110], [110, 130, 110], size=(n_bumps, 3))
    sigmas = root.uniform(*base.warp_sigma_range, size=n_bumps)
    freqs = root.integers(1, 4, size=(mod_terms, 2)).astype(np.float64)
    phases = root.uniform(0, 2 * np.pi, size=(mod_terms, 2))

    seeds = root.integers(0, 2 ** 62, size=n)
    cases = []
    for i in range(n):
        draw = np.random.default_rng(seeds[i])
        p = SynthParams(
            seed=int(seeds[i]),
            n_warp_bumps=n_bumps,
            thickness_mod_terms=mod_terms,
            warp_amplitude=float(draw.uniform(*ranges["warp_amplitude"])),
            fat_scale=float(draw.uniform(*ranges["fat_scale"])),
            asymmetry=float(draw.uniform(*ranges["asymmetry"])),
            thickness_mod_amplitude=float(draw.uniform(*ranges["thickness_mod_amplitude"])),
            resample_factor=float(draw.uniform(*ranges["resample_factor"])),
            jitter_sigma=float(draw.uniform(*ranges["jitter_sigma"])),
            paper_scale=paper_scale,
            warp_centers=tuple(map(tuple, centers)),
            warp_sigmas=tuple(sigmas),
            mod_freqs=tuple(map(tuple, freqs)),
            mod_phases=tuple(map(tuple, phases)),
            **fixed,
        )
        while True:
            try:
                cases.append(generate_case(p))
                break
            except WarpTooStrong:
                # rare extreme draw; deterministically attenuate and retry
                p = replace(p, warp_amplitude=0.8 * p.warp_amplitude)
    return cases
