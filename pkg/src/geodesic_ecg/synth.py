"""Synthetic 2-D heart-torso twin: annular left ventricle in a circular torso.

Geometry (mm, concentric about the origin): a blood pool inside the
ventricle, the ventricular wall between ``r_inner`` and ``r_outer``, two
elliptic lungs left and right of it and the torso up to ``torso_radius``.
Vertices are placed on concentric rings (spacing ``h`` across the wall,
growing geometrically away from it) and connected by Delaunay
triangulation. Electrodes sit at uniform angles on the torso boundary.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay

from .ecg import ApTemplate, EcgTrace, forward_ecg, time_grid
from .eikonal import VOLUME, SiteSet, solve
from .leadfield import LeadFieldOperator, TorsoModel, build_operator
from .mesh import Mesh, fiber_metric, precompute_faces

logger = logging.getLogger(__name__)

HEART, BLOOD, LUNG, TORSO = 1, 2, 3, 4

# S/m; the 2-D study does not publish its values, these are common literature picks
DEFAULT_CONDUCTIVITY = {
    "intra_fiber": 0.17,
    "intra_cross": 0.019,
    "extra_fiber": 0.62,
    "extra_cross": 0.24,
    "blood": 0.7,
    "lung": 0.05,
    "torso": 0.22,
}


class SynthError(ValueError):
    pass


@dataclass
class SynthConfig:
    torso_radius: float = 120.0
    r_inner: float = 20.0
    r_outer: float = 30.0
    h: float = 0.9
    h_max: float = 8.0
    grade: float = 1.2
    lung_offset: float = 65.0
    lung_axes: tuple = (22.0, 45.0)
    n_electrodes: int = 8
    wct: tuple = (6, 7)
    electrode_offset: float = math.pi / 8
    v_fiber: float = 0.6  # mm/ms
    v_cross: float = 0.3
    conductivity: dict = field(default_factory=lambda: dict(DEFAULT_CONDUCTIVITY))
    n_true: int = 4
    t_range: tuple = (2.5, 10.0)
    n_init: int = 8
    t_init: float = 0.0
    perturbation: float = 0.2
    target_refine: int = 2
    dt: float = 0.5
    seed: int = 42
    template: ApTemplate = field(default_factory=ApTemplate)

    def validate(self):
        if not 0 < self.r_inner < self.r_outer < self.torso_radius:
            raise SynthError("need 0 < r_inner < r_outer < torso_radius")
        if self.h <= 0 or self.h > (self.r_outer - self.r_inner) / 2:
            raise SynthError("h must be positive and fit at least two layers across the wall")
        ax, ay = self.lung_axes
        if self.lung_offset - ax < self.r_outer or math.hypot(self.lung_offset + ax, 0) > self.torso_radius:
            raise SynthError("lungs must lie between the heart and the torso surface")
        if ay >= self.torso_radius:
            raise SynthError("lungs must fit inside the torso")
        if len(set(self.wct)) != len(self.wct) or not self.wct:
            raise SynthError("WCT needs distinct electrodes")
        if max(self.wct) >= self.n_electrodes or min(self.wct) < 0:
            raise SynthError("WCT electrode index out of range")
        if not 0 <= self.perturbation < 1:
            raise SynthError("perturbation must be in [0, 1)")
        if self.target_refine < 1 or self.n_true < 1 or self.n_init < 1:
            raise SynthError("target_refine, n_true and n_init must be at least 1")


def _ring_radii(cfg: SynthConfig, h: float):
    """Ring radii and the arc spacing used on each ring."""
    n_wall = math.ceil((cfg.r_outer - cfg.r_inner) / h)
    hw = (cfg.r_outer - cfg.r_inner) / n_wall
    rings = [(cfg.r_inner + k * hw, hw) for k in range(n_wall + 1)]
    r, s = cfg.r_inner, hw
    while True:
        s = min(s * cfg.grade, cfg.h_max)
        if r - s < 0.75 * s:
            break
        r -= s
        rings.insert(0, (r, s))
    r, s = cfg.r_outer, hw
    while r < cfg.torso_radius:
        s = min(s * cfg.grade, cfg.h_max)
        if cfg.torso_radius - r < 1.5 * s:
            rings.append((cfg.torso_radius, cfg.torso_radius - r))
            break
        r += s
        rings.append((r, s))
    return rings


def ring_points(cfg: SynthConfig, h: float) -> np.ndarray:
    pts = [np.zeros((1, 2))]
    rings = _ring_radii(cfg, h)
    for k, (r, s) in enumerate(rings):
        n = max(6, math.ceil(2 * math.pi * r / s))
        ang = (np.arange(n) + 0.5 * (k % 2)) * 2 * math.pi / n
        if k == len(rings) - 1:
            # electrodes land exactly on vertices of the outer ring
            n = cfg.n_electrodes * math.ceil(n / cfg.n_electrodes)
            ang = cfg.electrode_offset + np.arange(n) * 2 * math.pi / n
        pts.append(r * np.column_stack([np.cos(ang), np.sin(ang)]))
    return np.concatenate(pts)


def region_labels(cfg: SynthConfig, centroids: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(centroids, axis=1)
    lab = np.full(len(centroids), TORSO, dtype=np.int64)
    ax, ay = cfg.lung_axes
    for sx in (-1, 1):
        inside = ((centroids[:, 0] - sx * cfg.lung_offset) / ax) ** 2 + (centroids[:, 1] / ay) ** 2 < 1
        lab[inside] = LUNG
    lab[r < cfg.r_outer] = HEART
    lab[r < cfg.r_inner] = BLOOD
    return lab


def torso_mesh(cfg: SynthConfig, h: Optional[float] = None) -> Mesh:
    pts = ring_points(cfg, cfg.h if h is None else h)
    tri = Delaunay(pts).simplices
    p = pts[tri]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    tri = np.where((det < 0)[:, None], tri[:, [0, 2, 1]], tri)
    longest = np.max([np.linalg.norm(p[:, a] - p[:, b], axis=1) for a, b in ((0, 1), (1, 2), (0, 2))], axis=0)
    keep = np.abs(det) / 2 > 1e-9 * longest**2
    tri = tri[keep]
    labels = region_labels(cfg, pts[tri].mean(axis=1))
    return Mesh(pts, tri, labels)


def circumferential_fibers(points: np.ndarray) -> np.ndarray:
    f = np.column_stack([-points[:, 1], points[:, 0]])
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _tensor(fibers, along, across):
    ff = fibers[:, :, None] * fibers[:, None, :]
    return along * ff + across * (np.eye(2) - ff)


def conductivities(cfg: SynthConfig, mesh: Mesh, scale: Optional[dict] = None):
    """Bulk and intracellular tensors per element."""
    c = {k: v * (1.0 if scale is None else scale.get(k, 1.0)) for k, v in cfg.conductivity.items()}
    f = circumferential_fibers(mesh.vertices[mesh.elements].mean(axis=1))
    iso = {BLOOD: c["blood"], LUNG: c["lung"], TORSO: c["torso"]}
    bulk = np.zeros((mesh.n_elements, 2, 2))
    for lab, s in iso.items():
        bulk[mesh.labels == lab] = s * np.eye(2)
    intra = _tensor(f, c["intra_fiber"], c["intra_cross"])
    extra = _tensor(f, c["extra_fiber"], c["extra_cross"])
    heart = mesh.labels == HEART
    bulk[heart] = intra[heart] + extra[heart]
    intra[~heart] = np.eye(2) * c["intra_fiber"]  # unused outside the heart
    return bulk, intra


def perturbation_scales(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """Independent factor ``1 + p u``, ``u ~ U[-1, 1]``, per sub-domain conductivity."""
    if cfg.perturbation == 0:
        return {k: 1.0 for k in cfg.conductivity}
    return {k: 1.0 + cfg.perturbation * rng.uniform(-1, 1) for k in sorted(cfg.conductivity)}


def electrodes(cfg: SynthConfig) -> np.ndarray:
    ang = cfg.electrode_offset + 2 * math.pi * np.arange(cfg.n_electrodes) / cfg.n_electrodes
    return cfg.torso_radius * np.column_stack([np.cos(ang), np.sin(ang)])


def torso_model(cfg: SynthConfig, h: Optional[float] = None, scale: Optional[dict] = None) -> TorsoModel:
    mesh = torso_mesh(cfg, h)
    bulk, intra = conductivities(cfg, mesh, scale)
    names = [f"E{i + 1}" for i in range(cfg.n_electrodes)]
    return TorsoModel(mesh, bulk, intra, [HEART], electrodes(cfg), list(cfg.wct), names)


def heart_metric(cfg: SynthConfig, heart: Mesh) -> np.ndarray:
    f = circumferential_fibers(heart.vertices[heart.elements].mean(axis=1))
    return fiber_metric(f, cfg.v_fiber, cfg.v_cross)


def planted_sites(cfg: SynthConfig, rng: np.random.Generator) -> SiteSet:
    """Ground-truth sites in one half of the wall, angles jittered per slot."""
    k = cfg.n_true
    ang = math.pi * (np.arange(k) + rng.uniform(0.2, 0.8, k)) / k
    lo, hi = cfg.r_inner + 0.15 * (cfg.r_outer - cfg.r_inner), cfg.r_outer - 0.15 * (cfg.r_outer - cfg.r_inner)
    rad = rng.uniform(lo, hi, k)
    t = rng.uniform(*cfg.t_range, k)
    return SiteSet(rad[:, None] * np.column_stack([np.cos(ang), np.sin(ang)]), t,
                   np.full(k, VOLUME, dtype=object))


def initial_sites(cfg: SynthConfig) -> SiteSet:
    """Sites evenly spaced on the mid-wall circle, all at ``t_init``."""
    # half-step offset keeps the sites off the mesh vertices at angle 0
    ang = 2 * math.pi * (np.arange(cfg.n_init) + 0.5) / cfg.n_init
    r = 0.5 * (cfg.r_inner + cfg.r_outer)
    return SiteSet(r * np.column_stack([np.cos(ang), np.sin(ang)]),
                   np.full(cfg.n_init, cfg.t_init), np.full(cfg.n_init, VOLUME, dtype=object))


@dataclass
class HeartModel:
    torso: TorsoModel
    heart: Mesh
    heart_vertices: np.ndarray
    metric: np.ndarray
    operator: LeadFieldOperator


def heart_model(cfg: SynthConfig, h: Optional[float] = None, scale: Optional[dict] = None) -> HeartModel:
    torso = torso_model(cfg, h, scale)
    heart, used = torso.heart_mesh()
    op = build_operator(torso)
    if not np.array_equal(op.heart_vertices, used):
        raise SynthError("operator columns do not follow the heart vertex order")
    return HeartModel(torso, heart, used, heart_metric(cfg, heart), op)


@dataclass
class SynthCase:
    config: SynthConfig
    model: HeartModel
    target_model: HeartModel
    true_sites: SiteSet
    init_sites: SiteSet
    target: EcgTrace
    true_phi: np.ndarray  # ground truth on the inversion mesh
    target_phi: np.ndarray  # ground truth on the target mesh
    scales: dict


def generate(cfg: SynthConfig = SynthConfig(), *, local_solver: str = "fista") -> SynthCase:
    """Build the inversion model, the (finer, perturbed) target model and target ECG."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    true_sites = planted_sites(cfg, rng)
    scales = perturbation_scales(cfg, rng)
    model = heart_model(cfg)
    if cfg.target_refine == 1 and cfg.perturbation == 0:
        target_model = model
    else:
        target_model = heart_model(cfg, cfg.h / cfg.target_refine, scales)
    logger.info(
        "synth2d: model %d heart vertices, target %d", model.heart.n_vertices,
        target_model.heart.n_vertices,
    )
    faces = precompute_faces(target_model.heart, target_model.metric)
    fld, _ = solve(target_model.heart, target_model.metric, faces, true_sites,
                   local_solver=local_solver)
    if not fld.converged or np.isinf(fld.phi).any():
        raise SynthError("ground-truth activation did not cover the heart")
    t_end = cfg.dt * math.ceil((fld.phi.max() + 10 * cfg.template.tau) / cfg.dt)
    times = time_grid(0.0, t_end, cfg.dt)
    target = forward_ecg(fld.phi, target_model.operator, cfg.template, times)
    if target_model is model:
        true_phi = fld.phi
    else:
        f2 = precompute_faces(model.heart, model.metric)
        true_phi = solve(model.heart, model.metric, f2, true_sites,
                         local_solver=local_solver)[0].phi
    return SynthCase(cfg, model, target_model, true_sites, initial_sites(cfg), target,
                     true_phi, fld.phi, scales)


def inverse_crime(cfg: SynthConfig = SynthConfig()) -> SynthConfig:
    return replace(cfg, perturbation=0.0, target_refine=1)
