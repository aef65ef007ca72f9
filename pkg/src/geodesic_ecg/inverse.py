"""ADAM fit of activation sites to target ECG traces."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from os import PathLike
from typing import Optional

import numpy as np

from .adjoint import backward
from .ecg import ApTemplate, EcgTrace, forward_ecg, loss, loss_backward
from .eikonal import SURFACE, VOLUME, SiteSet, solve
from .leadfield import LeadFieldOperator
from .mesh import FacePrecomp, Mesh, check_metric, closest_boundary_point, locate_point, precompute_faces

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    """Numerical failure during a fit; carries the epoch and diagnostics."""

    def __init__(self, message: str, epoch: int, diagnostics: Optional[dict] = None):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
        self.diagnostics = diagnostics or {}


@dataclass
class AdamState:
    lr: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    step: int = 0


def adam_step(state: AdamState, params, grads, lr=None) -> np.ndarray:
    """One bias-corrected ADAM update. ``lr`` may be a per-parameter array."""
    params = np.asarray(params, dtype=float)
    g = np.asarray(grads, dtype=float)
    if g.shape != params.shape:
        raise ValueError(f"gradient shape {g.shape} does not match parameters {params.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    rate = state.lr if lr is None else lr
    return params - rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def facet_measures(points: np.ndarray) -> np.ndarray:
    """(d-1)- or d-dimensional measure of simplices given as (n, k, D) vertex arrays."""
    E = points[:, 1:, :] - points[:, :1, :]
    G = np.einsum("nki,nli->nkl", E, E)
    k = E.shape[1]
    return np.sqrt(np.maximum(np.linalg.det(G), 0.0)) / math.factorial(k)


def init_sites(mesh: Mesh, mode: str, K: int, t_init: float = 0.0,
               seed: int = 0) -> SiteSet:
    """``K`` uniformly random sites with a common onset time.

    Surface mode samples boundary facets by area, volume mode elements by
    volume; points are uniform inside the chosen simplex.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng(seed)
    logger.info("init_sites: mode=%s K=%d seed=%d", mode, K, seed)
    if mode == SURFACE:
        simplices = mesh.vertices[mesh.boundary_facets()]
    elif mode == VOLUME:
        simplices = mesh.vertices[mesh.elements]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    w = facet_measures(simplices)
    pick = rng.choice(len(simplices), size=K, p=w / w.sum())
    bary = rng.dirichlet(np.ones(simplices.shape[1]), size=K)
    pos = np.einsum("kn,kni->ki", bary, simplices[pick])
    return SiteSet(pos, np.full(K, float(t_init)), np.full(K, mode, dtype=object))


def project_sites(mesh: Mesh, sites: SiteSet, moved=None) -> SiteSet:
    """Put surface sites on the boundary and pull escaped volume sites back in.

    Only sites flagged in ``moved`` are touched, so untouched sites keep
    their exact coordinates.
    """
    out = sites.copy()
    idx = range(len(sites)) if moved is None else np.flatnonzero(moved)
    for i in idx:
        x = out.positions[i]
        if out.modes[i] == SURFACE:
            out.positions[i], _ = closest_boundary_point(mesh, x)
        else:
            loc = locate_point(mesh, x)
            if not loc.inside:
                out.positions[i] = loc.point
    return out


@dataclass
class ForwardModel:
    """Everything needed to map sites to ECG traces on one heart mesh."""

    mesh: Mesh
    metric: np.ndarray
    operator: LeadFieldOperator
    template: ApTemplate = field(default_factory=ApTemplate)
    faces: Optional[FacePrecomp] = None

    def __post_init__(self):
        self.metric = check_metric(self.metric, self.mesh.n_elements, self.mesh.dim)
        if self.operator.n_vertices != self.mesh.n_vertices:
            raise ValueError(
                f"operator has {self.operator.n_vertices} columns for "
                f"{self.mesh.n_vertices} heart vertices"
            )
        if self.faces is None:
            self.faces = precompute_faces(self.mesh, self.metric)


@dataclass
class FitConfig:
    epochs: int = 400
    lr: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lr_position: Optional[float] = None  # per-group rates, off by default
    lr_time: Optional[float] = None
    epsilon_ms: float = 1e-4
    n_f: Optional[int] = None
    local_solver: str = "fista"
    early_stop: bool = False
    early_stop_tol: float = 1e-6
    early_stop_window: int = 20
    record_trajectory: bool = False
    n_jobs: int = 1


@dataclass
class RunReport:
    losses: list = field(default_factory=list)
    active_counts: list = field(default_factory=list)
    converged: list = field(default_factory=list)
    trajectory: Optional[list] = None
    final_loss: Optional[float] = None
    final_active: Optional[int] = None
    stopped_early: bool = False
    wall_clock_s: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.losses)

    def to_dict(self, timing: bool = False) -> dict:
        out = asdict(self)
        out["epochs_run"] = self.epochs_run
        if not timing:
            out.pop("wall_clock_s")
        if out["trajectory"] is None:
            out.pop("trajectory")
        return out

    def save(self, path: str | PathLike, timing: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(timing), fh, indent=1)


def evaluate(model: ForwardModel, sites: SiteSet, times, config: FitConfig = FitConfig()):
    """Forward chain: solve, simulate. Returns (field, tape, trace)."""
    fld, tape = solve(
        model.mesh, model.metric, model.faces, sites, config.epsilon_ms,
        n_f=config.n_f, local_solver=config.local_solver, n_jobs=config.n_jobs,
    )
    if np.isinf(fld.phi).any():
        return fld, tape, None
    return fld, tape, forward_ecg(fld.phi, model.operator, model.template, times)


def _lr_vector(config: FitConfig, k: int, d: int):
    if config.lr_position is None and config.lr_time is None:
        return None
    lp = config.lr if config.lr_position is None else config.lr_position
    lt = config.lr if config.lr_time is None else config.lr_time
    return np.concatenate([np.full(k * d, lp), np.full(k, lt)])


def fit(model: ForwardModel, target: EcgTrace, init: SiteSet,
        config: FitConfig = FitConfig()) -> tuple[SiteSet, RunReport]:
    """Minimise the ECG misfit over site positions and onset times with ADAM."""
    if target.n_leads != model.operator.n_leads:
        raise ValueError(
            f"target has {target.n_leads} leads, operator {model.operator.n_leads}"
        )
    start = time.perf_counter()
    sites = project_sites(model.mesh, init)
    k, d = sites.positions.shape
    state = AdamState(config.lr, config.beta1, config.beta2, config.adam_epsilon)
    lr_vec = _lr_vector(config, k, d)
    report = RunReport(trajectory=[] if config.record_trajectory else None)

    for epoch in range(config.epochs):
        fld, tape, sim = evaluate(model, sites, target.times, config)
        diag = {"iterations": fld.iterations, "max_decrease": fld.max_decrease}
        if not fld.converged:
            raise FitError("forward solve did not converge", epoch, diag)
        if sim is None:
            raise FitError("heart vertices left unreached", epoch, diag)
        value = loss(sim, target)
        seed_grad = loss_backward(sim, target, model.operator, model.template, fld.phi)
        grad = backward(model.mesh, model.metric, fld, tape, seed_grad, k)
        g = grad.params()
        if not (np.isfinite(value) and np.isfinite(g).all()):
            raise FitError("non-finite loss or gradient", epoch, diag)
        report.losses.append(value)
        report.active_counts.append(int(grad.active.sum()))
        report.converged.append(bool(fld.converged))
        if report.trajectory is not None:
            report.trajectory.append(sites.to_array().tolist())
        logger.debug("epoch %d loss %.6g active %d", epoch, value, grad.active.sum())

        params = sites.params()
        new = adam_step(state, params, g, lr_vec)
        moved = (new != params)[: k * d].reshape(k, d).any(axis=1)
        sites = project_sites(model.mesh, sites.with_params(new), moved)

        w = config.early_stop_window
        if config.early_stop and len(report.losses) > w:
            if report.losses[-w - 1] - min(report.losses[-w:]) < config.early_stop_tol:
                report.stopped_early = True
                break

    fld, tape, sim = evaluate(model, sites, target.times, config)
    if sim is not None:
        report.final_loss = loss(sim, target)
        report.final_active = int(tape.active_sites(k).sum())
    report.wall_clock_s = time.perf_counter() - start
    logger.info("fit finished: %d epochs in %.1f s", report.epochs_run, report.wall_clock_s)
    return sites, report


def activation_rmse(phi, reference) -> float:
    phi = np.asarray(phi, dtype=float)
    reference = np.asarray(reference, dtype=float)
    return float(np.sqrt(np.mean((phi - reference) ** 2)))


def load_run_config(path: str | PathLike) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    missing = [k for k in ("mesh", "leadfield", "target_ecg") if k not in cfg]
    if missing:
        raise ValueError(f"{path}: run config lacks {missing}")
    return cfg


def config_from_dict(cfg: dict) -> FitConfig:
    adam = cfg.get("adam", {})
    eik = cfg.get("eikonal", {})
    return FitConfig(
        epochs=int(cfg.get("epochs", 400)),
        lr=float(adam.get("lr", 0.5)),
        beta1=float(adam.get("beta1", 0.9)),
        beta2=float(adam.get("beta2", 0.999)),
        adam_epsilon=float(adam.get("epsilon", 1e-8)),
        lr_position=adam.get("lr_position"),
        lr_time=adam.get("lr_time"),
        epsilon_ms=float(eik.get("epsilon_ms", 1e-4)),
        n_f=eik.get("n_f"),
        local_solver=eik.get("local_solver", "fista"),
        early_stop=bool(cfg.get("early_stop", False)),
    )


def template_from_dict(cfg: dict) -> ApTemplate:
    t = cfg.get("template", {})
    return ApTemplate(
        float(t.get("K0", -85.0)), float(t.get("K1", 30.0)), float(t.get("tau", 1.0)),
        t.get("convention", "midpoint"),
    )
