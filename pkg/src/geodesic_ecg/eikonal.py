"""Global anisotropic eikonal solver on simplicial meshes.

The solver repeatedly evaluates every (element, opposite vertex) local
problem whose face values changed, and lowers each vertex to the smallest
candidate (Hopf-Lax update). Activation sites are continuous: the vertices
of the element containing a site are seeded with the metric distance to it.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional

import numpy as np

from .mesh import (
    FacePrecomp,
    Mesh,
    check_metric,
    closest_boundary_point,
    locate_point,
    precompute_faces,
)
from .simplex import (
    default_iterations,
    solve_local_batch,
    solve_local_exact_batch,
)

logger = logging.getLogger(__name__)

SENTINEL_WEIGHT = 1e-6
DEFAULT_EPSILON = 1e-4
DEFAULT_LOCAL_TOL = 1e-3

VOLUME = "volume"
SURFACE = "surface"


@dataclass
class SiteSet:
    """Activation sites: positions (mm), onset times (ms) and constraint modes."""

    positions: np.ndarray
    times: np.ndarray
    modes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
        if self.modes is None:
            self.modes = np.full(len(self.times), VOLUME, dtype=object)
        self.modes = np.asarray(self.modes, dtype=object)
        if len(self.times) < 1:
            raise ValueError("a site set needs at least one site")
        if self.positions.shape[0] != len(self.times) or len(self.modes) != len(self.times):
            raise ValueError("positions, times and modes must have the same length")
        bad = set(self.modes) - {VOLUME, SURFACE}
        if bad:
            raise ValueError(f"unknown site constraint mode(s): {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    def params(self) -> np.ndarray:
        """Flat parameter vector: all positions, then all times."""
        return np.concatenate([self.positions.ravel(), self.times])

    def with_params(self, params) -> "SiteSet":
        params = np.asarray(params, dtype=float)
        k, d = self.positions.shape
        return SiteSet(params[: k * d].reshape(k, d), params[k * d :], self.modes.copy())

    def copy(self) -> "SiteSet":
        return SiteSet(self.positions.copy(), self.times.copy(), self.modes.copy())

    @classmethod
    def from_array(cls, X, mode: str = VOLUME) -> "SiteSet":
        """Build from rows ``(x_1, ..., x_d, t)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return cls(X[:, :-1], X[:, -1], np.full(len(X), mode, dtype=object))

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.positions, self.times])


def read_sites_csv(path: str | PathLike) -> SiteSet:
    """Read sites from CSV with columns x, y[, z], t[, mode][, active]."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"no sites in {path}")
    coords = [c for c in ("x", "y", "z") if c in rows[0]]
    pos = np.array([[float(r[c]) for c in coords] for r in rows])
    t = np.array([float(r["t"]) for r in rows])
    modes = np.array([r.get("mode") or VOLUME for r in rows], dtype=object)
    return SiteSet(pos, t, modes)


def write_sites_csv(path: str | PathLike, sites: SiteSet, active=None) -> None:
    names = ["x", "y", "z"][: sites.dim]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names + ["t", "mode"] + (["active"] if active is not None else []))
        for i in range(len(sites)):
            row = [repr(float(c)) for c in sites.positions[i]]
            row += [repr(float(sites.times[i])), sites.modes[i]]
            if active is not None:
                row.append(int(bool(active[i])))
            w.writerow(row)


@dataclass
class SeedRecord:
    values: np.ndarray  # (n_v,) seed value or inf
    site: np.ndarray  # (n_v,) owning site or -1
    element: np.ndarray  # (n_v,) seeding element or -1
    points: np.ndarray  # (K, d) located site points
    site_elements: np.ndarray  # (K,)


def site_point(mesh: Mesh, x, mode: str):
    """Locate a site, projecting it to the boundary for surface mode."""
    if mode == SURFACE:
        p, _ = closest_boundary_point(mesh, x)
        return locate_point(mesh, p)
    return locate_point(mesh, x)


def seed(mesh: Mesh, metric, sites: SiteSet) -> SeedRecord:
    """Initial values ``t_i + ||v - x_i||_{D_k}`` on the element holding each site."""
    if len(sites) == 0:
        raise ValueError("empty site set")
    metric = check_metric(metric, mesh.n_elements, mesh.dim)
    n_v = mesh.n_vertices
    values = np.full(n_v, np.inf)
    owner = np.full(n_v, -1, dtype=np.int64)
    owner_elem = np.full(n_v, -1, dtype=np.int64)
    points = np.empty_like(sites.positions)
    elems = np.empty(len(sites), dtype=np.int64)
    for i in range(len(sites)):
        loc = site_point(mesh, sites.positions[i], sites.modes[i])
        points[i] = loc.point
        elems[i] = loc.element
        verts = mesh.elements[loc.element]
        diff = mesh.vertices[verts] - loc.point
        D = metric[loc.element]
        cand = sites.times[i] + np.sqrt(np.einsum("ni,ij,nj->n", diff, D, diff))
        better = cand < values[verts]
        values[verts[better]] = cand[better]
        owner[verts[better]] = i
        owner_elem[verts[better]] = loc.element
    return SeedRecord(values, owner, owner_elem, points, elems)


@dataclass
class ActivationField:
    phi: np.ndarray
    converged: bool
    iterations: int
    settle_iterations: int = 0
    max_decrease: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SolverTape:
    """Winning record of every vertex after the final sweep.

    ``winner_face[v] == -1`` marks a vertex that keeps its seed value (or is
    unreached); otherwise ``phi[v] = <alpha, phi[face_vertices]> + ||A alpha||``
    for the recorded face and weights.
    """

    winner_face: np.ndarray
    winner_alpha: np.ndarray
    face_vertices: np.ndarray  # (n_v, d), -1 where no face won
    seeds: SeedRecord

    def seed_owner(self) -> np.ndarray:
        """Site owning each vertex whose seed value won, else -1."""
        own = np.where(self.winner_face < 0, self.seeds.site, -1)
        return own

    def active_sites(self, n_sites: int) -> np.ndarray:
        own = self.seed_owner()
        act = np.zeros(n_sites, dtype=bool)
        act[own[own >= 0]] = True
        return act


def _decrease(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        dec = old - new
    dec[np.isinf(old) & np.isinf(new)] = 0.0
    return dec


class _Sweeper:
    """Evaluates local problems for a set of faces, optionally on threads."""

    def __init__(self, faces: FacePrecomp, n_f: int, n_jobs: int = 1, exact: bool = False):
        self.faces = faces
        self.n_f = n_f
        self.exact = exact
        self.n_jobs = max(int(n_jobs), 1)
        self._pool = ThreadPoolExecutor(self.n_jobs) if self.n_jobs > 1 else None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def _solve(self, A, L, Phi):
        if self.exact:
            return solve_local_exact_batch(A, Phi)
        return solve_local_batch(A, L, Phi, self.n_f)

    def candidates(self, idx, phi):
        faces = self.faces
        Phi = phi[faces.face_vertices[idx]]
        reached = np.isfinite(Phi).any(axis=1)
        idx = idx[reached]
        Phi = Phi[reached]
        if idx.size == 0:
            d = faces.dim
            return idx, idx, np.empty((0, d)), np.empty(0)
        A = faces.A[idx]
        L = faces.lipschitz[idx]
        if self._pool is None or idx.size < 2 * self.n_jobs:
            alpha, value = self._solve(A, L, Phi)
        else:
            bounds = np.linspace(0, idx.size, self.n_jobs + 1).astype(int)
            parts = list(
                self._pool.map(
                    lambda ab: self._solve(
                        A[ab[0] : ab[1]], L[ab[0] : ab[1]], Phi[ab[0] : ab[1]]
                    ),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
            alpha = np.concatenate([p[0] for p in parts])
            value = np.concatenate([p[1] for p in parts])
        target = faces.opposite[idx]
        bad = (alpha * np.isinf(Phi)).sum(axis=1) > SENTINEL_WEIGHT
        ok = ~bad
        return idx[ok], target[ok], alpha[ok], value[ok]


def _reduce_min(idx, target, value):
    """Per-target minimum; ties go to the smallest face id."""
    order = np.lexsort((idx, value, target))
    t = target[order]
    first = np.ones(t.size, dtype=bool)
    first[1:] = t[1:] != t[:-1]
    return order[first]


def local_iterations(faces: FacePrecomp, tol: float = DEFAULT_LOCAL_TOL) -> int:
    """Default iteration count from the worst face's convergence bound.

    The distance term of the bound is the largest barycentric distance from
    the starting point (simplex centroid) to a vertex, ``sqrt((d-1)/d)``.
    """
    d = faces.dim
    radius = np.sqrt((d - 1.0) / d)
    return default_iterations(float(faces.lipschitz.max()), float(radius), tol)


def solve(
    mesh: Mesh,
    metric,
    faces: FacePrecomp,
    sites: SiteSet,
    epsilon: float = DEFAULT_EPSILON,
    max_iters: Optional[int] = None,
    *,
    n_f: Optional[int] = None,
    local_solver: str = "fista",
    settle: bool = True,
    n_jobs: int = 1,
) -> tuple[ActivationField, SolverTape]:
    """Iterate Hopf-Lax updates to an epsilon-converged activation field.

    With ``settle`` the iteration continues after the epsilon criterion
    holds, now re-evaluating every face whose values changed at all, until
    no vertex decreases. The tape then matches the field exactly.

    ``local_solver="fista"`` runs ``n_f`` FISTA iterations per local
    problem. ``"exact"`` uses the closed-form subface enumeration instead;
    its weights are the true minimisers, so tape gradients match finite
    differences of the forward map to rounding level.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n_v = mesh.n_vertices
    max_iters = n_v if max_iters is None else int(max_iters)
    if local_solver not in ("fista", "exact"):
        raise ValueError(f"unknown local solver {local_solver!r}")
    n_f = local_iterations(faces) if n_f is None else int(n_f)
    seeds = seed(mesh, metric, sites)
    phi = seeds.values.copy()
    d = faces.dim
    winner_face = np.full(n_v, -1, dtype=np.int64)
    winner_alpha = np.zeros((n_v, d))
    fv = faces.face_vertices
    all_faces = np.arange(faces.n_faces)

    last = np.where(np.isfinite(phi), np.inf, 0.0)
    pending = last.copy()
    sweeper = _Sweeper(faces, n_f, n_jobs, local_solver == "exact")
    converged = False
    it = settle_it = 0
    max_dec = np.inf
    try:
        phase = "epsilon"
        while True:
            if phase == "epsilon":
                if it >= max_iters:
                    break
                trigger = last >= epsilon
            else:
                if settle_it >= max_iters:
                    break
                trigger = pending > 0
            active = all_faces[trigger[fv].any(axis=1)]
            pending[trigger] = 0.0
            idx, target, alpha, value = sweeper.candidates(active, phi)
            old = phi.copy()
            if idx.size:
                sel = _reduce_min(idx, target, value)
                v = target[sel]
                better = value[sel] < phi[v]
                v = v[better]
                phi[v] = value[sel][better]
                winner_face[v] = idx[sel][better]
                winner_alpha[v] = alpha[sel][better]
            last = _decrease(old, phi)
            pending += last
            if phase == "epsilon":
                it += 1
                max_dec = float(last.max()) if last.size else 0.0
                if max_dec < epsilon:
                    converged = True
                    if not settle:
                        break
                    phase = "settle"
            else:
                settle_it += 1
                if not (pending > 0).any():
                    break
    finally:
        sweeper.close()

    if converged and settle and (pending > 0).any():
        logger.warning("settling stopped after %d sweeps with pending updates", settle_it)
    if not converged:
        logger.warning("eikonal solve did not converge in %d iterations", it)
    face_vertices = np.where(winner_face[:, None] >= 0, fv[np.maximum(winner_face, 0)], -1)
    field_ = ActivationField(
        phi,
        converged,
        it,
        settle_it,
        max_dec,
        {
            "n_f": n_f,
            "local_solver": local_solver,
            "epsilon": epsilon,
            "unreached": int(np.isinf(phi).sum()),
        },
    )
    tape = SolverTape(winner_face, winner_alpha, face_vertices, seeds)
    return field_, tape


def residual(mesh: Mesh, metric, faces: FacePrecomp, phi, *, n_f: Optional[int] = None,
             local_solver: str = "fista") -> float:
    """Largest amount by which a vertex exceeds its best local candidate."""
    phi = np.asarray(getattr(phi, "phi", phi), dtype=float)
    n_f = local_iterations(faces) if n_f is None else n_f
    sweeper = _Sweeper(faces, n_f, exact=local_solver == "exact")
    idx, target, alpha, value = sweeper.candidates(np.arange(faces.n_faces), phi)
    best = np.full(phi.shape, np.inf)
    np.minimum.at(best, target, value)
    has = np.isfinite(best)
    if not has.any():
        return 0.0
    with np.errstate(invalid="ignore"):
        gap = phi[has] - best[has]
    return float(np.max(gap))


def causality_violations(faces: FacePrecomp, field_: ActivationField, tape: SolverTape,
                         weight_tol: float = 1e-6, slack: float = 1e-9) -> int:
    """Count winning face vertices with weight > tol whose value is not smaller."""
    phi = field_.phi
    won = np.flatnonzero(tape.winner_face >= 0)
    fv = tape.face_vertices[won]
    a = tape.winner_alpha[won]
    bad = (a > weight_tol) & (phi[fv] >= phi[won][:, None] + slack)
    return int(bad.sum())


def write_activation_csv(path: str | PathLike, phi) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["vertex_id", "phi_ms"])
        for i, p in enumerate(np.asarray(phi)):
            w.writerow([i, repr(float(p))])


def read_activation_csv(path: str | PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    phi = np.empty(len(rows))
    for r in rows:
        phi[int(r["vertex_id"])] = float(r["phi_ms"])
    return phi


def write_diagnostics(path: str | PathLike, field_: ActivationField) -> None:
    data = {
        "converged": bool(field_.converged),
        "iterations": int(field_.iterations),
        "settle_iterations": int(field_.settle_iterations),
        "max_decrease_ms": float(field_.max_decrease),
        **field_.diagnostics,
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)


def prepare(mesh: Mesh, metric) -> tuple[np.ndarray, FacePrecomp]:
    metric = check_metric(metric, mesh.n_elements, mesh.dim)
    return metric, precompute_faces(mesh, metric)
