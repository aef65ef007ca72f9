"""Reverse-mode gradients of activation fields with respect to the sites.

The converged tape is a DAG: each vertex value is a convex combination of
upwind vertex values plus a travel cost, ending at seed vertices whose values
depend on a site directly. Back-propagation walks the DAG in decreasing
activation order; the dependence of the barycentric weights on the sites is
ignored (first variation of a geodesic distance).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .eikonal import ActivationField, SiteSet, SolverTape, solve
from .mesh import FacePrecomp, Mesh, check_metric

logger = logging.getLogger(__name__)


class TapeCycleError(RuntimeError):
    def __init__(self, vertices):
        self.vertices = list(vertices)
        super().__init__(f"cycle in solver tape through vertices {self.vertices[:10]}")


@dataclass
class Gradient:
    """Derivatives of a scalar with respect to every site (ms/mm and unitless)."""

    dx: np.ndarray  # (K, d)
    dt: np.ndarray  # (K,)
    active: np.ndarray  # (K,) bool
    back_edges: int = 0

    def params(self) -> np.ndarray:
        """Flat vector in the order of :meth:`SiteSet.params`."""
        return np.concatenate([self.dx.ravel(), self.dt])


def seed_position_derivative(mesh: Mesh, metric, tape: SolverTape) -> np.ndarray:
    """``d phi_v / d x_i = -D (v - x_i) / ||v - x_i||_D`` for every seed-owned vertex."""
    seeds = tape.seeds
    owner = tape.seed_owner()
    out = np.zeros_like(mesh.vertices)
    v = np.flatnonzero(owner >= 0)
    if v.size == 0:
        return out
    D = metric[seeds.element[v]]
    diff = mesh.vertices[v] - seeds.points[owner[v]]
    Dd = np.einsum("nij,nj->ni", D, diff)
    norm = np.sqrt(np.einsum("ni,ni->n", diff, Dd))
    safe = norm > 0
    out[v[safe]] = -Dd[safe] / norm[safe, None]
    return out


def backward(
    mesh: Mesh,
    metric,
    field: ActivationField,
    tape: SolverTape,
    cotangent,
    n_sites: Optional[int] = None,
    *,
    strict: bool = False,
) -> Gradient:
    """Pull a per-vertex cotangent ``dLoss/dphi`` back to the site parameters.

    Equal-value loops are broken by processing vertices in
    ``(phi, vertex id)`` descending order and dropping edges to vertices
    already processed; their count is returned and logged. With ``strict``
    such an edge raises :class:`TapeCycleError` instead.
    """
    metric = check_metric(metric, mesh.n_elements, mesh.dim)
    phi = field.phi
    n_sites = len(tape.seeds.points) if n_sites is None else n_sites
    d = mesh.dim
    acc = np.array(cotangent, dtype=float)
    if acc.shape != phi.shape:
        raise ValueError("cotangent must have one entry per vertex")
    acc[~np.isfinite(phi)] = 0.0
    owner = tape.seed_owner()
    dxs = seed_position_derivative(mesh, metric, tape)
    dx = np.zeros((n_sites, d))
    dt = np.zeros(n_sites)

    finite = np.flatnonzero(np.isfinite(phi))
    order = finite[np.lexsort((-finite, -phi[finite]))]
    rank = np.full(phi.size, -1, dtype=np.int64)
    rank[order] = np.arange(order.size)

    wf = tape.winner_face.tolist()
    fv = tape.face_vertices.tolist()
    al = tape.winner_alpha.tolist()
    rk = rank.tolist()
    back = []
    for v in order.tolist():
        g = acc[v]
        if g == 0.0:
            continue
        if wf[v] >= 0:
            r = rk[v]
            for u, a in zip(fv[v], al[v]):
                if a == 0.0:
                    continue
                if rk[u] <= r:
                    back.append(v)
                    continue
                acc[u] += a * g
        elif owner[v] >= 0:
            i = owner[v]
            dt[i] += g
            dx[i] += g * dxs[v]
    if back:
        if strict:
            raise TapeCycleError(back)
        logger.warning("dropped %d back-edges in the solver tape", len(back))
    return Gradient(dx, dt, tape.active_sites(n_sites), len(back))


def quadratic_loss(reference, weights=None) -> Callable:
    """``0.5 * sum(w (phi - ref)^2)`` and its gradient, for gradient checks."""
    reference = np.asarray(reference, dtype=float)
    w = np.ones_like(reference) if weights is None else np.asarray(weights, dtype=float)

    def loss(phi):
        r = phi - reference
        return 0.5 * float(np.sum(w * r * r)), w * r

    return loss


@dataclass
class GradCheckEntry:
    site: int
    param: str  # "x0", "x1", ... or "t"
    analytic: float
    numeric: float
    rel_error: float
    switched: bool


def _signature(tape: SolverTape):
    return (tape.winner_face.copy(), tape.seed_owner(), tape.seeds.site_elements.copy())


def _same(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(
    mesh: Mesh,
    metric,
    faces: FacePrecomp,
    sites: SiteSet,
    loss: Callable,
    step_x: float = 1e-5,
    step_t: float = 1e-5,
    **solve_kw,
) -> dict:
    """Compare :func:`backward` against central finite differences.

    Every site coordinate and onset time is perturbed by ``+-step``. A
    perturbation whose forward tape differs structurally from the base tape
    (winner faces, seed ownership or seed elements) crosses an argmin switch
    and is flagged ``switched``; such entries are reported but excluded from
    the summary errors.

    The tape weights are exact derivatives only when the local problems are
    solved exactly; pass ``local_solver="exact"`` for a sharp check. With
    truncated FISTA the weights differ from the true minimisers and the
    errors reflect that truncation.
    """
    metric = check_metric(metric, mesh.n_elements, mesh.dim)
    field, tape = solve(mesh, metric, faces, sites, **solve_kw)
    value, cot = loss(field.phi)
    grad = backward(mesh, metric, field, tape, cot, len(sites))
    base_sig = _signature(tape)
    params = sites.params()
    analytic = grad.params()
    k, d = sites.positions.shape
    entries = []
    for p in range(params.size):
        is_t = p >= k * d
        h = step_t if is_t else step_x
        vals = []
        switched = False
        for sgn in (1.0, -1.0):
            q = params.copy()
            q[p] += sgn * h
            f2, t2 = solve(mesh, metric, faces, sites.with_params(q), **solve_kw)
            vals.append(loss(f2.phi)[0])
            switched |= not _same(base_sig, _signature(t2))
        numeric = (vals[0] - vals[1]) / (2 * h)
        site = p - k * d if is_t else p // d
        name = "t" if is_t else f"x{p % d}"
        entries.append(
            GradCheckEntry(site, name, float(analytic[p]), float(numeric),
                           rel_error(analytic[p], numeric), switched)
        )

    def worst(sel):
        errs = [e.rel_error for e in entries if sel(e) and not e.switched]
        return max(errs) if errs else 0.0

    return {
        "loss": value,
        "entries": entries,
        "max_rel_error": worst(lambda e: True),
        "max_rel_error_t": worst(lambda e: e.param == "t"),
        "max_rel_error_x": worst(lambda e: e.param != "t"),
        "switched": sum(e.switched for e in entries),
        "back_edges": grad.back_edges,
        "active": grad.active.tolist(),
    }
