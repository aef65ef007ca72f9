"""Local upwind problem on a face simplex, solved by FISTA.

Each local problem minimises ``<a, phi> + ||A a||_2`` over the unit simplex
of barycentric weights ``a``. The solvers here work on stacks of problems so
that a whole sweep of the global solver is a handful of array operations.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

SENTINEL = 1e9
MIN_ITERATIONS = 3
MAX_ITERATIONS = 50


class LocalSolution(NamedTuple):
    alpha: np.ndarray
    value: float


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector onto the unit simplex."""
    v = np.asarray(v, dtype=float)
    return project_simplex_batch(v[None, :])[0]


def project_simplex_batch(v: np.ndarray) -> np.ndarray:
    """Row-wise projection onto ``{a : sum(a) = 1, a >= 0}`` (sort-and-threshold)."""
    n, d = v.shape
    u = -np.sort(-v, axis=1, kind="stable")
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, d + 1, dtype=float)
    cond = u - css / ind > 0
    # cond is true on a prefix; rho is its last index
    rho = d - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(n), rho] / (rho + 1.0)
    return np.maximum(v - theta[:, None], 0.0)


def _apply(A: np.ndarray, a: np.ndarray) -> np.ndarray:
    # explicit sums keep results independent of the batch size
    return (A * a[:, None, :]).sum(axis=2)


def _apply_t(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (A * y[:, :, None]).sum(axis=1)


def grad_h(A, alpha) -> np.ndarray:
    """Gradient of ``||A a||`` at ``a``: ``A^T A a / ||A a||``."""
    A = np.asarray(A, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    y = A @ alpha
    h = float(np.sqrt(y @ y))
    if h < 1e-14:
        raise ZeroDivisionError("||A a|| vanishes; the element is collapsed")
    return A.T @ y / h


def solve_local_batch(
    A: np.ndarray,
    L: np.ndarray,
    phi: np.ndarray,
    n_f: int,
    *,
    accelerate: bool = True,
    history: bool = False,
):
    """Run the accelerated projected-gradient iteration on a stack of problems.

    Parameters
    ----------
    A : (n, d, d) array
    L : (n,) array of Lipschitz constants
    phi : (n, d) array of face values; ``inf`` entries are replaced by
        :data:`SENTINEL`.
    n_f : number of iterations (no early exit).

    Returns
    -------
    alpha : (n, d) array
    value : (n,) array, ``<alpha, phi> + ||A alpha||``
    """
    if int(n_f) != n_f or n_f < 1:
        raise ValueError(f"n_f must be a positive integer, got {n_f!r}")
    A = np.asarray(A, dtype=float)
    phi = np.where(np.isinf(phi), SENTINEL, np.asarray(phi, dtype=float))
    n, d = phi.shape
    inv_l = (1.0 / np.asarray(L, dtype=float))[:, None]
    shift = phi * inv_l
    if d == 2 and not history:
        a0 = _fista_segment(A, inv_l[:, 0], shift, int(n_f), accelerate)
        a_prev = np.column_stack([a0, 1.0 - a0])
        return a_prev, objective_batch(A, phi, a_prev)
    a_hat = np.full((n, d), 1.0 / d)
    a_prev = a_hat
    trace = []
    for k in range(1, int(n_f) + 1):
        y = _apply(A, a_hat)
        h = np.sqrt((y * y).sum(axis=1))
        g = _apply_t(A, y) / h[:, None]
        a_k = project_simplex_batch(a_hat - g * inv_l - shift)
        if accelerate:
            beta = (k - 1.0) / (k + 1.0)
            a_hat = a_k + beta * (a_k - a_prev)
        else:
            a_hat = a_k
        a_prev = a_k
        if history:
            trace.append(a_k)
    value = objective_batch(A, phi, a_prev)
    if history:
        return a_prev, value, trace
    return a_prev, value


def _fista_segment(A, inv_l, shift, n_f, accelerate):
    """The same iteration for d = 2, written out on the first weight.

    The simplex is the segment a = (a0, 1 - a0); projecting (z0, z1) onto it
    is ``clip((z0 - z1 + 1) / 2, 0, 1)``. Using ``M = A^T A`` turns the two
    matrix products per step into scalar arithmetic.
    """
    c0, c1 = A[:, :, 0], A[:, :, 1]
    m00 = (c0 * c0).sum(axis=1)
    m01 = (c0 * c1).sum(axis=1)
    m11 = (c1 * c1).sum(axis=1)
    ds = shift[:, 0] - shift[:, 1]
    a_hat = np.full(len(m00), 0.5)
    a_prev = a_hat
    for k in range(1, n_f + 1):
        b = 1.0 - a_hat
        q0 = m00 * a_hat + m01 * b
        q1 = m01 * a_hat + m11 * b
        h = np.sqrt(a_hat * q0 + b * q1)
        # z0 - z1 with z = a_hat - grad / L - phi / L
        dz = (2.0 * a_hat - 1.0) - (q0 - q1) / h * inv_l - ds
        a_k = np.clip(0.5 * (dz + 1.0), 0.0, 1.0)
        if accelerate:
            a_hat = a_k + (k - 1.0) / (k + 1.0) * (a_k - a_prev)
        else:
            a_hat = a_k
        a_prev = a_k
    return a_prev


def _subfaces(d: int):
    # larger supports first so that exact ties favour interior solutions
    subsets = [
        [j for j in range(d) if mask >> j & 1] for mask in range(1, 2**d)
    ]
    return sorted(subsets, key=lambda s: (-len(s), s))


def solve_local_exact_batch(A: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact minimiser of ``<a, phi> + ||A a||`` over the simplex.

    The objective is convex, so its minimum is the best stationary point
    over all faces of the simplex. On the face spanned by vertex set ``S``
    (last member ``s``) write ``a = e_s + E b`` with ``E = [a_j - a_s]``,
    ``c = A e_s`` and ``g = phi_S - phi_s``. Stationarity gives
    ``||y|| = ||c_perp|| / sqrt(1 - g^T G^-1 g)`` with ``G = E^T E`` and
    ``c_perp`` the part of ``c`` orthogonal to ``range(E)``, and
    ``b = -||y|| G^-1 g - G^-1 E^T c``. Faces whose stationary point lies
    outside the simplex are skipped; vertices are always feasible.
    """
    A = np.asarray(A, dtype=float)
    phi = np.where(np.isinf(phi), SENTINEL, np.asarray(phi, dtype=float))
    n, d = phi.shape
    best = np.full(n, np.inf)
    alpha = np.zeros((n, d))
    for S in _subfaces(d):
        s = S[-1]
        c = A[:, :, s]
        cand = np.zeros((n, d))
        if len(S) == 1:
            value = phi[:, s] + np.sqrt((c * c).sum(axis=1))
            cand[:, s] = 1.0
            ok = np.ones(n, dtype=bool)
        else:
            rest = S[:-1]
            E = A[:, :, rest] - c[:, :, None]
            g = phi[:, rest] - phi[:, s : s + 1]
            G = np.einsum("nik,nil->nkl", E, E)
            Gi = np.linalg.inv(G)
            Etc = np.einsum("nik,ni->nk", E, c)
            w0 = np.einsum("nkl,nl->nk", Gi, Etc)
            c_perp = c - np.einsum("nik,nk->ni", E, w0)
            q = np.einsum("nk,nkl,nl->n", g, Gi, g)
            with np.errstate(invalid="ignore", divide="ignore"):
                ynorm = np.sqrt((c_perp * c_perp).sum(axis=1) / (1.0 - q))
                b = -ynorm[:, None] * np.einsum("nkl,nl->nk", Gi, g) - w0
            ok = (q < 1.0) & np.isfinite(b).all(axis=1)
            ok &= (b >= 0.0).all(axis=1) & (b.sum(axis=1) <= 1.0)
            cand[:, rest] = np.where(ok[:, None], b, 0.0)
            cand[:, s] = 1.0 - cand[:, rest].sum(axis=1)
            value = objective_batch(A, phi, cand)
        take = ok & (value < best)
        best[take] = value[take]
        alpha[take] = cand[take]
    return alpha, best


def solve_local_exact(A, phi) -> LocalSolution:
    alpha, value = solve_local_exact_batch(
        np.asarray(A, dtype=float)[None], np.asarray(phi, dtype=float)[None]
    )
    return LocalSolution(alpha[0], float(value[0]))


def objective_batch(A: np.ndarray, phi: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    y = _apply(A, alpha)
    return (alpha * phi).sum(axis=1) + np.sqrt((y * y).sum(axis=1))


def solve_local(A, L: float, phi, n_f: int) -> LocalSolution:
    """Solve one local problem; bitwise identical to the batched path."""
    A = np.asarray(A, dtype=float)
    alpha, value = solve_local_batch(
        A[None], np.array([L], dtype=float), np.asarray(phi, dtype=float)[None], n_f
    )
    return LocalSolution(alpha[0], float(value[0]))


def iterations_for_tolerance(L: float, diameter: float, tol: float) -> int:
    """Smallest ``k`` with ``2 L diameter^2 / (k + 1)^2 <= tol`` (unclamped)."""
    if math.isinf(tol):
        return 0
    need = 2.0 * L * diameter**2 / tol
    k = max(math.ceil(math.sqrt(need)) - 1, 0)
    while k > 0 and 2.0 * L * diameter**2 / k**2 <= tol:
        k -= 1
    while 2.0 * L * diameter**2 / (k + 1) ** 2 > tol:
        k += 1
    return k


def default_iterations(L: float, diameter: float, tol: float) -> int:
    """FISTA iteration count from the convergence bound, clamped to [3, 50]."""
    k = iterations_for_tolerance(L, diameter, tol)
    return int(min(max(k, MIN_ITERATIONS), MAX_ITERATIONS))
