"""Simplicial meshes with piecewise-constant anisotropic metrics.

A :class:`Mesh` holds vertex coordinates (mm) and ``d``-simplices. The metric
``D`` is a squared-slowness tensor per element, so that the travel time across
a displacement ``x`` inside element ``j`` is ``sqrt(x^T D_j x)``.
:func:`precompute_faces` builds the per-(element, opposite vertex) data used
by the local solver; it depends only on geometry and metric and is computed
once per mesh.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import NamedTuple, Optional

import numpy as np

logger = logging.getLogger(__name__)

DEGENERATE_RTOL = 1e-12
INSIDE_TOL = 1e-9
LIPSCHITZ_WARN = 1e6


class MeshError(ValueError):
    """Raised when a mesh or metric violates its invariants."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """Validated simplicial triangulation.

    Attributes
    ----------
    vertices : ndarray, shape (n_v, d)
        Vertex coordinates in mm.
    elements : ndarray, shape (n_e, d + 1)
        Vertex indices of each simplex.
    labels : ndarray, shape (n_e,), optional
        Integer region tag per element.
    """

    vertices: np.ndarray
    elements: np.ndarray
    labels: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        if self.labels is not None:
            labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            object.__setattr__(self, "labels", labels)
        _validate(self)
        vertices.setflags(write=False)
        elements.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def edge_vectors(self) -> np.ndarray:
        """Columns ``v_k - v_0`` for every element, shape (n_e, d, d)."""
        if "edges" not in self._cache:
            p = self.vertices[self.elements]
            self._cache["edges"] = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
        return self._cache["edges"]

    def volumes(self) -> np.ndarray:
        if "volumes" not in self._cache:
            det = np.linalg.det(self.edge_vectors())
            self._cache["volumes"] = np.abs(det) / math.factorial(self.dim)
        return self._cache["volumes"]

    def inverse_transforms(self) -> np.ndarray:
        if "inv" not in self._cache:
            self._cache["inv"] = np.linalg.inv(self.edge_vectors())
        return self._cache["inv"]

    def boundary_facets(self) -> np.ndarray:
        """Facets (d-vertex tuples) owned by exactly one element, shape (n_b, d)."""
        if "boundary" not in self._cache:
            d = self.dim
            facets = np.concatenate(
                [np.delete(self.elements, i, axis=1) for i in range(d + 1)]
            )
            key = np.sort(facets, axis=1)
            uniq, inverse, counts = np.unique(
                key, axis=0, return_inverse=True, return_counts=True
            )
            once = counts[inverse.ravel()] == 1
            self._cache["boundary"] = facets[once]
        return self._cache["boundary"]

    def boundary_facet_elements(self) -> np.ndarray:
        """Owning element of each boundary facet (same order as boundary_facets)."""
        if "boundary_elem" not in self._cache:
            d = self.dim
            facets = np.concatenate(
                [np.delete(self.elements, i, axis=1) for i in range(d + 1)]
            )
            owner = np.tile(np.arange(self.n_elements), d + 1)
            key = np.sort(facets, axis=1)
            _, inverse, counts = np.unique(
                key, axis=0, return_inverse=True, return_counts=True
            )
            once = counts[inverse.ravel()] == 1
            self._cache["boundary_elem"] = owner[once]
        return self._cache["boundary_elem"]

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_facets())

    def diameter(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def submesh(self, element_mask) -> tuple["Mesh", np.ndarray]:
        """Restrict to selected elements; returns the submesh and the vertex map."""
        elements = self.elements[np.asarray(element_mask)]
        used = np.unique(elements)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        labels = None if self.labels is None else self.labels[np.asarray(element_mask)]
        return Mesh(self.vertices[used], remap[elements], labels), used


def unit_square(n: int, size: float = 1.0, diagonal: str = "up") -> Mesh:
    """Structured triangulation of ``[0, size]^2`` with ``n`` cells per side.

    ``diagonal`` picks the split of each cell: ``"up"`` (lower-left to
    upper-right), ``"down"`` or ``"alternate"``.
    """
    if diagonal not in ("up", "down", "alternate"):
        raise ValueError(f"unknown diagonal {diagonal!r}")
    x = np.linspace(0.0, size, n + 1)
    X, Y = np.meshgrid(x, x, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    i, j = i.ravel(), j.ravel()
    a, b = i * (n + 1) + j, (i + 1) * (n + 1) + j
    c, d = b + 1, a + 1
    up = np.full(i.size, diagonal == "up") if diagonal != "alternate" else (i + j) % 2 == 0
    first = np.where(up[:, None], np.column_stack([a, b, c]), np.column_stack([a, b, d]))
    second = np.where(up[:, None], np.column_stack([a, c, d]), np.column_stack([b, c, d]))
    elements = np.stack([first, second], axis=1).reshape(-1, 3)
    return Mesh(vertices, elements)


def _validate(mesh: Mesh) -> None:
    v, e = mesh.vertices, mesh.elements
    if v.ndim != 2 or v.shape[1] < 2:
        raise MeshError(f"vertices must be an (n, d) array with d >= 2, got {v.shape}")
    d = v.shape[1]
    if e.ndim != 2 or e.shape[1] != d + 1:
        raise MeshError(f"elements must have {d + 1} vertices each, got shape {e.shape}")
    if e.size and (e.min() < 0 or e.max() >= v.shape[0]):
        bad = int(np.flatnonzero((e < 0).any(1) | (e >= v.shape[0]).any(1))[0])
        raise MeshError(f"element {bad} references a vertex index out of range")
    s = np.sort(e, axis=1)
    dup = (s[:, 1:] == s[:, :-1]).any(axis=1)
    if dup.any():
        bad = int(np.flatnonzero(dup)[0])
        raise MeshError(f"element {bad} has a repeated vertex: {e[bad].tolist()}")
    if mesh.labels is not None and mesh.labels.shape != (e.shape[0],):
        raise MeshError("labels must hold one integer per element")
    p = v[e]
    edges = [
        np.linalg.norm(p[:, a] - p[:, b], axis=1)
        for a, b in itertools.combinations(range(d + 1), 2)
    ]
    longest = np.max(edges, axis=0)
    vol = mesh.volumes()
    degenerate = vol < DEGENERATE_RTOL * longest**d
    if degenerate.any():
        bad = int(np.flatnonzero(degenerate)[0])
        raise MeshError(f"element {bad} is degenerate (volume {vol[bad]:.3e})")


def check_metric(metric, n_elements: int, dim: int) -> np.ndarray:
    """Return the metric as an (n_e, d, d) array after s.p.d. checks."""
    metric = np.asarray(metric, dtype=float)
    if metric.ndim == 2 and metric.shape[1] == dim * (dim + 1) // 2:
        metric = unpack_symmetric(metric, dim)
    if metric.ndim == 2 and metric.shape == (dim, dim):
        metric = np.broadcast_to(metric, (n_elements, dim, dim))
    if metric.shape != (n_elements, dim, dim):
        raise MeshError(
            f"metric must hold one {dim}x{dim} tensor per element, got {metric.shape}"
        )
    if not np.allclose(metric, np.transpose(metric, (0, 2, 1)), rtol=1e-12, atol=1e-14):
        raise MeshError("metric tensors must be symmetric")
    try:
        np.linalg.cholesky(metric)
    except np.linalg.LinAlgError:
        for j in range(n_elements):
            try:
                np.linalg.cholesky(metric[j])
            except np.linalg.LinAlgError:
                raise MeshError(f"metric of element {j} is not positive definite") from None
    return np.ascontiguousarray(metric)


def unpack_symmetric(packed, dim: int) -> np.ndarray:
    """Rebuild symmetric matrices from row-major upper-triangular entries."""
    packed = np.asarray(packed, dtype=float)
    iu = np.triu_indices(dim)
    out = np.zeros((packed.shape[0], dim, dim))
    out[:, iu[0], iu[1]] = packed
    out[:, iu[1], iu[0]] = packed
    return out


def pack_symmetric(tensors) -> np.ndarray:
    tensors = np.asarray(tensors, dtype=float)
    iu = np.triu_indices(tensors.shape[-1])
    return tensors[:, iu[0], iu[1]]


def fiber_metric(fibers, v_fiber: float, v_cross: float) -> np.ndarray:
    """Squared-slowness tensors ``f f^T / v_f^2 + (I - f f^T) / v_c^2``."""
    f = np.asarray(fibers, dtype=float)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    ff = f[:, :, None] * f[:, None, :]
    eye = np.eye(f.shape[1])
    return ff / v_fiber**2 + (eye - ff) / v_cross**2


def load_mesh(path: str | PathLike) -> tuple[Mesh, Optional[np.ndarray]]:
    """Read a mesh JSON file; returns the mesh and its metric (or None).

    Raises
    ------
    MeshError
        On malformed content or violated invariants.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from None
    return mesh_from_dict(data)


def mesh_from_dict(data: dict) -> tuple[Mesh, Optional[np.ndarray]]:
    try:
        vertices = np.asarray(data["vertices"], dtype=float)
        elements = np.asarray(data["elements"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshError(f"malformed mesh data: {exc}") from None
    dim = int(data.get("dim", vertices.shape[1] if vertices.ndim == 2 else 0))
    if vertices.ndim != 2 or vertices.shape[1] != dim:
        raise MeshError(f"all vertices must have dimension {dim}")
    labels = data.get("labels")
    mesh = Mesh(vertices, elements, None if labels is None else np.asarray(labels))
    metric = data.get("metric")
    if metric is not None:
        metric = check_metric(metric, mesh.n_elements, dim)
    return mesh, metric


def mesh_to_dict(mesh: Mesh, metric=None) -> dict:
    out = {
        "dim": mesh.dim,
        "vertices": mesh.vertices.tolist(),
        "elements": mesh.elements.tolist(),
    }
    if metric is not None:
        out["metric"] = pack_symmetric(metric).tolist()
    if mesh.labels is not None:
        out["labels"] = mesh.labels.tolist()
    return out


def save_mesh(path: str | PathLike, mesh: Mesh, metric=None) -> None:
    with open(path, "w") as fh:
        json.dump(mesh_to_dict(mesh, metric), fh)


def load_metric(path: str | PathLike, mesh: Mesh) -> np.ndarray:
    """Read a standalone metric JSON (``{"metric": [...]}`` or a bare list)."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data["metric"]
    return check_metric(data, mesh.n_elements, mesh.dim)


def sqrtm_spd(tensors: np.ndarray) -> np.ndarray:
    """Symmetric principal square roots of a stack of s.p.d. matrices."""
    w, q = np.linalg.eigh(tensors)
    return (q * np.sqrt(w)[:, None, :]) @ np.transpose(q, (0, 2, 1))


@dataclass(frozen=True, eq=False)
class FacePrecomp:
    """Local-problem data for every (element, opposite vertex) pair.

    Faces are ordered by element, then by the local index of the opposite
    vertex, so ``face = element * (d + 1) + local``.
    """

    A: np.ndarray  # (F, d, d), columns D^{1/2} (v_face_n - v_opp)
    lipschitz: np.ndarray  # (F,)
    h_lower: np.ndarray  # (F,)
    face_vertices: np.ndarray  # (F, d)
    opposite: np.ndarray  # (F,)
    element: np.ndarray  # (F,)

    @property
    def n_faces(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]


def lipschitz_bound(A: np.ndarray, h_lower: np.ndarray) -> np.ndarray:
    """Upper bound on the Lipschitz constant of ``grad ||A a||`` given ``||A a|| >= h_lower``."""
    s = np.linalg.svd(A, compute_uv=False)
    norm_a = s[..., 0]
    norm_ata = norm_a**2
    return norm_ata / h_lower * (1.0 + norm_a / h_lower)


def precompute_faces(mesh: Mesh, metric, *, tighten: bool = True) -> FacePrecomp:
    """Build the local-problem matrices and Lipschitz constants of every face.

    ``h_lower`` starts from ``sigma_min(A) / (d sqrt d)``; with ``tighten``
    it is replaced by ``||A a*|| / 1.1`` where ``a*`` minimises ``||A a||``
    over the face simplex (exact local solve with zero face values).
    """
    from .simplex import solve_local_exact_batch

    d = mesh.dim
    metric = check_metric(metric, mesh.n_elements, d)
    root = sqrtm_spd(metric)
    n_e = mesh.n_elements
    local = np.arange(d + 1)
    faces_local = np.array([np.delete(local, i) for i in local])  # (d+1, d)
    elements = mesh.elements
    opp = elements[:, local].reshape(-1)
    fv = elements[:, faces_local].reshape(-1, d)
    elem = np.repeat(np.arange(n_e), d + 1)
    diff = mesh.vertices[fv] - mesh.vertices[opp][:, None, :]  # (F, d, dim)
    A = root[elem] @ np.transpose(diff, (0, 2, 1))
    s = np.linalg.svd(A, compute_uv=False)
    h_lower = s[:, -1] / (d * math.sqrt(d))
    L = lipschitz_bound(A, h_lower)
    if tighten:
        _, value = solve_local_exact_batch(A, np.zeros((A.shape[0], d)))
        h_lower = value / 1.1
        L = lipschitz_bound(A, h_lower)
    if np.any(L > LIPSCHITZ_WARN):
        worst = int(elem[np.argmax(L)])
        logger.warning(
            "Lipschitz constant %.3g exceeds %.0g (element %d); poor element quality",
            L.max(), LIPSCHITZ_WARN, worst,
        )
    for arr in (A, L, h_lower, fv, opp, elem):
        arr.setflags(write=False)
    return FacePrecomp(A, L, h_lower, fv, opp, elem)


class PointLocation(NamedTuple):
    element: int
    barycentric: np.ndarray  # (d + 1,), ordered like mesh.elements[element]
    point: np.ndarray  # located (possibly projected) point
    inside: bool


def barycentric(mesh: Mesh, element: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lam = mesh.inverse_transforms()[element] @ (x - mesh.vertices[mesh.elements[element, 0]])
    return np.concatenate([[1.0 - lam.sum()], lam])


def locate_point(mesh: Mesh, x, tol: float = INSIDE_TOL) -> PointLocation:
    """Find the element containing ``x``, or the closest point of the mesh.

    Inside points return the lowest-index containing element. Outside
    points are projected onto the nearest boundary facet.
    """
    x = np.asarray(x, dtype=float)
    v0 = mesh.vertices[mesh.elements[:, 0]]
    lam = np.einsum("eij,ej->ei", mesh.inverse_transforms(), x - v0)
    bary = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
    inside = np.flatnonzero(bary.min(axis=1) >= -tol)
    if inside.size:
        k = int(inside[0])
        return PointLocation(k, bary[k], x.copy(), True)
    point, facet = closest_boundary_point(mesh, x)
    k = int(mesh.boundary_facet_elements()[facet])
    b = barycentric(mesh, k, point)
    b = np.clip(b, 0.0, None)
    b /= b.sum()
    return PointLocation(k, b, point, False)


def closest_boundary_point(mesh: Mesh, x) -> tuple[np.ndarray, int]:
    """Closest point to ``x`` on the mesh boundary and the facet index holding it."""
    x = np.asarray(x, dtype=float)
    facets = mesh.boundary_facets()
    points = closest_points_on_simplices(mesh.vertices[facets], x)
    dist = np.linalg.norm(points - x, axis=1)
    i = int(np.argmin(dist))
    return points[i], i


def closest_points_on_simplices(simplices: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Closest point of each simplex (rows of ``k`` vertices) to ``x``.

    Exact: enumerates every vertex subset, solves the affine least-squares
    problem on its span and keeps the nearest feasible candidate.
    """
    n, k, _ = simplices.shape
    best = np.empty((n, simplices.shape[2]))
    best_d = np.full(n, np.inf)
    for r in range(1, k + 1):
        for subset in itertools.combinations(range(k), r):
            p = simplices[:, subset, :]
            base = p[:, 0, :]
            if r == 1:
                cand = base
                ok = np.ones(n, dtype=bool)
            else:
                E = np.transpose(p[:, 1:, :] - base[:, None, :], (0, 2, 1))
                rhs = x - base
                G = np.transpose(E, (0, 2, 1)) @ E
                c = np.linalg.solve(G, np.einsum("nij,ni->nj", E, rhs)[..., None])[..., 0]
                w = np.concatenate([1 - c.sum(1, keepdims=True), c], axis=1)
                ok = w.min(axis=1) >= -1e-12
                cand = base + np.einsum("nij,nj->ni", E, c)
            dist = np.linalg.norm(cand - x, axis=1)
            better = ok & (dist < best_d)
            best[better] = cand[better]
            best_d[better] = dist[better]
    return best


def face_metric_diameter(mesh: Mesh, metric) -> float:
    """Largest vertex-to-vertex distance within an element, in the element metric."""
    metric = np.asarray(metric, dtype=float)
    p = mesh.vertices[mesh.elements]
    best = 0.0
    for a, b in itertools.combinations(range(mesh.dim + 1), 2):
        e = p[:, a] - p[:, b]
        best = max(best, float(np.sqrt(np.einsum("ei,eij,ej->e", e, metric, e)).max()))
    return best
