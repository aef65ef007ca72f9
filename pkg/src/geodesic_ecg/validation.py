"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

from numbers import Integral, Real

import numpy as np
from sklearn.utils.validation import check_array

from .eikonal import VOLUME, SiteSet
from .mesh import Mesh


def check_mesh(mesh) -> Mesh:
    if not isinstance(mesh, Mesh):
        raise TypeError(f"expected a Mesh, got {type(mesh).__name__}")
    return mesh


def check_sites(sites, dim: int, mode: str = VOLUME) -> SiteSet:
    """Accept a :class:`SiteSet` or an array of rows ``(x_1..x_d, t)``."""
    if isinstance(sites, SiteSet):
        if sites.dim != dim:
            raise ValueError(f"sites are {sites.dim}-D, mesh is {dim}-D")
        if not (np.isfinite(sites.positions).all() and np.isfinite(sites.times).all()):
            raise ValueError("site coordinates and times must be finite")
        return sites
    X = check_array(sites, ensure_2d=True, dtype=float)
    if X.shape[1] != dim + 1:
        raise ValueError(f"site rows need {dim + 1} columns (x_1..x_{dim}, t), got {X.shape[1]}")
    return SiteSet.from_array(X, mode)


def check_positive(value, name: str, integer: bool = False):
    kind = Integral if integer else Real
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ValueError(f"{name} must be a positive {'integer' if integer else 'number'}, got {value!r}")
    return value


def check_times_traces(times, traces=None):
    """Validate a uniform time grid and, optionally, matching lead traces."""
    t = check_array(np.asarray(times, dtype=float).reshape(-1, 1), dtype=float).ravel()
    if t.size < 2:
        raise ValueError("need at least two time samples")
    steps = np.diff(t)
    if steps.min() <= 0 or not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise ValueError("time samples must be uniform and increasing")
    if traces is None:
        return t
    V = check_array(traces, ensure_2d=False, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] != t.size:
        raise ValueError(f"{V.shape[0]} trace rows for {t.size} time samples")
    return t, V
