import math

import numpy as np
import pytest

from geodesic_ecg.eikonal import (
    SURFACE,
    SiteSet,
    causality_violations,
    read_activation_csv,
    read_sites_csv,
    residual,
    seed,
    solve,
    write_activation_csv,
    write_diagnostics,
    write_sites_csv,
)
from geodesic_ecg.mesh import Mesh, precompute_faces, unit_square

from conftest import corner_site


def euclid_error(n, metric=np.eye(2), **kw):
    m = unit_square(n)
    D = np.broadcast_to(metric, (m.n_elements, 2, 2))
    f = precompute_faces(m, D)
    fld, tape = solve(m, D, f, corner_site(), **kw)
    exact = np.sqrt(np.einsum("ni,ij,nj->n", m.vertices, metric, m.vertices))
    return np.abs(fld.phi - exact).max(), fld, tape, (m, D, f)


def test_seed_at_vertex():
    m = unit_square(4)
    rec = seed(m, np.diag([3.0, 1.0]), SiteSet([[0.25, 0.5]], [0.0]))
    v = int(np.flatnonzero(np.all(m.vertices == [0.25, 0.5], axis=1))[0])
    assert rec.values[v] == 0.0


def test_seed_centroid_of_right_triangle():
    m = Mesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]])
    rec = seed(m, np.eye(2), SiteSet([[1 / 3, 1 / 3]], [2.0]))
    assert rec.values[0] == pytest.approx(2.0 + math.hypot(1 / 3, 1 / 3))
    assert rec.values[0] - 2.0 == pytest.approx(0.4714, abs=1e-4)


def test_seed_min_of_two_sites():
    m = unit_square(2)
    rec = seed(m, np.eye(2), SiteSet([[0.0, 0.0], [0.0, 0.0]], [3.0, 2.0]))
    assert rec.values[0] == 2.0 and rec.site[0] == 1
    assert np.isinf(rec.values).sum() == m.n_vertices - 3


def test_empty_site_set_rejected():
    with pytest.raises(ValueError):
        SiteSet(np.zeros((0, 2)), np.zeros(0))


def test_surface_site_projected():
    m = unit_square(4)
    rec = seed(m, np.eye(2), SiteSet([[0.1, 0.5]], [0.0], [SURFACE]))
    assert np.allclose(rec.points[0], [0.0, 0.5])


def test_euclidean_corner_source():
    h = 0.05
    err, fld, _, _ = euclid_error(20)
    assert fld.converged
    assert err <= 2 * h


def test_constant_anisotropy():
    h = 0.05
    err, fld, _, _ = euclid_error(20, np.diag([4.0, 1.0]))
    assert err <= 2 * h * math.sqrt(4.0)


def test_error_follows_h_log_h():
    # point-source errors scale like h log(1/h); the normalised error is flat
    scaled = []
    for n in (10, 20, 40):
        err = euclid_error(n)[0]
        h = 1.0 / n
        scaled.append(err / (h * math.log(1 / h)))
    assert max(scaled) / min(scaled) < 1.05


@pytest.mark.xfail(strict=True, reason="point-source error is O(h log 1/h); observed order ~0.65-0.74")
def test_refinement_order_at_least_0_8():
    e = [euclid_error(n)[0] for n in (10, 20, 40)]
    orders = np.log2(np.array(e[:-1]) / e[1:])
    assert orders.min() >= 0.8


def _superposition(square20):
    m, D, f = square20
    pa = solve(m, D, f, SiteSet([[0.0, 0.0]], [0.0]))[0].phi
    pb = solve(m, D, f, SiteSet([[1.0, 1.0]], [0.0]))[0].phi
    pab = solve(m, D, f, SiteSet([[0.0, 0.0], [1.0, 1.0]], [0.0, 0.0]))[0].phi
    return m, pab - np.minimum(pa, pb)


@pytest.mark.xfail(strict=True, reason="discrete local updates interpolate across the shock")
def test_min_superposition_exact(square20):
    _, diff = _superposition(square20)
    assert np.abs(diff).max() <= 1e-9


def test_min_superposition_away_from_shock(square20):
    m, diff = _superposition(square20)
    # faces straddling the shock can only lower values
    assert diff.max() <= 1e-12
    h = 0.05
    dist = np.abs(m.vertices.sum(axis=1) - 1.0) / math.sqrt(2)
    far = dist > 1.5 * h
    assert np.abs(diff[far]).max() <= 1e-9


def test_residual_and_causality(square20):
    m, D, f = square20
    fld, tape = solve(m, D, f, SiteSet([[0.3, 0.7], [0.8, 0.2]], [0.0, 0.1]))
    assert residual(m, D, f, fld.phi) <= fld.diagnostics["epsilon"]
    assert causality_violations(f, fld, tape) == 0
    bumped = fld.phi.copy()
    v = 200  # interior vertex
    bumped[v] += 1.0
    assert residual(m, D, f, bumped) >= 1.0 - 1e-4


def test_residual_of_unsolved_field(square20):
    m, D, f = square20
    rec = seed(m, D, corner_site())
    assert residual(m, D, f, rec.values) > 1.0 or np.isinf(residual(m, D, f, rec.values))


def test_nonconvergence_reported(square20):
    m, D, f = square20
    fld, _ = solve(m, D, f, corner_site(), max_iters=2)
    assert not fld.converged
    assert fld.iterations == 2


def test_invalid_epsilon(square20):
    m, D, f = square20
    with pytest.raises(ValueError):
        solve(m, D, f, corner_site(), epsilon=0.0)


def test_bitwise_deterministic_across_threads(square20):
    m, D, f = square20
    sites = SiteSet([[0.31, 0.62], [0.77, 0.18]], [0.0, 0.05])
    ref, tref = solve(m, D, f, sites)
    again, _ = solve(m, D, f, sites)
    threaded, tthr = solve(m, D, f, sites, n_jobs=4)
    assert np.array_equal(ref.phi, again.phi)
    assert np.array_equal(ref.phi, threaded.phi)
    assert np.array_equal(tref.winner_face, tthr.winner_face)


def test_epsilon_consistency(square20):
    m, D, f = square20
    a = solve(m, D, f, corner_site(), epsilon=1e-4)[0].phi
    b = solve(m, D, f, corner_site(), epsilon=1e-6)[0].phi
    assert np.abs(a - b).max() <= 1e-4


def test_exact_local_solver_close_to_fista(square20):
    m, D, f = square20
    a = solve(m, D, f, corner_site())[0].phi
    b = solve(m, D, f, corner_site(), local_solver="exact")[0].phi
    assert np.abs(a - b).max() < 1e-3
    with pytest.raises(ValueError):
        solve(m, D, f, corner_site(), local_solver="newton")


def test_three_dimensional_cube():
    # two tetrahedral layers of a unit cube split into 6 tets per cell
    n = 4
    x = np.linspace(0, 1, n + 1)
    V = np.array(np.meshgrid(x, x, x, indexing="ij")).reshape(3, -1).T
    idx = lambda i, j, k: (i * (n + 1) + j) * (n + 1) + k
    E = []
    for i in range(n):
        for j in range(n):
            for k in range(n):
                c = [idx(i + a, j + b, k + cc) for a in (0, 1) for b in (0, 1) for cc in (0, 1)]
                for p in ((0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7), (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7)):
                    E.append([c[q] for q in p])
    m = Mesh(V, E)
    D = np.eye(3)
    f = precompute_faces(m, D)
    fld, tape = solve(m, D, f, SiteSet([[0.0, 0.0, 0.0]], [0.0]))
    assert fld.converged
    assert np.abs(fld.phi - np.linalg.norm(V, axis=1)).max() <= 2 * 0.25


def test_csv_roundtrips(tmp_path, square20):
    m, D, f = square20
    fld, _ = solve(m, D, f, corner_site())
    p = tmp_path / "phi.csv"
    write_activation_csv(p, fld.phi)
    assert np.array_equal(read_activation_csv(p), fld.phi)
    assert p.read_text().splitlines()[0] == "vertex_id,phi_ms"
    write_diagnostics(tmp_path / "diag.json", fld)
    sites = SiteSet([[0.1, 0.2], [0.3, 0.4]], [1.5, 2.5], ["volume", "surface"])
    write_sites_csv(tmp_path / "s.csv", sites, [True, False])
    back = read_sites_csv(tmp_path / "s.csv")
    assert np.array_equal(back.positions, sites.positions)
    assert np.array_equal(back.times, sites.times)
    assert list(back.modes) == ["volume", "surface"]
