import json

import numpy as np
import pytest

from geodesic_ecg.mesh import (
    Mesh,
    MeshError,
    check_metric,
    closest_boundary_point,
    fiber_metric,
    lipschitz_bound,
    load_mesh,
    load_metric,
    locate_point,
    pack_symmetric,
    precompute_faces,
    save_mesh,
    unit_square,
    unpack_symmetric,
)

TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def test_single_triangle_valid():
    m = Mesh(TRI, [[0, 1, 2]])
    assert m.dim == 2 and m.n_vertices == 3 and m.n_elements == 1
    assert m.volumes()[0] == pytest.approx(0.5)


def test_repeated_vertex_rejected():
    with pytest.raises(MeshError, match="element 0"):
        Mesh(TRI, [[0, 1, 1]])


def test_out_of_range_index_rejected():
    with pytest.raises(MeshError, match="out of range"):
        Mesh(TRI, [[0, 1, 3]])


def test_degenerate_element_named():
    v = np.vstack([TRI, [[2.0, 0.0]]])
    with pytest.raises(MeshError, match="element 1 is degenerate"):
        Mesh(v, [[0, 1, 2], [0, 1, 3]])


def test_dimension_checks():
    with pytest.raises(MeshError):
        Mesh(np.zeros((3, 1)), [[0, 1]])
    with pytest.raises(MeshError):
        Mesh(TRI, [[0, 1]])


def test_metric_checks():
    m = unit_square(2)
    assert check_metric(np.eye(2), m.n_elements, 2).shape == (8, 2, 2)
    with pytest.raises(MeshError, match="symmetric"):
        check_metric(np.array([[1.0, 0.5], [0.0, 1.0]]), m.n_elements, 2)
    bad = np.broadcast_to(np.eye(2), (8, 2, 2)).copy()
    bad[5] = np.diag([1.0, -1.0])
    with pytest.raises(MeshError, match="element 5"):
        check_metric(bad, m.n_elements, 2)
    with pytest.raises(MeshError):
        check_metric(np.ones((3, 2, 2)), m.n_elements, 2)


def test_pack_roundtrip(rng):
    B = rng.normal(size=(5, 3, 3))
    S = B @ np.transpose(B, (0, 2, 1))
    assert np.array_equal(unpack_symmetric(pack_symmetric(S), 3), S)


def test_fiber_metric_velocities():
    D = fiber_metric(np.array([[1.0, 0.0]]), 0.6, 0.3)[0]
    assert np.sqrt(np.array([1.0, 0.0]) @ D @ np.array([1.0, 0.0])) == pytest.approx(1 / 0.6)
    assert np.sqrt(np.array([0.0, 1.0]) @ D @ np.array([0.0, 1.0])) == pytest.approx(1 / 0.3)


def test_unit_square_counts():
    for diag in ("up", "down", "alternate"):
        m = unit_square(4, diagonal=diag)
        assert m.n_vertices == 25 and m.n_elements == 32
        assert m.volumes().sum() == pytest.approx(1.0)
    assert len(unit_square(4).boundary_vertices()) == 16


def test_locate_point_inside_and_vertex():
    m = unit_square(4)
    loc = locate_point(m, [0.3, 0.6])
    assert loc.inside
    assert np.allclose(loc.barycentric @ m.vertices[m.elements[loc.element]], [0.3, 0.6])
    # a point on a shared vertex goes to the lowest-index element
    at = locate_point(m, [0.25, 0.25])
    owners = np.flatnonzero((m.elements == 6).any(axis=1))
    assert at.element == owners.min()


def test_locate_point_outside_projects():
    m = unit_square(4)
    loc = locate_point(m, [1.5, 0.5])
    assert not loc.inside
    assert np.allclose(loc.point, [1.0, 0.5])


def test_closest_boundary_point_interior():
    m = unit_square(4)
    p, _ = closest_boundary_point(m, [0.1, 0.5])
    assert np.allclose(p, [0.0, 0.5])


def test_precompute_faces_shapes_and_bound():
    m = unit_square(3)
    f = precompute_faces(m, np.eye(2))
    assert f.n_faces == 3 * m.n_elements
    assert f.A.shape == (f.n_faces, 2, 2)
    # tightened lower bound never exceeds the true minimum of ||A a||
    grid = np.linspace(0, 1, 2001)
    alphas = np.column_stack([grid, 1 - grid])
    for k in range(0, f.n_faces, 7):
        h = np.linalg.norm(alphas @ f.A[k].T, axis=1).min()
        assert f.h_lower[k] <= h + 1e-12
    assert np.all(f.lipschitz == lipschitz_bound(f.A, f.h_lower))


def test_precompute_faces_opposite_vertex():
    m = unit_square(2)
    f = precompute_faces(m, np.eye(2))
    for k in range(f.n_faces):
        e = f.element[k]
        assert set(f.face_vertices[k]) | {f.opposite[k]} == set(m.elements[e])


def test_mesh_io_roundtrip(tmp_path):
    m = unit_square(3)
    D = np.broadcast_to(np.diag([4.0, 1.0]), (m.n_elements, 2, 2))
    path = tmp_path / "m.json"
    save_mesh(path, m, D)
    m2, D2 = load_mesh(path)
    assert np.array_equal(m2.vertices, m.vertices)
    assert np.array_equal(m2.elements, m.elements)
    assert np.array_equal(D2, D)
    mp = tmp_path / "metric.json"
    mp.write_text(json.dumps({"metric": pack_symmetric(D).tolist()}))
    assert np.array_equal(load_metric(mp, m), D)


def test_submesh_vertex_map():
    m = unit_square(2)
    sub, used = m.submesh(np.arange(m.n_elements) < 2)
    assert np.array_equal(sub.vertices, m.vertices[used])
    assert np.array_equal(used[sub.elements], m.elements[:2])
