import numpy as np
import pytest

from geodesic_ecg.eikonal import SiteSet
from geodesic_ecg.leadfield import TorsoModel
from geodesic_ecg.mesh import Mesh, precompute_faces, unit_square


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def square20():
    mesh = unit_square(20)
    metric = np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2))
    return mesh, metric, precompute_faces(mesh, metric)


def corner_site(t=0.0):
    return SiteSet([[0.0, 0.0]], [t])


def disk_mesh(n_rings=6, radius=1.0, label_heart=0.5):
    """Triangulated disk from concentric rings, heart = elements with centroid r < label_heart."""
    from scipy.spatial import Delaunay

    pts = [np.zeros((1, 2))]
    for k in range(1, n_rings + 1):
        r = radius * k / n_rings
        n = 6 * k
        ang = 2 * np.pi * np.arange(n) / n
        pts.append(r * np.column_stack([np.cos(ang), np.sin(ang)]))
    pts = np.concatenate(pts)
    tri = Delaunay(pts).simplices
    p = pts[tri]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    tri = np.where((det < 0)[:, None], tri[:, [0, 2, 1]], tri)
    labels = np.where(np.linalg.norm(pts[tri].mean(axis=1), axis=1) < label_heart, 1, 2)
    return Mesh(pts, tri, labels)


def disk_torso(n_rings=6, wct=(1,), electrodes=((1.0, 0.0), (-1.0, 0.0))):
    mesh = disk_mesh(n_rings)
    eye = np.broadcast_to(np.eye(2), (mesh.n_elements, 2, 2))
    return TorsoModel(mesh, eye, eye, [1], np.array(electrodes), list(wct))


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record_criterion(key, ok, detail):
    ACCEPTANCE[str(key)] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
