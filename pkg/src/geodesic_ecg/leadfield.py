"""Lead fields on a heart-torso mesh and the discrete ECG operator.

Each lead field solves a pure-Neumann conduction problem with a unit point
source at the lead electrode and the compensating sink spread over the Wilson
central terminal electrodes. The ECG operator ``B`` integrates the
intracellular current against the lead-field gradient over the heart, so
``V = B @ V_m`` for nodal transmembrane potentials ``V_m``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .mesh import Mesh, check_metric, mesh_from_dict, mesh_to_dict, pack_symmetric


class LeadFieldError(ValueError):
    pass


@dataclass(eq=False)
class TorsoModel:
    """Heart-torso conductor.

    ``bulk`` is ``G_i + G_e`` per element (S/m), ``intracellular`` is ``G_i``
    per element (only heart elements are used). Electrodes are snapped to
    the nearest boundary vertex on construction; ``wct`` lists the electrode
    indices forming the Wilson central terminal.
    """

    mesh: Mesh
    bulk: np.ndarray
    intracellular: np.ndarray
    heart_labels: Sequence[int]
    electrodes: np.ndarray
    wct: Sequence[int]
    electrode_names: Optional[list] = None
    electrode_vertices: np.ndarray = field(init=False)
    snap_distance: np.ndarray = field(init=False)

    def __post_init__(self):
        m = self.mesh
        self.bulk = check_metric(self.bulk, m.n_elements, m.dim)
        self.intracellular = np.asarray(self.intracellular, dtype=float)
        if self.intracellular.shape[-2:] != (m.dim, m.dim):
            self.intracellular = check_metric(self.intracellular, m.n_elements, m.dim)
        if self.intracellular.ndim == 2:
            self.intracellular = np.broadcast_to(
                self.intracellular, (m.n_elements, m.dim, m.dim)
            )
        self.electrodes = np.atleast_2d(np.asarray(self.electrodes, dtype=float))
        self.wct = [int(i) for i in self.wct]
        if not self.wct:
            raise LeadFieldError("the Wilson central terminal needs at least one electrode")
        if m.labels is None:
            raise LeadFieldError("torso mesh has no region labels; cannot find the heart")
        if not self.heart_mask().any():
            raise LeadFieldError(f"no element carries a heart label {list(self.heart_labels)}")
        if self.electrode_names is None:
            self.electrode_names = [f"E{i}" for i in range(len(self.electrodes))]
        bverts = m.boundary_vertices()
        dist = np.linalg.norm(
            m.vertices[bverts][None, :, :] - self.electrodes[:, None, :], axis=2
        )
        nearest = np.argmin(dist, axis=1)
        self.electrode_vertices = bverts[nearest]
        self.snap_distance = dist[np.arange(len(nearest)), nearest]

    def heart_mask(self) -> np.ndarray:
        return np.isin(self.mesh.labels, np.asarray(list(self.heart_labels)))

    def heart_mesh(self) -> tuple[Mesh, np.ndarray]:
        """Heart submesh and the torso index of each of its vertices."""
        return self.mesh.submesh(self.heart_mask())

    def default_leads(self) -> list[int]:
        """Every electrode except the last WCT electrode (its lead is redundant)."""
        drop = self.wct[-1]
        return [i for i in range(len(self.electrodes)) if i != drop]


def p1_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the barycentric basis functions, shape (n_e, d + 1, d)."""
    inv = mesh.inverse_transforms()  # rows: grad of lambda_1..lambda_d
    g0 = -inv.sum(axis=1, keepdims=True)
    return np.concatenate([g0, inv], axis=1)


def simplex_quadrature(dim: int, degree: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points and weights (summing to 1) of a Gauss rule on a simplex."""
    if degree <= 1:
        return np.full((1, dim + 1), 1.0 / (dim + 1)), np.ones(1)
    if dim == 2:
        a, b = 2.0 / 3.0, 1.0 / 6.0
    elif dim == 3:
        a = (5.0 + 3.0 * math.sqrt(5.0)) / 20.0
        b = (5.0 - math.sqrt(5.0)) / 20.0
    else:
        raise NotImplementedError("degree-2 rule available for d = 2, 3")
    pts = np.full((dim + 1, dim + 1), b)
    np.fill_diagonal(pts, a)
    return pts, np.full(dim + 1, 1.0 / (dim + 1))


def stiffness_matrix(mesh: Mesh, conductivity) -> sp.csr_matrix:
    """P1 stiffness matrix of ``-div(G grad u)``."""
    G = np.asarray(conductivity, dtype=float)
    grads = p1_gradients(mesh)
    vol = mesh.volumes()
    local = np.einsum("e,eai,eij,ebj->eab", vol, grads, G, grads)
    n = mesh.elements.shape[1]
    rows = np.repeat(mesh.elements, n, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, n)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2)
    return K.tocsr()


def lead_load(model: TorsoModel, lead: int) -> np.ndarray:
    """Nodal load: +1 at the lead electrode, -1/|WCT| at each WCT electrode."""
    b = np.zeros(model.mesh.n_vertices)
    b[model.electrode_vertices[lead]] += 1.0
    w = model.electrode_vertices[model.wct]
    np.add.at(b, w, -1.0 / len(w))
    return b


def _neumann_system(model: TorsoModel):
    K = stiffness_matrix(model.mesh, model.bulk)
    n_comp, _ = connected_components(K, directed=False)
    if n_comp > 1:
        raise LeadFieldError(f"torso mesh has {n_comp} disconnected parts")
    n = K.shape[0]
    ones = sp.csr_matrix(np.ones((1, n)))
    return K, sp.bmat([[K, ones.T], [ones, None]], format="csc")


def solve_lead_field(model: TorsoModel, lead: int, *, system=None) -> np.ndarray:
    """Zero-mean nodal lead field of electrode ``lead`` w.r.t. the WCT."""
    K, S = _neumann_system(model) if system is None else system
    b = lead_load(model, lead)
    sol = spsolve(S, np.concatenate([b, [0.0]]))
    Z = sol[:-1]
    res = np.linalg.norm(K @ Z + sol[-1] - b) / max(np.linalg.norm(b), 1e-300)
    if not np.isfinite(res) or res > 1e-10:
        raise LeadFieldError(f"lead-field solve residual {res:.2e} exceeds 1e-10")
    return Z


def solve_lead_fields(model: TorsoModel, leads: Optional[Sequence[int]] = None) -> np.ndarray:
    """Lead fields for several electrodes, shape (n_leads, n_v)."""
    leads = model.default_leads() if leads is None else list(leads)
    system = _neumann_system(model)
    return np.array([solve_lead_field(model, l, system=system) for l in leads])


@dataclass
class LeadFieldOperator:
    """Dense ECG operator: lead voltages = ``B @`` nodal heart potentials."""

    B: np.ndarray  # (N, n_heart)
    names: list
    heart_vertices: Optional[np.ndarray] = None  # torso index of each column

    @property
    def n_leads(self) -> int:
        return self.B.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.B.shape[1]


def assemble_ecg_operator(
    model: TorsoModel, Z: np.ndarray, names: Optional[list] = None, degree: int = 2
) -> LeadFieldOperator:
    """Assemble ``B[l, j] = int_heart <G_i grad Z_l, grad psi_j>``.

    Integrals use a degree-2 simplex Gauss rule; for P1 fields the integrand
    is element-wise constant, so the rule is exact.
    """
    mesh = model.mesh
    heart = np.flatnonzero(model.heart_mask())
    if heart.size == 0:
        raise LeadFieldError("no heart elements")
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != mesh.n_vertices:
        raise LeadFieldError("lead fields must be nodal on the torso mesh")
    elems = mesh.elements[heart]
    grads = p1_gradients(mesh)[heart]  # (h, d+1, d)
    vol = mesh.volumes()[heart]
    Gi = model.intracellular[heart]
    _, weights = simplex_quadrature(mesh.dim, degree)
    gradZ = np.einsum("eai,lea->lei", grads, Z[:, elems])  # (N, h, d)
    flux = np.einsum("eij,lej->lei", Gi, gradZ)
    # constant integrand: every quadrature point sees the same value
    local = np.einsum("e,lei,eai->lea", vol * weights.sum(), flux, grads)
    used, cols = np.unique(elems, return_inverse=True)
    cols = cols.reshape(elems.shape)
    B = np.zeros((Z.shape[0], used.size))
    for l in range(Z.shape[0]):
        np.add.at(B[l], cols, local[l])
    if names is None:
        names = [model.electrode_names[i] for i in model.default_leads()][: Z.shape[0]]
    return LeadFieldOperator(B, list(names), used)


def build_operator(model: TorsoModel, leads: Optional[Sequence[int]] = None) -> LeadFieldOperator:
    leads = model.default_leads() if leads is None else list(leads)
    Z = solve_lead_fields(model, leads)
    return assemble_ecg_operator(model, Z, [model.electrode_names[i] for i in leads])


def save_operator(path: str | PathLike, op: LeadFieldOperator) -> None:
    """Binary format: one JSON header line, then N * n_v little-endian float64."""
    header = {"leads": op.n_leads, "vertices": op.n_vertices, "names": list(op.names)}
    if op.heart_vertices is not None:
        header["heart_vertices"] = [int(i) for i in op.heart_vertices]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(op.B, dtype="<f8").tobytes())


def load_operator(path: str | PathLike) -> LeadFieldOperator:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        data = fh.read()
    n, m = int(header["leads"]), int(header["vertices"])
    if len(data) != 8 * n * m:
        raise LeadFieldError(f"{path}: expected {n}x{m} float64 values, got {len(data)} bytes")
    B = np.frombuffer(data, dtype="<f8").reshape(n, m).astype(float)
    hv = header.get("heart_vertices")
    return LeadFieldOperator(B, header.get("names") or [f"L{i}" for i in range(n)],
                             None if hv is None else np.asarray(hv))


def read_lead_fields_csv(path: str | PathLike) -> tuple[list, np.ndarray]:
    """Externally computed nodal lead fields: header of lead names, one row per vertex.

    An optional leading ``vertex_id`` column gives the row order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(x) for x in r] for r in reader if r]
    data = np.array(rows)
    if header[0] == "vertex_id":
        order = data[:, 0].astype(int)
        Z = np.empty((data.shape[0], data.shape[1] - 1))
        Z[order] = data[:, 1:]
        header = header[1:]
    else:
        Z = data
    return header, Z.T.copy()


def torso_to_dict(model: TorsoModel) -> dict:
    out = mesh_to_dict(model.mesh)
    out["conductivity"] = {
        "bulk": pack_symmetric(model.bulk).tolist(),
        "intracellular": pack_symmetric(np.asarray(model.intracellular)).tolist(),
    }
    out["heart_labels"] = [int(x) for x in model.heart_labels]
    out["electrodes"] = model.electrodes.tolist()
    out["electrode_names"] = list(model.electrode_names)
    out["wct"] = list(model.wct)
    return out


def torso_from_dict(data: dict) -> TorsoModel:
    mesh, _ = mesh_from_dict(data)
    cond = data["conductivity"]
    return TorsoModel(
        mesh,
        cond["bulk"],
        check_metric(cond["intracellular"], mesh.n_elements, mesh.dim),
        data["heart_labels"],
        data["electrodes"],
        data["wct"],
        data.get("electrode_names"),
    )


def load_torso(path: str | PathLike) -> TorsoModel:
    with open(path) as fh:
        return torso_from_dict(json.load(fh))


def save_torso(path: str | PathLike, model: TorsoModel) -> None:
    with open(path, "w") as fh:
        json.dump(torso_to_dict(model), fh)
