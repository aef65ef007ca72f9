"""Forward ECG from an activation field, and the trace-matching loss."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from os import PathLike
from typing import Optional, Sequence

import numpy as np

from .leadfield import LeadFieldOperator

PRINTED = "printed"
MIDPOINT = "midpoint"


class EcgError(ValueError):
    pass


@dataclass(frozen=True)
class ApTemplate:
    """Travelling-wave action potential ``U(xi)``.

    ``convention="printed"`` evaluates ``K0 + (K1 - K0)/2 * tanh(2 xi / tau)``
    literally, which swings between ``K0 -+ (K1 - K0)/2``. The default
    ``"midpoint"`` adds one to the tanh so that ``U`` rises from ``K0`` at
    rest to ``K1`` after the upstroke.
    """

    K0: float = -85.0
    K1: float = 30.0
    tau: float = 1.0
    convention: str = MIDPOINT

    def __post_init__(self):
        if not self.K1 > self.K0:
            raise EcgError(f"K1 ({self.K1}) must exceed K0 ({self.K0})")
        if not self.tau > 0:
            raise EcgError(f"tau must be positive, got {self.tau}")
        if self.convention not in (PRINTED, MIDPOINT):
            raise EcgError(f"unknown template convention {self.convention!r}")


def template(xi, tpl: ApTemplate = ApTemplate()):
    """Transmembrane potential (mV) at time ``xi`` (ms) after activation."""
    th = np.tanh(2.0 * np.asarray(xi, dtype=float) / tpl.tau)
    if tpl.convention == MIDPOINT:
        th = 1.0 + th
    return tpl.K0 + 0.5 * (tpl.K1 - tpl.K0) * th


def template_derivative(xi, tpl: ApTemplate = ApTemplate()):
    """``dU/dxi = (K1 - K0)/tau * sech^2(2 xi / tau)``; same for both conventions."""
    e = np.exp(-4.0 * np.abs(np.asarray(xi, dtype=float)) / tpl.tau)
    return (tpl.K1 - tpl.K0) / tpl.tau * 4.0 * e / (1.0 + e) ** 2  # overflow-free sech^2


@dataclass
class EcgTrace:
    """Multi-lead voltages (mV) sampled on a uniform time grid (ms)."""

    times: np.ndarray  # (n_t,)
    values: np.ndarray  # (n_t, N)
    names: Optional[list] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.times.ndim != 1 or self.times.size < 2:
            raise EcgError("an ECG trace needs at least two samples")
        if self.values.shape[0] != self.times.size:
            raise EcgError(
                f"{self.values.shape[0]} samples for a grid of {self.times.size} times"
            )
        steps = np.diff(self.times)
        if steps.min() <= 0 or steps.max() - steps.min() > 1e-9 * max(1.0, abs(steps).max()):
            raise EcgError("time grid must be uniform and increasing")
        if self.names is None:
            self.names = [f"L{i}" for i in range(self.values.shape[1])]
        if len(self.names) != self.values.shape[1]:
            raise EcgError("one name per lead required")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def n_leads(self) -> int:
        return self.values.shape[1]


def time_grid(t_start: float, t_end: float, dt: float = 0.5) -> np.ndarray:
    """Uniform grid from ``t_start`` to ``t_end`` inclusive (end rounded to the grid)."""
    if dt <= 0 or t_end <= t_start:
        raise EcgError("need dt > 0 and t_end > t_start")
    n = int(round((t_end - t_start) / dt)) + 1
    return t_start + dt * np.arange(n)


def _heart_phi(phi, op: LeadFieldOperator) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (op.n_vertices,):
        raise EcgError(f"activation has {phi.size} values, operator expects {op.n_vertices}")
    bad = np.flatnonzero(~np.isfinite(phi))
    if bad.size:
        raise EcgError(f"{bad.size} heart vertices never activated, e.g. {bad[:10].tolist()}")
    return phi


def transmembrane(phi, times, tpl: ApTemplate = ApTemplate()) -> np.ndarray:
    """Nodal potentials ``U(t - phi)``, shape (n_t, n_v)."""
    return template(np.asarray(times, dtype=float)[:, None] - phi[None, :], tpl)


def forward_ecg(phi, op: LeadFieldOperator, tpl: ApTemplate = ApTemplate(),
                times=None) -> EcgTrace:
    """Lead voltages ``V(t) = B U(t - phi)`` on ``times``."""
    phi = _heart_phi(phi, op)
    if times is None:
        times = time_grid(0.0, float(phi.max()) + 10.0 * tpl.tau)
    times = np.asarray(times, dtype=float)
    V = transmembrane(phi, times, tpl) @ op.B.T
    return EcgTrace(times, V, list(op.names))


def trapezoid_weights(times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    w = np.empty_like(times)
    dt = np.diff(times)
    w[0] = dt[0] / 2
    w[-1] = dt[-1] / 2
    w[1:-1] = (dt[:-1] + dt[1:]) / 2
    return w


def _check_same_grid(sim: EcgTrace, target: EcgTrace):
    if sim.values.shape != target.values.shape:
        raise EcgError(
            f"trace shapes differ: {sim.values.shape} vs {target.values.shape}; resample first"
        )
    if not np.allclose(sim.times, target.times, rtol=0, atol=1e-9):
        raise EcgError("time grids differ; resample the target first")


def loss(sim: EcgTrace, target: EcgTrace) -> float:
    """``1/(N |T|) sum_l int (V_l - V^_l)^2 dt`` with the trapezoid rule (mV^2)."""
    _check_same_grid(sim, target)
    r = sim.values - target.values
    w = trapezoid_weights(sim.times)
    span = sim.times[-1] - sim.times[0]
    return float(w @ (r * r).sum(axis=1) / (sim.n_leads * span))


def loss_backward(sim: EcgTrace, target: EcgTrace, op: LeadFieldOperator,
                  tpl: ApTemplate, phi) -> np.ndarray:
    """Per-vertex ``dLoss/dphi``."""
    _check_same_grid(sim, target)
    phi = _heart_phi(phi, op)
    r = sim.values - target.values
    w = trapezoid_weights(sim.times)
    span = sim.times[-1] - sim.times[0]
    scale = 2.0 / (sim.n_leads * span)
    R = (r * (w * scale)[:, None]) @ op.B  # (n_t, n_v)
    dU = template_derivative(sim.times[:, None] - phi[None, :], tpl)
    return -(R * dU).sum(axis=0)


def resample(trace: EcgTrace, times) -> EcgTrace:
    """Linear interpolation of every lead onto ``times`` (held constant outside)."""
    times = np.asarray(times, dtype=float)
    vals = np.column_stack(
        [np.interp(times, trace.times, trace.values[:, l]) for l in range(trace.n_leads)]
    )
    return EcgTrace(times, vals, list(trace.names))


def window(trace: EcgTrace, t0: float, t1: float) -> EcgTrace:
    keep = (trace.times >= t0 - 1e-9) & (trace.times <= t1 + 1e-9)
    return EcgTrace(trace.times[keep], trace.values[keep], list(trace.names))


def write_ecg_csv(path: str | PathLike, trace: EcgTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_ms", *trace.names])
        for t, row in zip(trace.times, trace.values):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


def read_ecg_csv(path: str | PathLike, leads: Optional[Sequence[str]] = None) -> EcgTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(x) for x in r] for r in reader if r])
    if header[0] != "time_ms":
        raise EcgError(f"{path}: first column must be time_ms")
    names = header[1:]
    vals = rows[:, 1:]
    if leads is not None:
        missing = [l for l in leads if l not in names]
        if missing:
            raise EcgError(f"{path}: leads {missing} not found")
        vals = vals[:, [names.index(l) for l in leads]]
        names = list(leads)
    return EcgTrace(rows[:, 0], vals, names)
