"""scikit-learn style wrappers around the solver and the inverse fit."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .adjoint import backward
from .ecg import ApTemplate, EcgTrace, forward_ecg
from .eikonal import DEFAULT_EPSILON, VOLUME, solve
from .inverse import FitConfig, ForwardModel, fit, init_sites
from .mesh import check_metric, precompute_faces
from .validation import check_mesh, check_positive, check_sites, check_times_traces


class EikonalSolver(BaseEstimator, TransformerMixin):
    """Activation times from sites on a fixed mesh.

    ``fit(mesh)`` validates the metric and precomputes the local problems;
    ``transform(sites)`` returns the per-vertex activation times (ms).
    """

    def __init__(self, metric=None, epsilon=DEFAULT_EPSILON, n_f=None,
                 local_solver="fista", n_jobs=1):
        self.metric = metric
        self.epsilon = epsilon
        self.n_f = n_f
        self.local_solver = local_solver
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        mesh = check_mesh(X)
        check_positive(self.epsilon, "epsilon")
        metric = np.eye(mesh.dim) if self.metric is None else self.metric
        self.mesh_ = mesh
        self.metric_ = check_metric(metric, mesh.n_elements, mesh.dim)
        self.faces_ = precompute_faces(mesh, self.metric_)
        return self

    def transform(self, X):
        check_is_fitted(self, "faces_")
        sites = check_sites(X, self.mesh_.dim)
        self.field_, self.tape_ = solve(
            self.mesh_, self.metric_, self.faces_, sites, self.epsilon,
            n_f=self.n_f, local_solver=self.local_solver, n_jobs=self.n_jobs,
        )
        self.sites_ = sites
        return self.field_.phi

    def gradient(self, cotangent):
        """Pull ``dLoss/dphi`` of the last transform back to the sites."""
        check_is_fitted(self, "tape_")
        return backward(self.mesh_, self.metric_, self.field_, self.tape_, cotangent,
                        len(self.sites_))


class ActivationSiteEstimator(BaseEstimator, RegressorMixin):
    """Fit activation sites so that simulated ECGs match measured ones.

    ``fit(times, traces)`` runs the ADAM inverse fit; ``predict(times)``
    simulates the ECG of the fitted sites. ``init`` may be a SiteSet or an
    array of rows ``(x_1..x_d, t)``; otherwise ``n_sites`` random sites are
    drawn with ``random_state``.
    """

    def __init__(self, mesh=None, metric=None, operator=None, init=None, n_sites=8,
                 mode=VOLUME, t_init=0.0, epochs=400, lr=0.5, beta1=0.9, beta2=0.999,
                 epsilon=DEFAULT_EPSILON, n_f=None, local_solver="fista",
                 K0=-85.0, K1=30.0, tau=1.0, convention="midpoint",
                 early_stop=False, random_state=0):
        self.mesh = mesh
        self.metric = metric
        self.operator = operator
        self.init = init
        self.n_sites = n_sites
        self.mode = mode
        self.t_init = t_init
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.n_f = n_f
        self.local_solver = local_solver
        self.K0 = K0
        self.K1 = K1
        self.tau = tau
        self.convention = convention
        self.early_stop = early_stop
        self.random_state = random_state

    def _template(self):
        return ApTemplate(self.K0, self.K1, self.tau, self.convention)

    def _config(self):
        return FitConfig(epochs=self.epochs, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                         epsilon_ms=self.epsilon, n_f=self.n_f,
                         local_solver=self.local_solver, early_stop=self.early_stop)

    def fit(self, X, y):
        mesh = check_mesh(self.mesh)
        if self.operator is None:
            raise ValueError("a lead-field operator is required")
        check_positive(self.epochs, "epochs", integer=True)
        check_positive(self.lr, "lr")
        times, traces = check_times_traces(X, y)
        metric = np.eye(mesh.dim) if self.metric is None else self.metric
        self.model_ = ForwardModel(mesh, metric, self.operator, self._template())
        if self.init is None:
            check_positive(self.n_sites, "n_sites", integer=True)
            init = init_sites(mesh, self.mode, self.n_sites, self.t_init, self.random_state)
        else:
            init = check_sites(self.init, mesh.dim, self.mode)
        target = EcgTrace(times, traces, list(self.operator.names))
        self.sites_, self.report_ = fit(self.model_, target, init, self._config())
        field_, tape = solve(mesh, self.model_.metric, self.model_.faces, self.sites_,
                             self.epsilon, n_f=self.n_f, local_solver=self.local_solver)
        self.activation_ = field_.phi
        self.active_ = tape.active_sites(len(self.sites_))
        return self

    def predict(self, X):
        check_is_fitted(self, "activation_")
        times = check_times_traces(X)
        return forward_ecg(self.activation_, self.operator, self._template(), times).values
