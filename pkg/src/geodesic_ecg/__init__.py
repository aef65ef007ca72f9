"""Differentiable anisotropic eikonal solver and lead-field ECG inverse fitting."""
from .adjoint import Gradient, backward, gradcheck, quadratic_loss
from .ecg import ApTemplate, EcgTrace, forward_ecg, loss, loss_backward, resample, template
from .eikonal import ActivationField, SiteSet, SolverTape, residual, seed, solve
from .estimators import ActivationSiteEstimator, EikonalSolver
from .inverse import AdamState, FitConfig, ForwardModel, RunReport, adam_step, fit, init_sites
from .leadfield import (
    LeadFieldOperator,
    TorsoModel,
    assemble_ecg_operator,
    build_operator,
    solve_lead_field,
)
from .mesh import FacePrecomp, Mesh, MeshError, locate_point, precompute_faces
from .simplex import project_simplex, solve_local, solve_local_exact

__version__ = "0.1.0"

__all__ = [
    "ActivationField",
    "ActivationSiteEstimator",
    "AdamState",
    "ApTemplate",
    "EcgTrace",
    "EikonalSolver",
    "FacePrecomp",
    "FitConfig",
    "ForwardModel",
    "Gradient",
    "LeadFieldOperator",
    "Mesh",
    "MeshError",
    "RunReport",
    "SiteSet",
    "SolverTape",
    "TorsoModel",
    "adam_step",
    "assemble_ecg_operator",
    "backward",
    "build_operator",
    "fit",
    "forward_ecg",
    "gradcheck",
    "init_sites",
    "locate_point",
    "loss",
    "loss_backward",
    "precompute_faces",
    "project_simplex",
    "quadratic_loss",
    "resample",
    "residual",
    "seed",
    "solve",
    "solve_lead_field",
    "solve_local",
    "solve_local_exact",
    "template",
]
