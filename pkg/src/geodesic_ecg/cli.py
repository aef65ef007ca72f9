"""Command-line interface: ``geodesic-ecg <command> [flags]``.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ecg as ecg_mod
from .adjoint import gradcheck, quadratic_loss
from .eikonal import (
    DEFAULT_EPSILON,
    read_activation_csv,
    read_sites_csv,
    solve,
    write_activation_csv,
    write_diagnostics,
    write_sites_csv,
)
from .inverse import (
    FitError,
    ForwardModel,
    activation_rmse,
    config_from_dict,
    fit,
    init_sites,
    load_run_config,
    template_from_dict,
)
from .leadfield import build_operator, load_operator, load_torso, save_operator, save_torso
from .mesh import MeshError, load_mesh, load_metric, precompute_faces, save_mesh
from .synth import SynthConfig, generate

logger = logging.getLogger("geodesic_ecg")


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _out(path) -> Path:
    p = Path(path)
    if p.parent and not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _load_heart(mesh_path, metric_path=None):
    mesh, metric = load_mesh(_existing(mesh_path))
    if metric_path is not None:
        metric = load_metric(_existing(metric_path), mesh)
    if metric is None:
        raise UsageError(f"{mesh_path} has no metric; pass --metric")
    return mesh, metric


def _template(args):
    return ecg_mod.ApTemplate(args.K0, args.K1, args.tau, args.convention)


def _plot_setup():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "geodesic-ecg"
    return plt


def plot_ecg(path, traces: dict):
    plt = _plot_setup()
    first = next(iter(traces.values()))
    n = first.n_leads
    fig, axes = plt.subplots(n, 1, figsize=(6, 1.3 * n), sharex=True, squeeze=False)
    for label, tr in traces.items():
        for l in range(n):
            axes[l, 0].plot(tr.times, tr.values[:, l], lw=1, label=label)
            axes[l, 0].set_ylabel(tr.names[l])
    axes[-1, 0].set_xlabel("time (ms)")
    axes[0, 0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_loss(path, losses):
    plt = _plot_setup()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(np.arange(len(losses)), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (mV$^2$)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_forward(args) -> int:
    mesh, metric = _load_heart(args.mesh, args.metric)
    sites = read_sites_csv(_existing(args.sites))
    out = _out(args.out)
    faces = precompute_faces(mesh, metric)
    fld, _ = solve(mesh, metric, faces, sites, args.epsilon, args.max_iters, n_f=args.n_f,
                   local_solver=args.local_solver, n_jobs=args.threads)
    write_activation_csv(out, fld.phi)
    logger.info("wrote %s", out)
    if args.diagnostics:
        write_diagnostics(_out(args.diagnostics), fld)
        logger.info("wrote %s", args.diagnostics)
    if not fld.converged:
        logger.error("solver did not converge (max decrease %.3g ms)", fld.max_decrease)
        return 2
    return 0


def cmd_ecg(args) -> int:
    phi = read_activation_csv(_existing(args.activation))
    op = load_operator(_existing(args.leadfield))
    out = _out(args.out)
    times = ecg_mod.time_grid(args.window[0], args.window[1], args.dt)
    try:
        trace = ecg_mod.forward_ecg(phi, op, _template(args), times)
    except ecg_mod.EcgError as exc:
        raise NumericalError(str(exc)) from exc
    ecg_mod.write_ecg_csv(out, trace)
    logger.info("wrote %s", out)
    if args.plot:
        plot_ecg(_out(args.plot), {"simulated": trace})
    return 0


def cmd_leadfield(args) -> int:
    torso = load_torso(_existing(args.torso))
    out = _out(args.out)
    for name, dist in zip(torso.electrode_names, torso.snap_distance):
        logger.info("electrode %s snapped by %.3g mm", name, dist)
    op = build_operator(torso, args.leads)
    save_operator(out, op)
    logger.info("wrote %s (%d leads x %d heart vertices)", out, op.n_leads, op.n_vertices)
    return 0


def cmd_synth2d(args) -> int:
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(
        h=args.h, perturbation=args.perturbation, target_refine=args.refine,
        n_true=args.n_true, n_init=args.n_init, t_init=args.t_init, seed=args.seed,
        dt=args.dt, template=_template(args),
    )
    case = generate(cfg)
    m = case.model
    save_mesh(outdir / "heart_mesh.json", m.heart, m.metric)
    save_torso(outdir / "torso.json", m.torso)
    save_operator(outdir / "leadfield.bin", m.operator)
    write_sites_csv(outdir / "sites_true.csv", case.true_sites)
    write_sites_csv(outdir / "sites_init.csv", case.init_sites)
    ecg_mod.write_ecg_csv(outdir / "target_ecg.csv", case.target)
    write_activation_csv(outdir / "activation_true.csv", case.true_phi)
    run = {
        "mesh": "heart_mesh.json",
        "metric": None,
        "leadfield": "leadfield.bin",
        "target_ecg": "target_ecg.csv",
        "truth": "activation_true.csv",
        "window": [float(case.target.times[0]), float(case.target.times[-1])],
        "dt": cfg.dt,
        "sites": {"K": cfg.n_init, "mode": "volume", "t_init": cfg.t_init, "seed": args.seed,
                  "init": "sites_init.csv"},
        "adam": {"lr": 0.5, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8},
        "epochs": 400,
        "eikonal": {"epsilon_ms": DEFAULT_EPSILON, "n_f": None, "local_solver": "fista"},
        "template": {"K0": cfg.template.K0, "K1": cfg.template.K1, "tau": cfg.template.tau,
                     "convention": cfg.template.convention},
        "synthesis": {"h": cfg.h, "perturbation": cfg.perturbation, "refine": cfg.target_refine,
                      "conductivity_scales": case.scales,
                      "heart_vertices": m.heart.n_vertices,
                      "target_heart_vertices": case.target_model.heart.n_vertices},
    }
    with open(outdir / "run_config.json", "w") as fh:
        json.dump(run, fh, indent=1, sort_keys=True)
    logger.info("wrote synthetic case to %s (%d heart vertices, %d leads)", outdir,
                m.heart.n_vertices, m.operator.n_leads)
    if args.plot:
        plot_ecg(outdir / "target_ecg.svg", {"target": case.target})
    return 0


def cmd_gradcheck(args) -> int:
    mesh, metric = _load_heart(args.mesh, args.metric)
    sites = read_sites_csv(_existing(args.sites))
    faces = precompute_faces(mesh, metric)
    kw = dict(n_f=args.n_f, local_solver=args.local_solver, n_jobs=args.threads)
    if args.reference:
        ref = read_activation_csv(_existing(args.reference))
    else:
        base, _ = solve(mesh, metric, faces, sites, **kw)
        rng = np.random.default_rng(args.seed)
        ref = base.phi + rng.uniform(-1.0, 1.0, mesh.n_vertices)
    rep = gradcheck(mesh, metric, faces, sites, quadratic_loss(ref), args.step_x, args.step_t, **kw)
    payload = {k: v for k, v in rep.items() if k != "entries"}
    payload["entries"] = [e.__dict__ for e in rep["entries"]]
    payload["threshold"] = args.threshold
    if args.out:
        with open(_out(args.out), "w") as fh:
            json.dump(payload, fh, indent=1)
    print(json.dumps({k: payload[k] for k in ("max_rel_error", "max_rel_error_t",
                                              "max_rel_error_x", "switched")}))
    return 0 if rep["max_rel_error"] <= args.threshold else 2


def _resolve(base: Path, p):
    return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))


def cmd_fit(args) -> int:
    cfg_path = _existing(args.config)
    cfg = load_run_config(cfg_path)
    base = cfg_path.parent
    mesh, metric = _load_heart(_resolve(base, cfg["mesh"]), _resolve(base, cfg.get("metric")))
    op = load_operator(_existing(_resolve(base, cfg["leadfield"])))
    tpl = template_from_dict(cfg)
    target = ecg_mod.read_ecg_csv(_existing(_resolve(base, cfg["target_ecg"])), op.names)
    if "window" in cfg:
        target = ecg_mod.window(target, *cfg["window"])
    if "dt" in cfg and abs(cfg["dt"] - target.dt) > 1e-12:
        grid = ecg_mod.time_grid(target.times[0], target.times[-1], cfg["dt"])
        target = ecg_mod.resample(target, grid)
    sc = cfg.get("sites", {})
    if sc.get("init"):
        init = read_sites_csv(_existing(_resolve(base, sc["init"])))
    else:
        init = init_sites(mesh, sc.get("mode", "volume"), int(sc.get("K", 8)),
                          float(sc.get("t_init", 0.0)), int(sc.get("seed", args.seed)))
    conf = config_from_dict(cfg)
    conf = replace(conf, n_jobs=args.threads, record_trajectory=args.trajectory)
    if args.epochs is not None:
        conf = replace(conf, epochs=args.epochs)
    if args.lr is not None:
        conf = replace(conf, lr=args.lr)
    if args.local_solver is not None:
        conf = replace(conf, local_solver=args.local_solver)
    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    model = ForwardModel(mesh, metric, op, tpl)
    try:
        sites, report = fit(model, target, init, conf)
    except FitError as exc:
        logger.error("%s %s", exc, exc.diagnostics)
        return 2
    fld, tape = solve(mesh, model.metric, model.faces, sites, conf.epsilon_ms, n_f=conf.n_f,
                      local_solver=conf.local_solver)
    active = tape.active_sites(len(sites))
    extra = {}
    if cfg.get("truth"):
        truth = read_activation_csv(_existing(_resolve(base, cfg["truth"])))
        extra["activation_rmse_ms"] = activation_rmse(fld.phi, truth)
    data = report.to_dict(timing=args.timing)
    data.update(extra)
    with open(outdir / "report.json", "w") as fh:
        json.dump(data, fh, indent=1)
    write_sites_csv(outdir / "sites_final.csv", sites, active)
    write_activation_csv(outdir / "activation_final.csv", fld.phi)
    sim = ecg_mod.forward_ecg(fld.phi, op, tpl, target.times)
    ecg_mod.write_ecg_csv(outdir / "ecg_final.csv", sim)
    logger.info("wrote fit results to %s (final loss %.4g%s)", outdir, report.final_loss,
                "".join(f", {k} {v:.3g}" for k, v in extra.items()))
    if args.plot:
        plot_loss(outdir / "loss.svg", report.losses)
        plot_ecg(outdir / "ecg.svg", {"target": target, "fitted": sim})
    return 0


def _template_flags(p):
    p.add_argument("--K0", type=float, default=-85.0, help="resting potential (mV)")
    p.add_argument("--K1", type=float, default=30.0, help="plateau potential (mV)")
    p.add_argument("--tau", type=float, default=1.0, help="upstroke time constant (ms)")
    p.add_argument("--convention", choices=["midpoint", "printed"], default="midpoint",
                   help="template form: midpoint rises K0->K1, printed is the literal tanh form")


def _solver_flags(p, default_solver="fista"):
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                   help="convergence threshold on the per-sweep decrease (ms)")
    p.add_argument("--max-iters", type=int, default=None,
                   help="sweep limit (count; default: number of vertices)")
    p.add_argument("--n-f", type=int, default=None,
                   help="FISTA iterations per local problem (count; default from the bound)")
    p.add_argument("--local-solver", choices=["fista", "exact"], default=default_solver,
                   help="local problem solver (unitless choice)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geodesic-ecg", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for sweeps and BLAS (count; 1 is the reference)")
    parser.add_argument("--seed", type=int, default=42, help="seed for every random draw (integer)")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forward", help="activation times from sites")
    p.add_argument("--mesh", required=True, help="heart mesh JSON (coordinates in mm)")
    p.add_argument("--metric", help="metric JSON, squared slowness (ms/mm)^2 per element")
    p.add_argument("--sites", required=True, help="sites CSV: x,y[,z] in mm, t in ms, mode")
    p.add_argument("--out", required=True, help="output activation CSV (vertex_id, phi_ms)")
    p.add_argument("--diagnostics", help="optional convergence JSON sidecar")
    _solver_flags(p)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("ecg", help="lead voltages from an activation map")
    p.add_argument("--activation", required=True, help="activation CSV (vertex_id, phi_ms)")
    p.add_argument("--leadfield", required=True, help="lead-field operator .bin")
    p.add_argument("--window", type=float, nargs=2, required=True, metavar=("T0", "T1"),
                   help="time window (ms)")
    p.add_argument("--dt", type=float, default=0.5, help="sampling step (ms)")
    p.add_argument("--out", required=True, help="output ECG CSV (time_ms, one column per lead in mV)")
    p.add_argument("--plot", help="optional SVG of the traces")
    _template_flags(p)
    p.set_defaults(func=cmd_ecg)

    p = sub.add_parser("leadfield", help="lead fields and the ECG operator of a torso model")
    p.add_argument("--torso", required=True, help="torso model JSON (mm, S/m)")
    p.add_argument("--leads", type=int, nargs="*", default=None,
                   help="electrode indices to use as leads (default: all but the last WCT one)")
    p.add_argument("--out", required=True, help="output operator .bin")
    p.set_defaults(func=cmd_leadfield)

    p = sub.add_parser("synth2d", help="synthetic 2-D heart-torso twin case")
    p.add_argument("--out-dir", required=True, help="directory for all generated files")
    p.add_argument("--h", type=float, default=0.9, help="mesh spacing across the ventricle wall (mm)")
    p.add_argument("--perturbation", type=float, default=0.2,
                   help="relative conductivity perturbation of the target model (fraction)")
    p.add_argument("--refine", type=int, default=2,
                   help="target mesh refinement factor (count; 1 = same mesh)")
    p.add_argument("--n-true", type=int, default=4, help="ground-truth sites (count)")
    p.add_argument("--n-init", type=int, default=8, help="initial sites for the fit (count)")
    p.add_argument("--t-init", type=float, default=0.0, help="initial site onset (ms)")
    p.add_argument("--dt", type=float, default=0.5, help="ECG sampling step (ms)")
    p.add_argument("--plot", action="store_true", help="also write target_ecg.svg")
    _template_flags(p)
    p.set_defaults(func=cmd_synth2d)

    p = sub.add_parser("gradcheck", help="adjoint gradients against finite differences")
    p.add_argument("--mesh", required=True, help="heart mesh JSON (mm)")
    p.add_argument("--metric", help="metric JSON, squared slowness (ms/mm)^2")
    p.add_argument("--sites", required=True, help="sites CSV (mm, ms)")
    p.add_argument("--reference", help="activation CSV for the quadratic loss (ms); "
                                       "default: solution plus seeded U[-1,1] ms noise")
    p.add_argument("--step-x", type=float, default=1e-5, help="position step (mm)")
    p.add_argument("--step-t", type=float, default=1e-5, help="timing step (ms)")
    p.add_argument("--threshold", type=float, default=5e-2,
                   help="largest acceptable relative error (unitless)")
    p.add_argument("--out", help="optional JSON report")
    _solver_flags(p, default_solver="exact")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fit", help="fit activation sites to a target ECG")
    p.add_argument("--config", required=True, help="run config JSON (paths relative to it)")
    p.add_argument("--out-dir", required=True, help="directory for report and results")
    p.add_argument("--epochs", type=int, help="override the epoch count (count)")
    p.add_argument("--lr", type=float, help="override the ADAM learning rate (mm or ms per step)")
    p.add_argument("--local-solver", choices=["fista", "exact"], help="override the local solver")
    p.add_argument("--trajectory", action="store_true", help="record site parameters per epoch")
    p.add_argument("--timing", action="store_true",
                   help="include wall-clock seconds in the report (breaks byte-identity)")
    p.add_argument("--plot", action="store_true", help="write loss.svg and ecg.svg")
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose + 1, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except (UsageError, FileNotFoundError, MeshError, json.JSONDecodeError, KeyError) as exc:
        logger.error("%s", exc)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
