"""Command-line experiment runner.

Subcommands: simulate, solve-dd, solve-onestep, verify, demo.  Outputs are
deterministic for a fixed config/seed/thread count; wall-clock timings go
to the log, never into result files.  Exit codes: 0 success, 1 runtime or
config error, 2 usage error.  Set NLKACZ_LOG to error/warn/info/debug.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__, conditions, config as cfgmod, phantom, projector, recon, spectral
from .core import SelectionStrategy, StopRule
from .errors import ConfigError, DominanceViolated, Error, HypothesisViolated
from .recon import MeasuredData

logger = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
               "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("NLKACZ_LOG", "warn").lower()
    logging.basicConfig(
        level=_LOG_LEVELS.get(name, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _add_common(sp):
    sp.add_argument("--config", help="TOML config (or manifest JSON) path")
    sp.add_argument("--out", help="output directory (default from config)")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.add_argument("--threads", type=int, default=1, help="worker count for per-ray solves")
    sp.add_argument("--json", action="store_true", help="machine-readable stdout")


def build_parser():
    p = argparse.ArgumentParser(
        prog="nlkacz",
        description="Row-action solvers for dual-energy CT experiments",
    )
    p.add_argument("--version", action="version", version=f"nlkacz {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("simulate", cmd_simulate, "rasterize the phantom and write noiseless data"),
        ("solve-dd", lambda a: cmd_solve(a, "dd"), "two-step per-ray reconstruction"),
        ("solve-onestep", lambda a: cmd_solve(a, "onestep"), "one-step reconstruction"),
        ("verify", cmd_verify, "check the convergence hypotheses of the model"),
        ("demo", cmd_demo, "two-circles system under all four strategies"),
    ):
        sp = sub.add_parser(name, help=help_)
        _add_common(sp)
        if name == "verify":
            sp.add_argument(
                "--check-onestep-rank",
                action="store_true",
                help="dense SVD of the full one-step Jacobian (slow; needs simulate outputs)",
            )
        if name.startswith("solve-"):
            sp.add_argument(
                "--vmi", type=float, action="append", default=None, metavar="KEV",
                help="also write a monochromatic image at this energy (repeatable)",
            )
        sp.set_defaults(func=fn)
    return p


def _resolve_config(args, prefer_manifest=False):
    if args.config:
        cfg = cfgmod.load_any(args.config)
    elif prefer_manifest and args.out and os.path.exists(os.path.join(args.out, "manifest.json")):
        cfg = cfgmod.from_manifest(os.path.join(args.out, "manifest.json"))
    else:
        cfg = cfgmod.ExperimentConfig().validate()
    if args.out:
        cfg.output_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.preset == "paper":
        msg = ("paper preset selected: expect hours of runtime and gigabytes "
               "of traces at full scale")
        logger.warning(msg)
        print(f"warning: {msg}", file=sys.stderr)
    return cfg


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _write_sinogram_csv(path, values):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("ray,g\n")
        for i, v in enumerate(values):
            fh.write(f"{i},{float(v)!r}\n")


def _read_sinogram_csv(path):
    if not os.path.exists(path):
        raise ConfigError(f"missing data file: {path} (run simulate first)")
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    return data[:, 1].astype(float)


def cmd_simulate(args):
    cfg = _resolve_config(args)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    grid = cfgmod.build_grid(cfg)
    spec = cfgmod.build_phantom_spec(cfg)
    model = cfgmod.build_model(cfg)
    if spec.n_bases != model.d_bases:
        raise ConfigError(
            f"phantom has {spec.n_bases} bases but the model decomposes into {model.d_bases}"
        )
    truth = phantom.rasterize(spec, grid, supersample=cfg.supersample)
    phantom.save_basis_images(truth, os.path.join(out, "phantom"), pgm=True)

    geoms = cfgmod.build_geometries(cfg)
    projections = []
    for p, geom in enumerate(geoms, start=1):
        proj = projector.build_projection(grid, geom)
        projector.save_projection(os.path.join(out, f"projection_s{p}.sprj"), proj)
        projections.append(proj)

    data = recon.simulate_data(model, projections, truth)
    for p, sino in enumerate(data.sinograms, start=1):
        _write_sinogram_csv(os.path.join(out, f"data_s{p}.csv"), sino)

    manifest = cfgmod.to_manifest(cfg, "simulate")
    cfgmod.write_manifest(manifest, os.path.join(out, "manifest.json"))

    summary = {
        "output_dir": out,
        "n_spectra": model.n_spectra,
        "n_rays_per_spectrum": [p.n_rays for p in projections],
        "grid": [grid.nx, grid.ny],
        "seed": cfg.seed,
    }
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(
            f"simulated {model.n_spectra} spectra x {projections[0].n_rays} rays "
            f"on a {grid.nx}x{grid.ny} grid -> {out}"
        )
    return 0


def _load_simulation(cfg):
    out = cfg.output_dir
    base = os.path.join(out, "phantom")
    if not os.path.exists(base + ".json"):
        raise ConfigError(f"missing phantom images: {base}.json (run simulate first)")
    truth = phantom.load_basis_images(base)
    projections = []
    sinos = []
    for p in range(1, cfg.n_spectra + 1):
        ppath = os.path.join(out, f"projection_s{p}.sprj")
        if not os.path.exists(ppath):
            raise ConfigError(f"missing projection file: {ppath} (run simulate first)")
        projections.append(projector.load_projection(ppath))
        sinos.append(_read_sinogram_csv(os.path.join(out, f"data_s{p}.csv")))
    return truth, projections, MeasuredData(sinograms=tuple(sinos))


def _save_recon_images(images, nx, ny, path_base):
    with open(path_base + ".raw", "wb") as fh:
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())
    sidecar = {"width": nx, "height": ny, "dtype": "f64le", "basis_count": int(images.shape[0])}
    with open(path_base + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_vmi(images, model, energies_kev, nx, ny, out_dir):
    """Monochromatic images: mu(E) = sum_d b_d(E) f_d, b interpolated in energy."""
    for kev in energies_kev or ():
        coeff = np.array(
            [np.interp(kev, model.energies, model.b_matrix[d]) for d in range(model.d_bases)]
        )
        vmi = (coeff[:, None] * images).sum(axis=0)
        _save_recon_images(vmi[None, :], nx, ny, os.path.join(out_dir, f"vmi_{kev:g}kev"))


def _write_summary(path, report, extra=None):
    doc = report.summary_dict()
    doc.update(extra or {})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    logger.info("wall time %.2fs (not recorded in outputs)", report.wall_time_s)


def cmd_solve(args, mode):
    cfg = _resolve_config(args, prefer_manifest=True)
    model = cfgmod.build_model(cfg)
    truth, projections, data = _load_simulation(cfg)
    grid = cfgmod.build_grid(cfg)
    strategy = cfgmod.build_strategy(cfg)
    sub = os.path.join(cfg.output_dir, f"solve_{mode}")
    os.makedirs(sub, exist_ok=True)

    if mode == "dd":
        if len(set(cfg.angle_offsets)) != 1:
            raise ConfigError(
                "solve-dd needs a shared geometry: geometry.angle_offsets must all agree"
            )
        result = recon.ddd_pipeline(
            model, projections[0], data, strategy, cfgmod.dd_stop(cfg),
            truth=truth, threads=max(1, args.threads),
            step2_stop=cfgmod.step2_stop(cfg),
        )
        report = result.report
        if report.re_iteration is not None and report.re_iteration.shape[0] >= 20:
            try:
                report.rate = recon.rate_fit(report.re_iteration, burn_in=10)
            except Error:
                pass
        report.write_iteration_csv(os.path.join(sub, "iterations.csv"))
        for d in range(result.basis_sinograms.shape[0]):
            _write_sinogram_csv(
                os.path.join(sub, f"sinogram_d{d}.csv"), result.basis_sinograms[d]
            )
        _save_recon_images(result.images, grid.nx, grid.ny, os.path.join(sub, "recon"))
        _write_summary(os.path.join(sub, "summary.json"), report,
                       extra={"seed": cfg.seed, "threads": max(1, args.threads)})
        out_line = {
            "final_re_z": report.final_re_z,
            "final_re_f": report.final_re_f,
            "epochs_used": report.epochs_used,
        }
    else:
        g_norm = float(np.sqrt(sum(float(s @ s) for s in data.sinograms)))
        stop = cfgmod.onestep_stop(cfg, data_norm=g_norm)
        images, report = recon.solve_onestep(
            model, projections, data, np.zeros((model.d_bases, grid.n_pixels)),
            strategy, stop, truth=truth,
        )
        if report.re_iteration is not None and report.re_iteration.shape[0] >= 20:
            try:
                report.rate = recon.rate_fit(report.re_iteration, burn_in=10)
            except Error:
                pass
        report.write_iteration_csv(os.path.join(sub, "iterations.csv"))
        report.write_epoch_csv(os.path.join(sub, "epochs.csv"))
        _save_recon_images(images, grid.nx, grid.ny, os.path.join(sub, "recon"))
        _write_summary(os.path.join(sub, "summary.json"), report,
                       extra={"seed": cfg.seed, "threads": max(1, args.threads)})
        out_line = {
            "final_re_f": report.final_re_f,
            "final_re_g": report.final_re_g,
            "epochs_used": report.epochs_used,
        }

    if args.json:
        print(json.dumps(out_line, sort_keys=True))
    else:
        parts = ", ".join(f"{k}={v}" for k, v in out_line.items())
        print(f"solve-{mode}: {parts} -> {sub}")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _sample_z_points(cfg, model, rng, n=64):
    """Line-integral points: from simulated truth when present, else a box."""
    out = cfg.output_dir
    base = os.path.join(out, "phantom")
    ray_norms = None
    if os.path.exists(base + ".json") and os.path.exists(os.path.join(out, "projection_s1.sprj")):
        truth = phantom.load_basis_images(base)
        proj = projector.load_projection(os.path.join(out, "projection_s1.sprj"))
        Z = np.stack(
            [proj.matrix @ truth.data[d] for d in range(model.d_bases)], axis=1
        )
        keep = np.nonzero(np.abs(Z).sum(axis=1) > 0)[0]
        if keep.size:
            pick = keep[rng.integers(0, keep.size, size=min(n, keep.size))]
            norms2 = proj.row_norms_sq()[pick]
            return Z[pick], np.sqrt(norms2)
    grid = cfgmod.build_grid(cfg)
    z_max = grid.diagonal
    pts = rng.random((n, model.d_bases)) * z_max
    return pts, ray_norms


def _h_jacobian(model, z):
    """Rows -(B w^{[p]})^T stacked into the (P, D) Jacobian at z."""
    return np.stack(
        [spectral.h_gradient(model, p, z) for p in range(1, model.n_spectra + 1)]
    )


def build_condition_report(cfg, model, check_onestep_rank=False):
    """Assemble the hypothesis report for a spectral model."""
    rng = np.random.default_rng(cfg.seed)
    rep = conditions.ConditionReport()

    gb = spectral.gamma_b_upper(model.b_matrix, mc_pairs=5000, seed=cfg.seed)
    rep.gamma_b_upper = gb.upper
    rep.gamma_hat = gb.mc_lower
    try:
        rep.gamma_b_tilde = spectral.gamma_b_tilde(model.b_matrix)
    except DominanceViolated as exc:
        rep.notes.append(f"closed-form gamma_B unavailable: {exc}")
    rep.set_verdict(
        "rgdc_global",
        conditions.VERDICT_HOLDS if gb.upper < 1.0 else conditions.VERDICT_FAILS,
        f"certified gamma_B upper bound {gb.upper:.6g} (sampled lower bound {gb.mc_lower:.6g})",
    )

    ev = conditions.det_sign_evidence(model.spectra, model.b_matrix)
    rep.det_sign = ev["holds"]
    rep.det_sign_witness = None if ev["holds"] else ev

    Z, ray_norms = _sample_z_points(cfg, model, rng)
    kappas = []
    for z in Z:
        try:
            kappas.append(conditions.kappa_f(_h_jacobian(model, z)))
        except Error:
            continue
    rep.kappa_samples = kappas

    theta = 1.0 / np.sqrt(model.n_spectra)
    if not kappas:
        rep.set_verdict("rate_hypothesis", conditions.VERDICT_NOT_CHECKED,
                        "no usable condition-number samples")
    elif gb.upper >= 1.0:
        rep.set_verdict(
            "rate_hypothesis", conditions.VERDICT_FAILS,
            f"discrepancy constant {gb.upper:.6g} >= 1: the condition itself fails",
        )
    else:
        kappa_worst = max(kappas)
        try:
            rb = conditions.rate_bound(theta, cfg.tau, gb.upper, kappa_worst)
            rep.rate_rho = rb.rho
            rep.rate_gamma_kappa = rb.gamma_kappa
            rep.rate_hypothesis_bound = rb.hypothesis_bound
            rep.set_verdict("rate_hypothesis", conditions.VERDICT_HOLDS,
                            f"gamma*kappa = {rb.gamma_kappa:.6g} <= {rb.hypothesis_bound:.6g}")
        except HypothesisViolated as exc:
            rep.rate_gamma_kappa = exc.gamma_kappa
            rep.rate_hypothesis_bound = exc.bound
            rep.set_verdict("rate_hypothesis", conditions.VERDICT_FAILS, str(exc))

    # curvature of the ray-coupled equations: ||a|| * curvature of the
    # D-dimensional mapping (Kronecker structure of gradient and Hessian)
    curv = []
    for i, z in enumerate(Z[: min(100, len(Z))]):
        a_norm = 1.0 if ray_norms is None else float(ray_norms[i])
        if a_norm == 0.0:
            continue
        g = spectral.h_gradient(model, 1, z)
        h = spectral.h_hessian(model, 1, z)
        curv.append(a_norm * conditions.mean_curvature(g, h))
    rep.curvature_samples = curv
    if curv:
        frac = float(np.mean(np.asarray(curv) > 0.0))
        rep.set_verdict(
            "tcc_failure",
            conditions.VERDICT_HOLDS if frac > 0 else conditions.VERDICT_NOT_CHECKED,
            f"{frac:.0%} of curvature samples positive (positive certifies failure)",
        )

    dd_ok = ev["holds"] and rep.verdicts.get("rate_hypothesis", {}).get("status") == "holds"
    rep.set_verdict(
        "dd_pipeline",
        conditions.VERDICT_HOLDS if dd_ok else conditions.VERDICT_FAILS,
        "needs the determinant-sign condition and the rate hypothesis",
    )

    if check_onestep_rank:
        try:
            truth, projections, _ = _load_simulation(cfg)
            mats = []
            for p, proj in enumerate(projections, start=1):
                Zs = np.stack(
                    [proj.matrix @ truth.data[d] for d in range(model.d_bases)], axis=1
                )
                A = proj.matrix.toarray()
                rows = np.stack([_h_jacobian(model, z)[p - 1] for z in Zs])
                # gradient of each equation is (grad h) (x) a
                mats.append(
                    np.concatenate(
                        [rows[:, [d]] * A for d in range(model.d_bases)], axis=1
                    )
                )
            big = np.concatenate(mats, axis=0)
            kappa_big = conditions.kappa_f(big, size_cap=big.size + 1)
            rep.kappa_samples.append(kappa_big)
            rep.set_verdict("onestep_pipeline", conditions.VERDICT_HOLDS,
                            f"stacked Jacobian has full column rank (kappa_F {kappa_big:.6g})")
        except Error as exc:
            rep.set_verdict("onestep_pipeline", conditions.VERDICT_FAILS, str(exc))
    else:
        rep.set_verdict(
            "onestep_pipeline", conditions.VERDICT_NOT_CHECKED,
            "full-rank check of the stacked Jacobian skipped (pass --check-onestep-rank)",
        )
    return rep


def cmd_verify(args):
    cfg = _resolve_config(args, prefer_manifest=True)
    model = cfgmod.build_model(cfg)
    rep = build_condition_report(cfg, model, check_onestep_rank=args.check_onestep_rank)
    os.makedirs(cfg.output_dir, exist_ok=True)
    path = os.path.join(cfg.output_dir, "verify.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rep.to_json())
        fh.write("\n")
    if args.json:
        print(rep.to_json())
    else:
        print(rep.to_text())
        print(f"written: {path}")
    return 0


# ---------------------------------------------------------------------------
# demo
# ---------------------------------------------------------------------------


def circles_system():
    """Two unit circles centered at (0,0) and (1,0); F vanishes at the intersections."""
    from .core import ComponentSystem

    def component(j, x):
        if j == 1:
            return float(x[0] ** 2 + x[1] ** 2 - 1.0), np.array([2.0 * x[0], 2.0 * x[1]])
        return float((x[0] - 1.0) ** 2 + x[1] ** 2 - 1.0), np.array(
            [2.0 * (x[0] - 1.0), 2.0 * x[1]]
        )

    solution = np.array([0.5, np.sqrt(3.0) / 2.0])
    return ComponentSystem(dim=2, n_components=2, eval_component=component,
                           solution=solution)


def cmd_demo(args):
    from .core import run

    system = circles_system()
    x0 = np.array([0.6, 0.9])
    stop = StopRule(max_epochs=5000, residual_tolerance=1e-15)
    rows = []
    for name, strategy in (
        ("cyclic", SelectionStrategy.cyclic()),
        ("max_residual", SelectionStrategy.max_residual()),
        ("theta_residual", SelectionStrategy.theta_residual(0.5)),
        ("positive_cyclic", SelectionStrategy.positive_cyclic()),
    ):
        trace = run(system, x0, strategy, stop)
        dists = trace.distance_states(system.solution)
        hit = np.nonzero(dists <= 1e-8)[0]
        rows.append({
            "strategy": name,
            "iterations_to_1e-8": int(hit[0]) if hit.size else None,
            "final_distance": float(dists[-1]),
            "fallbacks": trace.n_fallback,
        })
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        print("two-circles system from (0.6, 0.9); target distance 1e-8")
        print(f"{'strategy':<18}{'iters to 1e-8':>14}{'final distance':>18}{'fallbacks':>11}")
        for r in rows:
            iters = "-" if r["iterations_to_1e-8"] is None else r["iterations_to_1e-8"]
            print(
                f"{r['strategy']:<18}{iters:>14}{r['final_distance']:>18.3e}"
                f"{r['fallbacks']:>11}"
            )
    return 0


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (Error, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
