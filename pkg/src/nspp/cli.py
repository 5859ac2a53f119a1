"""Command line interface: simulate, fit, summarize, check.

Exit codes are part of the contract: 0 on success, 2 for configuration
problems (including argparse usage errors), 3 for data problems (malformed
CSV, points outside the domain), 4 for chain-state problems (empty trace,
numerical breakdown).  The NSPP_THREADS environment variable caps the BLAS
worker count so batch jobs can pin cores.
"""

from __future__ import annotations

import argparse
import os
import pickle
import sys
import time

import numpy as np

from .config import ConfigError, load_config, serialize_config
from .geometry import InvalidDomainError
from .gp import NumericalError
from .mcmc import load_checkpoint, read_trace_csv, run_chain, save_checkpoint
from .model import CovariateField, DataError, load_points_csv, save_points_csv
from .simulate import simulate_dataset
from .summaries import (
    MeshGrid,
    accumulate_draw_surfaces,
    lambda_star_table,
    mse_indicator,
    posterior_correlation_map,
    posterior_mean_surface,
    write_xyv_csv,
)


class ArtifactError(RuntimeError):
    """A chain artifact is unusable (missing pieces, no stored iterations)."""


def _apply_thread_cap():
    cap = os.environ.get("NSPP_THREADS", "").strip()
    if not cap:
        return
    try:
        n = int(cap)
    except ValueError:
        raise ConfigError(f"NSPP_THREADS: expected an integer, got {cap!r}") from None
    if n < 1:
        raise ConfigError("NSPP_THREADS: must be at least 1")
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        pass


def _load_covariates(cfg):
    path = cfg.values["model"]["covariates_file"].strip()
    if not path:
        return None
    return CovariateField.from_csv(path, interp=cfg.values["model"]["covariate_interp"].strip() or "nearest")


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["simulate"]["seed"] = str(args.seed)
    if args.output is not None:
        cfg.values["io"]["output_dir"] = args.output
    domain = cfg.to_domain()
    lam = cfg.simulate_lambda_star()
    hypers = cfg.to_hypers()
    prior = cfg.to_prior()
    out_dir = cfg.values["io"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)

    dataset = simulate_dataset(
        domain,
        lam,
        hypers,
        seed=cfg._int("simulate", "seed"),
        generators=cfg.simulate_generators(),
        eta=prior.eta,
        nu=prior.nu,
    )
    save_points_csv(os.path.join(out_dir, "points.csv"), dataset.observed)
    save_points_csv(os.path.join(out_dir, "truth_generators.csv"), dataset.generators)
    with open(os.path.join(out_dir, "truth_config.ini"), "w") as fh:
        fh.write(serialize_config(cfg))
    if cfg._bool("simulate", "truth_mesh"):
        mesh = MeshGrid.from_domain(domain, cfg._int("io", "mesh_nx"), cfg._int("io", "mesh_ny"))
        vals = dataset.true_intensity(mesh.points)
        write_xyv_csv(os.path.join(out_dir, "truth_intensity_mesh.csv"), mesh.points, vals, header="x,y,lambda")
    print(f"simulated {dataset.observed.shape[0]} points into {out_dir}")
    return 0


def _trace_paths(out_dir):
    return (
        os.path.join(out_dir, "trace.csv"),
        os.path.join(out_dir, "states.pkl"),
        os.path.join(out_dir, "checkpoint.pkl"),
        os.path.join(out_dir, "config_echo.ini"),
    )


def cmd_fit(args):
    cfg = load_config(args.config)
    for flag, section, key in (
        (args.iters, "tuning", "iterations"),
        (args.burnin, "tuning", "burnin"),
        (args.thin, "tuning", "thin"),
        (args.seed, "tuning", "seed"),
        (args.L, "model", "l"),
    ):
        if flag is not None:
            cfg.values[section][key] = str(flag)
    if args.output is not None:
        cfg.values["io"]["output_dir"] = args.output

    domain = cfg.to_domain()
    tuning = cfg.to_tuning()
    prior = cfg.to_prior()
    monitors = cfg.monitors()
    covariates = _load_covariates(cfg)

    observed = load_points_csv(args.points)
    if observed.shape[0] < 1:
        raise DataError(f"{args.points}: need at least one observed point")
    inside = domain.contains(observed)
    if not bool(np.all(inside)):
        rows = np.nonzero(~inside)[0][:20]
        listing = ", ".join(str(r + 2) for r in rows)
        raise DataError(f"{args.points}: points outside the domain at line(s) {listing}")

    out_dir = cfg.values["io"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    trace_path, states_path, ckpt_path, echo_path = _trace_paths(out_dir)

    resume_state = None
    if args.resume:
        payload = load_checkpoint(args.resume)
        resume_state = payload["state"]
        if resume_state.iteration >= tuning.iterations:
            raise ArtifactError(
                f"checkpoint already at iteration {resume_state.iteration}; "
                f"raise tuning.iterations past it to continue"
            )

    t0 = time.time()
    trace, state = run_chain(
        observed,
        domain,
        cfg.L,
        cfg.to_hyper(),
        prior,
        tuning,
        phi_sampled=cfg.phi_sampled,
        phi_bounds=cfg.phi_bounds,
        covariates=covariates,
        monitors=monitors if monitors.shape[0] else None,
        resume_state=resume_state,
        progress=args.progress,
    )
    elapsed = time.time() - t0

    append = bool(args.resume) and os.path.exists(trace_path)
    trace.write_csv(trace_path, append=append)
    snapshots = trace.snapshots
    if append and os.path.exists(states_path):
        with open(states_path, "rb") as fh:
            snapshots = pickle.load(fh) + snapshots
    with open(states_path, "wb") as fh:
        pickle.dump(snapshots, fh, protocol=pickle.HIGHEST_PROTOCOL)
    save_checkpoint(ckpt_path, state, tuning, monitors=monitors if monitors.shape[0] else None)
    with open(echo_path, "w") as fh:
        fh.write(serialize_config(cfg))

    acc = trace.acceptance
    phi_part = f", phi {acc['phi']:.3f}" if acc["phi"] is not None else ""
    print(
        f"fit complete: {state.iteration} iterations in {elapsed:.1f}s "
        f"(acceptance: partition {acc['partition']:.3f}{phi_part}); artifacts in {out_dir}"
    )
    return 0


def _parse_point_list(text):
    pts = []
    for chunk in text.split(";"):
        toks = chunk.split(",")
        if len(toks) != 2:
            raise ConfigError(f"point list: expected 'x,y;x,y', got {text!r}")
        pts.append((float(toks[0]), float(toks[1])))
    return np.array(pts)


def cmd_summarize(args):
    trace_path, states_path, _, echo_path = _trace_paths(args.artifact)
    for path in (trace_path, states_path, echo_path):
        if not os.path.exists(path):
            raise ArtifactError(f"artifact incomplete: missing {path}")
    cfg = load_config(echo_path)
    domain = cfg.to_domain()
    tuning = cfg.to_tuning()
    covariates = _load_covariates(cfg)

    columns, data = read_trace_csv(trace_path)
    with open(states_path, "rb") as fh:
        snapshots = pickle.load(fh)
    burnin = tuning.burnin
    kept = [s for s in snapshots if s["iteration"] > burnin]
    if data.shape[0] == 0 or not kept:
        raise ArtifactError("trace has no stored iterations past the burn-in")

    out_dir = args.output or args.artifact
    os.makedirs(out_dir, exist_ok=True)
    mesh = MeshGrid.from_domain(domain, cfg._int("io", "mesh_nx"), cfg._int("io", "mesh_ny"))

    mean_surface = posterior_mean_surface(kept, domain, mesh, covariates, min_iteration=burnin + 1)
    write_xyv_csv(os.path.join(out_dir, "mesh_mean.csv"), mesh.points, mean_surface)

    rng = np.random.Generator(np.random.Philox(cfg._int("tuning", "seed") + 1))
    accumulate_draw_surfaces(kept, domain, mesh, rng, covariates, min_iteration=burnin + 1, max_draws=args.draws)
    write_xyv_csv(os.path.join(out_dir, "mesh_q025.csv"), mesh.points, mesh.quantile_surface(0.025))
    write_xyv_csv(os.path.join(out_dir, "mesh_q975.csv"), mesh.points, mesh.quantile_surface(0.975))

    table = lambda_star_table(columns, data, cfg.L, burnin=burnin)
    with open(os.path.join(out_dir, "lambda_star_posterior.csv"), "w") as fh:
        fh.write("region,mean,q025,q975\n")
        for region, mean, lo, hi in table:
            fh.write(f"{region},{mean:.17g},{lo:.17g},{hi:.17g}\n")

    lines = [f"summarized {len(kept)} stored iterations onto a {mesh.M}-point mesh"]
    if args.truth:
        truth = np.loadtxt(args.truth, delimiter=",", skiprows=1, ndmin=2)
        if truth.shape[0] != mesh.M:
            raise DataError(
                f"{args.truth}: {truth.shape[0]} rows but the mesh has {mesh.M} points"
            )
        mse = mse_indicator(truth[:, 2], mean_surface)
        lines.append(f"MSE against truth surface: {mse:.6g}")

    if args.corr_points:
        refs = _parse_point_list(args.corr_points)
        draws = np.array(mesh._reservoir)
        for i, ref in enumerate(refs, start=1):
            ref_idx = int(np.argmin(np.sum((mesh.points - ref) ** 2, axis=1)))
            corr = posterior_correlation_map(draws, ref_idx)
            write_xyv_csv(os.path.join(out_dir, f"corrmap_{i}.csv"), mesh.points, corr, header="x,y,correlation")
        lines.append(f"wrote {refs.shape[0]} correlation maps")

    print("\n".join(lines))
    return 0


def cmd_check(args):
    from . import checks

    if args.suite == "acceptance-oracle":
        result = checks.run_acceptance_oracle_suite(n_configs=args.n or 100)
    elif args.suite == "geweke":
        result = checks.geweke_run(n_samples=args.n or 20000, progress=args.progress)
    elif args.suite == "thinning":
        result = checks.thinning_dispersion_suite(n_reps=args.n or 2000)
    else:
        result = checks.field_cov_consistency()
    print(result.summary())
    print("PASS" if result.passed else "FAIL")
    return 0 if result.passed else 1


# -- entry point ---------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nspp",
        description="Simulation and exact Bayesian inference for piecewise-GP spatial point process intensities.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset from the model")
    p_sim.add_argument("--config", required=True, help="INI run configuration")
    p_sim.add_argument("--seed", type=int, default=None, help="override simulate.seed")
    p_sim.add_argument("--output", default=None, help="override io.output_dir")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="run the MCMC sampler on observed points")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--points", required=True, help="observed points CSV (x,y)")
    p_fit.add_argument("--iters", type=int, default=None)
    p_fit.add_argument("--burnin", type=int, default=None)
    p_fit.add_argument("--thin", type=int, default=None)
    p_fit.add_argument("--L", type=int, default=None)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--resume", default=None, help="checkpoint file to continue from")
    p_fit.add_argument("--output", default=None)
    p_fit.add_argument("--progress", type=int, default=None, help="print progress every N iterations")
    p_fit.set_defaults(func=cmd_fit)

    p_sum = sub.add_parser("summarize", help="posterior surfaces and tables from a fit artifact")
    p_sum.add_argument("--artifact", required=True, help="directory written by fit")
    p_sum.add_argument("--truth", default=None, help="truth mesh CSV for an MSE report")
    p_sum.add_argument("--corr-points", default=None, help="reference points 'x,y;x,y' for correlation maps")
    p_sum.add_argument("--draws", type=int, default=200, help="max stored draws for quantile surfaces")
    p_sum.add_argument("--output", default=None)
    p_sum.set_defaults(func=cmd_summarize)

    p_chk = sub.add_parser("check", help="run a verification suite")
    p_chk.add_argument("suite", choices=["acceptance-oracle", "geweke", "thinning", "field-cov"])
    p_chk.add_argument("--n", type=int, default=None, help="sample or configuration count")
    p_chk.add_argument("--progress", type=int, default=None)
    p_chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InvalidDomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, ArtifactError) as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
