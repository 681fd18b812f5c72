"""Command-line entry point: ``logistic-bd <subcommand> --config run.yaml``.

Exit codes: 0 success (all selected checks PASS), 1 a check FAILed or was
INCONCLUSIVE, 2 configuration error, 3 missing upstream artifact.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_hash, load_config
from .estimator import (
    EstimatorError,
    TestFunction,
    estimate_correlations,
    estimate_factorial_moments,
    estimate_functional,
)
from .hierarchy import (
    HierarchyOperator,
    SolverError,
    initial_grid,
    integrate_rk4,
    load_trajectory,
    norm_alpha,
    ovsyannikov_series,
    save_trajectory,
)
from .io import ArtifactWriter, MissingArtifactError, load_snapshots, save_snapshots, update_manifest
from .kernels import KernelSpec, ModelError, derive_constants, time_horizon
from .simulator import run as simulate_run
from .verifier import (
    BoundCheck,
    UnsupportedInitialError,
    check_convolution_bound,
    check_global_moments,
    check_linear_growth,
    check_type_growth,
    cross_validate,
    exit_code,
    sigma_sweep,
    summary_table,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
SUBCOMMANDS = ("validate", "simulate", "solve", "estimate", "verify", "sweep", "report", "pipeline")


class _Context:
    def __init__(self, cfg: RunConfig, root: Path):
        self.cfg = cfg
        self.root = root
        self.writer = ArtifactWriter(root)
        self.spec = cfg.spec()
        self.consts = derive_constants(self.spec, strict=not cfg.model.allow_zero_competition)
        self.hash = config_hash(cfg)

    def record(self, stage, status, started):
        update_manifest(self.writer, self.cfg.model_dump(mode="json"), self.hash, __version__,
                        stage, status, started)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _resolve_root(cfg: RunConfig, out, command):
    if out is not None:
        return Path(out)
    base = Path(cfg.output.directory)
    if not cfg.output.timestamped:
        return base
    if command in ("simulate", "pipeline", "solve", "sweep"):
        stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        return base / stamp
    runs = sorted(p for p in base.glob("*") if p.is_dir()) if base.is_dir() else []
    if not runs:
        raise MissingArtifactError(f"no run directory under {base}; run 'simulate' first or pass --out")
    return runs[-1]


def _theta(cfg: RunConfig):
    if cfg.estimator.theta is not None:
        return cfg.estimator.theta.build_test_function()
    return TestFunction(KernelSpec.gaussian(0.5, 1.0), (0.0,) * cfg.model.dimension)


def _region(cfg: RunConfig):
    r = cfg.estimator.region
    return None if r is None else (tuple(r[0]), tuple(r[1]))


# --- stages -------------------------------------------------------------------


def cmd_validate(ctx: _Context, out=None):
    out = out or sys.stdout
    c = ctx.consts
    print(f"norm_b = {c.norm_b!r}", file=out)
    print(f"norm_m = {c.norm_m!r}", file=out)
    print(f"norm_a = {c.norm_a!r}", file=out)
    print(f"mean_a = {c.mean_a!r}", file=out)
    print(f"mean_psi = {c.mean_psi!r}", file=out)
    print(f"mean_b_sigma = {c.mean_b_sigma!r}", file=out)
    print(f"volume = {c.volume!r}", file=out)
    return EXIT_OK


def cmd_simulate(ctx: _Context):
    cfg = ctx.cfg
    res = simulate_run(ctx.spec, cfg.law(), cfg.horizon, cfg.snapshot_times, replicas=cfg.replicas,
                       master_seed=cfg.master_seed, threads=cfg.simulation.threads,
                       record_events=cfg.simulation.record_events,
                       max_population=cfg.simulation.max_population, consts=ctx.consts)
    save_snapshots(ctx.writer, res.snapshots)
    if cfg.simulation.record_events:
        rows = [np.column_stack([np.full(len(log), log.replica_id), log.times, log.kinds, log.points])
                for log in res.event_logs]
        d = cfg.model.dimension
        ctx.writer.write_npy("events.npy", np.concatenate(rows) if rows else np.zeros((0, 3 + d)))
    return EXIT_OK


def cmd_solve(ctx: _Context):
    cfg = ctx.cfg
    kappa0 = cfg.kappa0()
    grid0 = initial_grid(cfg.law(), ctx.spec, cfg.solver.points_per_axis, cfg.solver.n_max)
    for closure in cfg.solver.closures:
        op = HierarchyOperator(ctx.spec, grid0.geometry, cfg.solver.build(closure, kappa0), ctx.consts)
        traj = integrate_rk4(grid0, cfg.horizon, op, cfg.snapshot_times)
        save_trajectory(traj, ctx.root / "solver", closure)
    ser = cfg.solver.series
    if ser.enabled:
        alpha_p = math.log(kappa0)
        alpha = alpha_p + ser.alpha_gap
        T = time_horizon(alpha, alpha_p, ctx.consts)
        t = ser.horizon_fraction * T
        rows = []
        for closure in cfg.solver.closures:
            op = HierarchyOperator(ctx.spec, grid0.geometry, cfg.solver.build(closure, kappa0), ctx.consts)
            s = ovsyannikov_series(grid0, t, alpha, alpha_p, ser.L_max, op, order=ser.order)
            r = integrate_rk4(grid0, t, op, [t]).grids[-1]
            dev = max(float(np.max(np.abs(s.component(n) - r.component(n)))) for n in range(1, s.n_max + 1))
            rows.append((closure, t, T, alpha, alpha_p, ser.L_max, dev, norm_alpha(s, alpha)))
        ctx.writer.write_csv("solver/series.csv",
                             ["closure", "time", "horizon", "alpha", "alpha_prime", "L_max",
                              "max_deviation_vs_rk4", "norm_alpha"], rows)
    return EXIT_OK


def cmd_estimate(ctx: _Context):
    cfg = ctx.cfg
    series = load_snapshots(ctx.root)
    est = cfg.estimator
    stats = estimate_factorial_moments(series, _region(cfg), est.n_max)
    ctx.writer.write_csv("moments.csv", ["time", "n", "mean", "se"],
                         [(t, n, f.mean[k], f.se[k]) for n, f in sorted(stats.factorial.items())
                          for k, t in enumerate(f.times)])
    binned = estimate_correlations(series, est.n_bins, est.rmax, est.k1_cells)
    ctx.writer.write_csv("k1.csv", ["time", "k1", "se"],
                         [(t, binned.k1[k], binned.k1_se[k]) for k, t in enumerate(binned.times)])
    ctx.writer.write_csv("correlations.csv", ["time", "r_lo", "r_hi", "bin_volume", "k2", "se"],
                         [(t, binned.edges[b], binned.edges[b + 1], binned.bin_volumes[b],
                           binned.k2[k, b], binned.k2_se[k, b])
                          for k, t in enumerate(binned.times) for b in range(len(binned.bin_volumes))])
    funcs = [("Phi", estimate_functional(series, "Phi")),
             ("F_theta", estimate_functional(series, "F_theta", _theta(cfg)))]
    if est.v is not None:
        funcs.append(("F_tilde", estimate_functional(series, "F_tilde", est.v.build_test_function())))
    ctx.writer.write_csv("functionals.csv", ["time", "kind", "mean", "se"],
                         [(t, name, e.mean[k], e.se[k]) for name, e in funcs for k, t in enumerate(e.times)])
    return EXIT_OK


def _load_solver(root, closure):
    d = root / "solver"
    if not (d / f"{closure}.json").is_file():
        raise MissingArtifactError(f"{d / (closure + '.json')} not found; run 'solve' first")
    return load_trajectory(d, closure)


def run_checks(ctx: _Context):
    cfg = ctx.cfg
    series = load_snapshots(ctx.root)
    vcfg = cfg.verifier
    checks: list[BoundCheck] = []
    binned = None
    for name in vcfg.checks:
        if name == "type_growth":
            binned = binned or estimate_correlations(series, cfg.estimator.n_bins, cfg.estimator.rmax,
                                                     cfg.estimator.k1_cells)
            kappa0 = cfg.kappa0()
            if kappa0 is None:
                raise UnsupportedInitialError("type growth needs a Poisson-type initial law with known type")
            checks.append(check_type_growth(binned, kappa0, ctx.consts.norm_b, vcfg.type_growth_tol))
        elif name == "convolution_bound":
            theta = _theta(cfg)
            est = estimate_functional(series, "F_theta", theta)
            checks.append(check_convolution_bound(est, ctx.spec, theta, cfg.law(), vcfg.convolution_mode))
        elif name == "global_moments":
            stats = estimate_factorial_moments(series, None, vcfg.moment_order)
            checks.append(check_global_moments(stats, ctx.spec, cfg.horizon, vcfg.moment_order,
                                               vcfg.mean_field_tol, vcfg.saturation_fraction))
        elif name == "linear_growth":
            stats = estimate_factorial_moments(series, None, 1)
            checks.append(check_linear_growth(stats, ctx.spec))
        elif name == "cross_validate":
            binned = binned or estimate_correlations(series, cfg.estimator.n_bins, cfg.estimator.rmax,
                                                     cfg.estimator.k1_cells)
            ruelle, zero = _load_solver(ctx.root, "ruelle_cap"), _load_solver(ctx.root, "zero")
            checks.append(cross_validate(binned, ruelle, zero, vcfg.grid_tol))
    return checks


def cmd_verify(ctx: _Context, out=None):
    out = out or sys.stdout
    checks = run_checks(ctx)
    code = exit_code(checks)
    ctx.writer.write_json("verdicts.json", {
        "overall": "PASS" if code == 0 else "FAIL",
        "checks": [c.to_dict() for c in checks],
    })
    table = summary_table(checks)
    ctx.writer.write_text("summary.txt", table + "\n")
    print(table, file=out)
    return code


def cmd_sweep(ctx: _Context):
    cfg = ctx.cfg
    sw = cfg.sweep

    def observable(series):
        if sw.observable == "Phi":
            return estimate_functional(series, "Phi")
        return estimate_factorial_moments(series, None, 1).density()

    table = sigma_sweep(ctx.spec, cfg.law(), sw.sigmas, observable, cfg.horizon, cfg.snapshot_times,
                        sw.replicas or cfg.replicas, cfg.master_seed, cfg.simulation.threads)
    ctx.writer.write_csv("sweep.csv", ["sigma", "time", "value", "se", "deviation"],
                         [(r["sigma"], r["time"], r["value"], r["se"], r["deviation"]) for r in table.rows()])
    ctx.writer.write_csv("sweep_trend.csv", ["time", "monotone"],
                         [(t, bool(m)) for t, m in zip(table.times, table.monotone)])
    return EXIT_OK


def cmd_report(ctx: _Context, out=None):
    out = out or sys.stdout
    vpath = ctx.root / "verdicts.json"
    if not vpath.is_file():
        raise MissingArtifactError(f"{vpath} not found; run 'verify' first")
    verdicts = json.loads(vpath.read_text())
    checks = [BoundCheck.from_dict(c) for c in verdicts["checks"]]
    series = load_snapshots(ctx.root)
    dens = estimate_factorial_moments(series, None, 1).density()
    kappa0 = ctx.cfg.kappa0()
    rows = []
    for k, t in enumerate(dens.times):
        bound = (kappa0 + ctx.consts.norm_b * t) if kappa0 is not None else float("nan")
        rows.append((t, dens.mean[k], dens.se[k], bound))
    ctx.writer.write_csv("report_k1.csv", ["time", "k1_hat", "se", "type_bound"], rows)
    ctx.writer.write_csv("report_checks.csv", ["check", "time", "label", "lhs", "rhs", "se", "tol", "verdict"],
                         [(c.name, c.times[i], c.labels[i], c.lhs[i], c.rhs[i], c.se[i], c.tol[i], c.verdict)
                          for c in checks for i in range(len(c.lhs))])
    table = summary_table(checks)
    print(table, file=out)
    return exit_code(checks)


STAGES = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "estimate": cmd_estimate,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def _run_stage(ctx, name):
    started = _now()
    code = STAGES[name](ctx)
    ctx.record(name, "ok" if code == 0 else "fail", started)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="logistic-bd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", help="run directory (default: timestamped under output.directory)")
        s.add_argument("--seed", type=int, help="override master_seed")
        s.add_argument("--replicas", type=int, help="override replicas")
        s.add_argument("--threads", type=int, help="worker processes (speed only)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides(seed=args.seed, replicas=args.replicas, threads=args.threads)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as err:  # overrides failing validation
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "validate":
            return cmd_validate(_ValidateCtx(cfg))
        root = _resolve_root(cfg, args.out, args.command)
        ctx = _Context(cfg, root)
        if args.command == "pipeline":
            order = ["simulate"]
            if cfg.solver.enabled or "cross_validate" in cfg.verifier.checks:
                order.append("solve")
            order += ["estimate", "verify", "report"]
            code = EXIT_OK
            for name in order:
                c = _run_stage(ctx, name)
                code = code or c
            return code
        return _run_stage(ctx, args.command)
    except MissingArtifactError as err:
        print(f"missing artifact: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (ModelError, SolverError, UnsupportedInitialError, EstimatorError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


class _ValidateCtx:
    def __init__(self, cfg):
        self.cfg = cfg
        self.consts = derive_constants(cfg.spec(), strict=not cfg.model.allow_zero_competition)


if __name__ == "__main__":
    sys.exit(main())
