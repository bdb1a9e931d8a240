"""Command-line entry point: simulate | picard | equilibrium | chaos-study | validate.

Every run writes its payload files plus a ``run.json`` manifest (config
digest, flags, seed, version, wall time, output list).  Exit codes:
0 success, 2 configuration rejected, 3 numerics did not converge (outputs
still written), 4 possibly infinite invariant mass, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .analysis import chaoticity_report
from .equilibrium import InfiniteMassError, fixed_point_solve
from .mckean import picard_solve
from .model import ConfigError, load_config, validate_config
from .particle import simulate_euler, simulate_exact
from .util import config_digest

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_INFINITE_MASS = 4
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _resolve_seed(value):
    if value is not None:
        return int(value)
    env = os.environ.get("MFAIMD_SEED")
    return int(env) if env else 0


def _int_list(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _out_dir(args, digest):
    if args.out_dir:
        path = args.out_dir
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = os.path.join("runs", f"{stamp}-{digest[:8]}")
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _manifest(out_dir, subcommand, args, seed, digest, outputs, wall):
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "tool": "mfaimd",
        "version": __version__,
        "subcommand": subcommand,
        "flags": flags,
        "seed": seed,
        "config_digest": digest,
        "outputs": sorted(outputs),
        "wall_seconds": wall,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(os.path.join(out_dir, "run.json"), doc)


def _load(args):
    cfg = load_config(args.config)
    digest = config_digest(cfg.to_doc())
    return cfg, digest


# ---------------------------------------------------------------------------

def cmd_simulate(args):
    t0 = time.perf_counter()
    cfg, digest = _load(args)
    seed = _resolve_seed(args.seed)
    counts = _int_list(args.n)
    sim_kwargs = dict(
        replicas=args.replicas, scaled=args.scaled, n_grid=args.grid,
        workers=args.workers, init=args.init_on if args.init_on else None,
    )
    if args.dt is not None:
        ens = simulate_euler(cfg, counts, args.horizon, args.dt, seed, **sim_kwargs)
    else:
        ens = simulate_exact(cfg, counts, args.horizon, seed, **sim_kwargs)
    out = _out_dir(args, digest)
    rows = []
    for rep in range(ens.replicas):
        for gi, t in enumerate(ens.grid):
            for k in range(len(counts)):
                rows.append([rep, float(t), k,
                             float(ens.mean_wplus[rep, gi, k]),
                             float(ens.on_fraction[rep, gi, k])])
    _write_csv(os.path.join(out, "trajectories.csv"),
               ["replica", "t", "class", "mean_wplus", "on_fraction"], rows)
    _manifest(out, "simulate", args, seed, digest, ["trajectories.csv"], time.perf_counter() - t0)
    return EXIT_OK


def cmd_picard(args):
    t0 = time.perf_counter()
    cfg, digest = _load(args)
    seed = _resolve_seed(args.seed)
    report = picard_solve(
        cfg, args.horizon, n_grid=args.grid, replicas=args.replicas, tol=args.tol,
        damping=args.damping, max_iter=args.max_iter, seed=seed, workers=args.workers,
        init=args.init_on if args.init_on else None,
    )
    out = _out_dir(args, digest)
    J = cfg.nodes
    rows = []
    for it, values in enumerate(report.iterates, start=1):
        for gi, t in enumerate(report.trajectory.grid):
            rows.append([it, float(t)] + [float(values[gi, j]) for j in range(J)])
    _write_csv(os.path.join(out, "load_trajectory.csv"),
               ["iteration", "t"] + [f"u_{j + 1}" for j in range(J)], rows)
    _write_json(os.path.join(out, "picard.json"), report.to_doc())
    _manifest(out, "picard", args, seed, digest,
              ["load_trajectory.csv", "picard.json"], time.perf_counter() - t0)
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_equilibrium(args):
    t0 = time.perf_counter()
    cfg, digest = _load(args)
    seed = _resolve_seed(args.seed)
    out = _out_dir(args, digest)
    u0 = np.array(_float_list(args.u0)) if args.u0 else None
    try:
        report = fixed_point_solve(
            cfg, u0, tol=args.tol, damping=args.damping, max_iter=args.max_iter,
            replicas=args.replicas, H_max=args.hmax, T_max=args.tmax, seed=seed,
            starts=args.starts, workers=args.workers,
        )
    except InfiniteMassError as exc:
        _write_json(os.path.join(out, "fixed_point.json"),
                    {"error": str(exc), "diagnostics": exc.diagnostics})
        _manifest(out, "equilibrium", args, seed, digest, ["fixed_point.json"],
                  time.perf_counter() - t0)
        print(f"mfaimd equilibrium: {exc}", file=sys.stderr)
        return EXIT_INFINITE_MASS
    J = cfg.nodes
    rows = []
    for s, trace in enumerate(report.trace):
        for it, (u, dist) in enumerate(trace, start=1):
            rows.append([s, it] + [float(x) for x in u] + [dist])
    _write_csv(os.path.join(out, "iteration_trace.csv"),
               ["start", "iteration"] + [f"u_{j + 1}" for j in range(J)] + ["distance"], rows)
    _write_json(os.path.join(out, "fixed_point.json"), report.to_doc())
    _manifest(out, "equilibrium", args, seed, digest,
              ["fixed_point.json", "iteration_trace.csv"], time.perf_counter() - t0)
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_chaos_study(args):
    t0 = time.perf_counter()
    cfg, digest = _load(args)
    seed = _resolve_seed(args.seed)
    ns = _int_list(args.n_grid)
    T = args.horizon
    times = _float_list(args.times) if args.times else [0.5 * T, T]
    picard = picard_solve(
        cfg, T, n_grid=args.picard_grid, replicas=args.picard_replicas,
        tol=args.picard_tol, seed=seed + 1, workers=args.workers,
    )
    ensembles = []
    for rank, n_total in enumerate(ns):
        counts = _counts_from_proportions(cfg.proportions, n_total)
        if args.dt is not None:
            ens = simulate_euler(cfg, counts, T, args.dt, seed + 1000 * (rank + 1),
                                 replicas=args.replicas, scaled=True,
                                 n_grid=args.sample_grid, workers=args.workers)
        else:
            ens = simulate_exact(cfg, counts, T, seed + 1000 * (rank + 1),
                                 replicas=args.replicas, scaled=True,
                                 n_grid=args.sample_grid, workers=args.workers)
        ensembles.append(ens)
    report = chaoticity_report(ensembles, picard, times)
    out = _out_dir(args, digest)
    rows = [
        [r["N"], r["t"], r["mean_error"], r["mean_error_ci"], r["pair_cov"], r["pair_cov_se"], r["cov_z"]]
        for r in report.rows
    ]
    _write_csv(os.path.join(out, "chaos.csv"),
               ["N", "t", "mean_error", "mean_error_ci", "pair_cov", "pair_cov_se", "cov_z"], rows)
    doc = report.to_doc()
    doc["picard"] = picard.to_doc()
    _write_json(os.path.join(out, "chaos.json"), doc)
    _manifest(out, "chaos-study", args, seed, digest,
              ["chaos.csv", "chaos.json"], time.perf_counter() - t0)
    return EXIT_OK


def _counts_from_proportions(proportions, n_total):
    counts = np.maximum(1, np.rint(np.asarray(proportions) * n_total).astype(int))
    return counts.tolist()


def cmd_validate(args):
    t0 = time.perf_counter()
    cfg = load_config(args.config)  # raises ConfigError naming the field
    digest = config_digest(cfg.to_doc())
    report = validate_config(cfg, u_max=args.u_max)
    out = _out_dir(args, digest)
    _write_json(os.path.join(out, "validation.json"), report.to_doc())
    seed = _resolve_seed(args.seed)
    _manifest(out, "validate", args, seed, digest, ["validation.json"], time.perf_counter() - t0)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not report.ok:
        for e in report.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="mfaimd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="model configuration (JSON)")
        p.add_argument("--seed", type=int, default=None, help="RNG seed (fallback: MFAIMD_SEED, then 0)")
        p.add_argument("--out-dir", default=None, help="output directory (default runs/<timestamp>-<digest8>)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="max concurrent replicas")

    p = sub.add_parser("simulate", help="finite-N particle simulation")
    common(p)
    p.add_argument("--n", required=True, help="per-class user counts, e.g. 50,50")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--dt", type=float, default=None, help="step of the synchronous scheme (omit for exact)")
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--scaled", action="store_true", help="divide loads by the total user count")
    p.add_argument("--grid", type=int, default=200, help="output grid points")
    p.add_argument("--init-on", type=float, default=None, help="initial ON fraction (default all OFF)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("picard", help="solve the mean-field limit by load iteration")
    common(p)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--replicas", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--damping", type=float, default=0.7)
    p.add_argument("--max-iter", type=int, default=25)
    p.add_argument("--init-on", type=float, default=None)
    p.set_defaults(func=cmd_picard)

    p = sub.add_parser("equilibrium", help="solve the stationary fixed-point equation")
    common(p)
    p.add_argument("--u0", default=None, help="initial load guess, e.g. 0.1,0.2")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--damping", type=float, default=0.7)
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--replicas", type=int, default=2000)
    p.add_argument("--hmax", type=float, default=20.0)
    p.add_argument("--tmax", type=float, default=1e3)
    p.add_argument("--starts", type=int, default=3)
    p.set_defaults(func=cmd_equilibrium)

    p = sub.add_parser("chaos-study", help="finite-N convergence diagnostics")
    common(p)
    p.add_argument("--n-grid", required=True, help="population sizes, e.g. 50,100,200")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--replicas", type=int, default=100)
    p.add_argument("--dt", type=float, default=None, help="use the synchronous scheme with this step")
    p.add_argument("--times", default=None, help="comparison times (default T/2,T)")
    p.add_argument("--sample-grid", type=int, default=50)
    p.add_argument("--picard-grid", type=int, default=100)
    p.add_argument("--picard-replicas", type=int, default=4000)
    p.add_argument("--picard-tol", type=float, default=2e-3)
    p.set_defaults(func=cmd_chaos_study)

    p = sub.add_parser("validate", help="check a configuration against the model hypotheses")
    common(p)
    p.add_argument("--u-max", type=float, default=10.0, help="upper edge of the load box")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"mfaimd {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
