"""Command-line entry point: ``se3reg <subcommand> ...``.

Exit codes: 0 success, 2 bad input, 3 no convergence or degenerate geometry.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .correspondence import IcpConfig, initialize_from_pairwise, multiview_icp
from .errors import DegenerateGeometry, EmptyAfterPrune, RegistrationError
from .io import (
    format_motion,
    list_ply_files,
    read_correspondences,
    read_edges,
    read_ply,
    read_view_graph,
    write_trajectory,
)
from .multiview import estimate_multiview
from .pairwise import SolverConfig, estimate_pairwise
from .robust_loss import Loss
from .synthbench import (
    MODELS,
    all_pairs,
    convergence_compare,
    generate_pair,
    make_model,
    rows_to_csv,
    run_benchmark,
    solver_config_for,
    summary_json,
)

log = logging.getLogger("se3reg")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_CONVERGED = 3
# "--edges all" is only accepted up to this many scans.
ALL_PAIRS_LIMIT = 12
THREADS_ENV = "SE3REG_THREADS"


class InputError(Exception):
    pass


def _eps_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon list {text!r}") from None
    if not values or any(not v > 0 for v in values):
        raise argparse.ArgumentTypeError("epsilons must be positive")
    return values


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_solver_flags(p, *, k_irls: int, epsilon: float):
    p.add_argument("--loss", choices=["l12", "l1", "gm"], default="l12")
    p.add_argument("--mu0", type=float, help="initial Geman-McClure scale (default D^2)")
    p.add_argument("--divisor", type=float, help="Geman-McClure annealing divisor")
    p.add_argument("--period", type=_positive_int, help="annealing period in outer iterations")
    p.add_argument("--k-irls", type=_positive_int, default=k_irls)
    p.add_argument("--epsilon", type=float, default=epsilon)
    p.add_argument("--max-outer", type=_positive_int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="se3reg", description="Robust rigid registration on SE(3).")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("-v", "--verbose", action="store_true")
        p.add_argument("--config", help="JSON file with defaults for any flag of this command")
        p.add_argument("--threads", type=_positive_int,
                       help=f"worker threads (default ${THREADS_ENV} or 1)")
        return p

    p = command("register-pair", "estimate the motion taking src onto dst from correspondences")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--corrs", required=True, help="'i j' index lines or correspondence JSON")
    _add_solver_flags(p, k_irls=2, epsilon=1e-5)
    p.add_argument("--extrinsic", action="store_true", help="use the [omega, t] update")
    p.set_defaults(func=cmd_register_pair)

    p = command("register-multiview", "jointly register a view graph")
    p.add_argument("viewgraph")
    _add_solver_flags(p, k_irls=3, epsilon=1e-7)
    p.add_argument("-o", "--output", default="-", help="trajectory file (default stdout)")
    p.add_argument("--full", action="store_true", help="write all 16 matrix entries")
    p.set_defaults(func=cmd_register_multiview)

    p = command("icp-multiview", "register a directory of scans by robust ICP and averaging")
    p.add_argument("directory")
    p.add_argument("--edges", required=True, help="file of 'i j' lines, or 'all'")
    p.add_argument("--rounds", type=_positive_int, default=3)
    p.add_argument("--max-icp-rounds", type=_positive_int, default=50)
    p.add_argument("--prune", type=float, default=2.5, help="median distance multiplier")
    _add_solver_flags(p, k_irls=2, epsilon=1e-5)
    p.set_defaults(max_outer=3)
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--full", action="store_true")
    p.set_defaults(func=cmd_icp_multiview)

    p = command("bench-synthetic", "robustness benchmark on a built-in model")
    p.add_argument("--model", choices=MODELS, default="blobs")
    p.add_argument("--points", type=_positive_int, default=1000)
    p.add_argument("--sigma", type=float, default=0.0025, help="noise std in diameters")
    p.add_argument("--outliers", type=float, default=0.4)
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--angle", type=float, default=60.0, help="max rotation in degrees")
    _add_solver_flags(p, k_irls=2, epsilon=1e-5)
    p.add_argument("--extrinsic", action="store_true")
    p.add_argument("--csv", default="-", help="per-trial CSV (default stdout)")
    p.add_argument("--summary", help="summary JSON path (default stderr)")
    p.add_argument("--no-timing", action="store_true", help="write nan in the ms column")
    p.set_defaults(func=cmd_bench)

    p = command("convergence-compare", "iterations to convergence: line process vs intrinsic IRLS")
    p.add_argument("--model", choices=MODELS, default="blobs")
    p.add_argument("--points", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--angle", type=float, default=30.0, help="rotation angle in degrees")
    p.add_argument("--sigma", type=float, default=0.0025)
    p.add_argument("--outliers", type=float, default=0.3)
    p.add_argument("--eps-list", type=_eps_list,
                   default=[1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7])
    p.add_argument("--max-outer", type=_positive_int, default=100)
    p.add_argument("--csv", default="-")
    p.add_argument("--trace-csv", help="per-iteration cost trace CSV")
    p.set_defaults(func=cmd_convergence)
    return parser


def _emit(text: str, path) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise InputError(f"{THREADS_ENV} must be positive")
        return n
    return 1


def _solver_config(args, diameter: float, extrinsic: bool = False) -> SolverConfig:
    if args.loss != "gm" and any(getattr(args, k) is not None for k in ("mu0", "divisor", "period")):
        raise InputError("--mu0/--divisor/--period only apply to --loss gm")
    return solver_config_for(args.loss, diameter, k_irls=args.k_irls, epsilon=args.epsilon,
                             max_outer=args.max_outer, extrinsic=extrinsic,
                             mu0=args.mu0, divisor=args.divisor, period=args.period)


def cmd_register_pair(args) -> int:
    src, dst = read_ply(args.src), read_ply(args.dst)
    corrs = read_correspondences(args.corrs, src, dst)
    cfg = _solver_config(args, corrs.scale, args.extrinsic)
    result = estimate_pairwise(corrs, cfg)
    r = corrs.residuals(result.motion)
    sys.stdout.write(format_motion(result.motion))
    report = {
        "converged": result.converged,
        "k_outer": result.trace.k_outer,
        "initial_cost": result.trace.initial_cost,
        "final_cost": float(result.trace.costs[-1]),
        "correspondences": len(corrs),
        "median_residual": float(np.median(r)),
        "ms": 1000.0 * result.trace.iterations[-1].elapsed,
    }
    sys.stdout.write(json.dumps(report) + "\n")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_register_multiview(args) -> int:
    graph, has_motions = read_view_graph(args.viewgraph)
    cfg = _solver_config(args, graph.scale)
    if not has_motions:
        log.info("no initial motions; initializing from pairwise estimates")
        graph = graph.with_motions(initialize_from_pairwise(graph))
    result = estimate_multiview(graph, cfg)
    write_trajectory(result.motions, args.output, full=args.full)
    log.info("multiview: %d outer iterations, converged=%s", result.trace.k_outer, result.converged)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_icp_multiview(args) -> int:
    files = list_ply_files(args.directory)
    scans = [read_ply(f) for f in files]
    n = len(scans)
    if args.edges == "all":
        if n > ALL_PAIRS_LIMIT:
            raise InputError(f"--edges all needs at most {ALL_PAIRS_LIMIT} scans, found {n}")
        edges = all_pairs(n)
    else:
        edges = read_edges(args.edges, n)
    pts = np.vstack([s.points for s in scans])
    cfg = IcpConfig(_solver_config(args, float(np.linalg.norm(np.ptp(pts, axis=0)))),
                    max_icp_rounds=args.max_icp_rounds, prune_multiplier=args.prune,
                    outer_pipeline_rounds=args.rounds)
    motions = multiview_icp(scans, edges, cfg)
    write_trajectory(motions, args.output, full=args.full)
    return EXIT_OK


def cmd_bench(args) -> int:
    if not 0.0 <= args.outliers <= 1.0 or args.sigma < 0:
        raise InputError("--outliers must lie in [0, 1] and --sigma be nonnegative")
    rows = run_benchmark(args.model, sigma_rel=args.sigma, outlier_fraction=args.outliers,
                         trials=args.trials, seed=args.seed, loss_name=args.loss,
                         k_irls=args.k_irls, epsilon=args.epsilon, max_outer=args.max_outer,
                         extrinsic=args.extrinsic, angle_max=math.radians(args.angle),
                         n_points=args.points, threads=_threads(args),
                         mu0=args.mu0, divisor=args.divisor, period=args.period)
    _emit(rows_to_csv(rows, timing=not args.no_timing), args.csv)
    summary = summary_json(rows) + "\n"
    if args.summary:
        Path(args.summary).write_text(summary)
    else:
        sys.stderr.write(summary)
    return EXIT_OK


def cmd_convergence(args) -> int:
    if not 0.0 <= args.outliers <= 1.0 or args.sigma < 0:
        raise InputError("--outliers must lie in [0, 1] and --sigma be nonnegative")
    model = make_model(args.model, args.points, args.seed)
    angle = math.radians(args.angle)
    pair = generate_pair(model, angle, args.sigma, args.outliers, args.seed, angle_min=angle)
    table = convergence_compare(pair, args.eps_list, max_outer=args.max_outer, loss=Loss.l_half())
    _emit(table.to_csv(), args.csv)
    if args.trace_csv:
        Path(args.trace_csv).write_text(table.trace_csv())
    return EXIT_OK


def _apply_config(parser, sub, args, argv):
    """Re-parse with the JSON file's values as defaults so explicit flags win."""
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config file must hold a JSON object")
    known = {a.dest for a in sub._actions} - {"help", "config", "func", "verbose"}
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    if "eps_list" in cfg and isinstance(cfg["eps_list"], str):
        cfg["eps_list"] = _eps_list(cfg["eps_list"])
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            subparsers = next(a for a in parser._actions
                              if isinstance(a, argparse._SubParsersAction))
            args = _apply_config(parser, subparsers.choices[args.command], args, argv)
        return args.func(args)
    except (DegenerateGeometry, EmptyAfterPrune) as exc:
        print(f"se3reg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (InputError, RegistrationError, ValueError, OSError) as exc:
        print(f"se3reg: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
