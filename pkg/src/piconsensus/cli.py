"""Command-line front end.

Subcommands::

    piconsensus run <config>               run an experiment, write CSVs
    piconsensus tune <config>              grid-search each method, print tables
    piconsensus spectra <topology>         Laplacian spectral interval of ring:5 etc.
    piconsensus check-feasibility ...      evaluate the parameter conditions

Exit codes: 0 success, 2 usage or configuration error, 3 execution failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from piconsensus import analysis, graph, runner

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_config(args):
    text = Path(args.config).read_text()
    config = runner.parse_config(text)
    if args.out is not None:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    if args.images is not None:
        config.problem_options["images"] = args.images
    if args.labels is not None:
        config.problem_options["labels"] = args.labels
    return config


def _cmd_run(args):
    config = _load_config(args)
    report = runner.run_experiment(config)
    width = max(len(r.name) for r in report.results)
    print(f"problem={report.problem_kind} topology={report.topology_spec} "
          f"x0=sha256:{report.x0_sha256[:12]}")
    for r in report.results:
        iters = "not reached" if np.isinf(r.iterations_to_tol) else int(r.iterations_to_tol)
        rho = "-" if r.rho is None else f"{r.rho:.4f}"
        eff = "-" if r.effective_connectivity_ratio is None else f"{r.effective_connectivity_ratio:.4f}"
        line = (f"{r.name:<{width}}  iters={iters}  grad={r.final_grad_norm:.3e}  "
                f"consensus={r.final_consensus_err:.3e}  rho={rho}  eff_conn={eff}")
        if r.error:
            line += f"  ERROR: {r.error}"
        print(line)
    if any(r.error for r in report.results):
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_tune(args):
    config = _load_config(args)
    problem = runner.build_problem(config)
    topology = runner.parse_topology_spec(config.topology_spec)
    x0, v0_draw = runner._initial_states(config, problem)
    status = EXIT_OK
    for spec in config.methods:
        if not spec.grids:
            print(f"{spec.name}: no grid keys, nothing to tune")
            continue
        try:
            best, table = runner.tune_grid(problem, topology, spec, config, x0, v0_draw)
        except RuntimeError as exc:
            print(f"{spec.name}: {exc}")
            for cell in getattr(exc, "table", []):
                print(f"  {cell['params']}  score=inf  {cell['note']}")
            status = EXIT_RUNTIME
            continue
        print(f"{spec.name}: best {best}")
        for cell in table:
            score = "inf" if np.isinf(cell["score"]) else int(cell["score"])
            note = f"  {cell['note']}" if cell["note"] else ""
            print(f"  {cell['params']}  score={score}{note}")
    return status


def _cmd_spectra(args):
    topology = runner.parse_topology_spec(args.topology)
    lap = graph.laplacian(topology, d=1)
    lam_min, lam_max = graph.spectral_interval(lap)
    print(f"m={topology.m} edges={len(topology.edges)} kind={topology.kind}")
    print(f"lambda_min_nonzero={lam_min:.12g}")
    print(f"lambda_max={lam_max:.12g}")
    return EXIT_OK


def _cmd_check_feasibility(args):
    report = analysis.check_feasibility(
        c1=args.c1, c2=args.c2, c3=args.c3, alpha=args.alpha, beta=args.beta,
        mu=args.mu, lipschitz=args.lipschitz, lambda_min=args.lambda_min, m=args.m)
    for key, val in report.to_dict().items():
        print(f"{key} = {val}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="piconsensus",
                                     description="PI consensus distributed optimization testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("run", _cmd_run), ("tune", _cmd_tune)):
        p = sub.add_parser(name, help=f"{name} an experiment config")
        p.add_argument("config", help="path to experiment config file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="experiment seed (overrides config)")
        p.add_argument("--images", help="IDX images file for logistic_idx")
        p.add_argument("--labels", help="IDX labels file for logistic_idx")
        p.set_defaults(fn=fn)

    p = sub.add_parser("spectra", help="print Laplacian spectral interval")
    p.add_argument("topology", help="topology spec, e.g. ring:5 or file:edges.txt")
    p.set_defaults(fn=_cmd_spectra)

    p = sub.add_parser("check-feasibility", help="evaluate the parameter conditions")
    for flag in ("c1", "c2", "c3", "alpha", "beta", "mu", "lipschitz", "lambda-min"):
        p.add_argument(f"--{flag}", type=float, required=True,
                       dest=flag.replace("-", "_"))
    p.add_argument("--m", type=int, required=True)
    p.set_defaults(fn=_cmd_check_feasibility)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (runner.ConfigError, graph.DisconnectedGraphError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
