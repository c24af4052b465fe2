"""Command-line entry point: ``servicenet <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .coverage import CoverageModel, expected_covered_demand, initial_mu_hat
from .dispatch import DISPATCH_NAMES, make_dispatcher
from .experiments import ExperimentSpec, parse_csv, report, run_sweep
from .ilp import compliance_table, optimal_allocation
from .mdp import MDPConfig, mdp_benchmark, toy_instance
from .network import MapGenConfig, NetworkMap, generate_map
from .relocate import (DMEXCLP, RELOCATION_NAMES, CompliancePolicy, RP5Restrictions, StaticBases, rp5_grid,
                       tune_rp5)
from .sim import SimConfig, run_simulation, write_trace

DEFAULT_WARMUP = 100.0


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_map(path: str) -> NetworkMap:
    return NetworkMap.from_json(Path(path).read_text())


def _model(args, net: NetworkMap) -> CoverageModel:
    mu_hat = args.mu_hat if getattr(args, "mu_hat", None) else initial_mu_hat(net.t_star, args.mu)
    return CoverageModel.build(net.K, args.M, args.lam, mu_hat)


def _restrictions(args) -> RP5Restrictions:
    return RP5Restrictions(args.rd_max, args.rl_max, args.min_gain)


def cmd_gen_map(args) -> None:
    net = generate_map(MapGenConfig(args.K, args.R, args.d, args.t_star, seed=args.seed,
                                    max_attempts=args.max_attempts))
    _emit(json.dumps(net.to_dict(), indent=1), args.output)


def cmd_allocate(args) -> None:
    net = _load_map(args.map)
    model = _model(args, net)
    alloc = optimal_allocation(net, model)
    nodes = [net.K + r for r, c in enumerate(alloc) for _ in range(c)]
    ecd = expected_covered_demand(net, nodes, model.p_ith, np.arange(net.K))
    _emit(json.dumps({"allocation": alloc, "expected_covered_demand": ecd, "mu_hat": model.mu_hat}), args.output)


def cmd_compliance_table(args) -> None:
    net = _load_map(args.map)
    table = compliance_table(net, _model(args, net), args.kind)
    _emit(table.to_json(), args.output)


def _relocator(name: str, net: NetworkMap, model: CoverageModel, args):
    alloc = optimal_allocation(net, model)
    if name == "RP1":
        return StaticBases(alloc)
    if name in ("RP2", "RP3"):
        return CompliancePolicy(compliance_table(net, model, "mcrp" if name == "RP2" else "mexcrp"), name)
    if name == "RP4":
        return DMEXCLP(model, alloc)
    return DMEXCLP(model, alloc, _restrictions(args))


def cmd_simulate(args) -> None:
    net = _load_map(args.map)
    model = _model(args, net)
    relocator = _relocator(args.relocate.upper(), net, model, args)
    config = SimConfig(args.lam, args.mu, horizon=args.horizon, seed=args.seed, warmup=args.warmup)
    trace = [] if args.trace else None
    rep = run_simulation(net, make_dispatcher(args.dispatch, model, args.alpha), relocator, config,
                         allocation=relocator.allocation, trace=trace)
    if args.trace:
        write_trace(trace, args.trace)
    _emit(rep.to_json(), args.output)


def cmd_tune_rp5(args) -> None:
    net = _load_map(args.map)
    model = _model(args, net)
    alloc = optimal_allocation(net, model)
    seeds = [args.seed + i for i in range(args.runs)]

    def evaluate(r):
        vals = [run_simulation(net, make_dispatcher(args.dispatch, model, args.alpha), DMEXCLP(model, alloc, r),
                               SimConfig(args.lam, args.mu, horizon=args.horizon, seed=s), allocation=alloc)
                .fraction_on_time for s in seeds]
        return float(np.mean(vals))

    res = tune_rp5(evaluate, rp5_grid(net.t_star))
    _emit(json.dumps({"best": res.best.to_dict(),
                      "scores": [{**g.to_dict(), "mean": v} for g, v in res.scores]}), args.output)


def cmd_sweep(args) -> None:
    data = json.loads(Path(args.spec).read_text())
    if args.paper_faithful:
        data["warmup"] = 0.0
    else:
        data.setdefault("warmup", DEFAULT_WARMUP)
    if args.workers:
        data["workers"] = args.workers
    spec = ExperimentSpec.from_dict(data)
    errors: list = []
    rows = run_sweep(spec, errors)
    for e in errors:
        sys.stderr.write(json.dumps({"cell_error": e}) + "\n")
    if not rows:
        raise RuntimeError("every cell of the sweep failed")
    _emit(report(rows, args.format), args.output)


def cmd_report(args) -> None:
    rows = parse_csv(Path(args.csv).read_text())
    _emit(report(rows, args.format), args.output)


def cmd_mdp_benchmark(args) -> None:
    _, inst = toy_instance()
    cfg = MDPConfig(t_star=args.t_star, lam=args.lam, mu=args.mu, gamma=args.gamma, epsilon=args.epsilon)
    res = mdp_benchmark(inst, cfg, runs=args.runs, horizon=args.horizon, seed=args.seed)
    lines = ["policy,mean_fraction,std,runs"]
    lines += [f"{r['policy']},{r['mean_fraction']!r},{r['std']!r},{r['runs']}" for r in res.rows()]
    _emit("\n".join(lines) + "\n", args.output)
    logging.getLogger(__name__).info("states=%d ratio=%.4f pi/vi diff=%.2e rp5=%s", res.n_states, res.ratio,
                                     res.pi_vi_max_diff, res.restrictions)


def _add_model_args(p) -> None:
    p.add_argument("--map", required=True, help="map JSON from gen-map")
    p.add_argument("--M", type=int, required=True, help="number of engineers")
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--mu-hat", type=float, default=None, help="override 1/(t* + 1/mu)")


def _add_rp5_args(p) -> None:
    p.add_argument("--rd-max", type=float, default=math.inf, help="max redeploy distance (RP5)")
    p.add_argument("--rl-max", type=float, default=math.inf, help="max relocation distance (RP5)")
    p.add_argument("--min-gain", type=float, default=0.0, help="min coverage gain for a relocation (RP5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="servicenet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-map", help="generate a random map")
    p.add_argument("--K", type=int, default=20)
    p.add_argument("--R", type=int, default=12)
    p.add_argument("--d", type=float, required=True, help="map density")
    p.add_argument("--t-star", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-attempts", type=int, default=1000)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("allocate", help="optimal static allocation")
    _add_model_args(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("compliance-table", help="MCRP or MEXCRP compliance table")
    p.add_argument("kind", choices=["mcrp", "mexcrp"])
    _add_model_args(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_compliance_table)

    p = sub.add_parser("simulate", help="one simulation run")
    _add_model_args(p)
    p.add_argument("--dispatch", default="DP1", type=str.upper, choices=DISPATCH_NAMES)
    p.add_argument("--relocate", default="RP1", type=str.upper, choices=RELOCATION_NAMES)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--horizon", type=float, default=1000.0)
    p.add_argument("--warmup", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write an event trace CSV here")
    _add_rp5_args(p)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune-rp5", help="grid search of the RP5 restrictions on one map")
    _add_model_args(p)
    p.add_argument("--dispatch", default="DP4", type=str.upper, choices=DISPATCH_NAMES)
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--horizon", type=float, default=1000.0)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_tune_rp5)

    p = sub.add_parser("sweep", help="run an experiment spec (JSON)")
    p.add_argument("--spec", required=True)
    p.add_argument("--format", choices=["csv", "table"], default="csv")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--paper-faithful", action="store_true", help="no warm-up discard")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render a sweep CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--format", choices=["csv", "table"], default="table")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mdp-benchmark", help="optimal policy vs DP4+RP5 on the small instance")
    p.add_argument("--t-star", type=int, default=3)
    p.add_argument("--lam", type=float, default=0.01)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--epsilon", type=float, default=0.001)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--horizon", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_mdp_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc),
                                     "command": args.command}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
