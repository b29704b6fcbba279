"""Command-line front end.

Subcommands
-----------
solve       centralized fixpoint: measures.csv, policy.json, rho.csv
distribute  distributed engine: trace.csv, policy.json, convergence_report.json
enumerate   exhaustive policy sweep: envelope (rho.csv) and argmax.json
scenario    scripted event run: metrics.csv, events.json (packets.jsonl optional)
sweep       rounds-to-convergence grid: sweep.csv
check       property battery; exit 4 if any property fails

Exit codes: 0 success, 2 input/validation error, 3 numeric error, 4 property failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .central import (controlled_matrix, enumerate_policies, optimize_centralized, performance_vector,
                      theta_for_epsilon, write_rho_csv)
from .checks import run_battery
from .engine import ConvergenceCriterion, Schedule, convergence_rounds_profile, run_to_convergence
from .errors import ContractError, ConvergenceError, ModelValidationError, NumericError, RoutingError
from .network import Dump, Physical, Virtual, build_pfsa, load_topology
from .pfsa import compute_measure
from .sim import load_scenario, run_scenario

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PROPERTY = 0, 2, 3, 4


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfsa-route", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, discount=True, topology=True):
        if topology:
            p.add_argument("--topology", required=True, help="topology JSON file")
        if discount:
            g = p.add_mutually_exclusive_group(required=True)
            g.add_argument("--epsilon", type=float, help="target optimality gap; theta = epsilon / m^2")
            g.add_argument("--theta", type=float, help="discount parameter in (0, 1)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
        p.add_argument("--seed", type=int, default=0)

    common(sub.add_parser("solve", help="centralized optimal policy"))
    p = sub.add_parser("distribute", help="run the distributed engine")
    common(p)
    p.add_argument("--schedule", choices=("sync", "perm", "poisson"), default="sync")
    p.add_argument("--init", default="zero", help="'zero' or 'random:SEED'")
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--quiet-rounds", type=int, default=3)
    common(sub.add_parser("enumerate", help="exhaustive policy sweep (at most 24 links)"))
    p = sub.add_parser("scenario", help="run a scripted scenario")
    common(p)
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--schedule", choices=("sync", "perm", "poisson"), default="sync")
    p.add_argument("--record-every", type=int, default=10)
    p.add_argument("--packet-log", action="store_true", help="write packets.jsonl")
    p = sub.add_parser("sweep", help="rounds to convergence over an (n, epsilon) grid")
    common(p, discount=False, topology=False)
    p.add_argument("--grid-n", type=_int_list, default=[25, 100])
    p.add_argument("--grid-eps", type=_float_list, default=[0.08, 0.04, 0.02])
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--max-degree", type=int, default=4)
    p.add_argument("--schedule", choices=("sync", "perm", "poisson"), default="sync")
    p = sub.add_parser("check", help="property battery on seeded random instances")
    common(p, discount=False, topology=False)
    p.add_argument("--topology", help="optional topology file to validate first")
    p.add_argument("--trials", type=int, default=5)
    return parser


def _theta(args, topo) -> tuple:
    if args.theta is not None:
        if not 0.0 < args.theta < 1.0:
            raise ContractError(f"theta must lie in (0, 1), got {args.theta!r}")
        return args.theta, None
    return theta_for_epsilon(args.epsilon, topo), args.epsilon


def _header(topo, theta, epsilon) -> None:
    n_states = topo.n + topo.n_links + 1
    eps = "" if epsilon is None else f" epsilon={epsilon!r}"
    print(f"model: {n_states} states ({topo.n} nodes, {topo.n_links} virtual, 1 dump) "
          f"sink={topo.sink} max_degree={topo.max_degree} theta={theta!r}{eps}")


def _label(lab) -> str:
    if isinstance(lab, Physical):
        return f"node:{lab.node}"
    if isinstance(lab, Virtual):
        return f"virtual:{lab.src}->{lab.dst}"
    return "dump"


def _write_measures(path_dir: Path, labels, values, fmt) -> None:
    if fmt == "json":
        doc = [{"state": k, "label": _label(l), "measure": float(v)} for k, (l, v) in enumerate(zip(labels, values))]
        (path_dir / "measures.json").write_text(json.dumps(doc, indent=1) + "\n")
    else:
        lines = ["state,label,measure"] + [f"{k},{_label(l)},{float(v)!r}"
                                           for k, (l, v) in enumerate(zip(labels, values))]
        (path_dir / "measures.csv").write_text("\n".join(lines) + "\n")


def _write_rho(path_dir: Path, rho, fmt) -> None:
    if fmt == "json":
        (path_dir / "rho.json").write_text(json.dumps({"rho": [float(r) for r in rho]}, indent=1) + "\n")
    else:
        write_rho_csv(np.asarray(rho), path_dir / "rho.csv")


def cmd_solve(args) -> int:
    topo = load_topology(args.topology)
    theta, eps = _theta(args, topo)
    _header(topo, theta, eps)
    model = build_pfsa(topo)
    policy, nu = optimize_centralized(model, theta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_measures(out, model.index.labels, nu.values, args.format)
    (out / "policy.json").write_text(policy.to_json() + "\n")
    _write_rho(out, performance_vector(model, policy).values, args.format)
    return EXIT_OK


def cmd_distribute(args) -> int:
    topo = load_topology(args.topology)
    theta, eps = _theta(args, topo)
    _header(topo, theta, eps)
    init = None
    if args.init.startswith("random"):
        _, _, s = args.init.partition(":")
        init = np.random.default_rng(int(s or args.seed)).random(topo.n)
    elif args.init != "zero":
        raise ContractError(f"unknown init {args.init!r}")
    schedule = Schedule(args.schedule, args.seed)
    trace = run_to_convergence(topo, theta, schedule, ConvergenceCriterion(args.tol, args.quiet_rounds), init=init)
    model = build_pfsa(topo)
    pi = controlled_matrix(model, trace.propagation)
    oracle = compute_measure(pi, model.pfsa.characteristic, theta).values[:topo.n]
    _, central = optimize_centralized(model, theta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out / "trace.csv")
    (out / "policy.json").write_text(trace.policy.to_json() + "\n")
    report = {
        "theta": theta, "epsilon": eps, "schedule": schedule.mode, "seed": args.seed, "init": args.init,
        "n_states": topo.n + topo.n_links + 1, "rounds_used": trace.rounds_used,
        "rounds_executed": trace.rounds_executed,
        "max_gap_vs_controlled_chain": float(np.abs(oracle - trace.final).max()),
        "max_gap_vs_centralized": float(np.abs(central.values[:topo.n] - trace.final).max()),
        "loop_free": trace.policy.is_loop_free(),
        "final_measures": [float(v) for v in trace.final],
    }
    (out / "convergence_report.json").write_text(json.dumps(report, indent=1) + "\n")
    print(f"converged after {trace.rounds_used} rounds; gap to centralized "
          f"{report['max_gap_vs_centralized']:.3e}")
    return EXIT_OK


def cmd_enumerate(args) -> int:
    topo = load_topology(args.topology)
    theta, eps = _theta(args, topo)
    _header(topo, theta, eps)
    model = build_pfsa(topo)
    result = enumerate_policies(model)
    policy, _ = optimize_centralized(model, theta)
    rho = performance_vector(model, policy).values
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rho(out, result.envelope, args.format)
    doc = {"n_policies": result.n_policies,
           "argmax": [json.loads(p.to_json())["enabled"] for p in result.argmax],
           "centralized_gap": float(np.max(result.envelope - rho))}
    (out / "argmax.json").write_text(json.dumps(doc, indent=1) + "\n")
    print(f"evaluated {result.n_policies} policies; centralized gap {doc['centralized_gap']:.3e}")
    return EXIT_OK


def cmd_scenario(args) -> int:
    topo = load_topology(args.topology)
    script = load_scenario(args.scenario)
    if args.theta is not None:
        raise ContractError("scenarios are configured by --epsilon")
    _header(topo, theta_for_epsilon(args.epsilon, topo), args.epsilon)
    res = run_scenario(script, topo, args.epsilon, Schedule(args.schedule, args.seed),
                       record_every=args.record_every, log_packets=args.packet_log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        rows = [{"round": r.round, "event_tag": r.event_tag, "rho_norm": r.rho_norm,
                 "corrections": r.corrections, "probes": dict(zip(map(str, res.probes), r.probe_rho))}
                for r in res.rows]
        (out / "metrics.json").write_text(json.dumps(rows, indent=1) + "\n")
    else:
        res.to_csv(out / "metrics.csv")
    events = [{"tag": e.tag, "round": e.round, "rho_norm_before": e.rho_norm_before,
               "rho_norm_after": e.rho_norm_after, "settle_rounds": e.settle_rounds} for e in res.events]
    (out / "events.json").write_text(json.dumps({"loop_free": res.loop_free, "events": events}, indent=1) + "\n")
    if args.packet_log:
        res.write_packet_log(out / "packets.jsonl")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.grid_n or not args.grid_eps:
        raise ContractError("empty sweep grid")
    rows = convergence_rounds_profile(args.grid_n, args.grid_eps, args.trials, args.seed,
                                      max_degree=args.max_degree, schedule=Schedule(args.schedule, args.seed))
    rows = sorted(rows, key=lambda r: (r.n, -r.epsilon))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.format == "json":
        doc = [{"n": r.n, "epsilon": r.epsilon, "mean_rounds": r.mean_rounds, "min": r.min_rounds,
                "max": r.max_rounds} for r in rows]
        (out / "sweep.json").write_text(json.dumps(doc, indent=1) + "\n")
    else:
        lines = ["n,epsilon,mean_rounds,min,max"] + [
            f"{r.n},{r.epsilon!r},{r.mean_rounds!r},{r.min_rounds},{r.max_rounds}" for r in rows]
        (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"n={r.n:<5} epsilon={r.epsilon:<8g} mean_rounds={r.mean_rounds:.1f}")
    return EXIT_OK


def cmd_check(args) -> int:
    if args.topology:
        topo = load_topology(args.topology)
        build_pfsa(topo)
        print(f"topology {args.topology}: valid ({topo.n} nodes, {topo.n_links} links)")
    results = run_battery(range(args.seed, args.seed + args.trials))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties held")
    return EXIT_PROPERTY if failed else EXIT_OK


COMMANDS = {"solve": cmd_solve, "distribute": cmd_distribute, "enumerate": cmd_enumerate,
            "scenario": cmd_scenario, "sweep": cmd_sweep, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ModelValidationError, ContractError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, ConvergenceError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RoutingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
