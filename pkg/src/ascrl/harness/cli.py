"""Command-line entry point: one subcommand per evaluation family."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .emit import emit
from . import scenarios


def base_config(args) -> ExperimentConfig:
    cfg = load_config(args.params) if args.params else ExperimentConfig()
    changes = {"seed": args.seed, "topology": args.topology}
    if args.steps is not None:
        changes["total_steps"] = args.steps
    if args.interval is not None:
        changes["updating_interval"] = args.interval
    for k, v in changes.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


def _write(out: Path, name: str, report, interval: int) -> dict:
    emit(report, out, name, interval=interval)
    return {"name": name, "utilization": report.utilization(report.window(last=10_000)),
            "mean_srtt": report.mean_srtt(report.window(last=10_000))}


def cmd_objective(args, cfg):
    rep = scenarios.scenario_objective(cfg, args.objective, args.cc, args.flows)
    return [_write(args.out, f"objective_{args.cc}_s{cfg.seed}", rep, cfg.csv_interval_steps)]


def cmd_interval_sweep(args, cfg):
    reps = scenarios.scenario_interval_sweep(cfg, args.intervals, args.objective, args.flows)
    return [_write(args.out, f"interval_{k}_s{cfg.seed}", r, cfg.csv_interval_steps) for k, r in reps.items()]


def cmd_robustness(args, cfg):
    rep = scenarios.scenario_robustness(cfg, args.cc, args.phase_steps, n_flows=args.flows)
    row = _write(args.out, f"robustness_{args.cc}_s{cfg.seed}", rep, cfg.csv_interval_steps)
    row["phases"] = rep.extra["phases"]
    return [row]


def cmd_frm(args, cfg):
    out = scenarios.scenario_frm(cfg, args.transition, args.transition_step, args.window)
    rows = []
    for mode in ("frm", "scratch"):
        row = _write(args.out, f"frm_{args.transition}_{mode}_s{cfg.seed}", out[mode], cfg.csv_interval_steps)
        row["post_metric"] = out[mode].extra["post_metric"]
        rows.append(row)
    rows.append({"margin": out["margin"]})
    return rows


def cmd_fairness(args, cfg):
    rows = []
    for obj, rep in scenarios.scenario_fairness(cfg, n_flows=args.flows).items():
        row = _write(args.out, f"fairness_{obj.strip('-')}_s{cfg.seed}", rep, cfg.csv_interval_steps)
        row["jain"] = rep.extra["jain_last"]
        rows.append(row)
    return rows


def cmd_baseline(args, cfg):
    return [_write(args.out, f"baseline_{cc}_s{cfg.seed}", rep, cfg.csv_interval_steps)
            for cc, rep in scenarios.scenario_baseline(cfg, args.ccs, args.flows).items()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ascrl", description="Run congestion-control experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--topology", default="dumbbell",
                        choices=["dumbbell", "leaf_spine", "fat_tree", "custom"])
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--steps", type=int, default=None, help="total DRL steps (default 60000)")
    common.add_argument("--params", type=Path, default=None, help="YAML experiment config")
    common.add_argument("--interval", type=int, default=None, help="updating interval in packets")
    common.add_argument("--flows", type=int, default=3)
    common.add_argument("--out", type=Path, default=Path("results"))
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("objective", parents=[common], help="one objective, one CC")
    s.add_argument("--objective", default="throughput")
    s.add_argument("--cc", default="asc_rl")
    s.set_defaults(func=cmd_objective)

    s = sub.add_parser("interval-sweep", parents=[common], help="vary the updating interval")
    s.add_argument("--objective", default="throughput")
    s.add_argument("--intervals", type=int, nargs="+", default=list(scenarios.DEFAULT_INTERVALS))
    s.set_defaults(func=cmd_interval_sweep)

    s = sub.add_parser("robustness", parents=[common], help="2 -> 1 -> 4 -> 1 Mbps bottleneck")
    s.add_argument("--cc", default="asc_rl")
    s.add_argument("--phase-steps", type=int, default=10_000)
    s.set_defaults(func=cmd_robustness)

    s = sub.add_parser("frm", parents=[common], help="objective transition, FRM vs scratch")
    s.add_argument("--transition", choices=sorted(scenarios.FRM_TRANSITIONS), default="latency-throughput")
    s.add_argument("--transition-step", type=int, default=10_000)
    s.add_argument("--window", type=int, default=10_000)
    s.set_defaults(func=cmd_frm)

    s = sub.add_parser("fairness", parents=[common], help="Jain index per objective")
    s.set_defaults(func=cmd_fairness)

    s = sub.add_parser("baseline", parents=[common], help="loss-based CC on the same scenario")
    s.add_argument("--ccs", nargs="+", default=["newreno", "cubic"])
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = base_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows = args.func(args, cfg)
    print(json.dumps(rows, indent=2, default=str))
    return 0
