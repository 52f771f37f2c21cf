"""The ``rliot`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import discoverer, harness
from .env import load_goal
from .protocol import load_dictionary
from .rl_core import ConfigurationError, HyperParams


def _load_json(path: str) -> dict:
    return json.loads(Path(path).read_text("utf-8"))


def cmd_run(args) -> int:
    cfg = harness.ExperimentConfig.from_json(_load_json(args.config))
    if args.spawn_sim:
        cfg.device = None
    out = harness.run_experiment(cfg, args.out)
    print(out)
    return 0


def cmd_tune(args) -> int:
    doc = _load_json(args.plan)
    plan = harness.SweepPlan.from_json(doc)
    cfg = harness.ExperimentConfig.from_json(doc.get("experiment", {}))
    best, report = harness.tune(plan, cfg)
    out = Path(args.out) if args.out else Path(cfg.out) / f"{time.strftime('%Y%m%d-%H%M%S')}_tune"
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "best": best.to_json(),
        "plan": {"parameters": plan.parameters, "runs": plan.runs, "window": plan.window, "base": plan.base.to_json()},
        "experiment": cfg.to_json(),
        "candidates": [{k: v for k, v in asdict(c).items() if k != "curve"} for c in report],
    }
    (out / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n", "utf-8")
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "value", "episode", "mean_reward"])
        for c in report:
            for i, v in enumerate(c.curve, 1):
                w.writerow([c.parameter, c.value, i, repr(v)])
    print(json.dumps(summary["best"]))
    return 0


def cmd_oracle(args) -> int:
    res = harness.oracle_optimal_path(load_goal(args.goal), load_dictionary(args.dictionary))
    print(json.dumps(res.to_json(), indent=2))
    return 0 if res.reachable else 1


def cmd_heatmap(args) -> int:
    first = []
    if args.goal:
        first = harness.optimal_states(load_goal(args.goal), load_dictionary(args.dictionary))
    text = harness.export_heatmap(args.qtable, first)
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_cost(args) -> int:
    print(json.dumps(harness.cost_report(args.dir), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rliot", description="Learn IoT protocol semantics with tabular RL.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="artifact directory (default: timestamped under the config's out)")
    p.add_argument("--spawn-sim", action="store_true", help="ignore any device address and spawn simulators")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tune", help="greedy one-parameter-at-a-time sweep")
    p.add_argument("--plan", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("oracle", help="best paths over the abstract goal machine")
    p.add_argument("--goal", required=True)
    p.add_argument("--dictionary")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("heatmap", help="reorder a Q-table for display")
    p.add_argument("--qtable", required=True)
    p.add_argument("--goal", help="put this goal's optimal-path states first")
    p.add_argument("--dictionary")
    p.add_argument("--out")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("discover", help="find bulbs on the LAN")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--listen", type=float, default=3.0, metavar="SECS")
    g.add_argument("--probe", metavar="CIDR")
    p.add_argument("--ports", default="55443")
    p.set_defaults(func=discoverer.main)

    p = sub.add_parser("cost", help="commands needed before reward turns positive")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_cost)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"rliot {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
