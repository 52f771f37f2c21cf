"""Goal 2 with all four learners on identical seeds, then the training-cost table."""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from rliot.harness import ExperimentConfig, HyperParams, cost_report, run_experiment

ALGORITHMS = ["qlearning", "sarsa", "qlambda", "sarsalambda"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lam", type=float, default=0.9)
    ap.add_argument("--tcp", action="store_true", help="talk to the simulator over a real socket")
    ap.add_argument("--out", default="out/goal2")
    args = ap.parse_args()

    base = ExperimentConfig(goal="goal2", hyper=HyperParams(0.2, 0.1, 0.55, args.lam), n_episodes=args.episodes,
                            n_runs=args.runs, seed=args.seed, spawn="tcp" if args.tcp else "inproc")
    root = Path(args.out)
    for alg in ALGORITHMS:
        out = run_experiment(replace(base, algorithm=alg), root / alg)
        finals = [r["final_evaluation"]["reward"] for r in json.loads((out / "manifest.json").read_text())["runs"]]
        print(f"{alg:12s} final greedy rewards {finals}")
    print(json.dumps(cost_report(root), indent=2))


if __name__ == "__main__":
    main()
