"""Greedy sweep for Q-learning on Goal 2, then lambda for the trace learners."""

import argparse
from dataclasses import replace

from rliot.harness import DEFAULT_GRID, LAMBDA_GRID, ExperimentConfig, SweepPlan, tune


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ExperimentConfig(goal="goal2", n_episodes=args.episodes, seed=args.seed)
    best, report = tune(SweepPlan(DEFAULT_GRID, runs=args.runs), cfg)
    for c in report:
        print(f"qlearning  {c.parameter:8s} {c.value:<5} score {c.score:8.2f}")
    print("selected", best.to_json())
    for alg in ("qlambda", "sarsalambda"):
        lam_best, lam_report = tune(SweepPlan([LAMBDA_GRID], runs=args.runs, base=replace(best, lam=0.9)),
                                    replace(cfg, algorithm=alg))
        for c in lam_report:
            print(f"{alg:10s} lambda   {c.value:<5} score {c.score:8.2f}")
        print(f"{alg} selected lambda {lam_best.lam}")


if __name__ == "__main__":
    main()
