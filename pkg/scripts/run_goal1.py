"""Goal 1 with Q-learning: learning curve plus greedy checkpoints."""

import argparse

from rliot.harness import ExperimentConfig, HyperParams, run_experiment
from rliot.metrics import aggregate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=10)
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    cfg = ExperimentConfig(goal="goal1", hyper=HyperParams(0.2, 0.1, 0.55), n_episodes=args.episodes,
                           n_runs=args.runs, seed=args.seed, eval_after=(10, 20, 30), out=args.out)
    out = run_experiment(cfg)
    print(f"artifacts: {out}")
    with open(out / "evaluation.csv") as fh:
        print(fh.read())


if __name__ == "__main__":
    main()
