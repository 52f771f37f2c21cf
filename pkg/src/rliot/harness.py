"""Experiment driver: seeded multi-run training, tuning, the path oracle and reports."""

from __future__ import annotations

import json
import logging
import platform
import random
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .device_sim import BulbSimulator, load_profile
from .discoverer import split_address
from .env import EVENTS, EnvSession, GoalSpec, load_goal, state_label
from .metrics import RunSeries, aggregate, cumulative_csv, first_positive, per_episode_csv
from .protocol import MessageDictionary, load_dictionary
from .rl_core import (
    ALGORITHMS,
    ConfigurationError,
    EpisodeFailed,
    EpisodeLog,
    HyperParams,
    QTable,
    TraceTable,
    read_logs,
    run_episode,
)
from .socket_api import LocalClient, TcpClient, TransportError

log = logging.getLogger(__name__)

INPROC, TCP = "inproc", "tcp"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    goal: str = "goal1"
    dictionary: Optional[str] = None
    algorithm: str = "qlearning"
    hyper: HyperParams = field(default_factory=HyperParams)
    n_episodes: int = 50
    n_runs: int = 10
    seed: int = 0
    # "host:port" of a real device; None spawns one simulator per run
    device: Optional[str] = None
    spawn: str = INPROC
    profile: Optional[str] = None
    pacing: float = 0.0
    # greedy evaluation passes run after these episodes (the last one is always included)
    eval_after: tuple[int, ...] = ()
    workers: int = 1
    out: str = "out"

    def __post_init__(self):
        if self.n_episodes < 1 or self.n_runs < 1:
            raise ConfigurationError("n_episodes and n_runs must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        if self.spawn not in (INPROC, TCP):
            raise ConfigurationError(f"spawn must be {INPROC!r} or {TCP!r}")
        if self.device is not None:
            split_address(self.device)
        if self.pacing < 0:
            raise ConfigurationError("pacing must be >= 0")
        self.eval_after = tuple(sorted({int(e) for e in self.eval_after if 1 <= int(e) <= self.n_episodes}))

    @property
    def eval_points(self) -> tuple[int, ...]:
        return tuple(sorted({*self.eval_after, self.n_episodes}))

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["hyper"] = self.hyper.to_json()
        obj["eval_after"] = list(self.eval_after)
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        hp = obj.pop("hyper", obj.pop("hyperparams", {}))
        if "eval_after" in obj:
            obj["eval_after"] = tuple(obj["eval_after"])
        return cls(hyper=HyperParams.from_json(hp), **obj)


@dataclass
class SweepPlan:
    # tuned one at a time, in this order
    parameters: list[tuple[str, list[float]]]
    runs: int = 5
    window: int = 10
    base: HyperParams = field(default_factory=lambda: HyperParams(epsilon=0.6, alpha=0.05, gamma=0.95))

    def __post_init__(self):
        if not self.parameters:
            raise ConfigurationError("sweep plan is empty")
        names = [n for n, _ in self.parameters]
        if len(set(names)) != len(names):
            raise ConfigurationError("a parameter is listed twice")
        for name, values in self.parameters:
            if name not in ("epsilon", "alpha", "gamma", "lam"):
                raise ConfigurationError(f"cannot tune {name!r}")
            if not values:
                raise ConfigurationError(f"no candidates for {name}")
        if self.runs < 1 or self.window < 1:
            raise ConfigurationError("runs and window must be >= 1")

    @classmethod
    def from_json(cls, obj: dict) -> "SweepPlan":
        params = []
        for entry in obj["parameters"]:
            name = "lam" if entry["name"] == "lambda" else entry["name"]
            params.append((name, [float(v) for v in entry["values"]]))
        base = HyperParams.from_json(obj["base"]) if "base" in obj else HyperParams(0.6, 0.05, 0.95)
        return cls(params, int(obj.get("runs", 5)), int(obj.get("window", 10)), base)


DEFAULT_GRID = [
    ("epsilon", [0.1, 0.2, 0.4, 0.6, 0.8]),
    ("alpha", [0.01, 0.05, 0.1, 0.3]),
    ("gamma", [0.35, 0.55, 0.75, 0.95]),
]
LAMBDA_GRID = ("lam", [0.1, 0.5, 0.9])


def run_seeds(seed: int, n: int) -> list[int]:
    """Disjoint, reproducible per-run seeds."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

@dataclass
class Evaluation:
    after_episode: int
    reward: int
    steps: int
    terminal: str


@dataclass
class RunResult:
    run_id: int
    seed: int
    logs: list[EpisodeLog]
    qtable: QTable
    evaluations: list[Evaluation]
    commands_sent: int
    wall_clock: float
    aborted: list[int] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def series(self) -> RunSeries:
        return RunSeries.from_logs(self.run_id, self.logs)


def _open_device(cfg: ExperimentConfig):
    """(client, resetter, simulator) for one run."""
    if cfg.device is not None:
        host, port = split_address(cfg.device)
        return TcpClient(host, port, pacing=cfg.pacing), None, None
    sim = BulbSimulator(load_profile(cfg.profile), rate_limit=False)
    if cfg.spawn == TCP:
        host, port = sim.serve("127.0.0.1", 0)
        return TcpClient(host, port, pacing=cfg.pacing), sim.reset_device, sim
    return LocalClient(sim), sim.reset_device, sim


def evaluate(session: EnvSession, Q: QTable, hp: HyperParams, algorithm: str, rng) -> EpisodeLog:
    """One greedy pass with learning switched off."""
    _, _, ev = run_episode(session, Q, TraceTable(Q), hp, algorithm, rng, epsilon=0.0, learn=False)
    return ev


def run_single(cfg: ExperimentConfig, run_id: int, seed: int) -> RunResult:
    goal = load_goal(cfg.goal)
    dictionary = load_dictionary(cfg.dictionary)
    client, resetter, sim = _open_device(cfg)
    session = EnvSession(client, goal, dictionary, resetter)
    Q = QTable(goal.state_labels(), dictionary.action_labels)
    e = TraceTable(Q)
    rng = random.Random(seed)
    logs, evals, aborted = [], [], []
    error = None
    start = time.perf_counter()
    try:
        for ep in range(1, cfg.n_episodes + 1):
            try:
                Q, e, ep_log = run_episode(session, Q, e, cfg.hyper, cfg.algorithm, rng, ep)
            except EpisodeFailed as exc:
                ep_log = exc.log
                aborted.append(ep)
                log.warning("run %d: %s", run_id, exc)
            logs.append(ep_log)
            if ep in cfg.eval_points:
                ev = evaluate(session, Q, cfg.hyper, cfg.algorithm, random.Random(f"{seed}:eval:{ep}"))
                evals.append(Evaluation(ep, ev.total_reward, ev.length, ev.terminal))
    except (TransportError, EpisodeFailed) as exc:
        error = str(exc)
        log.error("run %d stopped: %s", run_id, exc)
    finally:
        client.close()
        if sim is not None:
            sim.stop()
    return RunResult(
        run_id, seed, logs, Q, evals, client.sent, time.perf_counter() - start, aborted, error,
    )


def _run_star(args):
    return run_single(*args)


def execute(cfg: ExperimentConfig) -> list[RunResult]:
    """All runs of ``cfg``, in run order. Results do not depend on ``workers``."""
    seeds = run_seeds(cfg.seed, cfg.n_runs)
    jobs = [(cfg, k, s) for k, s in enumerate(seeds)]
    if cfg.workers > 1 and cfg.n_runs > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_run_star, jobs))
    return [run_single(*j) for j in jobs]


def _versions() -> dict:
    return {"rliot": __version__, "python": platform.python_version(), "numpy": np.__version__}


def _artifact_dir(root: Path, cfg: ExperimentConfig, goal: GoalSpec) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}_{goal.name}_{cfg.algorithm}"
    out, k = base, 1
    while out.exists():
        k += 1
        out = Path(f"{base}_{k}")
    out.mkdir(parents=True)
    return out


def write_artifacts(cfg: ExperimentConfig, results: Sequence[RunResult], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in results:
        rdir = out_dir / f"run_{res.run_id:02d}"
        rdir.mkdir(exist_ok=True)
        (rdir / "log.jsonl").write_text("".join(lg.to_jsonl() for lg in res.logs), "utf-8")
        res.qtable.save(rdir / "qtable.csv")
    runs = [r.series for r in results]
    if all(s.rewards for s in runs):
        agg = aggregate(runs, w=10)
        (out_dir / "reward_per_episode.csv").write_text(per_episode_csv(runs, agg, "reward"), "utf-8")
        (out_dir / "steps_per_episode.csv").write_text(per_episode_csv(runs, agg, "steps"), "utf-8")
        (out_dir / "cumulative_vs_actions.csv").write_text(cumulative_csv(runs, agg), "utf-8")
    lines = ["run,after_episode,reward,steps,terminal"]
    for res in results:
        lines += [f"{res.run_id},{e.after_episode},{e.reward},{e.steps},{e.terminal}" for e in res.evaluations]
    (out_dir / "evaluation.csv").write_text("\n".join(lines) + "\n", "utf-8")
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": cfg.to_json(),
        "versions": _versions(),
        "runs": [
            {
                "run": r.run_id,
                "seed": r.seed,
                "episodes": len(r.logs),
                "aborted_episodes": r.aborted,
                "error": r.error,
                "commands_sent": r.commands_sent,
                "actions": s.total_actions,
                "wall_clock": round(r.wall_clock, 3),
                "first_positive": first_positive(s),
                "final_evaluation": asdict(r.evaluations[-1]) if r.evaluations else None,
            }
            for r, s in zip(results, runs)
        ],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
    return out_dir


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> Path:
    """Train, evaluate and write a complete artifact directory."""
    goal = load_goal(cfg.goal)
    target = Path(out_dir) if out_dir is not None else _artifact_dir(Path(cfg.out), cfg, goal)
    results = execute(cfg)
    if all(r.error is not None and not r.logs for r in results):
        raise TransportError(f"device unreachable: {results[0].error}")
    return write_artifacts(cfg, results, target)


def rerun_manifest(manifest_path: str | Path, out_dir: str | Path) -> Path:
    manifest = json.loads(Path(manifest_path).read_text("utf-8"))
    return run_experiment(ExperimentConfig.from_json(manifest["config"]), out_dir)


# ---------------------------------------------------------------------------
# Tuning
# ---------------------------------------------------------------------------

def final_window_score(results: Sequence[RunResult], window: int) -> float:
    scores = []
    for r in results:
        rewards = r.series.rewards
        if rewards:
            scores.append(float(np.mean(rewards[-window:])))
    return float(np.mean(scores)) if scores else float("-inf")


@dataclass
class CandidateReport:
    parameter: str
    value: float
    score: float
    curve: list[float]


def tune(plan: SweepPlan, cfg: ExperimentConfig) -> tuple[HyperParams, list[CandidateReport]]:
    """Greedy coordinate search: fix each parameter in turn at its best candidate.

    A parameter with a single candidate is set without running anything. Ties
    go to the lowest candidate value.
    """
    current = plan.base
    report: list[CandidateReport] = []
    for name, values in plan.parameters:
        if len(values) == 1:
            current = replace(current, **{name: values[0]})
            continue
        scored = []
        for v in values:
            hp = replace(current, **{name: v})
            trial = replace(cfg, hyper=hp, n_runs=plan.runs, eval_after=(), workers=cfg.workers)
            results = execute(trial)
            runs = [r.series for r in results]
            curve = aggregate(runs).mean_reward if all(s.rewards for s in runs) else []
            score = final_window_score(results, plan.window)
            report.append(CandidateReport(name, v, score, curve))
            scored.append((score, v))
            log.info("tune %s=%g -> %.2f", name, v, score)
        best = max(s for s, _ in scored)
        winners = sorted(v for s, v in scored if s == best)
        if len(winners) > 1:
            log.info("tie on %s between %s; taking %g", name, winners, winners[0])
        current = replace(current, **{name: winners[0]})
    return current, report


# ---------------------------------------------------------------------------
# Optimal path oracle
# ---------------------------------------------------------------------------

@dataclass
class OracleResult:
    reachable: bool
    length: Optional[int] = None
    total_reward: Optional[int] = None
    ordered: Optional[bool] = None
    # each path is a tuple of per-step event tuples
    paths: list[tuple[tuple[str, ...], ...]] = field(default_factory=list)
    labels: list[tuple[str, ...]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "reachable": self.reachable,
            "length": self.length,
            "total_reward": self.total_reward,
            "ordered": self.ordered,
            "paths": [[list(step) for step in p] for p in self.paths],
            "labels": [list(l) for l in self.labels],
        }


@dataclass(frozen=True)
class _Node:
    power: str
    changed: frozenset
    events: tuple[str, ...]


def _edges(goal: GoalSpec, dictionary: MessageDictionary, power: str) -> set[tuple[str, ...]]:
    """Distinct tracked event sets reachable in one command from ``power``."""
    tracked = set(goal.tracked_attributes)
    rank = {e: i for i, e in enumerate(EVENTS)}
    out = set()
    for action in dictionary.actions:
        m = action.method
        if not m.expected_supported:
            continue
        for eff in m.effects:
            if eff.action is not None and eff.action != action.label:
                continue
            if eff.requires is not None and eff.requires != power:
                continue
            evs = [
                e for e in eff.events
                if (e in ("power_on", "power_off") and "power" in tracked) or e in tracked
            ]
            if evs:
                out.add(tuple(sorted(evs, key=rank.get)))
    return out


def _apply(goal: GoalSpec, node: _Node, step: tuple[str, ...]) -> _Node:
    power = node.power
    changed = set(node.changed)
    events = list(node.events)
    for e in step:
        if e == "power_on":
            power = "on"
        elif e == "power_off":
            power = "off"
        else:
            changed.add(e)
        if e not in events:
            events.append(e)
    if power != goal.initial.power:
        changed.add("power")
    else:
        changed.discard("power")
    return _Node(power, frozenset(changed), tuple(events))


def _order_ok(goal: GoalSpec, events: tuple[str, ...]) -> bool:
    if goal.required_order is None:
        return True
    return events == tuple(goal.required_order[: len(events)])


def _judge(goal: GoalSpec, node: _Node) -> tuple[str, int]:
    """('success'|'fail'|'open', terminal bonus)."""
    if goal.success.holds(node.power, node.changed, node.events):
        if set(goal.constant) & node.changed:
            return "fail", goal.fail_reward
        if _order_ok(goal, node.events):
            return "success", goal.success_reward
        if goal.unordered_success_reward is None:
            return "fail", goal.fail_reward
        return "success", int(goal.unordered_success_reward)
    if any(f.holds(node.power, node.changed, node.events) for f in goal.fail):
        return "fail", goal.fail_reward
    return "open", 0


def oracle_optimal_path(goal: GoalSpec, dictionary: MessageDictionary) -> OracleResult:
    """Best-return successful event sequences over the abstract machine.

    Breadth-first over (power, changed, first-change events) using the
    dictionary's effect hints; each step costs the step penalty. Returns every
    path that attains the maximal total reward, and their common length.
    """
    start = _Node(goal.initial.power, frozenset(), ())
    frontier: dict[_Node, list[tuple]] = {start: [()]}
    seen = {start}
    best: Optional[int] = None
    winners: list[tuple[int, tuple, _Node]] = []
    max_bonus = max(goal.success_reward, goal.unordered_success_reward or 0)
    depth = 0
    while frontier and depth < goal.t_max:
        depth += 1
        # nothing found deeper can beat what we already have
        if best is not None and max_bonus + goal.step_penalty * depth < best:
            break
        nxt: dict[_Node, list[tuple]] = {}
        for node, paths in frontier.items():
            for step in sorted(_edges(goal, dictionary, node.power)):
                child = _apply(goal, node, step)
                if child == node:
                    continue
                kind, bonus = _judge(goal, child)
                if kind == "fail":
                    continue
                if kind == "success":
                    ret = bonus + goal.step_penalty * depth
                    if best is None or ret > best:
                        best, winners = ret, []
                    if ret == best:
                        winners += [(depth, p + (step,), child) for p in paths]
                    continue
                if child in seen and child not in nxt:
                    continue
                seen.add(child)
                nxt.setdefault(child, []).extend(p + (step,) for p in paths)
        frontier = nxt
    if best is None:
        return OracleResult(False)
    winners.sort(key=lambda w: w[1])
    paths = [w[1] for w in winners]
    labels = [_path_labels(goal, p) for p in paths]
    ordered = all(_order_ok(goal, w[2].events) for w in winners)
    return OracleResult(True, winners[0][0], best, ordered, paths, labels)


def _path_labels(goal: GoalSpec, path: tuple[tuple[str, ...], ...]) -> tuple[str, ...]:
    node = _Node(goal.initial.power, frozenset(), ())
    out = [state_label(node.power, node.changed, True, goal.tracked_attributes)]
    for step in path:
        node = _apply(goal, node, step)
        out.append(state_label(node.power, node.changed, _order_ok(goal, node.events), goal.tracked_attributes))
    return tuple(out)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def export_heatmap(qtable: str | Path | QTable, first_states: Sequence[str] = ()) -> str:
    """Q-table CSV reordered for display.

    Rows listed in ``first_states`` come first in that order, then the rest in
    file order; columns are sorted by their maximum, ascending (stable).
    """
    Q = qtable if isinstance(qtable, QTable) else QTable.load(qtable)
    lead = [s for s in dict.fromkeys(first_states) if s in Q.states]
    rows = lead + [s for s in Q.states if s not in lead]
    col_max = Q.values.max(axis=0) if Q.states else np.zeros(len(Q.actions))
    cols = sorted(range(len(Q.actions)), key=lambda j: col_max[j])
    values = Q.values[[Q.si(s) for s in rows]][:, cols] if rows else np.zeros((0, len(cols)))
    return QTable(rows, [Q.actions[j] for j in cols], values).to_csv()


def optimal_states(goal: GoalSpec, dictionary: MessageDictionary) -> list[str]:
    res = oracle_optimal_path(goal, dictionary)
    if not res.reachable:
        return []
    return list(dict.fromkeys(l for labels in res.labels for l in labels))


def _experiment_dirs(root: Path) -> list[Path]:
    if (root / "manifest.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/manifest.json"))


def cost_report(root: str | Path) -> dict:
    """Commands-to-positive-reward summary per algorithm, over all experiments under ``root``."""
    by_alg: dict[str, dict] = {}
    for d in _experiment_dirs(Path(root)):
        manifest = json.loads((d / "manifest.json").read_text("utf-8"))
        alg = manifest["config"]["algorithm"]
        entry = by_alg.setdefault(alg, {"experiments": [], "crossovers": [], "final_c": [], "commands_sent": 0, "actions": 0})
        entry["experiments"].append(d.name)
        for run in manifest["runs"]:
            rdir = d / f"run_{run['run']:02d}"
            logs = read_logs((rdir / "log.jsonl").read_text("utf-8").splitlines())
            s = RunSeries.from_logs(run["run"], logs)
            entry["crossovers"].append(first_positive(s))
            entry["final_c"].append(s.prefix()[-1])
            entry["commands_sent"] += run["commands_sent"]
            entry["actions"] += s.total_actions
    out = {}
    for alg, e in sorted(by_alg.items()):
        crossed = [c for c in e["crossovers"] if c is not None]
        out[alg] = {
            "experiments": e["experiments"],
            "runs": len(e["crossovers"]),
            "first_positive": e["crossovers"],
            "mean_first_positive": float(np.mean(crossed)) if crossed else None,
            "median_first_positive": float(statistics.median(crossed)) if crossed else None,
            "runs_never_positive": len(e["crossovers"]) - len(crossed),
            "mean_final_c": float(np.mean(e["final_c"])) if e["final_c"] else None,
            "actions": e["actions"],
            "commands_sent": e["commands_sent"],
        }
    return out

