"""Tabular Q-learning, SARSA, Watkins Q(lambda) and SARSA(lambda)."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .env import NONE, SUCCESS, FAIL, EpisodeAborted, is_terminal

QLEARNING = "qlearning"
SARSA = "sarsa"
QLAMBDA = "qlambda"
SARSALAMBDA = "sarsalambda"
ALGORITHMS = (QLEARNING, SARSA, QLAMBDA, SARSALAMBDA)
TRACE_ALGORITHMS = (QLAMBDA, SARSALAMBDA)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    epsilon: float = 0.2
    alpha: float = 0.1
    gamma: float = 0.55
    lam: float = 0.0
    epsilon_decay: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon {self.epsilon} not in [0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha {self.alpha} not in (0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"gamma {self.gamma} not in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda {self.lam} not in [0, 1]")
        if self.epsilon_decay is not None and not 0.0 < self.epsilon_decay <= 1.0:
            raise ConfigurationError(f"epsilon_decay {self.epsilon_decay} not in (0, 1]")

    def epsilon_at(self, episode: int) -> float:
        """Exploration rate for 1-based ``episode``."""
        if self.epsilon_decay is None:
            return self.epsilon
        return self.epsilon * self.epsilon_decay ** (episode - 1)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "HyperParams":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        return cls(**obj)


class QTable:
    """Dense state-action value matrix with labelled rows and columns."""

    def __init__(self, states: Sequence[str], actions: Sequence[str], values: np.ndarray | None = None):
        self.states = list(states)
        self.actions = list(actions)
        self._s = {s: i for i, s in enumerate(self.states)}
        self._a = {a: i for i, a in enumerate(self.actions)}
        if len(self._s) != len(self.states) or len(self._a) != len(self.actions):
            raise ValueError("duplicate state or action label")
        shape = (len(self.states), len(self.actions))
        if values is None:
            values = np.zeros(shape)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} != {shape}")

    def si(self, state: str) -> int:
        return self._s[state]

    def ai(self, action: str) -> int:
        return self._a[action]

    def __getitem__(self, key: tuple[str, str]) -> float:
        s, a = key
        return float(self.values[self._s[s], self._a[a]])

    def row(self, state: str) -> np.ndarray:
        return self.values[self._s[state]]

    def copy(self) -> "QTable":
        return QTable(self.states, self.actions, self.values.copy())

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["state", *self.actions])
        for s, row in zip(self.states, self.values):
            w.writerow([s, *(repr(float(v)) for v in row)])
        return out.getvalue()

    def save(self, path: str | Path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "QTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or not rows[0] or rows[0][0] != "state":
            raise ValueError("not a QTable CSV: missing 'state' header")
        actions = rows[0][1:]
        states, values = [], []
        for r in rows[1:]:
            if not r:
                continue
            if len(r) != len(actions) + 1:
                raise ValueError(f"row {r[0]!r} has {len(r) - 1} values, expected {len(actions)}")
            states.append(r[0])
            values.append([float(v) for v in r[1:]])
        return cls(states, actions, np.array(values, dtype=np.float64).reshape(len(states), len(actions)))

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


class TraceTable:
    def __init__(self, like: QTable):
        self.values = np.zeros_like(like.values)

    def reset(self):
        self.values[:] = 0.0


# ---------------------------------------------------------------------------
# Policy and update rules
# ---------------------------------------------------------------------------

def select_action(Q: QTable, s: str, epsilon: float, rng) -> tuple[str, bool]:
    """Epsilon-greedy choice; returns ``(action, greedy)``.

    Ties at the maximum are broken uniformly with ``rng``. A random draw that
    happens to hit the argmax still counts as exploratory.
    """
    n = len(Q.actions)
    if rng.random() < epsilon:
        return Q.actions[rng.randrange(n)], False
    row = Q.row(s)
    best = np.flatnonzero(row == row.max())
    return Q.actions[int(best[rng.randrange(len(best))])], True


def q_learning_update(Q: QTable, s, a, r, s2, hp: HyperParams, terminal: bool = False) -> QTable:
    i, j = Q.si(s), Q.ai(a)
    target = r if terminal else r + hp.gamma * Q.row(s2).max()
    Q.values[i, j] += hp.alpha * (target - Q.values[i, j])
    return Q


def sarsa_update(Q: QTable, s, a, r, s2, a2, hp: HyperParams, terminal: bool = False) -> QTable:
    i, j = Q.si(s), Q.ai(a)
    target = r if terminal else r + hp.gamma * Q.values[Q.si(s2), Q.ai(a2)]
    Q.values[i, j] += hp.alpha * (target - Q.values[i, j])
    return Q


def sarsa_lambda_update(
    Q: QTable, e: TraceTable, s, a, r, s2, a2, hp: HyperParams, terminal: bool = False
) -> tuple[QTable, TraceTable]:
    i, j = Q.si(s), Q.ai(a)
    nxt = 0.0 if terminal else Q.values[Q.si(s2), Q.ai(a2)]
    delta = r + hp.gamma * nxt - Q.values[i, j]
    e.values[i, j] += 1.0
    Q.values += hp.alpha * delta * e.values
    e.values *= hp.gamma * hp.lam
    return Q, e


def watkins_q_lambda_update(
    Q: QTable, e: TraceTable, s, a, r, s2, a2, greedy2: bool, hp: HyperParams, terminal: bool = False
) -> tuple[QTable, TraceTable]:
    i, j = Q.si(s), Q.ai(a)
    nxt = 0.0 if terminal else Q.row(s2).max()
    delta = r + hp.gamma * nxt - Q.values[i, j]
    e.values[i, j] += 1.0
    Q.values += hp.alpha * delta * e.values
    if greedy2 and not terminal:
        e.values *= hp.gamma * hp.lam
    else:
        e.reset()
    return Q, e


def apply_update(algorithm: str, Q: QTable, e: TraceTable, tr: "Transition", a2, g2, hp: HyperParams):
    done = tr.done
    if algorithm == QLEARNING:
        q_learning_update(Q, tr.s, tr.a, tr.r, tr.s_next, hp, done)
    elif algorithm == SARSA:
        sarsa_update(Q, tr.s, tr.a, tr.r, tr.s_next, a2, hp, done)
    elif algorithm == SARSALAMBDA:
        sarsa_lambda_update(Q, e, tr.s, tr.a, tr.r, tr.s_next, a2, hp, done)
    elif algorithm == QLAMBDA:
        watkins_q_lambda_update(Q, e, tr.s, tr.a, tr.r, tr.s_next, a2, bool(g2), hp, done)
    else:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}")


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class Transition:
    s: str
    a: str
    r: int
    s_next: str
    greedy: bool
    failed: bool
    done: bool = False


@dataclass
class EpisodeLog:
    episode: int
    transitions: list[Transition] = field(default_factory=list)
    terminal: str = NONE
    duration: float = 0.0
    valid: bool = True
    learned: bool = True
    # action chosen at the final state of a timed-out episode (used to bootstrap)
    bootstrap_action: Optional[str] = None
    bootstrap_greedy: Optional[bool] = None

    @property
    def total_reward(self) -> int:
        return sum(t.r for t in self.transitions)

    @property
    def length(self) -> int:
        return len(self.transitions)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"episode": self.episode, "t": k + 1, **asdict(tr)}) for k, tr in enumerate(self.transitions)]
        lines.append(json.dumps({
            "episode": self.episode, "end": self.terminal, "valid": self.valid, "learned": self.learned,
            "bootstrap_action": self.bootstrap_action, "bootstrap_greedy": self.bootstrap_greedy,
            "duration": round(self.duration, 6),
        }))
        return "\n".join(lines) + "\n"


def read_logs(lines: Iterable[str]) -> list[EpisodeLog]:
    logs: dict[int, EpisodeLog] = {}
    order = []
    for line in lines:
        if not line.strip():
            continue
        obj = json.loads(line)
        ep = obj["episode"]
        if ep not in logs:
            logs[ep] = EpisodeLog(ep)
            order.append(ep)
        log = logs[ep]
        if "end" in obj:
            log.terminal = obj["end"]
            log.valid = obj["valid"]
            log.learned = obj.get("learned", True)
            log.bootstrap_action = obj["bootstrap_action"]
            log.bootstrap_greedy = obj["bootstrap_greedy"]
            log.duration = obj["duration"]
        else:
            log.transitions.append(Transition(
                obj["s"], obj["a"], obj["r"], obj["s_next"], obj["greedy"], obj["failed"], obj["done"]))
    return [logs[k] for k in order]


class EpisodeFailed(Exception):
    """Raised when the device link drops mid-episode; carries the partial log."""

    def __init__(self, log: EpisodeLog, cause: Exception):
        super().__init__(f"episode {log.episode} aborted: {cause}")
        self.log = log


def run_episode(
    session,
    Q: QTable,
    e: TraceTable,
    hp: HyperParams,
    algorithm: str,
    rng,
    episode: int = 1,
    epsilon: Optional[float] = None,
    learn: bool = True,
) -> tuple[QTable, TraceTable, EpisodeLog]:
    """Run one episode, updating ``Q`` in place when ``learn`` is set.

    With ``learn=False`` and ``epsilon=0`` this is a greedy evaluation pass.
    """
    if not Q.actions:
        raise ConfigurationError("the message dictionary is empty: no actions to learn")
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}")
    eps = hp.epsilon_at(episode) if epsilon is None else epsilon
    log = EpisodeLog(episode, learned=learn)
    start = time.perf_counter()
    e.reset()
    goal = session.goal
    try:
        s = session.reset().label
        a, g = select_action(Q, s, eps, rng)
        t = 0
        while True:
            out = session.step(a, rng)
            t += 1
            kind = is_terminal(out.next, t, goal)
            done = kind in (SUCCESS, FAIL)
            tr = Transition(s, a, out.reward, out.next.label, g, out.command_failed, done)
            log.transitions.append(tr)
            a2 = g2 = None
            if algorithm != QLEARNING and not done:
                a2, g2 = select_action(Q, tr.s_next, eps, rng)
            if learn:
                apply_update(algorithm, Q, e, tr, a2, g2, hp)
            if kind != NONE:
                log.terminal = kind
                if not done and algorithm != QLEARNING:
                    log.bootstrap_action, log.bootstrap_greedy = a2, g2
                break
            if algorithm == QLEARNING:
                a2, g2 = select_action(Q, tr.s_next, eps, rng)
            s, a, g = tr.s_next, a2, g2
    except EpisodeAborted as exc:
        if log.transitions and algorithm != QLEARNING:
            # the pending action already fed the last update
            log.bootstrap_action, log.bootstrap_greedy = a, g
        log.valid = False
        log.terminal = "aborted"
        log.duration = time.perf_counter() - start
        raise EpisodeFailed(log, exc) from exc
    log.duration = time.perf_counter() - start
    return Q, e, log


def replay(logs: Iterable[EpisodeLog], Q: QTable, hp: HyperParams, algorithm: str) -> QTable:
    """Recompute every update recorded in ``logs`` on top of ``Q``."""
    e = TraceTable(Q)
    for log in logs:
        if not log.learned:
            continue
        e.reset()
        trs = log.transitions
        for k, tr in enumerate(trs):
            if k + 1 < len(trs):
                a2, g2 = trs[k + 1].a, trs[k + 1].greedy
            else:
                a2, g2 = log.bootstrap_action, log.bootstrap_greedy
            apply_update(algorithm, Q, e, tr, a2, g2, hp)
    return Q
