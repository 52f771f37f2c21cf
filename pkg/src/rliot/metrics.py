"""Episode totals, cumulative reward over commands, and multi-run averages."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


def episode_metrics(log) -> tuple[int, int]:
    """Total reward R(E) and length T(E) of one valid episode."""
    if not log.valid:
        raise MetricsError(f"episode {log.episode} was aborted")
    return sum(t.r for t in log.transitions), len(log.transitions)


@dataclass
class RunSeries:
    run_id: int
    rewards: list[int] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    stream: list[int] = field(default_factory=list)

    def __post_init__(self):
        self._prefix: list[int] | None = None

    @classmethod
    def from_logs(cls, run_id: int, logs) -> "RunSeries":
        series = cls(run_id)
        for log in logs:
            if not log.valid or not log.learned:
                continue
            r, t = episode_metrics(log)
            series.rewards.append(r)
            series.lengths.append(t)
            series.stream.extend(tr.r for tr in log.transitions)
        return series

    @property
    def total_actions(self) -> int:
        return len(self.stream)

    def prefix(self) -> list[int]:
        if self._prefix is None or len(self._prefix) != len(self.stream) + 1:
            self._prefix = [0, *accumulate(self.stream)]
        return self._prefix


def cumulative_reward(series: RunSeries, n_a: int) -> int:
    """C(n_a): reward summed over the first ``n_a`` commands of the run."""
    if not 0 <= n_a <= series.total_actions:
        raise MetricsError(f"n_a={n_a} outside [0, {series.total_actions}]")
    return series.prefix()[n_a]


def first_positive(series: RunSeries) -> int | None:
    """Smallest n_a with C(n_a) > 0, or None if the run never gets there."""
    for n, c in enumerate(series.prefix()):
        if c > 0:
            return n
    return None


def moving_average(values: Sequence[float], w: int) -> list[float]:
    """Trailing mean; entry E averages the last min(w, E) values."""
    if w < 1:
        raise MetricsError("window must be >= 1")
    out, total = [], 0.0
    for i, v in enumerate(values):
        total += v
        if i >= w:
            total -= values[i - w]
        out.append(total / min(w, i + 1))
    return out


def _ragged_mean(rows: Sequence[Sequence[float]]) -> list[float]:
    n = max(len(r) for r in rows)
    out = []
    for i in range(n):
        vals = [r[i] for r in rows if i < len(r)]
        out.append(float(np.mean(vals)))
    return out


@dataclass
class AggregateSeries:
    window: int
    mean_reward: list[float]
    movavg_reward: list[float]
    mean_length: list[float]
    movavg_length: list[float]
    cumulative: list[list[int]]
    mean_cumulative: list[float]
    common_actions: int


def aggregate(runs: Sequence[RunSeries], w: int = 10) -> AggregateSeries:
    if not runs:
        raise MetricsError("no runs to aggregate")
    if any(not r.rewards for r in runs):
        raise MetricsError("every run needs at least one episode")
    runs = sorted(runs, key=lambda r: r.run_id)
    mean_r = _ragged_mean([r.rewards for r in runs])
    mean_t = _ragged_mean([r.lengths for r in runs])
    cum = [r.prefix()[1:] for r in runs]
    return AggregateSeries(
        window=w,
        mean_reward=mean_r,
        movavg_reward=moving_average(mean_r, w),
        mean_length=mean_t,
        movavg_length=moving_average(mean_t, w),
        cumulative=cum,
        mean_cumulative=_ragged_mean(cum),
        common_actions=min(len(c) for c in cum),
    )


def _fmt(x) -> str:
    if x == "":
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def _table(header, columns) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    n = max(len(c) for c in columns)
    for i in range(n):
        w.writerow([_fmt(c[i]) if i < len(c) else "" for c in columns])
    return out.getvalue()


def per_episode_csv(runs: Sequence[RunSeries], agg: AggregateSeries, which: str = "reward") -> str:
    runs = sorted(runs, key=lambda r: r.run_id)
    if which == "reward":
        cols = [r.rewards for r in runs]
        mean, mov = agg.mean_reward, agg.movavg_reward
    else:
        cols = [r.lengths for r in runs]
        mean, mov = agg.mean_length, agg.movavg_length
    episodes = list(range(1, len(mean) + 1))
    header = ["episode", *(f"run_{r.run_id}" for r in runs), "mean", "movavg"]
    return _table(header, [episodes, *cols, mean, mov])


def cumulative_csv(runs: Sequence[RunSeries], agg: AggregateSeries) -> str:
    runs = sorted(runs, key=lambda r: r.run_id)
    n_a = list(range(1, len(agg.mean_cumulative) + 1))
    header = ["n_a", *(f"run_{r.run_id}" for r in runs), "mean"]
    return _table(header, [n_a, *agg.cumulative, agg.mean_cumulative])
