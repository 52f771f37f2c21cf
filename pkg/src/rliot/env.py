"""Goal state machines over a bulb and the episode environment.

Concrete bulb states are condensed into an :class:`AbstractState`: the power
flag, the set of tracked attributes that differ from the episode start, and
whether the first-change events so far follow the goal's required order.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

from .device_sim import BulbState
from .protocol import (
    CommandMessage,
    MessageDictionary,
    ProtocolError,
    ResultMessage,
    sample_params,
)
from .socket_api import TransportError

log = logging.getLogger(__name__)

ATTRIBUTES = ("power", "color", "brightness", "name")
EVENTS = ("power_on", "power_off", "color", "brightness", "name")
_SHORT = {"color": "color", "brightness": "bright", "name": "name"}
FEEDBACK_PROPS = ("power", "bright", "rgb", "ct", "name", "color_mode")

NONE, SUCCESS, FAIL, TIMEOUT = "none", "success", "fail", "timeout"

# step classifications understood by reward()
NORMAL = "normal-step"
ERROR = "command-error"
FAIL_TERMINAL = "fail-terminal"
SUCCESS_ORDERED = "success-ordered"
SUCCESS_UNORDERED = "success-unordered"


class GoalError(ValueError):
    pass


class EpisodeAborted(Exception):
    """The device link failed twice in one step; the episode is discarded."""


def attribute_value(state: BulbState, attr: str):
    if attr == "power":
        return state.power
    if attr == "color":
        return (state.rgb, state.ct)
    if attr == "brightness":
        return state.bright
    if attr == "name":
        return state.name
    raise KeyError(attr)


@dataclass(frozen=True)
class Predicate:
    power: Optional[str] = None
    changed: frozenset = frozenset()
    events: frozenset = frozenset()

    def holds(self, power: str, changed: frozenset, events) -> bool:
        if self.power is not None and power != self.power:
            return False
        return self.changed <= changed and self.events <= set(events)

    @classmethod
    def from_json(cls, obj: dict) -> "Predicate":
        return cls(obj.get("power"), frozenset(obj.get("changed", ())), frozenset(obj.get("events", ())))

    def to_json(self) -> dict:
        out: dict = {}
        if self.power is not None:
            out["power"] = self.power
        if self.changed:
            out["changed"] = sorted(self.changed)
        if self.events:
            out["events"] = sorted(self.events)
        return out


def _predicates(obj) -> tuple[Predicate, ...]:
    if obj is None:
        return ()
    if isinstance(obj, dict):
        obj = [obj]
    return tuple(Predicate.from_json(o) for o in obj)


@dataclass(frozen=True)
class GoalSpec:
    name: str
    tracked_attributes: tuple[str, ...]
    initial: BulbState
    success: Predicate
    # the episode fails when any of these holds (checked after success)
    fail: tuple[Predicate, ...] = ()
    success_reward: int = 205
    unordered_success_reward: Optional[int] = None
    step_penalty: int = -1
    error_penalty: int = -10
    fail_reward: int = 0
    required_order: Optional[tuple[str, ...]] = None
    constant: tuple[str, ...] = ()
    t_max: int = 100

    def __post_init__(self):
        for a in self.tracked_attributes:
            if a not in ATTRIBUTES:
                raise GoalError(f"unknown attribute {a!r}")
        if not (self.success_reward > 0 and self.step_penalty < 0 and self.error_penalty < 0 and self.fail_reward <= 0):
            raise GoalError("rewards need success > 0, negative step/error penalties and fail <= 0")
        if self.required_order is not None:
            if len(set(self.required_order)) != len(self.required_order):
                raise GoalError("required_order lists an event twice")
            if not set(self.required_order) <= set(EVENTS):
                raise GoalError("required_order names an unknown event")
        if not set(self.constant) <= set(self.tracked_attributes):
            raise GoalError("constant attributes must be tracked")
        if self.t_max < 1:
            raise GoalError("t_max must be positive")

    @classmethod
    def from_json(cls, obj: dict) -> "GoalSpec":
        r = obj.get("rewards", {})
        order = obj.get("required_order")
        return cls(
            name=obj.get("name", "goal"),
            tracked_attributes=tuple(obj["tracked_attributes"]),
            initial=BulbState.from_json(obj["initial"]),
            success=Predicate.from_json(obj["success"]),
            fail=_predicates(obj.get("fail")),
            success_reward=int(r.get("success", 205)),
            unordered_success_reward=r.get("unordered_success"),
            step_penalty=int(r.get("step", -1)),
            error_penalty=int(r.get("error", -10)),
            fail_reward=int(r.get("fail", 0)),
            required_order=tuple(order) if order is not None else None,
            constant=tuple(obj.get("constant", ())),
            t_max=int(obj.get("t_max", 100)),
        )

    def state_labels(self) -> list[str]:
        """Every label the abstraction can produce, in a fixed order."""
        others = [a for a in self.tracked_attributes if a != "power"]
        subsets = [
            frozenset(c) for k in range(len(others) + 1) for c in itertools.combinations(others, k)
        ]
        orders = (True, False) if self.required_order else (True,)
        start = self.initial.power
        powers = (start, "off" if start == "on" else "on")
        return [
            state_label(p, ch, ok, self.tracked_attributes)
            for ok in orders
            for ch in subsets
            for p in powers
        ]


def load_goal(source: str | Path) -> GoalSpec:
    """Load a goal file; bare names ``goal1``/``goal2`` resolve to the shipped goals."""
    src = str(source)
    if src in ("goal1", "goal2"):
        text = resources.files("rliot.data").joinpath(f"{src}.json").read_text("utf-8")
    else:
        text = Path(src).read_text("utf-8")
    return GoalSpec.from_json(json.loads(text))


def state_label(power: str, changed: frozenset, order_ok: bool, tracked) -> str:
    parts = ["+" + power]
    parts += ["+" + _SHORT[a] for a in tracked if a != "power" and a in changed]
    return "".join(parts) + ("" if order_ok else "~")


@dataclass(frozen=True)
class AbstractState:
    power: str
    changed: frozenset
    order_ok: bool = True
    terminal: str = NONE
    events: tuple[str, ...] = ()
    label: str = field(default="", compare=False)


def _events(before: BulbState, after: BulbState, tracked) -> list[str]:
    out = []
    for a in tracked:
        if a == "power":
            if before.power != after.power:
                out.append("power_on" if after.power == "on" else "power_off")
        elif attribute_value(before, a) != attribute_value(after, a):
            out.append(a)
    return out


def classify(power: str, changed: frozenset, events, goal: GoalSpec, after: BulbState, initial: BulbState) -> str:
    if goal.success.holds(power, changed, events):
        if any(attribute_value(after, a) != attribute_value(initial, a) for a in goal.constant):
            return FAIL
        return SUCCESS
    if any(f.holds(power, changed, events) for f in goal.fail):
        return FAIL
    return NONE


def abstract(
    before: BulbState,
    after: BulbState,
    episode_initial: BulbState,
    goal: GoalSpec,
    history: tuple[str, ...] = (),
) -> AbstractState:
    """Condense a concrete transition into the goal's abstract state.

    ``history`` holds the first-change events seen earlier in the episode.
    """
    changed = frozenset(
        a for a in goal.tracked_attributes
        if attribute_value(after, a) != attribute_value(episode_initial, a)
    )
    events = list(history)
    for e in _events(before, after, goal.tracked_attributes):
        if e not in events:
            events.append(e)
    order_ok = True
    if goal.required_order is not None:
        order_ok = tuple(events) == tuple(goal.required_order[: len(events)])
    terminal = classify(after.power, changed, events, goal, after, episode_initial)
    return AbstractState(
        power=after.power,
        changed=changed,
        order_ok=order_ok,
        terminal=terminal,
        events=tuple(events),
        label=state_label(after.power, changed, order_ok, goal.tracked_attributes),
    )


def initial_state(goal: GoalSpec) -> AbstractState:
    return abstract(goal.initial, goal.initial, goal.initial, goal, ())


def reward(prev: AbstractState | None, classification: str, goal: GoalSpec) -> int:
    """Reward component for one classification.

    Terminal classifications return only the terminal bonus; a terminal step
    also pays the ordinary step penalty (see :func:`step_reward`).
    """
    if classification == NORMAL:
        return goal.step_penalty
    if classification == ERROR:
        return goal.error_penalty
    if classification == FAIL_TERMINAL:
        return goal.fail_reward
    if classification == SUCCESS_ORDERED:
        return goal.success_reward
    if classification == SUCCESS_UNORDERED:
        if goal.unordered_success_reward is None:
            raise GoalError(f"goal {goal.name!r} defines no unordered success reward")
        return int(goal.unordered_success_reward)
    raise ValueError(f"unknown classification {classification!r}")


def terminal_classification(state: AbstractState, goal: GoalSpec) -> Optional[str]:
    if state.terminal == FAIL:
        return FAIL_TERMINAL
    if state.terminal == SUCCESS:
        if goal.required_order is None or state.order_ok:
            return SUCCESS_ORDERED
        return SUCCESS_UNORDERED
    return None


def step_reward(prev: AbstractState, nxt: AbstractState, command_failed: bool, goal: GoalSpec) -> int:
    if command_failed:
        return reward(prev, ERROR, goal)
    r = reward(prev, NORMAL, goal)
    kind = terminal_classification(nxt, goal)
    if kind is not None:
        r += reward(prev, kind, goal)
    return r


def is_terminal(state: AbstractState, t: int, goal: GoalSpec) -> str:
    if state.terminal != NONE:
        return state.terminal
    if t >= goal.t_max:
        return TIMEOUT
    return NONE


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass
class StepOutcome:
    next: AbstractState
    reward: int
    command_failed: bool
    raw_response: Optional[ResultMessage]
    command: CommandMessage


def simulator_resetter(device) -> Callable[[BulbState], None]:
    return device.reset_device


class EnvSession:
    """One goal-directed episode loop over a single device connection.

    ``client`` is a socket_api client; ``resetter`` restores a concrete state
    between episodes. Without a resetter the session drives the device back
    with ordinary commands, as it would on real hardware.
    """

    def __init__(
        self,
        client,
        goal: GoalSpec,
        dictionary: MessageDictionary,
        resetter: Optional[Callable[[BulbState], object]] = None,
    ):
        self.client = client
        self.goal = goal
        self.dictionary = dictionary
        self.resetter = resetter
        self._next_id = 1
        self.t = 0
        self.state: AbstractState | None = None
        self.concrete: BulbState | None = None

    @property
    def commands_sent(self) -> int:
        return self.client.sent

    def _command(self, method: str, params) -> CommandMessage:
        cmd = CommandMessage(self._next_id, method, tuple(params))
        self._next_id += 1
        return cmd

    def _request(self, cmd: CommandMessage) -> ResultMessage:
        try:
            return self.client.request(cmd)
        except TransportError as exc:
            log.warning("transport failure on id %d, retrying: %s", cmd.id, exc)
        try:
            return self.client.request(cmd)
        except TransportError as exc:
            raise EpisodeAborted(str(exc)) from exc

    def read_state(self) -> BulbState:
        resp = self._request(self._command("get_prop", FEEDBACK_PROPS))
        if not resp.ok or len(resp.values) != len(FEEDBACK_PROPS):
            raise EpisodeAborted(f"feedback query failed: {resp}")
        v = dict(zip(FEEDBACK_PROPS, resp.values))
        return BulbState(
            power=v["power"], bright=int(v["bright"]), rgb=int(v["rgb"]), ct=int(v["ct"]),
            name=v["name"], color_mode=int(v["color_mode"] or 0),
        )

    def _drive_to(self, target: BulbState):
        self._request(self._command("set_power", ["on", "sudden", 0]))
        self._request(self._command("set_ct_abx", [target.ct, "sudden", 0]))
        self._request(self._command("set_rgb", [target.rgb, "sudden", 0]))
        self._request(self._command("set_bright", [target.bright, "sudden", 0]))
        self._request(self._command("set_name", [target.name]))
        self._request(self._command("set_power", [target.power, "sudden", 0]))

    def reset(self) -> AbstractState:
        try:
            if self.resetter is not None:
                self.resetter(self.goal.initial)
            else:
                self._drive_to(self.goal.initial)
            observed = self.read_state()
        except (EpisodeAborted, ProtocolError) as exc:
            raise TransportError(f"device unreachable during reset: {exc}") from exc
        expected = self.goal.initial
        for a in ATTRIBUTES:
            if attribute_value(observed, a) != attribute_value(expected, a):
                raise TransportError(f"device did not reach the initial state ({a} differs)")
        self.concrete = observed
        self.t = 0
        self.state = initial_state(self.goal)
        return self.state

    def step(self, action_label: str, rng) -> StepOutcome:
        if self.state is None or self.concrete is None:
            raise RuntimeError("reset() before step()")
        if is_terminal(self.state, self.t, self.goal) != NONE:
            raise RuntimeError("episode already finished")
        action = self.dictionary.action(action_label)
        params = sample_params(action.method, rng, action.fixed)
        cmd = self._command(action.method.name, params)
        try:
            resp: Optional[ResultMessage] = self._request(cmd)
        except ProtocolError as exc:
            log.debug("undecodable response to %s: %s", cmd.method, exc)
            resp = None
        failed = resp is None or not resp.ok
        prev = self.state
        self.t += 1
        after = self.read_state()
        if failed:
            nxt = prev
        else:
            nxt = abstract(self.concrete, after, self.goal.initial, self.goal, prev.events)
        self.concrete = after
        r = step_reward(prev, nxt, failed, self.goal)
        self.state = nxt
        return StepOutcome(nxt, r, failed, resp, cmd)
