"""Message dictionary and line-framed JSON codec for Yeelight-style devices.

Commands go out as ``{"id": N, "method": M, "params": [...]}\\r\\n`` and the
device answers with either ``{"id": N, "result": [...]}`` or
``{"id": N, "error": {"code": C, "message": M}}``.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence, Union

TERMINATOR = b"\r\n"

_NAME_RE = re.compile(r"^[a-z_]+$")
# Characters used when sampling free-string parameters.
_STRING_ALPHABET = string.ascii_lowercase + string.digits

Param = Union[int, str]


class ProtocolError(Exception):
    """Base class for wire-level failures."""


class CodecError(ProtocolError):
    """A message could not be encoded."""


class FramingError(ProtocolError):
    """A received line is not a JSON object."""


class ProtocolViolation(ProtocolError):
    """A JSON object that is neither a result nor an error."""


class DictionaryError(ValueError):
    """Invalid message dictionary content."""


# ---------------------------------------------------------------------------
# Dictionary types
# ---------------------------------------------------------------------------

INT_RANGE = "int"
ENUM = "enum"
STRING = "string"
_KINDS = (INT_RANGE, ENUM, STRING)


@dataclass(frozen=True)
class ParamSpec:
    kind: str
    low: int = 0
    high: int = 0
    choices: tuple[str, ...] = ()
    max_length: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise DictionaryError(f"unknown parameter kind {self.kind!r}")
        if self.kind == INT_RANGE and self.low > self.high:
            raise DictionaryError(f"empty integer range [{self.low}, {self.high}]")
        if self.kind == ENUM and not self.choices:
            raise DictionaryError("empty enum")
        if self.kind == STRING and self.max_length < 1:
            raise DictionaryError("string parameter needs max_length >= 1")

    def contains(self, value: Any) -> bool:
        if self.kind == INT_RANGE:
            return isinstance(value, int) and not isinstance(value, bool) and self.low <= value <= self.high
        if self.kind == ENUM:
            return value in self.choices
        return isinstance(value, str) and 1 <= len(value.encode("utf-8")) <= self.max_length

    @classmethod
    def from_json(cls, obj: dict) -> "ParamSpec":
        kind = obj.get("kind")
        if kind == INT_RANGE:
            return cls(kind, low=int(obj["min"]), high=int(obj["max"]))
        if kind == ENUM:
            return cls(kind, choices=tuple(obj.get("values", ())))
        if kind == STRING:
            return cls(kind, max_length=int(obj.get("max_length", 0)))
        raise DictionaryError(f"unknown parameter kind {kind!r}")

    def to_json(self) -> dict:
        if self.kind == INT_RANGE:
            return {"kind": self.kind, "min": self.low, "max": self.high}
        if self.kind == ENUM:
            return {"kind": self.kind, "values": list(self.choices)}
        return {"kind": self.kind, "max_length": self.max_length}


@dataclass(frozen=True)
class Effect:
    """One possible abstract outcome of a method (hint data for the path oracle)."""

    events: frozenset[str]
    requires: str | None = None  # "on", "off" or None
    action: str | None = None  # restricts the effect to one split action


@dataclass(frozen=True)
class MethodSpec:
    name: str
    params: tuple[ParamSpec, ...] = ()
    expected_supported: bool = True
    # Documentation only. The learner never reads these.
    effects: tuple[Effect, ...] = ()

    def __post_init__(self):
        if not self.name or not self.name.isascii() or not _NAME_RE.match(self.name):
            raise DictionaryError(f"invalid method name {self.name!r}")


@dataclass(frozen=True)
class Action:
    """A learner action: a method plus any leading parameters pinned by the split."""

    label: str
    method: MethodSpec
    fixed: tuple[Param, ...] = ()


@dataclass(frozen=True)
class MessageDictionary:
    methods: tuple[MethodSpec, ...] = ()
    actions: tuple[Action, ...] = field(init=False)

    def __post_init__(self):
        seen = set()
        for m in self.methods:
            if m.name in seen:
                raise DictionaryError(f"duplicate method name {m.name!r}")
            seen.add(m.name)
        object.__setattr__(self, "actions", tuple(derive_actions(self.methods)))

    @property
    def action_labels(self) -> tuple[str, ...]:
        return tuple(a.label for a in self.actions)

    def method(self, name: str) -> MethodSpec:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def action(self, label: str) -> Action:
        for a in self.actions:
            if a.label == label:
                return a
        raise KeyError(label)

    def __len__(self):
        return len(self.methods)


def derive_actions(methods: Sequence[MethodSpec]) -> list[Action]:
    """Map methods to actions; ``set_power`` becomes ``set_power_on``/``set_power_off``."""
    actions = []
    for m in methods:
        if m.name == "set_power":
            for mode in ("on", "off"):
                actions.append(Action(f"set_power_{mode}", m, (mode,)))
        else:
            actions.append(Action(m.name, m))
    return actions


def _effect_from_json(obj: dict) -> Effect:
    return Effect(frozenset(obj.get("events", ())), obj.get("requires"), obj.get("action"))


def parse_dictionary(doc: dict) -> MessageDictionary:
    methods = []
    for i, entry in enumerate(doc.get("methods", [])):
        name = entry.get("name", "")
        try:
            params = tuple(ParamSpec.from_json(p) for p in entry.get("params", []))
            spec = MethodSpec(
                name=name,
                params=params,
                expected_supported=bool(entry.get("expected_supported", True)),
                effects=tuple(_effect_from_json(e) for e in entry.get("effects", [])),
            )
        except (DictionaryError, KeyError, TypeError, ValueError) as exc:
            raise DictionaryError(f"method #{i} ({name!r}): {exc}") from exc
        methods.append(spec)
    return MessageDictionary(tuple(methods))


def load_dictionary(source: Union[str, Path, None] = None) -> MessageDictionary:
    """Load a dictionary file; ``None`` loads the shipped ``yeelight.dict``.

    An empty file yields an empty dictionary.
    """
    if source is None:
        text = resources.files("rliot.data").joinpath("yeelight.dict").read_text("utf-8")
    else:
        text = Path(source).read_text("utf-8")
    if not text.strip():
        return MessageDictionary(())
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DictionaryError(f"dictionary is not valid JSON: {exc}") from exc
    return parse_dictionary(doc)


def dump_dictionary(d: MessageDictionary) -> dict:
    out = []
    for m in d.methods:
        entry = {
            "name": m.name,
            "params": [p.to_json() for p in m.params],
            "expected_supported": m.expected_supported,
        }
        if m.effects:
            entry["effects"] = []
            for e in m.effects:
                item = {"events": sorted(e.events)}
                if e.requires:
                    item["requires"] = e.requires
                if e.action:
                    item["action"] = e.action
                entry["effects"].append(item)
        out.append(entry)
    return {"methods": out}


# ---------------------------------------------------------------------------
# Parameter sampling
# ---------------------------------------------------------------------------

def sample_param(spec: ParamSpec, rng) -> Param:
    if spec.kind == INT_RANGE:
        return rng.randint(spec.low, spec.high)
    if spec.kind == ENUM:
        return spec.choices[rng.randrange(len(spec.choices))]
    length = rng.randint(1, spec.max_length)
    return "".join(_STRING_ALPHABET[rng.randrange(len(_STRING_ALPHABET))] for _ in range(length))


def sample_params(spec: MethodSpec, rng, fixed: Sequence[Param] = ()) -> list[Param]:
    """Draw every parameter uniformly from its range, keeping ``fixed`` leading values."""
    values = list(fixed)
    for p in spec.params[len(fixed):]:
        values.append(sample_param(p, rng))
    return values


# ---------------------------------------------------------------------------
# Wire messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommandMessage:
    id: int
    method: str
    params: tuple[Param, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))


@dataclass(frozen=True)
class ResultMessage:
    id: int
    values: tuple[str, ...] | None = None
    error_code: int | None = None
    error_message: str | None = None

    def __post_init__(self):
        if (self.values is None) == (self.error_code is None):
            raise ValueError("exactly one of result values and error must be set")
        if self.values is not None:
            object.__setattr__(self, "values", tuple(self.values))

    @property
    def ok(self) -> bool:
        return self.values is not None

    @classmethod
    def success(cls, id: int, values: Sequence[str] = ("ok",)) -> "ResultMessage":
        return cls(id, values=tuple(values))

    @classmethod
    def failure(cls, id: int, code: int, message: str) -> "ResultMessage":
        return cls(id, error_code=code, error_message=message)


def _frame(obj: dict) -> bytes:
    try:
        # json escapes control characters, so no raw CR/LF can land inside a frame
        text = json.dumps(obj, ensure_ascii=False)
        data = text.encode("utf-8")
    except (TypeError, ValueError, UnicodeEncodeError) as exc:
        raise CodecError(str(exc)) from exc
    return data + TERMINATOR


def encode_command(cmd: CommandMessage) -> bytes:
    return _frame({"id": cmd.id, "method": cmd.method, "params": list(cmd.params)})


def encode_response(msg: ResultMessage) -> bytes:
    if msg.ok:
        return _frame({"id": msg.id, "result": list(msg.values)})
    return _frame({"id": msg.id, "error": {"code": msg.error_code, "message": msg.error_message}})


def _load_line(data: bytes) -> dict:
    if data.endswith(TERMINATOR):
        data = data[: -len(TERMINATOR)]
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"malformed line: {data[:80]!r}") from exc
    if not isinstance(obj, dict):
        raise FramingError(f"expected a JSON object, got {type(obj).__name__}")
    return obj


def decode_command(data: bytes) -> CommandMessage:
    obj = _load_line(data)
    try:
        cid, method, params = obj["id"], obj["method"], obj.get("params", [])
    except KeyError as exc:
        raise ProtocolViolation(f"command missing field {exc}") from exc
    if not isinstance(cid, int) or not isinstance(method, str) or not isinstance(params, list):
        raise ProtocolViolation("command fields have the wrong types")
    return CommandMessage(cid, method, tuple(params))


def decode_response(data: bytes) -> ResultMessage:
    obj = _load_line(data)
    rid = obj.get("id")
    if not isinstance(rid, int):
        raise ProtocolViolation("response has no integer id")
    if "result" in obj:
        result = obj["result"]
        if not isinstance(result, list):
            raise ProtocolViolation("result must be a list")
        return ResultMessage.success(rid, [str(v) for v in result])
    if "error" in obj:
        err = obj["error"]
        if not isinstance(err, dict):
            raise ProtocolViolation("error must be an object")
        return ResultMessage.failure(rid, int(err.get("code", -1)), str(err.get("message", "")))
    raise ProtocolViolation("response carries neither result nor error")
