"""A virtual Yeelight-style color bulb.

The simulator is the ground truth the learner talks to: a pure transition
function (`apply_command`), a line-framed TCP server, an SSDP-like UDP
advertiser and a sliding-window rate limiter.
"""

from __future__ import annotations

import argparse
import colorsys
import json
import logging
import socket
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable

from .protocol import (
    TERMINATOR,
    CommandMessage,
    ProtocolError,
    ResultMessage,
    decode_command,
    encode_response,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 55443
ADVERTISE_GROUP = ("239.255.255.250", 1982)

# error codes
ERR_UNSUPPORTED = -1
ERR_INVALID_PARAMS = -2
ERR_RATE_LIMITED = -3
ERR_BAD_REQUEST = -4
ERR_GENERAL = -5000

RGB_MAX = 0xFFFFFF
CT_MIN, CT_MAX = 1700, 6500
NAME_MAX_BYTES = 64

# methods that only make sense while the light is on
_NEEDS_POWER = {
    "set_ct_abx", "set_rgb", "set_hsv", "set_bright", "set_adjust",
    "adjust_bright", "adjust_ct", "adjust_color",
}


@dataclass(frozen=True)
class BulbState:
    power: str = "on"
    rgb: int = RGB_MAX
    bright: int = 100
    ct: int = 4000
    name: str = ""
    color_mode: int = 2

    def __post_init__(self):
        if self.power not in ("on", "off"):
            raise ValueError(f"power must be on/off, got {self.power!r}")
        if not 0 <= self.rgb <= RGB_MAX:
            raise ValueError(f"rgb out of range: {self.rgb}")
        if not 1 <= self.bright <= 100:
            raise ValueError(f"brightness out of range: {self.bright}")
        if not CT_MIN <= self.ct <= CT_MAX:
            raise ValueError(f"ct out of range: {self.ct}")
        if len(self.name.encode("utf-8")) > NAME_MAX_BYTES:
            raise ValueError("name longer than 64 bytes")

    def prop(self, key: str) -> str:
        if key == "power":
            return self.power
        if key == "bright":
            return str(self.bright)
        if key == "rgb":
            return str(self.rgb)
        if key == "ct":
            return str(self.ct)
        if key == "name":
            return self.name
        if key == "color_mode":
            return str(self.color_mode)
        if key in ("hue", "sat"):
            h, s, _ = _rgb_to_hsv(self.rgb)
            return str(round(h * 359)) if key == "hue" else str(round(s * 100))
        if key in ("flowing", "delayoff"):
            return "0"
        return ""

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BulbState":
        return cls(**{k: obj[k] for k in ("power", "rgb", "bright", "ct", "name", "color_mode") if k in obj})


def _rgb_to_hsv(rgb: int) -> tuple[float, float, float]:
    r, g, b = (rgb >> 16) & 0xFF, (rgb >> 8) & 0xFF, rgb & 0xFF
    return colorsys.rgb_to_hsv(r / 255, g / 255, b / 255)


def _hsv_to_rgb(h: float, s: float, v: float = 1.0) -> int:
    r, g, b = colorsys.hsv_to_rgb(h, s, v)
    return (round(r * 255) << 16) | (round(g * 255) << 8) | round(b * 255)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _clamp(x: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, x))


class _Reject(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _check_effect(params, start: int):
    """Validate the optional ``effect, duration`` tail starting at ``start``."""
    tail = params[start:]
    if len(tail) > 2:
        raise _Reject(ERR_INVALID_PARAMS, "too many params")
    if tail and tail[0] not in ("sudden", "smooth"):
        raise _Reject(ERR_INVALID_PARAMS, "invalid effect")
    if len(tail) == 2 and not (_is_int(tail[1]) and tail[1] >= 0):
        raise _Reject(ERR_INVALID_PARAMS, "invalid duration")


def _int_arg(params, i: int, lo: int, hi: int) -> int:
    if i >= len(params) or not _is_int(params[i]) or not lo <= params[i] <= hi:
        raise _Reject(ERR_INVALID_PARAMS, "invalid params")
    return params[i]


def _arity(params, n: int):
    if len(params) != n:
        raise _Reject(ERR_INVALID_PARAMS, "invalid params")


def _transition(s: BulbState, method: str, p: tuple) -> tuple[BulbState, list[str]]:
    ok = ["ok"]
    if method == "get_prop":
        if not p or not all(isinstance(k, str) for k in p):
            raise _Reject(ERR_INVALID_PARAMS, "invalid params")
        return s, [s.prop(k) for k in p]
    if method in _NEEDS_POWER and s.power == "off":
        raise _Reject(ERR_GENERAL, "general error")
    if method == "set_ct_abx":
        ct = _int_arg(p, 0, CT_MIN, CT_MAX)
        _check_effect(p, 1)
        return replace(s, ct=ct, color_mode=2), ok
    if method == "set_rgb":
        rgb = _int_arg(p, 0, 0, RGB_MAX)
        _check_effect(p, 1)
        if rgb == 0:
            # a black color is a switched-off light; the stored color is kept
            return replace(s, power="off"), ok
        return replace(s, rgb=rgb, color_mode=1), ok
    if method == "set_hsv":
        hue = _int_arg(p, 0, 0, 359)
        sat = _int_arg(p, 1, 0, 100)
        _check_effect(p, 2)
        return replace(s, rgb=_hsv_to_rgb(hue / 359, sat / 100), color_mode=3), ok
    if method == "set_bright":
        if not p or not _is_int(p[0]):
            raise _Reject(ERR_INVALID_PARAMS, "invalid params")
        _check_effect(p, 1)
        return replace(s, bright=_clamp(p[0], 1, 100)), ok
    if method == "set_power":
        if not p or p[0] not in ("on", "off"):
            raise _Reject(ERR_INVALID_PARAMS, "invalid params")
        _check_effect(p[:3], 1)
        return replace(s, power=p[0]), ok
    if method == "toggle":
        _arity(p, 0)
        return replace(s, power="off" if s.power == "on" else "on"), ok
    if method in ("set_default", "stop_cf"):
        _arity(p, 0)
        return s, ok
    if method == "set_scene":
        return _set_scene(s, p), ok
    if method == "cron_add":
        _arity(p, 2)
        _int_arg(p, 0, 0, 0)
        _int_arg(p, 1, 1, 1440)
        return s, ok
    if method in ("cron_get", "cron_del"):
        _arity(p, 1)
        _int_arg(p, 0, 0, 0)
        return s, (["0"] if method == "cron_get" else ok)
    if method == "set_adjust":
        return _set_adjust(s, p), ok
    if method == "set_name":
        _arity(p, 1)
        if not isinstance(p[0], str) or len(p[0].encode("utf-8")) > NAME_MAX_BYTES:
            raise _Reject(ERR_INVALID_PARAMS, "invalid params")
        return replace(s, name=p[0]), ok
    if method in ("adjust_bright", "adjust_ct", "adjust_color"):
        _arity(p, 2)
        pct = _int_arg(p, 0, -100, 100)
        _int_arg(p, 1, 30, 1 << 31)
        if method == "adjust_bright":
            level = s.bright + pct
            if level <= 0:
                return replace(s, power="off"), ok
            return replace(s, bright=min(level, 100)), ok
        if method == "adjust_ct":
            return replace(s, ct=_clamp(s.ct + pct * 48, CT_MIN, CT_MAX), color_mode=2), ok
        h, sat, v = _rgb_to_hsv(s.rgb)
        rgb = _hsv_to_rgb((h + pct / 100) % 1.0, sat, v)
        if rgb == 0:
            return s, ok
        return replace(s, rgb=rgb, color_mode=1), ok
    raise _Reject(ERR_UNSUPPORTED, "method not supported")


def _set_scene(s: BulbState, p: tuple) -> BulbState:
    _arity(p, 3)
    kind = p[0]
    if kind == "color":
        rgb = _int_arg(p, 1, 1, RGB_MAX)
        return replace(s, power="on", rgb=rgb, color_mode=1)
    if kind == "hsv":
        hue = _int_arg(p, 1, 0, 359)
        sat = _int_arg(p, 2, 0, 100)
        return replace(s, power="on", rgb=_hsv_to_rgb(hue / 359, sat / 100), color_mode=3)
    if kind == "ct":
        ct = _int_arg(p, 1, CT_MIN, CT_MAX)
        return replace(s, power="on", ct=ct, color_mode=2)
    if kind == "auto_delay_off":
        bright = _int_arg(p, 1, 1, 100)
        _int_arg(p, 2, 1, 1440)
        return replace(s, power="on", bright=bright)
    raise _Reject(ERR_INVALID_PARAMS, "invalid params")


def _set_adjust(s: BulbState, p: tuple) -> BulbState:
    _arity(p, 2)
    action, prop = p
    if action not in ("increase", "decrease", "circle"):
        raise _Reject(ERR_INVALID_PARAMS, "invalid params")
    if prop == "bright":
        if action == "circle":
            return replace(s, bright=1 if s.bright >= 100 else min(s.bright + 10, 100))
        step = 10 if action == "increase" else -10
        return replace(s, bright=_clamp(s.bright + step, 1, 100))
    if prop == "ct":
        if action == "circle":
            return replace(s, ct=CT_MIN if s.ct >= CT_MAX else min(s.ct + 500, CT_MAX), color_mode=2)
        step = 500 if action == "increase" else -500
        return replace(s, ct=_clamp(s.ct + step, CT_MIN, CT_MAX), color_mode=2)
    if prop == "color" and action == "circle":
        h, sat, v = _rgb_to_hsv(s.rgb)
        rgb = _hsv_to_rgb((h + 1 / 6) % 1.0, sat, v)
        return replace(s, rgb=rgb or s.rgb, color_mode=1)
    raise _Reject(ERR_INVALID_PARAMS, "invalid params")


def apply_command(
    state: BulbState, cmd: CommandMessage, supported: Iterable[str] | None = None
) -> tuple[BulbState, ResultMessage]:
    """Pure transition: rejected commands return an error and leave the state alone."""
    if supported is not None and cmd.method not in supported:
        return state, ResultMessage.failure(cmd.id, ERR_UNSUPPORTED, "method not supported")
    try:
        new, values = _transition(state, cmd.method, cmd.params)
    except _Reject as exc:
        return state, ResultMessage.failure(cmd.id, exc.code, str(exc))
    return new, ResultMessage.success(cmd.id, values)


# ---------------------------------------------------------------------------
# Profile and rate limiting
# ---------------------------------------------------------------------------

@dataclass
class BulbProfile:
    supported: frozenset[str]
    initial: BulbState = field(default_factory=BulbState)
    quota: int = 60
    window: float = 60.0
    device_id: str = "0x000000000015243f"
    model: str = "color"
    fw_ver: int = 18

    @classmethod
    def from_json(cls, obj: dict) -> "BulbProfile":
        rl = obj.get("rate_limit", {})
        return cls(
            supported=frozenset(obj["supported"]),
            initial=BulbState.from_json(obj.get("initial", {})),
            quota=int(rl.get("quota", 60)),
            window=float(rl.get("window", 60.0)),
            device_id=obj.get("id", cls.device_id),
            model=obj.get("model", cls.model),
            fw_ver=int(obj.get("fw_ver", cls.fw_ver)),
        )


def load_profile(path: str | Path | None = None) -> BulbProfile:
    if path is None:
        text = resources.files("rliot.data").joinpath("bulb_profile.json").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return BulbProfile.from_json(json.loads(text))


class RateLimiter:
    """Sliding-window admission: at most ``quota`` admits in any ``window`` seconds."""

    def __init__(self, quota: int = 60, window: float = 60.0, clock: Callable[[], float] = time.monotonic):
        self.quota = quota
        self.window = window
        self.clock = clock
        self.stamps: deque[float] = deque()

    def admit(self, now: float | None = None) -> bool:
        now = self.clock() if now is None else now
        while self.stamps and self.stamps[0] <= now - self.window:
            self.stamps.popleft()
        if len(self.stamps) >= self.quota:
            return False
        self.stamps.append(now)
        return True


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

class BulbSimulator:
    """Stateful device: owns the state, rate limiter and optional network endpoints."""

    def __init__(
        self,
        profile: BulbProfile | None = None,
        initial: BulbState | None = None,
        rate_limit: bool = True,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.profile = profile or load_profile()
        self._state = initial or self.profile.initial
        self._lock = threading.Lock()
        self.limiter = RateLimiter(self.profile.quota, self.profile.window, clock) if rate_limit else None
        self.commands_served = 0
        self._server: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self.address: tuple[str, int] | None = None

    # state access -----------------------------------------------------------
    def snapshot(self) -> BulbState:
        with self._lock:
            return self._state

    def reset_device(self, state: BulbState) -> bool:
        with self._lock:
            self._state = state
        return True

    def handle(self, cmd: CommandMessage) -> ResultMessage:
        with self._lock:
            self.commands_served += 1
            if self.limiter is not None and not self.limiter.admit():
                return ResultMessage.failure(cmd.id, ERR_RATE_LIMITED, "client quota exceeded")
            self._state, resp = apply_command(self._state, cmd, self.profile.supported)
            return resp

    def handle_line(self, line: bytes) -> bytes:
        try:
            cmd = decode_command(line)
        except ProtocolError:
            return encode_response(ResultMessage.failure(0, ERR_BAD_REQUEST, "invalid command"))
        return encode_response(self.handle(cmd))

    # networking -------------------------------------------------------------
    def serve(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> tuple[str, int]:
        """Bind and start the accept loop in a daemon thread; returns the bound address."""
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            srv.bind((host, port))
        except OSError:
            srv.close()
            raise
        srv.listen(8)
        srv.settimeout(0.2)
        self._server = srv
        self.address = srv.getsockname()[:2]
        t = threading.Thread(target=self._accept_loop, name="bulbsim-tcp", daemon=True)
        t.start()
        self._threads.append(t)
        return self.address

    def _accept_loop(self):
        assert self._server is not None
        while not self._stop.is_set():
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            # one session at a time, like the real bulb
            with conn:
                self._serve_connection(conn)

    def _serve_connection(self, conn: socket.socket):
        conn.settimeout(0.2)
        buf = b""
        while not self._stop.is_set():
            try:
                chunk = conn.recv(4096)
            except socket.timeout:
                continue
            except OSError:
                return
            if not chunk:
                return
            buf += chunk
            while TERMINATOR in buf:
                line, buf = buf.split(TERMINATOR, 1)
                if not line.strip():
                    continue
                try:
                    conn.sendall(self.handle_line(line))
                except OSError:
                    return

    def advertisement(self) -> bytes:
        s = self.snapshot()
        host, port = self.address or ("127.0.0.1", DEFAULT_PORT)
        if host == "0.0.0.0":
            host = "127.0.0.1"
        lines = [
            "NOTIFY * HTTP/1.1",
            f"Host: {ADVERTISE_GROUP[0]}:{ADVERTISE_GROUP[1]}",
            "Cache-Control: max-age=3600",
            f"Location: yeelight://{host}:{port}",
            "NTS: ssdp:alive",
            "Server: POSIX, UPnP/1.0 YGLC/1",
            f"id: {self.profile.device_id}",
            f"model: {self.profile.model}",
            f"fw_ver: {self.profile.fw_ver}",
            "support: " + " ".join(sorted(self.profile.supported)),
            f"power: {s.power}",
            f"bright: {s.bright}",
            f"color_mode: {s.color_mode}",
            f"ct: {s.ct}",
            f"rgb: {s.rgb}",
            f"name: {s.name}",
        ]
        return ("\r\n".join(lines) + "\r\n").encode("utf-8")

    def advertise(self, group: tuple[str, int] = ADVERTISE_GROUP, interval: float = 1.0) -> threading.Thread:
        """Send an advertisement datagram to ``group`` every ``interval`` seconds."""
        t = threading.Thread(target=self._advertise_loop, args=(group, interval), name="bulbsim-udp", daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _advertise_loop(self, group, interval):
        sock = None
        while not self._stop.is_set():
            try:
                if sock is None:
                    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
                    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
                sock.sendto(self.advertisement(), group)
            except OSError as exc:
                log.warning("advertisement failed: %s", exc)
                if sock is not None:
                    sock.close()
                sock = None
            self._stop.wait(interval)
        if sock is not None:
            sock.close()

    def stop(self):
        self._stop.set()
        if self._server is not None:
            self._server.close()
        for t in self._threads:
            t.join(timeout=2)
        self._threads.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="bulbsim", description="Run a simulated Yeelight-style bulb.")
    ap.add_argument("--host", default="0.0.0.0")
    ap.add_argument("--port", type=int, default=DEFAULT_PORT)
    ap.add_argument("--profile", help="simulator profile JSON (default: shipped color bulb)")
    ap.add_argument("--no-rate-limit", action="store_true")
    ap.add_argument("--advertise-interval", type=float, default=0.0, help="seconds; 0 disables advertising")
    ap.add_argument("--id", dest="device_id", help="override the profile's device id")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    profile = load_profile(args.profile)
    if args.device_id:
        profile = replace(profile, device_id=args.device_id)
    sim = BulbSimulator(profile, rate_limit=not args.no_rate_limit)
    try:
        addr = sim.serve(args.host, args.port)
    except OSError as exc:
        raise SystemExit(f"bulbsim: cannot bind {args.host}:{args.port}: {exc}")
    log.info("bulb listening on %s:%d", *addr)
    if args.advertise_interval > 0:
        sim.advertise(interval=args.advertise_interval)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        sim.stop()


if __name__ == "__main__":
    main()
