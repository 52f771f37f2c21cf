import random
import socket
import time

import pytest
from hypothesis import given, strategies as st

from rliot.device_sim import (
    CT_MAX,
    CT_MIN,
    ERR_RATE_LIMITED,
    ERR_UNSUPPORTED,
    BulbSimulator,
    BulbState,
    RateLimiter,
    apply_command,
    load_profile,
)
from rliot.protocol import CommandMessage, decode_response, encode_command, sample_params

PROFILE = load_profile()


def run(state, method, *params):
    return apply_command(state, CommandMessage(1, method, params), PROFILE.supported)


def test_set_power_off():
    s, resp = run(BulbState(power="on"), "set_power", "off", "smooth", 500)
    assert resp.ok and s.power == "off"


def test_adjust_bright_to_zero_turns_off():
    s0 = BulbState(power="on", bright=50)
    s, resp = run(s0, "adjust_bright", -50, 500)
    assert resp.ok and s.power == "off" and s.bright == 50


def test_set_rgb_zero_turns_off_and_keeps_color():
    s0 = BulbState(power="on", rgb=255)
    s, resp = run(s0, "set_rgb", 0, "sudden", 0)
    assert resp.ok and s.power == "off" and s.rgb == 255


def test_set_bright_clamps():
    s, resp = run(BulbState(bright=50), "set_bright", 0, "sudden", 0)
    assert resp.ok and s.bright == 1 and s.power == "on"


def test_unsupported_method():
    s0 = BulbState()
    s, resp = run(s0, "start_cf", 1, 0, "x")
    assert s == s0 and not resp.ok and resp.error_code == ERR_UNSUPPORTED


def test_out_of_range_param_is_error():
    s0 = BulbState()
    for params in [(100000000, "sudden", 0), (5, "warp", 0), (5, "sudden", -1), ("red", "sudden", 0)]:
        s, resp = run(s0, "set_rgb", *params)
        assert s == s0 and not resp.ok


def test_idempotent_set_is_self_transition():
    s0 = BulbState(rgb=255, color_mode=1)
    s, resp = run(s0, "set_rgb", 255, "sudden", 0)
    assert resp.ok and s == s0


def test_light_commands_rejected_while_off():
    s0 = BulbState(power="off")
    for method, params in [("set_bright", (10, "sudden", 0)), ("set_rgb", (5, "sudden", 0)), ("adjust_bright", (10, 100))]:
        s, resp = run(s0, method, *params)
        assert s == s0 and not resp.ok


def test_name_can_be_set_while_off():
    s, resp = run(BulbState(power="off"), "set_name", "lab")
    assert resp.ok and s.name == "lab" and s.power == "off"


def test_scene_changes_one_group():
    s0 = BulbState(power="off", rgb=1, bright=50)
    s, _ = run(s0, "set_scene", "color", 77, 20)
    assert (s.power, s.rgb, s.bright) == ("on", 77, 50)
    s, _ = run(s0, "set_scene", "auto_delay_off", 20, 5)
    assert (s.power, s.rgb, s.bright) == ("on", 1, 20)


def test_get_prop_strings():
    s0 = BulbState(power="on", bright=42, name="desk")
    s, resp = run(s0, "get_prop", "power", "bright", "name", "nonsense")
    assert s == s0 and resp.values == ("on", "42", "desk", "")


def test_state_range_validation():
    with pytest.raises(ValueError):
        BulbState(bright=0)
    with pytest.raises(ValueError):
        BulbState(ct=CT_MAX + 1)
    with pytest.raises(ValueError):
        BulbState(name="x" * 65)


def _random_state(rng):
    return BulbState(
        power=rng.choice(("on", "off")), rgb=rng.randrange(1 << 24), bright=rng.randint(1, 100),
        ct=rng.randint(CT_MIN, CT_MAX), name="n", color_mode=rng.choice((1, 2, 3)),
    )


def _in_range(s: BulbState):
    return (
        s.power in ("on", "off") and 0 <= s.rgb <= 0xFFFFFF and 1 <= s.bright <= 100
        and CT_MIN <= s.ct <= CT_MAX and len(s.name.encode()) <= 64
    )


def _junk(rng):
    return rng.choice([rng.randint(-10**9, 10**9), "sudden", "smooth", "", "on", "color", None, 3.5])


def test_fuzz_100k_commands(dictionary):
    """Valid and mangled commands never push the state out of range; errors never mutate."""
    rng = random.Random(99)
    actions = dictionary.actions
    state = BulbState()
    for i in range(100_000):
        action = actions[rng.randrange(len(actions))]
        params = sample_params(action.method, rng, action.fixed)
        if rng.random() < 0.2 and params:
            params[rng.randrange(len(params))] = _junk(rng)
        before = state
        state, resp = apply_command(state, CommandMessage(i + 1, action.method.name, tuple(params)), PROFILE.supported)
        assert _in_range(state)
        if not resp.ok:
            assert state == before
        # determinism
        again = apply_command(before, CommandMessage(i + 1, action.method.name, tuple(params)), PROFILE.supported)
        assert again == (state, resp)
        if i % 5000 == 0:
            state = _random_state(rng)


# --- rate limiting ---------------------------------------------------------

def test_61st_command_in_window_rejected():
    now = [0.0]
    sim = BulbSimulator(clock=lambda: now[0])
    cmd = CommandMessage(1, "get_prop", ("power",))
    for k in range(60):
        now[0] = k * 0.5
        assert sim.handle(cmd).ok
    now[0] = 30.0
    resp = sim.handle(cmd)
    assert not resp.ok and resp.error_code == ERR_RATE_LIMITED
    now[0] = 60.01
    assert sim.handle(cmd).ok


@given(st.lists(st.floats(min_value=0, max_value=5, allow_nan=False), min_size=1, max_size=300),
       st.integers(min_value=1, max_value=20), st.floats(min_value=0.5, max_value=30))
def test_limiter_never_exceeds_quota(gaps, quota, window):
    lim = RateLimiter(quota, window, clock=lambda: 0.0)
    t, admitted = 0.0, []
    for g in gaps:
        t += g
        if lim.admit(t):
            admitted.append(t)
        assert len(lim.stamps) <= quota
    # any window-long interval holds at most `quota` admitted stamps
    for i, start in enumerate(admitted):
        inside = [x for x in admitted[i:] if x < start + window]
        assert len(inside) <= quota


# --- network ---------------------------------------------------------------

def _exchange(addr, lines):
    with socket.create_connection(addr, timeout=2) as c:
        out = []
        buf = b""
        for line in lines:
            c.sendall(line)
            while b"\r\n" not in buf:
                buf += c.recv(4096)
            frame, buf = buf.split(b"\r\n", 1)
            out.append(frame + b"\r\n")
        return out


def test_server_answers_set_rgb(sim):
    addr = sim.serve("127.0.0.1", 0)
    cmd = b'{"id": 1, "method": "set_rgb", "params": [255, "sudden", 0]}\r\n'
    assert _exchange(addr, [cmd]) == [b'{"id": 1, "result": ["ok"]}\r\n']
    assert sim.snapshot().rgb == 255


def test_server_echoes_repeated_ids(sim):
    addr = sim.serve("127.0.0.1", 0)
    cmd = encode_command(CommandMessage(4, "get_prop", ("power",)))
    replies = [decode_response(r) for r in _exchange(addr, [cmd, cmd])]
    assert [r.id for r in replies] == [4, 4]


def test_server_sequential_connections_and_bad_lines(sim):
    addr = sim.serve("127.0.0.1", 0)
    bad = decode_response(_exchange(addr, [b"not json\r\n"])[0])
    assert not bad.ok
    ok = decode_response(_exchange(addr, [encode_command(CommandMessage(2, "toggle", ()))])[0])
    assert ok.ok and ok.id == 2


def test_bind_failure_raises(sim):
    addr = sim.serve("127.0.0.1", 0)
    other = BulbSimulator()
    with pytest.raises(OSError):
        other.serve(*addr)
    other.stop()


def test_reset_device_soak(sim):
    target = BulbState(power="off", rgb=5, bright=7, name="x")
    rng = random.Random(3)
    for _ in range(1000):
        sim.handle(CommandMessage(1, "set_power", ("on", "sudden", 0)))
        sim.handle(CommandMessage(2, "set_bright", (rng.randint(1, 100), "sudden", 0)))
        sim.reset_device(target)
        assert sim.snapshot() == target


def test_reset_mid_connection(sim):
    addr = sim.serve("127.0.0.1", 0)
    with socket.create_connection(addr, timeout=2) as c:
        c.sendall(encode_command(CommandMessage(1, "set_name", ("a",))))
        c.recv(4096)
        sim.reset_device(BulbState(name="reset"))
        c.sendall(encode_command(CommandMessage(2, "get_prop", ("name",))))
        assert decode_response(c.recv(4096)).values == ("reset",)


def test_advertisement_content(sim):
    sim.serve("127.0.0.1", 0)
    sim.handle(CommandMessage(1, "set_name", ("lab",)))
    text = sim.advertisement().decode()
    host, port = sim.address
    assert f"Location: yeelight://{host}:{port}\r\n" in text
    assert "name: lab\r\n" in text and f"id: {sim.profile.device_id}\r\n" in text


def test_advertiser_rate(sim):
    rx = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    rx.bind(("127.0.0.1", 0))
    rx.settimeout(0.1)
    sim.serve("127.0.0.1", 0)
    sim.advertise(rx.getsockname(), interval=0.2)
    got, end = 0, time.monotonic() + 1.0
    while time.monotonic() < end:
        try:
            rx.recv(4096)
            got += 1
        except socket.timeout:
            pass
    sim.stop()
    rx.close()
    assert 4 <= got <= 6
