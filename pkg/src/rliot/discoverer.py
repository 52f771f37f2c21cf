"""Finding bulbs on the LAN: passive advertisement listening and active probing."""

from __future__ import annotations

import ipaddress
import json
import logging
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Iterable

from .protocol import TERMINATOR, CommandMessage, ProtocolError, decode_response, encode_command

log = logging.getLogger(__name__)

ADVERTISE_GROUP = ("239.255.255.250", 1982)
PROBE_TIMEOUT = 0.25
SCHEME = "yeelight://"


@dataclass
class DeviceRecord:
    id: str
    address: str
    first_seen: float
    last_seen: float
    headers: dict[str, str] = field(default_factory=dict)
    sightings: int = 1

    def __post_init__(self):
        host, port = split_address(self.address)
        self.address = f"{host}:{port}"
        if self.last_seen < self.first_seen:
            raise ValueError("last_seen precedes first_seen")

    @property
    def host(self) -> str:
        return split_address(self.address)[0]

    @property
    def port(self) -> int:
        return split_address(self.address)[1]

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "address": self.address,
            "first_seen": self.first_seen,
            "last_seen": self.last_seen,
            "sightings": self.sightings,
            "headers": dict(self.headers),
        }


def split_address(address: str) -> tuple[str, int]:
    if address.startswith(SCHEME):
        address = address[len(SCHEME):]
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ValueError(f"malformed address {address!r}")
    ipaddress.ip_address(host)
    p = int(port)
    if not 0 < p < 65536:
        raise ValueError(f"port out of range in {address!r}")
    return host, p


def parse_advertisement(data: bytes) -> dict[str, str] | None:
    """Header map of an advertisement datagram, or None if it is not one.

    Header names are lowercased. A usable advertisement carries both ``id`` and
    a ``location`` with the yeelight scheme.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return None
    lines = text.replace("\r\n", "\n").split("\n")
    if not lines or not (lines[0].startswith("NOTIFY") or lines[0].startswith("HTTP/1.1 200")):
        return None
    headers = {}
    for line in lines[1:]:
        key, sep, value = line.partition(":")
        if sep:
            headers[key.strip().lower()] = value.strip()
    if "id" not in headers or not headers.get("location", "").startswith(SCHEME):
        return None
    try:
        split_address(headers["location"])
    except ValueError:
        return None
    return headers


def records_from_datagrams(datagrams: Iterable[tuple[float, bytes]]) -> list[DeviceRecord]:
    """Fold timestamped datagrams into one record per device id.

    This is the whole of `listen` minus the socket, so a captured datagram log
    can be replayed to the same result.
    """
    found: dict[str, DeviceRecord] = {}
    for ts, data in datagrams:
        headers = parse_advertisement(data)
        if headers is None:
            continue
        dev = headers["id"]
        rec = found.get(dev)
        if rec is None:
            found[dev] = DeviceRecord(dev, headers["location"], ts, ts, headers)
            continue
        rec.first_seen = min(rec.first_seen, ts)
        rec.last_seen = max(rec.last_seen, ts)
        rec.sightings += 1
        rec.headers = headers
        rec.address = "%s:%d" % split_address(headers["location"])
    return sorted(found.values(), key=lambda r: (r.first_seen, r.id))


def _multicast_socket(group: tuple[str, int]) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    if hasattr(socket, "SO_REUSEPORT"):
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    sock.bind(("", group[1]))
    mreq = struct.pack("4s4s", socket.inet_aton(group[0]), socket.inet_aton("0.0.0.0"))
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
    return sock


def capture(group: tuple[str, int] = ADVERTISE_GROUP, duration: float = 3.0) -> list[tuple[float, bytes]]:
    """Raw (timestamp, payload) datagrams received on ``group`` for ``duration`` seconds."""
    out = []
    sock = _multicast_socket(group)
    try:
        deadline = time.monotonic() + duration
        while True:
            left = deadline - time.monotonic()
            if left <= 0:
                break
            sock.settimeout(left)
            try:
                data, _ = sock.recvfrom(65535)
            except socket.timeout:
                break
            out.append((time.time(), data))
    finally:
        sock.close()
    return out


def listen(group: tuple[str, int] = ADVERTISE_GROUP, duration: float = 3.0) -> list[DeviceRecord]:
    return records_from_datagrams(capture(group, duration))


def fingerprint(host: str, port: int, timeout: float = PROBE_TIMEOUT) -> bool:
    """True if the endpoint answers a read-only get_prop with a well-formed result."""
    cmd = CommandMessage(1, "get_prop", ("power",))
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.settimeout(timeout)
            sock.sendall(encode_command(cmd))
            buf = b""
            while TERMINATOR not in buf:
                chunk = sock.recv(4096)
                if not chunk:
                    return False
                buf += chunk
                if len(buf) > 65536:
                    return False
    except OSError:
        return False
    try:
        resp = decode_response(buf.split(TERMINATOR, 1)[0])
    except ProtocolError:
        return False
    return resp.id == cmd.id


def _hosts(cidr: str) -> list[str]:
    net = ipaddress.ip_network(cidr, strict=False)
    if net.num_addresses == 1:
        return [str(net.network_address)]
    hosts = list(net.hosts())
    return [str(h) for h in hosts] if hosts else [str(a) for a in net]


def probe(cidr: str, ports: Iterable[int] = (55443,), timeout: float = PROBE_TIMEOUT) -> list[DeviceRecord]:
    """Serial TCP-connect scan; only endpoints passing the fingerprint are reported."""
    out = []
    for host in _hosts(cidr):
        for port in ports:
            now = time.time()
            if fingerprint(host, port, timeout):
                addr = f"{host}:{port}"
                out.append(DeviceRecord(addr, addr, now, time.time(), {"location": SCHEME + addr}))
            else:
                log.debug("no device at %s:%d", host, port)
    return out


def main(args) -> int:
    if args.probe:
        ports = [int(p) for p in args.ports.split(",") if p]
        records = probe(args.probe, ports)
    else:
        records = listen(duration=args.listen)
    for rec in records:
        print(json.dumps(rec.to_json(), sort_keys=True))
    return 0
