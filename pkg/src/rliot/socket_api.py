"""Client side of the device link: request/response over TCP or in-process."""

from __future__ import annotations

import socket
import time

from .protocol import (
    TERMINATOR,
    CommandMessage,
    ProtocolViolation,
    ResultMessage,
    decode_response,
    encode_command,
)


class TransportError(Exception):
    """The device could not be reached or the connection broke."""


class TcpClient:
    """One persistent TCP connection to a device, reconnecting on demand."""

    def __init__(self, host: str, port: int, timeout: float = 5.0, pacing: float = 0.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self.pacing = pacing
        self.sent = 0
        self._sock: socket.socket | None = None
        self._buf = b""
        self._last = 0.0

    def connect(self):
        self.close()
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {self.host}:{self.port}: {exc}") from exc
        self._buf = b""

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def _readline(self) -> bytes:
        assert self._sock is not None
        while TERMINATOR not in self._buf:
            try:
                chunk = self._sock.recv(4096)
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by device")
            self._buf += chunk
        line, self._buf = self._buf.split(TERMINATOR, 1)
        return line + TERMINATOR

    def request(self, cmd: CommandMessage) -> ResultMessage:
        if self.pacing > 0:
            wait = self._last + self.pacing - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()
        if self._sock is None:
            self.connect()
        try:
            self._sock.sendall(encode_command(cmd))
        except OSError as exc:
            self.close()
            raise TransportError(f"send failed: {exc}") from exc
        self.sent += 1
        try:
            line = self._readline()
        except TransportError:
            self.close()
            raise
        resp = decode_response(line)
        if resp.id != cmd.id:
            raise ProtocolViolation(f"response id {resp.id} does not match command id {cmd.id}")
        return resp

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalClient:
    """Talks to an in-process simulator through the same wire encoding."""

    def __init__(self, device):
        self.device = device
        self.sent = 0

    def request(self, cmd: CommandMessage) -> ResultMessage:
        self.sent += 1
        return decode_response(self.device.handle_line(encode_command(cmd)[: -len(TERMINATOR)]))

    def close(self):
        pass
