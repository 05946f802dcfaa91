"""ADB host smart-socket framing.

Requests are a 4-hex-digit lowercase byte-length prefix followed by the
ASCII service name; replies start with a 4-byte OKAY/FAIL status, optionally
followed by a length-prefixed payload (always for FAIL messages).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from ..errors import ProtocolError

MAX_SERVICE_LENGTH = 0xFFFF


def frame_request(service: str) -> bytes:
    """Frame a service request for the ADB host socket."""
    try:
        payload = service.encode("ascii")
    except UnicodeEncodeError as exc:
        raise ProtocolError(f"service must be ASCII: {exc}") from exc
    if len(payload) > MAX_SERVICE_LENGTH:
        raise ProtocolError(f"service too long: {len(payload)} bytes (max {MAX_SERVICE_LENGTH})")
    return b"%04x" % len(payload) + payload


@dataclass(frozen=True)
class Okay:
    payload: bytes = b""


@dataclass(frozen=True)
class Fail:
    message: str


Reply = Union[Okay, Fail]


def _read_length_prefixed(data: bytes, what: str) -> bytes:
    if len(data) < 4:
        raise ProtocolError(f"truncated {what} length prefix")
    try:
        length = int(data[:4], 16)
    except ValueError:
        raise ProtocolError(f"malformed {what} length prefix {data[:4]!r}") from None
    body = data[4 : 4 + length]
    if len(body) < length:
        raise ProtocolError(f"truncated {what}: expected {length} bytes, got {len(body)}")
    return body


def parse_reply(data: bytes) -> Reply:
    """Parse a complete reply buffer.

    OKAY with no trailing bytes means an empty payload; FAIL always carries a
    length-prefixed message.
    """
    if len(data) < 4:
        raise ProtocolError(f"reply shorter than status token: {data!r}")
    status, rest = data[:4], data[4:]
    if status == b"OKAY":
        if not rest:
            return Okay()
        return Okay(_read_length_prefixed(rest, "payload"))
    if status == b"FAIL":
        message = _read_length_prefixed(rest, "failure message")
        return Fail(message.decode("utf-8", errors="replace"))
    raise ProtocolError(f"malformed status token {status!r}")


def read_reply(recv) -> Reply:
    """Stream variant of parse_reply: `recv(n)` must return exactly n bytes
    or raise. Used by the live socket client."""
    status = recv(4)
    if status == b"OKAY":
        return Okay()
    if status == b"FAIL":
        length = int(recv(4), 16)
        return Fail(recv(length).decode("utf-8", errors="replace"))
    raise ProtocolError(f"malformed status token {status!r}")


def read_payload(recv) -> bytes:
    length = int(recv(4), 16)
    return recv(length) if length else b""
