"""Blocking socket transport for framed RPC calls.

The client side of the protocol is a single function, :func:`call`: open
a TCP connection, send one request frame, read one response frame, and
return the result dict.  Correlation ids come from a process-wide
counter; a response must echo the id it was asked with.

Server-side helpers for reading frames off a stream live here too, so
the coordinator and the agent share one framing implementation.
"""

from __future__ import annotations

import itertools
import socket
import struct

from . import wireproto
from .wireproto import ProtocolError, RpcRequest, RpcResponse

_ids = itertools.count(1)


class TransportError(Exception):
    """Connection, framing, or correlation failure during a call."""


class RpcError(Exception):
    """The remote end answered with an error response."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def next_request_id() -> int:
    return next(_ids)


def recv_exact(sock: socket.socket, count: int) -> bytes:
    """Read exactly ``count`` bytes or raise TransportError on EOF."""
    chunks = []
    remaining = count
    while remaining > 0:
        chunk = sock.recv(min(remaining, 65536))
        if not chunk:
            raise TransportError(f"connection closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, *, methods: dict | None = None):
    """Read one complete frame from a socket and decode it."""
    header = recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length > wireproto.MAX_BODY_BYTES:
        raise wireproto.FrameTooLarge(
            f"declared body of {length} bytes exceeds {wireproto.MAX_BODY_BYTES}"
        )
    body = recv_exact(sock, length) if length else b""
    msg, _ = wireproto.decode_frame(header + body, methods=methods)
    return msg


def send_frame(sock: socket.socket, msg, *, methods: dict | None = None) -> None:
    sock.sendall(wireproto.encode_frame(msg, methods=methods))


def call(
    address: tuple[str, int],
    method: str,
    params: dict | None = None,
    *,
    timeout: float = 5.0,
    methods: dict | None = None,
) -> dict:
    """Perform one request/response exchange and return the result dict.

    Raises RpcError when the server answers with an error response and
    TransportError for connection trouble, malformed replies, or a
    correlation id mismatch.
    """
    request = RpcRequest(id=next_request_id(), method=method, params=params or {})
    try:
        with socket.create_connection(address, timeout=timeout) as sock:
            send_frame(sock, request, methods=methods)
            reply = read_frame(sock)
    except (OSError, ProtocolError) as exc:
        raise TransportError(f"{method} to {address[0]}:{address[1]} failed: {exc}") from exc
    if not isinstance(reply, RpcResponse):
        raise TransportError(f"{method} got a request frame back")
    if reply.id != request.id:
        raise TransportError(f"correlation mismatch: sent {request.id}, got {reply.id}")
    if reply.error is not None:
        raise RpcError(reply.error["code"], reply.error["message"])
    return reply.result


def format_address(address: tuple[str, int]) -> str:
    return f"{address[0]}:{address[1]}"


def parse_host_port(text: str) -> tuple[str, int]:
    """Parse 'host:port' into a pair, for CLI arguments."""
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)
