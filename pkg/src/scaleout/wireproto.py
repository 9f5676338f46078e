"""Framed RPC message encoding and validation.

Every message travels as a length-prefixed frame: a 4-byte big-endian
unsigned body length followed by the body itself, canonical JSON encoded
as UTF-8.  Canonical means sorted keys, no insignificant whitespace, and
no floating point values anywhere in the payload.  A body may not exceed
``MAX_BODY_BYTES``.

Two message shapes exist.  Requests carry ``id``, ``method`` and
``params``; responses carry ``id`` plus exactly one of ``result`` or
``error``.  The functions here are pure: they do no I/O and keep no
state, so both endpoints of a connection share them.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field

MAX_BODY_BYTES = 1 << 20

MAX_ID = (1 << 63) - 1
MAX_INT = (1 << 63) - 1

_LEN = struct.Struct(">I")

NODE_NAME_RE = re.compile(
    r"^(?P<job>[a-z0-9]([a-z0-9-]*[a-z0-9])?)-(?P<role>worker|scale)-(?P<index>0|[1-9][0-9]*)$"
)

_ADDRESS_RE = re.compile(r"^(?P<host>[A-Za-z0-9_.:\[\]-]+):(?P<port>[0-9]{1,5})$")


class ProtocolError(Exception):
    """Base class for every framing or validation failure."""


class FrameTooLarge(ProtocolError):
    """The body length exceeds MAX_BODY_BYTES."""


class Truncated(ProtocolError):
    """The buffer ends before the frame does."""


class MalformedBody(ProtocolError):
    """The body is not canonical JSON of a valid message."""


class UnknownMethod(ProtocolError):
    """The request names a method outside the active registry."""


@dataclass(frozen=True)
class RpcRequest:
    id: int
    method: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RpcResponse:
    id: int
    result: dict | None = None
    error: dict | None = None


def parse_node_name(name: str) -> tuple[str, str, int]:
    """Split a node name into (job, role, index) or raise MalformedBody."""
    if not isinstance(name, str):
        raise MalformedBody("node_name must be a string")
    m = NODE_NAME_RE.match(name)
    if m is None:
        raise MalformedBody(f"invalid node name: {name!r}")
    return m.group("job"), m.group("role"), int(m.group("index"))


def parse_address(text: str) -> tuple[str, int]:
    """Parse 'host:port' into a (host, port) pair or raise MalformedBody."""
    if not isinstance(text, str):
        raise MalformedBody("address must be a string")
    m = _ADDRESS_RE.match(text)
    if m is None:
        raise MalformedBody(f"invalid address: {text!r}")
    port = int(m.group("port"))
    if not 1 <= port <= 65535:
        raise MalformedBody(f"port out of range: {port}")
    return m.group("host"), port


def _require_int(value, what: str, minimum: int = 0, maximum: int = MAX_INT) -> int:
    # bool is an int subclass and must not pass
    if type(value) is not int:
        raise MalformedBody(f"{what} must be an integer")
    if not minimum <= value <= maximum:
        raise MalformedBody(f"{what} out of range: {value}")
    return value


def _require_str(value, what: str) -> str:
    if not isinstance(value, str):
        raise MalformedBody(f"{what} must be a string")
    return value


def _require_keys(params: dict, required: set[str], optional: set[str] = frozenset()) -> None:
    keys = set(params)
    missing = required - keys
    extra = keys - required - optional
    if missing:
        raise MalformedBody(f"missing params: {sorted(missing)}")
    if extra:
        raise MalformedBody(f"unexpected params: {sorted(extra)}")


def _validate_scale(params: dict) -> None:
    _require_keys(params, {"nodes", "mode"})
    _require_int(params["nodes"], "nodes", minimum=1)
    mode = _require_str(params["mode"], "mode")
    if mode not in ("delta", "absolute"):
        raise MalformedBody(f"mode must be 'delta' or 'absolute', got {mode!r}")


def _validate_retrieve_keys(params: dict) -> None:
    _require_keys(params, {"node_name", "address"})
    parse_node_name(params["node_name"])
    parse_address(params["address"])


def _validate_node_only(params: dict) -> None:
    _require_keys(params, {"node_name"})
    parse_node_name(params["node_name"])


def _validate_active_server(params: dict) -> None:
    _require_keys(params, set(), optional={"node_name"})
    if "node_name" in params:
        parse_node_name(params["node_name"])


def _validate_launch(params: dict) -> None:
    _require_keys(
        params,
        {"rank", "world_size", "command", "restart", "rendezvous_dir",
         "public_token", "epoch", "job_name"},
    )
    rank = _require_int(params["rank"], "rank")
    world = _require_int(params["world_size"], "world_size", minimum=1)
    if rank >= world:
        raise MalformedBody(f"rank {rank} outside world of {world}")
    command = params["command"]
    if not isinstance(command, list) or not command:
        raise MalformedBody("command must be a non-empty list")
    for part in command:
        _require_str(part, "command element")
    if not isinstance(params["restart"], bool):
        raise MalformedBody("restart must be a boolean")
    _require_str(params["rendezvous_dir"], "rendezvous_dir")
    _require_str(params["public_token"], "public_token")
    _require_int(params["epoch"], "epoch", minimum=1)
    _require_str(params["job_name"], "job_name")


def _validate_checkpoint(params: dict) -> None:
    _require_keys(params, {"signal", "grace_ms", "epoch"})
    signal_name = _require_str(params["signal"], "signal")
    if not signal_name.startswith("SIG") or not signal_name.isupper():
        raise MalformedBody(f"invalid signal name: {signal_name!r}")
    _require_int(params["grace_ms"], "grace_ms")
    _require_int(params["epoch"], "epoch", minimum=1)


# Methods a coordinator accepts, exactly as they appear on the wire.
CLIENT_METHODS = {
    "Scale": _validate_scale,
    "RetrieveKeys": _validate_retrieve_keys,
    "JobInit": _validate_node_only,
    "activeServer": _validate_active_server,
    "checkpointing": _validate_node_only,
    "endExec": _validate_node_only,
}

# Directives a coordinator pushes to an executor agent's listen port.
AGENT_METHODS = {
    "Launch": _validate_launch,
    "Checkpoint": _validate_checkpoint,
}


def _reject_floats(obj) -> None:
    if isinstance(obj, float):
        raise MalformedBody("float values are not permitted on the wire")
    if isinstance(obj, dict):
        for value in obj.values():
            _reject_floats(value)
    elif isinstance(obj, list):
        for value in obj:
            _reject_floats(value)


def _validate_request(obj: dict, methods: dict) -> RpcRequest:
    _require_keys(obj, {"id", "method", "params"})
    msg_id = _require_int(obj["id"], "id", maximum=MAX_ID)
    method = _require_str(obj["method"], "method")
    params = obj["params"]
    if not isinstance(params, dict):
        raise MalformedBody("params must be an object")
    validator = methods.get(method)
    if validator is None:
        raise UnknownMethod(f"unknown method: {method!r}")
    validator(params)
    return RpcRequest(id=msg_id, method=method, params=dict(params))


def _validate_result_value(value, depth: int = 0) -> None:
    if value is None or isinstance(value, (str, bool)):
        return
    if type(value) is int:
        return
    if isinstance(value, list) and depth == 0:
        for item in value:
            _validate_result_value(item, depth + 1)
        return
    raise MalformedBody(f"unsupported result value: {value!r}")


def _validate_response(obj: dict) -> RpcResponse:
    keys = set(obj)
    if "id" not in keys:
        raise MalformedBody("response missing id")
    msg_id = _require_int(obj["id"], "id", maximum=MAX_ID)
    if keys == {"id", "result"}:
        result = obj["result"]
        if not isinstance(result, dict):
            raise MalformedBody("result must be an object")
        for key, value in result.items():
            _require_str(key, "result key")
            _validate_result_value(value)
        return RpcResponse(id=msg_id, result=dict(result))
    if keys == {"id", "error"}:
        error = obj["error"]
        if not isinstance(error, dict):
            raise MalformedBody("error must be an object")
        _require_keys(error, {"code", "message"})
        _require_str(error["code"], "error code")
        _require_str(error["message"], "error message")
        return RpcResponse(id=msg_id, error=dict(error))
    raise MalformedBody("response must carry exactly one of result or error")


def _message_to_obj(msg: RpcRequest | RpcResponse) -> dict:
    if isinstance(msg, RpcRequest):
        return {"id": msg.id, "method": msg.method, "params": msg.params}
    if isinstance(msg, RpcResponse):
        if (msg.result is None) == (msg.error is None):
            raise MalformedBody("response must carry exactly one of result or error")
        if msg.result is not None:
            return {"id": msg.id, "result": msg.result}
        return {"id": msg.id, "error": msg.error}
    raise MalformedBody(f"not an RPC message: {msg!r}")


def encode_frame(msg: RpcRequest | RpcResponse, *, methods: dict | None = None) -> bytes:
    """Serialize a message to one frame, validating it first."""
    obj = _message_to_obj(msg)
    _reject_floats(obj)
    if isinstance(msg, RpcRequest):
        _validate_request(obj, methods if methods is not None else CLIENT_METHODS)
    else:
        _validate_response(obj)
    body = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    raw = body.encode("utf-8")
    if len(raw) > MAX_BODY_BYTES:
        raise FrameTooLarge(f"body of {len(raw)} bytes exceeds {MAX_BODY_BYTES}")
    return _LEN.pack(len(raw)) + raw


def decode_frame(
    data: bytes, *, methods: dict | None = None
) -> tuple[RpcRequest | RpcResponse, int]:
    """Decode one frame from the head of ``data``.

    Returns the message and the number of bytes consumed, so a caller
    holding a stream buffer can slice off what was read.  Raises
    Truncated when the buffer holds less than one full frame.
    """
    if len(data) < _LEN.size:
        raise Truncated(f"need 4 length bytes, have {len(data)}")
    (length,) = _LEN.unpack_from(data, 0)
    if length > MAX_BODY_BYTES:
        raise FrameTooLarge(f"declared body of {length} bytes exceeds {MAX_BODY_BYTES}")
    end = _LEN.size + length
    if len(data) < end:
        raise Truncated(f"need {end} bytes, have {len(data)}")
    try:
        obj = json.loads(bytes(data[_LEN.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedBody(f"body is not valid JSON: {exc}") from exc
    _reject_floats(obj)
    if not isinstance(obj, dict):
        raise MalformedBody("body must be a JSON object")
    if "method" in obj:
        msg: RpcRequest | RpcResponse = _validate_request(
            obj, methods if methods is not None else CLIENT_METHODS
        )
    else:
        msg = _validate_response(obj)
    return msg, end


def make_result(msg_id: int, result: dict) -> RpcResponse:
    return RpcResponse(id=msg_id, result=result)


def make_error(msg_id: int, code: str, message: str) -> RpcResponse:
    return RpcResponse(id=msg_id, error={"code": code, "message": message})
