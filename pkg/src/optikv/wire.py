"""Length-prefixed JSON records shared by clients, servers, monitors and the coordinator.

A frame is a 4-byte big-endian length followed by one UTF-8 JSON object
``{"type": ..., "request-id": ..., "payload": {...}}``.
"""

from __future__ import annotations

import base64
import itertools
import json
import struct
from typing import Any

PUT = "PUT"
PUT_ACK = "PUT-ACK"
GET = "GET"
GET_RESP = "GET-RESP"
METADATA = "METADATA"
METADATA_RESP = "METADATA-RESP"
CANDIDATE = "CANDIDATE"
VIOLATION = "VIOLATION"
PAUSE = "PAUSE"
RESTORE = "RESTORE"
RESUME = "RESUME"
# control-plane extensions used by the checkpointing coordinator
SNAPSHOT = "SNAPSHOT"
ACK = "ACK"
ERROR = "ERROR"

MESSAGE_TYPES = frozenset(
    {PUT, PUT_ACK, GET, GET_RESP, METADATA, METADATA_RESP, CANDIDATE, VIOLATION,
     PAUSE, RESTORE, RESUME, SNAPSHOT, ACK, ERROR}
)

MAX_FRAME = 64 * 1024 * 1024

_ids = itertools.count(1)


class WireError(ValueError):
    pass


def next_request_id() -> int:
    return next(_ids)


def record(type_: str, payload: dict | None = None, request_id: int | None = None) -> dict:
    if type_ not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {type_!r}")
    return {"type": type_, "request-id": next_request_id() if request_id is None else request_id,
            "payload": payload or {}}


def reply(to: dict, type_: str, payload: dict | None = None) -> dict:
    return record(type_, payload, to["request-id"])


def error_reply(to: dict, code: str, message: str = "") -> dict:
    return reply(to, ERROR, {"error": code, "message": message})


def dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), sort_keys=True)


def loads(text: str | bytes) -> dict:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WireError(f"bad JSON record: {exc}") from exc
    validate(rec)
    return rec


def validate(rec: Any) -> None:
    if not isinstance(rec, dict):
        raise WireError("record is not an object")
    missing = {"type", "request-id", "payload"} - rec.keys()
    if missing:
        raise WireError(f"record missing {sorted(missing)}")
    if rec["type"] not in MESSAGE_TYPES:
        raise WireError(f"unknown message type {rec['type']!r}")
    if not isinstance(rec["payload"], dict):
        raise WireError("payload is not an object")


def encode_frame(rec: dict) -> bytes:
    body = dumps(rec).encode("utf-8")
    return struct.pack(">I", len(body)) + body


def decode_frames(buf: bytes) -> tuple[list[dict], bytes]:
    """Split complete frames off the front of ``buf``; returns (records, rest)."""
    out = []
    while len(buf) >= 4:
        (size,) = struct.unpack_from(">I", buf)
        if size > MAX_FRAME:
            raise WireError(f"frame of {size} bytes exceeds limit")
        if len(buf) < 4 + size:
            break
        out.append(loads(buf[4 : 4 + size].decode("utf-8")))
        buf = buf[4 + size :]
    return out, buf


async def read_frame(reader) -> dict | None:
    """Read one frame from an asyncio StreamReader; None on clean EOF."""
    import asyncio

    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise WireError("truncated frame header") from exc
        return None
    (size,) = struct.unpack(">I", head)
    if size > MAX_FRAME:
        raise WireError(f"frame of {size} bytes exceeds limit")
    body = await reader.readexactly(size)
    return loads(body.decode("utf-8"))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def unb64(text: str) -> bytes:
    try:
        return base64.b64decode(text, validate=True)
    except ValueError as exc:
        raise WireError(f"bad base64 field: {exc}") from exc
