"""Framed wire protocol for server-to-server sync.

Every frame is a 5-byte header, ``u32 length`` (payload bytes, header
excluded) and ``u8 msg_type``, followed by the payload.  All integers are
big-endian; strings are u32-length-prefixed UTF-8.

Payloads by message type:

==============  ===========================================================
HELLO           u16 version, str site id, 32-byte federation digest
CURSORS_REQ     empty
CURSORS_RESP    u32 count, then count x (str origin, u64 seq)
DELTA_REQ       str origin, u64 after, u32 max_batch
DELTA_RESP      str origin, u8 more, u32 count, then count x (u32 len,
                canonical operation record)
SNAP_REQ        empty
SNAP_CHUNK      u32 data length, data; the final chunk has zero data
                bytes and carries the 32-byte snapshot digest as trailer
ERROR           u16 code, str message
==============  ===========================================================

A DELTA_REQ is answered by one or more DELTA_RESP frames of at most
``max_batch`` operations each; the last one has ``more == 0``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable, Iterable

from repcat.encoding import decode_operation
from repcat.errors import (
    DecodeError,
    FederationMismatch,
    FrameTooLarge,
    GapNeedsSnapshot,
    ProtocolError,
    VersionMismatch,
)
from repcat.model import OperationRecord

PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
MAX_SNAP_CHUNK = 4 * 1024 * 1024
DEFAULT_MAX_BATCH = 5_000

HEADER = struct.Struct(">IB")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_DELTA_REQ_TAIL = struct.Struct(">QI")
_DELTA_RESP_MID = struct.Struct(">BI")


class MsgType(enum.IntEnum):
    HELLO = 0x01
    CURSORS_REQ = 0x02
    CURSORS_RESP = 0x03
    DELTA_REQ = 0x04
    DELTA_RESP = 0x05
    SNAP_REQ = 0x06
    SNAP_CHUNK = 0x07
    ERROR = 0x08


class ErrorCode(enum.IntEnum):
    VERSION = 1
    FEDERATION = 2
    UNKNOWN_TYPE = 3
    GAP = 4
    UNKNOWN_ORIGIN = 5
    BAD_REQUEST = 6
    UNKNOWN_SITE = 7
    INTERNAL = 8


@dataclass(frozen=True)
class Frame:
    msg_type: int
    payload: bytes = b""


def encode_frame(frame: Frame) -> bytes:
    n = len(frame.payload)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"frame payload of {n} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(n, frame.msg_type) + frame.payload


def decode_frame(buf: bytes, pos: int = 0) -> tuple[Frame, int]:
    """Decode one frame at ``pos``; return it and the offset after it."""
    if len(buf) - pos < HEADER.size:
        raise DecodeError("truncated frame header")
    n, msg_type = HEADER.unpack_from(buf, pos)
    if n > MAX_FRAME:
        raise FrameTooLarge(f"frame announces {n} payload bytes")
    start = pos + HEADER.size
    if len(buf) - start < n:
        raise DecodeError("truncated frame payload")
    return Frame(msg_type, bytes(buf[start:start + n])), start + n


def read_frame(read_exactly: Callable[[int], bytes]) -> Frame:
    """Read one frame from a stream; ``read_exactly(n)`` returns n bytes or raises."""
    n, msg_type = HEADER.unpack(read_exactly(HEADER.size))
    if n > MAX_FRAME:
        raise FrameTooLarge(f"frame announces {n} payload bytes")
    return Frame(msg_type, read_exactly(n) if n else b"")


# -- payload helpers -------------------------------------------------------------

def _s(value: str) -> bytes:
    b = value.encode("utf-8")
    return _U32.pack(len(b)) + b


def _str_at(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U32.unpack_from(buf, pos)
    end = pos + 4 + n
    if end > len(buf):
        raise DecodeError("truncated string")
    return str(buf[pos + 4:end], "utf-8"), end


def _parse(fn):
    """Map low-level decoding failures of a payload parser to DecodeError."""
    def wrapper(payload: bytes):
        try:
            return fn(payload)
        except (struct.error, UnicodeDecodeError, IndexError) as exc:
            raise DecodeError(f"malformed {fn.__name__[7:]} payload: {exc}") from None
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@dataclass(frozen=True)
class Hello:
    version: int
    site: str
    federation_digest: bytes


def hello_frame(hello: Hello) -> Frame:
    if len(hello.federation_digest) != 32:
        raise ValueError("federation digest must be 32 bytes")
    return Frame(MsgType.HELLO, _U16.pack(hello.version) + _s(hello.site) + hello.federation_digest)


@_parse
def decode_hello(payload: bytes) -> Hello:
    (version,) = _U16.unpack_from(payload, 0)
    site, pos = _str_at(payload, 2)
    digest = payload[pos:]
    if len(digest) != 32:
        raise DecodeError("HELLO federation digest must be 32 bytes")
    return Hello(version, site, bytes(digest))


def cursors_frame(cursors: dict[str, int]) -> Frame:
    parts = [_U32.pack(len(cursors))]
    for origin, seq in sorted(cursors.items()):
        parts.append(_s(origin) + _U64.pack(seq))
    return Frame(MsgType.CURSORS_RESP, b"".join(parts))


@_parse
def decode_cursors(payload: bytes) -> dict[str, int]:
    (n,) = _U32.unpack_from(payload, 0)
    pos = 4
    out = {}
    for _ in range(n):
        origin, pos = _str_at(payload, pos)
        (out[origin],) = _U64.unpack_from(payload, pos)
        pos += 8
    if pos != len(payload):
        raise DecodeError("trailing bytes in CURSORS_RESP")
    return out


def delta_req_frame(origin: str, after: int, max_batch: int) -> Frame:
    return Frame(MsgType.DELTA_REQ, _s(origin) + _DELTA_REQ_TAIL.pack(after, max_batch))


@_parse
def decode_delta_req(payload: bytes) -> tuple[str, int, int]:
    origin, pos = _str_at(payload, 0)
    after, max_batch = _DELTA_REQ_TAIL.unpack_from(payload, pos)
    if pos + _DELTA_REQ_TAIL.size != len(payload):
        raise DecodeError("trailing bytes in DELTA_REQ")
    return origin, after, max_batch


def delta_resp_frame(origin: str, records: Iterable[bytes], more: bool) -> Frame:
    """``records`` are canonical operation encodings."""
    records = list(records)
    body = b"".join([_s(origin), _DELTA_RESP_MID.pack(more, len(records))]
                    + [_U32.pack(len(r)) + r for r in records])
    return Frame(MsgType.DELTA_RESP, body)


@_parse
def decode_delta_resp(payload: bytes) -> tuple[str, bool, list[OperationRecord]]:
    """Decode a whole batch; any bad record fails the batch as a unit."""
    origin, pos = _str_at(payload, 0)
    more, n = _DELTA_RESP_MID.unpack_from(payload, pos)
    pos += _DELTA_RESP_MID.size
    ops = []
    size = len(payload)
    for _ in range(n):
        (ln,) = _U32.unpack_from(payload, pos)
        end = pos + 4 + ln
        if end > size:
            raise DecodeError("truncated operation in DELTA_RESP")
        op = decode_operation(payload[pos + 4:end])
        if op.origin != origin:
            raise DecodeError(f"DELTA_RESP for {origin} carries an op of {op.origin}")
        ops.append(op)
        pos = end
    if pos != size:
        raise DecodeError("trailing bytes in DELTA_RESP")
    if more > 1:
        raise DecodeError("bad 'more' flag")
    return origin, bool(more), ops


def snap_chunk_frame(data: bytes) -> Frame:
    if len(data) > MAX_SNAP_CHUNK:
        raise FrameTooLarge("snapshot chunk over 4 MiB")
    return Frame(MsgType.SNAP_CHUNK, _U32.pack(len(data)) + data)


def snap_final_frame(digest: bytes) -> Frame:
    return Frame(MsgType.SNAP_CHUNK, _U32.pack(0) + digest)


@_parse
def decode_snap_chunk(payload: bytes) -> tuple[bytes, bytes | None]:
    """Return (data, digest); digest is set only on the final chunk."""
    (n,) = _U32.unpack_from(payload, 0)
    if n == 0:
        digest = payload[4:]
        if len(digest) != 32:
            raise DecodeError("final SNAP_CHUNK must carry a 32-byte digest")
        return b"", bytes(digest)
    if 4 + n != len(payload):
        raise DecodeError("SNAP_CHUNK length mismatch")
    return bytes(payload[4:]), None


def error_frame(code: ErrorCode, message: str) -> Frame:
    return Frame(MsgType.ERROR, _U16.pack(code) + _s(message))


@_parse
def decode_error(payload: bytes) -> tuple[int, str]:
    (code,) = _U16.unpack_from(payload, 0)
    message, pos = _str_at(payload, 2)
    if pos != len(payload):
        raise DecodeError("trailing bytes in ERROR")
    return code, message


def expect(frame: Frame, msg_type: MsgType) -> Frame:
    """Raise the matching error if ``frame`` is an ERROR or the wrong type."""
    if frame.msg_type == msg_type:
        return frame
    if frame.msg_type == MsgType.ERROR:
        raise_remote_error(*decode_error(frame.payload))
    raise ProtocolError(f"expected {msg_type.name}, got message type 0x{frame.msg_type:02x}")


_REMOTE_ERRORS = {
    ErrorCode.VERSION: VersionMismatch,
    ErrorCode.FEDERATION: FederationMismatch,
    ErrorCode.GAP: GapNeedsSnapshot,
}


def raise_remote_error(code: int, message: str):
    exc = _REMOTE_ERRORS.get(code, ProtocolError)
    try:
        name = ErrorCode(code).name
    except ValueError:
        name = str(code)
    raise exc(f"peer error {name}: {message}")
