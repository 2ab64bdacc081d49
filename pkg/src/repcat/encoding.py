"""Canonical byte encoding.

This is the normative format shared by digests, the on-disk operation logs,
snapshot files and the wire protocol.  Every value starts with a one-byte
type tag, followed by its fields in declared order.  Integers are big-endian
and fixed width; strings are a u32 byte length followed by UTF-8; byte
strings are a u32 length followed by the raw bytes; timestamps are i64
microseconds since the Unix epoch (UTC).

====  ===============  ====================================================
tag   type             fields
====  ===============  ====================================================
0x01  FileRecord       lfn str, host str, path str, storage u8,
                       production str, size_bytes u64, created_at i64,
                       origin str
0x02  Host             hostname str, cluster name str, cluster site str,
                       storage u8
0x03  ClusterId        name str, site str
0x04  Site             id str, ordinal u32
0x05  LinkCost         source str, target str, numerator u64,
                       denominator u64
0x10  OperationRecord  origin str, seq u64, kind u8, subject u8,
                       payload bytes, committed_at i64
0x20  primary key      subject u8, count u32, then ``count`` str
0x30  data row         origin str, seq u64, payload bytes
====  ===============  ====================================================
"""

from __future__ import annotations

import struct
from datetime import datetime, timedelta, timezone
from fractions import Fraction

from repcat.errors import DecodeError, InvalidRecord, UsageError
from repcat.model import (
    KEY_ARITY,
    LFN_PATTERN,
    SITE_ID_PATTERN,
    ClusterId,
    FileRecord,
    Host,
    Key,
    LinkCost,
    OperationRecord,
    OpKind,
    Row,
    Site,
    StorageClass,
    Subject,
    validate_row,
)

TAG_FILE = 0x01
TAG_HOST = 0x02
TAG_CLUSTER = 0x03
TAG_SITE = 0x04
TAG_COST = 0x05
TAG_OP = 0x10
TAG_KEY = 0x20
TAG_DATA_ROW = 0x30

ROW_TAGS = {
    TAG_FILE: Subject.FILES,
    TAG_HOST: Subject.HOSTS,
    TAG_CLUSTER: Subject.CLUSTERS,
    TAG_SITE: Subject.SITES,
    TAG_COST: Subject.COSTS,
}

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_OP_MID = struct.Struct(">QBBI")
_U64_I64 = struct.Struct(">Qq")
_U64_U64 = struct.Struct(">QQ")

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_ONE_US = timedelta(microseconds=1)


def to_micros(ts: datetime) -> int:
    return (ts - EPOCH) // _ONE_US


def from_micros(us: int) -> datetime:
    return EPOCH + timedelta(microseconds=us)


def _s(value: str) -> bytes:
    b = value.encode("utf-8")
    return _U32.pack(len(b)) + b


def encode_row(row: Row) -> bytes:
    t = type(row)
    try:
        if t is FileRecord:
            # hot path: inlined string framing
            lfn = row.lfn.encode()
            host = row.host.encode()
            path = row.path.encode()
            prod = row.production.encode()
            origin = row.origin.encode()
            return b"".join((
                b"\x01", _U32.pack(len(lfn)), lfn, _U32.pack(len(host)), host,
                _U32.pack(len(path)), path, _U8.pack(row.storage), _U32.pack(len(prod)), prod,
                _U64_I64.pack(row.size_bytes, (row.created_at - EPOCH) // _ONE_US),
                _U32.pack(len(origin)), origin,
            ))
        if t is Host:
            return b"".join((
                b"\x02", _s(row.hostname), _s(row.cluster.name), _s(row.cluster.site),
                _U8.pack(row.storage),
            ))
        if t is ClusterId:
            return b"\x03" + _s(row.name) + _s(row.site)
        if t is Site:
            return b"\x04" + _s(row.id) + _U32.pack(row.ordinal)
        if t is LinkCost:
            return b"".join((
                b"\x05", _s(row.source), _s(row.target),
                _U64.pack(row.cost.numerator), _U64.pack(row.cost.denominator),
            ))
    except (struct.error, AttributeError, TypeError) as exc:
        raise InvalidRecord(f"cannot encode {row!r}: {exc}") from None
    raise InvalidRecord(f"not a catalog row: {row!r}")


def encode_operation(op: OperationRecord) -> bytes:
    raw = op._raw
    if raw is None:
        try:
            raw = b"".join((
                b"\x10", _s(op.origin),
                _OP_MID.pack(op.seq, op.kind, op.subject, len(op.payload)), op.payload,
                _I64.pack(to_micros(op.committed_at)),
            ))
        except (struct.error, AttributeError, TypeError) as exc:
            raise InvalidRecord(f"cannot encode {op!r}: {exc}") from None
        object.__setattr__(op, "_raw", raw)
    return raw


def encode_key(subject: Subject, key: Key) -> bytes:
    parts = [b"\x20", _U8.pack(subject), _U32.pack(len(key))]
    parts.extend(_s(k) for k in key)
    return b"".join(parts)


def encode_data_row(origin: str, seq: int, payload: bytes) -> bytes:
    return b"".join((b"\x30", _s(origin), _U64.pack(seq), _U32.pack(len(payload)), payload))


def canonical_encode(record) -> bytes:
    """Encode a row or an :class:`OperationRecord`."""
    if type(record) is OperationRecord:
        return encode_operation(record)
    return encode_row(record)


def _str_at(buf: bytes, pos: int) -> tuple[str, int]:
    (n,) = _U32.unpack_from(buf, pos)
    end = pos + 4 + n
    if end > len(buf):
        raise DecodeError("truncated string")
    return str(buf[pos + 4:end], "utf-8"), end


def _bytes_at(buf: bytes, pos: int) -> tuple[bytes, int]:
    (n,) = _U32.unpack_from(buf, pos)
    end = pos + 4 + n
    if end > len(buf):
        raise DecodeError("truncated byte string")
    return bytes(buf[pos + 4:end]), end


_STORAGE = {c.value: c for c in StorageClass}
_KINDS = {k.value: k for k in OpKind}
_SUBJECTS = {s.value: s for s in Subject}


def _storage(code: int) -> StorageClass:
    try:
        return _STORAGE[code]
    except KeyError:
        raise DecodeError(f"bad storage class {code}") from None


def _time(us: int) -> datetime:
    try:
        return from_micros(us)
    except OverflowError:
        raise DecodeError(f"timestamp out of range: {us}") from None


def _read_row(buf: bytes, pos: int) -> tuple[Row, int]:
    tag = buf[pos]
    pos += 1
    if tag == TAG_FILE:
        # hot path: inlined string reads; slicing past the end is caught by
        # the length check on the last field
        unpack = _U32.unpack_from
        (n,) = unpack(buf, pos)
        pos += 4
        lfn = str(buf[pos:pos + n], "utf-8")
        pos += n
        (n,) = unpack(buf, pos)
        pos += 4
        host = str(buf[pos:pos + n], "utf-8")
        pos += n
        (n,) = unpack(buf, pos)
        pos += 4
        path = str(buf[pos:pos + n], "utf-8")
        pos += n
        storage = _storage(buf[pos])
        (n,) = unpack(buf, pos + 1)
        pos += 5
        production = str(buf[pos:pos + n], "utf-8")
        pos += n
        size, us = _U64_I64.unpack_from(buf, pos)
        origin, pos = _str_at(buf, pos + 16)
        row = FileRecord(lfn, host, path, storage, production, size, _time(us), origin)
        # field types hold by construction; only the grammar needs checking
        if LFN_PATTERN.fullmatch(lfn) and host and path[:1] == "/" and SITE_ID_PATTERN.fullmatch(origin):
            return row, pos
    elif tag == TAG_HOST:
        hostname, pos = _str_at(buf, pos)
        cluster, pos = _str_at(buf, pos)
        site, pos = _str_at(buf, pos)
        row = Host(hostname, ClusterId(cluster, site), _storage(buf[pos]))
        pos += 1
    elif tag == TAG_CLUSTER:
        name, pos = _str_at(buf, pos)
        site, pos = _str_at(buf, pos)
        row = ClusterId(name, site)
    elif tag == TAG_SITE:
        site, pos = _str_at(buf, pos)
        (ordinal,) = _U32.unpack_from(buf, pos)
        row = Site(site, ordinal)
        pos += 4
    elif tag == TAG_COST:
        source, pos = _str_at(buf, pos)
        target, pos = _str_at(buf, pos)
        num, den = _U64_U64.unpack_from(buf, pos)
        pos += 16
        if den == 0:
            raise DecodeError("zero denominator in link cost")
        cost = Fraction(num, den)
        if cost.numerator != num:
            raise DecodeError("link cost is not in lowest terms")
        row = LinkCost(source, target, cost)
    else:
        raise DecodeError(f"unknown row tag 0x{tag:02x}")
    try:
        validate_row(row)
    except UsageError as exc:
        raise DecodeError(f"decoded row is invalid: {exc}") from None
    return row, pos


def decode_row(data: bytes) -> Row:
    try:
        row, pos = _read_row(data, 0)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise DecodeError(f"malformed row: {exc}") from None
    if pos != len(data):
        raise DecodeError(f"{len(data) - pos} trailing bytes after row")
    return row


def decode_operation(data: bytes) -> OperationRecord:
    try:
        if data[0] != TAG_OP:
            raise DecodeError("not an operation record")
        origin, pos = _str_at(data, 1)
        seq, kind, subject, n = _OP_MID.unpack_from(data, pos)
        pos += _OP_MID.size
        end = pos + n
        if end + 8 != len(data):
            raise DecodeError("operation record length mismatch")
        payload = bytes(data[pos:end])
        (us,) = _I64.unpack_from(data, end)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise DecodeError(f"malformed operation: {exc}") from None
    kind = _KINDS.get(kind)
    subject = _SUBJECTS.get(subject)
    if kind is None or subject is None:
        raise DecodeError("bad operation kind or subject")
    if seq == 0:
        raise DecodeError("sequence numbers start at 1")
    return OperationRecord(origin, seq, kind, subject, payload, _time(us), bytes(data))


def decode_key(data: bytes) -> tuple[Subject, Key]:
    try:
        if data[0] != TAG_KEY:
            raise DecodeError("not a primary key")
        subject = Subject(data[1])
        (n,) = _U32.unpack_from(data, 2)
        if n != KEY_ARITY[subject]:
            raise DecodeError(f"key for {subject} must have {KEY_ARITY[subject]} parts")
        pos = 6
        parts = []
        for _ in range(n):
            part, pos = _str_at(data, pos)
            parts.append(part)
    except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"malformed key: {exc}") from None
    if pos != len(data):
        raise DecodeError("trailing bytes after key")
    return subject, tuple(parts)


def decode_data_row(data: bytes, pos: int = 0) -> tuple[str, int, bytes, int]:
    """Decode one data row starting at ``pos``; return (origin, seq, payload, next_pos)."""
    try:
        if data[pos] != TAG_DATA_ROW:
            raise DecodeError("not a data row")
        origin, pos = _str_at(data, pos + 1)
        (seq,) = _U64.unpack_from(data, pos)
        payload, pos = _bytes_at(data, pos + 8)
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise DecodeError(f"malformed data row: {exc}") from None
    return origin, seq, payload, pos


def canonical_decode(data: bytes):
    """Inverse of :func:`canonical_encode`."""
    if not data:
        raise DecodeError("empty buffer")
    if data[0] == TAG_OP:
        return decode_operation(data)
    return decode_row(data)
