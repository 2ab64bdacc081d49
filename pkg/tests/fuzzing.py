"""Seeded wire fuzzers shared by the wire tests and the acceptance suite."""

from __future__ import annotations

import io
import random
from dataclasses import replace
from datetime import datetime, timedelta, timezone

from repcat.encoding import encode_operation
from repcat.model import OperationRecord, OpKind, Subject
from repcat.transport.wire import (
    Frame,
    MsgType,
    decode_delta_resp,
    decode_frame,
    delta_resp_frame,
    encode_frame,
    read_frame,
)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
_SITE_CHARS = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_-"


def random_payload(rng: random.Random) -> bytes:
    r = rng.random()
    if r < 0.05:
        return b""
    n = rng.randrange(1 << 16) if r > 0.98 else rng.randrange(512)
    return rng.randbytes(n)


def random_op(rng: random.Random, origin: str, seq: int) -> OperationRecord:
    return OperationRecord(
        origin, seq, rng.choice(list(OpKind)), rng.choice(list(Subject)),
        rng.randbytes(rng.randrange(300)),
        EPOCH + timedelta(microseconds=rng.randrange(-(2**52), 2**52)))


def fuzz_frames(seed: int, n: int) -> list[str]:
    """Round-trip ``n`` random frames through both decoders; return failures."""
    rng = random.Random(seed)
    failures = []
    stream = io.BytesIO()
    sent = []
    for i in range(n):
        frame = Frame(rng.randrange(256), random_payload(rng))
        data = encode_frame(frame)
        got, end = decode_frame(data)
        if got != frame or end != len(data) or encode_frame(got) != data:
            failures.append(f"frame {i} did not round-trip")
        stream.write(data)
        sent.append(frame)
    stream.seek(0)
    for i, frame in enumerate(sent):
        if read_frame(lambda k: _read_exactly(stream, k)) != frame:
            failures.append(f"streamed frame {i} differs")
    return failures


def _read_exactly(stream, k):
    data = stream.read(k)
    if len(data) != k:
        raise EOFError
    return data


def fuzz_batches(seed: int, n: int) -> list[str]:
    """Round-trip ``n`` random DELTA_RESP batches; return failures."""
    rng = random.Random(seed)
    failures = []
    for i in range(n):
        origin = "".join(rng.choice(_SITE_CHARS) for _ in range(rng.randint(1, 32)))
        start = rng.randrange(1, 2**63)
        ops = [random_op(rng, origin, start + k) for k in range(rng.randrange(30))]
        more = rng.random() < 0.5
        frame = delta_resp_frame(origin, [encode_operation(op) for op in ops], more)
        data = encode_frame(frame)
        got, _ = decode_frame(data)
        o, m, decoded = decode_delta_resp(got.payload)
        if (o, m, decoded) != (origin, more, ops):
            failures.append(f"batch {i} did not round-trip")
        elif encode_frame(delta_resp_frame(o, [encode_operation(op) for op in decoded], m)) != data:
            failures.append(f"batch {i} re-encodes differently")
    return failures


class CorruptingChannel:
    """Delivers replies with one payload byte replaced."""

    def __init__(self, inner, position, value=0xFF):
        self.inner = inner
        self.position = position
        self.value = value

    def send(self, frame):
        self.inner.send(frame)

    def recv(self):
        frame = self.inner.recv()
        if frame.msg_type != MsgType.DELTA_RESP:
            return frame
        body = bytearray(frame.payload)
        body[self.position(body)] = self.value
        return replace(frame, payload=bytes(body))

    def close(self):
        self.inner.close()
