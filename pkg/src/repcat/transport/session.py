"""Request/response sessions over a frame channel.

A channel is anything with ``send(frame)``, ``recv() -> frame`` and
``close()``.  The TCP transport and the in-process simulator both provide
one, so replication code never knows which it is talking over.
"""

from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path
from typing import Iterator, Optional, Protocol

from repcat.errors import (
    CatalogError,
    DecodeError,
    FederationMismatch,
    GapDetected,
    ProtocolError,
    UnknownOrigin,
    VersionMismatch,
)
from repcat.federation import Federation
from repcat.model import OperationRecord
from repcat.store import Snapshot, Store
from repcat.transport.wire import (
    DEFAULT_MAX_BATCH,
    MAX_SNAP_CHUNK,
    PROTOCOL_VERSION,
    ErrorCode,
    Frame,
    Hello,
    MsgType,
    cursors_frame,
    decode_cursors,
    decode_delta_req,
    decode_delta_resp,
    decode_hello,
    decode_snap_chunk,
    delta_req_frame,
    delta_resp_frame,
    error_frame,
    expect,
    hello_frame,
    snap_chunk_frame,
    snap_final_frame,
)

log = logging.getLogger(__name__)


class Channel(Protocol):
    def send(self, frame: Frame) -> None: ...

    def recv(self) -> Frame: ...

    def close(self) -> None: ...


class ClientSession:
    """Client half of a sync session.  Call :meth:`handshake` first."""

    def __init__(self, channel: Channel, site: str, federation: Federation, *,
                 version: int = PROTOCOL_VERSION) -> None:
        self.channel = channel
        self.site = site
        self.federation = federation
        self.version = version
        self.peer_site: Optional[str] = None
        self.bytes_received = 0
        self.frames_received = 0
        self.ops_received = 0
        self.delta_frames = 0
        self._closed = False

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self.channel.close()

    def _recv(self) -> Frame:
        frame = self.channel.recv()
        self.frames_received += 1
        self.bytes_received += len(frame.payload)
        return frame

    def _fail(self, exc: Exception):
        self.close()
        if isinstance(exc, DecodeError):
            raise ProtocolError(f"undecodable reply: {exc}") from exc
        raise exc

    def handshake(self) -> Hello:
        self.channel.send(hello_frame(Hello(self.version, self.site, self.federation.digest)))
        try:
            hello = decode_hello(expect(self._recv(), MsgType.HELLO).payload)
            if hello.version != self.version:
                raise VersionMismatch(f"peer speaks protocol {hello.version}, we speak {self.version}")
            if hello.federation_digest != self.federation.digest:
                raise FederationMismatch("peer has a different federation config")
        except (CatalogError, DecodeError) as exc:
            self._fail(exc)
        self.peer_site = hello.site
        return hello

    def request_cursors(self) -> dict[str, int]:
        self.channel.send(Frame(MsgType.CURSORS_REQ))
        try:
            return decode_cursors(expect(self._recv(), MsgType.CURSORS_RESP).payload)
        except (CatalogError, DecodeError) as exc:
            self._fail(exc)

    def request_delta(self, origin: str, after: int,
                      max_batch: int = DEFAULT_MAX_BATCH) -> Iterator[list[OperationRecord]]:
        """Yield batches of ``origin``'s ops with seq > after until caught up."""
        self.channel.send(delta_req_frame(origin, after, max_batch))
        while True:
            try:
                frame = expect(self._recv(), MsgType.DELTA_RESP)
                got_origin, more, ops = decode_delta_resp(frame.payload)
                if got_origin != origin or len(ops) > max_batch:
                    raise ProtocolError(f"unexpected DELTA_RESP for {got_origin} with {len(ops)} ops")
            except (CatalogError, DecodeError) as exc:
                self._fail(exc)
            self.delta_frames += 1
            self.ops_received += len(ops)
            yield ops
            if not more:
                return

    def request_snapshot(self) -> Snapshot:
        self.channel.send(Frame(MsgType.SNAP_REQ))
        chunks = []
        try:
            while True:
                data, digest = decode_snap_chunk(expect(self._recv(), MsgType.SNAP_CHUNK).payload)
                if digest is not None:
                    break
                chunks.append(data)
            snap = Snapshot.decode(b"".join(chunks))
        except (CatalogError, DecodeError) as exc:
            self._fail(exc)
        if snap.digest != digest:
            self.close()
            raise ProtocolError("snapshot trailer digest does not match snapshot")
        return snap


class ServerSession:
    """Server half: turns each request frame into zero or more reply frames."""

    def __init__(self, store: Store, *, version: int = PROTOCOL_VERSION,
                 scratch_dir: Optional[Path] = None) -> None:
        self.store = store
        self.version = version
        self.scratch_dir = scratch_dir
        self.peer: Optional[str] = None
        self.closed = False

    def _fatal(self, code: ErrorCode, message: str) -> Frame:
        self.closed = True
        log.info("closing session with %s: %s", self.peer or "unknown peer", message)
        return error_frame(code, message)

    def handle(self, frame: Frame) -> Iterator[Frame]:
        if self.closed:
            return
        try:
            if self.peer is None:
                yield self._hello(frame)
            elif frame.msg_type == MsgType.CURSORS_REQ:
                yield cursors_frame(self.store.cursors())
            elif frame.msg_type == MsgType.DELTA_REQ:
                yield from self._delta(frame)
            elif frame.msg_type == MsgType.SNAP_REQ:
                yield from self._snapshot()
            else:
                yield error_frame(ErrorCode.UNKNOWN_TYPE, f"unknown message type 0x{frame.msg_type:02x}")
        except DecodeError as exc:
            yield self._fatal(ErrorCode.BAD_REQUEST, str(exc))
        except CatalogError as exc:
            log.exception("sync request from %s failed", self.peer)
            yield self._fatal(ErrorCode.INTERNAL, f"{exc.code}: {exc}")

    def _hello(self, frame: Frame) -> Frame:
        if frame.msg_type != MsgType.HELLO:
            return self._fatal(ErrorCode.BAD_REQUEST, "expected HELLO")
        hello = decode_hello(frame.payload)
        federation = self.store.federation
        if hello.version != self.version:
            return self._fatal(ErrorCode.VERSION, f"protocol version {hello.version} unsupported, need {self.version}")
        if hello.federation_digest != federation.digest:
            return self._fatal(ErrorCode.FEDERATION, "federation config digest differs")
        if hello.site not in federation or hello.site == self.store.site:
            return self._fatal(ErrorCode.UNKNOWN_SITE, f"site {hello.site} may not connect")
        self.peer = hello.site
        return hello_frame(Hello(self.version, self.store.site, federation.digest))

    def _delta(self, frame: Frame) -> Iterator[Frame]:
        origin, after, max_batch = decode_delta_req(frame.payload)
        if max_batch == 0:
            yield error_frame(ErrorCode.BAD_REQUEST, "max_batch must be positive")
            return
        try:
            records = self.store.scan_raw(origin, after)
        except UnknownOrigin as exc:
            yield error_frame(ErrorCode.UNKNOWN_ORIGIN, str(exc))
            return
        except GapDetected as exc:
            yield error_frame(ErrorCode.GAP, str(exc))
            return
        self.store.record_ack(self.peer, origin, after)
        if not records:
            yield delta_resp_frame(origin, [], more=False)
            return
        for i in range(0, len(records), max_batch):
            yield delta_resp_frame(origin, records[i:i + max_batch], more=i + max_batch < len(records))

    def _snapshot(self) -> Iterator[Frame]:
        fd, name = tempfile.mkstemp(suffix=".snap", dir=self.scratch_dir)
        os.close(fd)
        try:
            header = self.store.export_snapshot(name)
            step = MAX_SNAP_CHUNK - 4
            with open(name, "rb") as f:
                while True:
                    data = f.read(step)
                    if not data:
                        break
                    yield snap_chunk_frame(data)
        finally:
            os.unlink(name)
        yield snap_final_frame(header.digest)


def serve_channel(channel: Channel, session: ServerSession) -> None:
    """Answer requests on ``channel`` until the peer hangs up or the session ends."""
    try:
        while not session.closed:
            frame = channel.recv()
            for reply in session.handle(frame):
                channel.send(reply)
    except (EOFError, ConnectionError, OSError, CatalogError):
        pass
    finally:
        channel.close()
