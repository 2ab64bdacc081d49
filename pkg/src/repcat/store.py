"""Per-site storage with deferred updates.

Client writes go to the *buffer* (this site's rows only).  Every write is
captured as an :class:`OperationRecord` and appended durably to the local
operation log before the call returns; captured-but-unapplied operations
form the *last-operations* queue.  :meth:`Store.apply_buffer` folds the queue
into *data*, the replicated table set holding every site's partition, and
advances the applied marker.  Operations stay in the per-origin log after
apply so peers can pull them incrementally; logs are pruned only behind a
checkpoint snapshot.

On-disk layout under the store root::

    site                    site id, one line of text
    lock                    advisory lock file (flock)
    log/<ordinal>.oplog     per-origin log: [u32 len][operation][u32 crc32]*
    snap/<digest>.snap      checkpoint snapshots, named by row digest (hex)
    cursors                 local applied marker, log epoch, checkpoint
                            pointer and peer acknowledgements

Several processes may open the same root (a daemon plus short-lived CLI
invocations).  Mutations hold an exclusive ``flock`` on ``lock`` and first
catch up with whatever other processes appended; rewrites of log files
(pruning, snapshot install) bump the epoch in ``cursors``, which forces
other processes to reload.
"""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import logging
import os
import struct
import threading
import zlib
from collections import deque
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Optional, Union

from repcat.encoding import (
    _U32,
    _U64,
    decode_data_row,
    decode_key,
    decode_operation,
    decode_row,
    encode_data_row,
    encode_key,
    encode_operation,
    encode_row,
)
from repcat.errors import (
    CorruptLog,
    DecodeError,
    DigestMismatch,
    DuplicateKey,
    GapDetected,
    InvalidRecord,
    OriginIsSelf,
    OutOfOrder,
    OwnershipViolation,
    SiteMismatch,
    StoreError,
    UnknownKey,
    UnknownOrigin,
)
from repcat.federation import Federation
from repcat.model import (
    FileRecord,
    Key,
    OperationRecord,
    OpKind,
    Row,
    Subject,
    Topology,
    key_of,
    origin_of,
    subject_of,
    utc_now,
    validate_row,
)

log = logging.getLogger(__name__)

SequenceNumber = int
DEFAULT_RETENTION = 100_000

_CURSORS_MAGIC = b"RCUR"
_SNAP_MAGIC = b"RSNP"
_FORMAT_VERSION = 1
_CRC = struct.Struct(">I")
_ACK = struct.Struct(">IIQ")
# forked snapshots only pay off for large tables
FORK_SNAPSHOT_MIN_ROWS = 20_000
SNAPSHOT_NICENESS = 19


class DataRow(NamedTuple):
    seq: int
    row: Row
    payload: bytes


class _Partition:
    """One origin's rows.  ``by_seq`` is insertion ordered, and since every
    new entry carries the largest sequence number so far it stays sorted."""

    __slots__ = ("rows", "by_seq")

    def __init__(self) -> None:
        self.rows: dict[tuple[Subject, Key], DataRow] = {}
        self.by_seq: dict[int, tuple[Subject, Key]] = {}


class _OriginLog:
    __slots__ = ("origin", "ordinal", "base", "raw", "path", "fh", "size", "ino")

    def __init__(self, origin: str, ordinal: int) -> None:
        self.origin = origin
        self.ordinal = ordinal
        self.base = 0
        self.raw: list[bytes] = []
        self.path: Optional[Path] = None
        self.fh = None
        self.size = 0
        self.ino = 0

    @property
    def high(self) -> int:
        return self.base + len(self.raw)


@dataclass
class Snapshot:
    """Full copy of the data tables as of per-origin sequence numbers.

    ``rows`` holds (origin, seq, canonical row payload) sorted by
    (origin ordinal, seq); ``digest`` is SHA-256 over their data-row
    encodings in that order.
    """

    as_of: dict[str, int]
    rows: list[tuple[str, int, bytes]]
    digest: bytes

    def encode(self) -> bytes:
        parts = [_SNAP_MAGIC, struct.pack(">HI", _FORMAT_VERSION, len(self.as_of))]
        for origin, seq in self.as_of.items():
            b = origin.encode()
            parts.append(_U32.pack(len(b)) + b + _U64.pack(seq))
        parts.append(_U64.pack(len(self.rows)))
        parts.extend(encode_data_row(o, s, p) for o, s, p in self.rows)
        parts.append(self.digest)
        return b"".join(parts)

    @classmethod
    def decode(cls, data: bytes) -> "Snapshot":
        try:
            if data[:4] != _SNAP_MAGIC:
                raise DecodeError("not a snapshot")
            version, n = struct.unpack_from(">HI", data, 4)
            if version != _FORMAT_VERSION:
                raise DecodeError(f"unsupported snapshot version {version}")
            pos = 10
            as_of = {}
            for _ in range(n):
                (ln,) = _U32.unpack_from(data, pos)
                origin = data[pos + 4:pos + 4 + ln].decode()
                pos += 4 + ln
                (as_of[origin],) = _U64.unpack_from(data, pos)
                pos += 8
            (count,) = _U64.unpack_from(data, pos)
            pos += 8
            rows = []
            for _ in range(count):
                origin, seq, payload, pos = decode_data_row(data, pos)
                rows.append((origin, seq, payload))
            digest = bytes(data[pos:pos + 32])
            if len(digest) != 32 or pos + 32 != len(data):
                raise DecodeError("bad snapshot trailer")
        except (struct.error, UnicodeDecodeError, IndexError) as exc:
            raise DecodeError(f"malformed snapshot: {exc}") from None
        return cls(as_of, rows, digest)

    def verify(self) -> None:
        if rows_digest(self.rows) != self.digest:
            raise DigestMismatch("snapshot rows do not match their digest")


def rows_digest(rows: Iterable[tuple[str, int, bytes]]) -> bytes:
    h = hashlib.sha256()
    for origin, seq, payload in rows:
        h.update(encode_data_row(origin, seq, payload))
    return h.digest()


@dataclass
class _Cursors:
    local_applied: int = 0
    epoch: int = 0
    snapshot: Optional[bytes] = None
    acks: Optional[list[tuple[int, int, int]]] = None

    def encode(self) -> bytes:
        acks = self.acks or []
        body = b"".join((
            _CURSORS_MAGIC,
            struct.pack(">HQQB", _FORMAT_VERSION, self.local_applied, self.epoch, self.snapshot is not None),
            self.snapshot or b"",
            _U32.pack(len(acks)),
            *(_ACK.pack(*a) for a in acks),
        ))
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def decode(cls, data: bytes) -> "_Cursors":
        try:
            body, (crc,) = data[:-4], _CRC.unpack(data[-4:])
            if zlib.crc32(body) != crc or body[:4] != _CURSORS_MAGIC:
                raise CorruptLog("cursors file fails its checksum")
            version, applied, epoch, has_snap = struct.unpack_from(">HQQB", body, 4)
            pos = 4 + 19
            snap = None
            if has_snap:
                snap = bytes(body[pos:pos + 32])
                pos += 32
            (n,) = _U32.unpack_from(body, pos)
            pos += 4
            acks = [_ACK.unpack_from(body, pos + i * _ACK.size) for i in range(n)]
            if pos + n * _ACK.size != len(body):
                raise CorruptLog("cursors file has trailing bytes")
        except struct.error:
            raise CorruptLog("cursors file is truncated") from None
        return cls(applied, epoch, snap, acks)


class _FileLock:
    """Process-wide flock shared by all threads of this process."""

    def __init__(self, path: Path, shared: bool) -> None:
        self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        self._mode = fcntl.LOCK_SH if shared else fcntl.LOCK_EX
        self._mutex = threading.Lock()
        self._holders = 0

    def acquire(self) -> None:
        with self._mutex:
            if self._holders == 0:
                fcntl.flock(self._fd, self._mode)
            self._holders += 1

    def release(self) -> None:
        with self._mutex:
            self._holders -= 1
            if self._holders == 0:
                fcntl.flock(self._fd, fcntl.LOCK_UN)

    def __enter__(self) -> None:
        self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()

    def close(self) -> None:
        os.close(self._fd)


_NO_LOCK = contextlib.nullcontext()


def _read_records(data: bytes) -> tuple[list[bytes], int]:
    """Split log bytes into record bodies.  Returns (bodies, end of the last
    complete record); a torn final record is left out."""
    records = []
    pos = 0
    end = len(data)
    while pos + 4 <= end:
        (n,) = _U32.unpack_from(data, pos)
        stop = pos + 4 + n + 4
        if stop > end:
            break
        body = data[pos + 4:pos + 4 + n]
        (crc,) = _CRC.unpack_from(data, pos + 4 + n)
        if zlib.crc32(body) != crc:
            raise CorruptLog(f"CRC mismatch in log record at byte {pos}")
        records.append(body)
        pos = stop
    return records, pos


def _frame_record(raw: bytes) -> bytes:
    return _U32.pack(len(raw)) + raw + _CRC.pack(zlib.crc32(raw))


class Store:
    """One site's catalog store.  Use :func:`open_store` to create one.

    ``root=None`` gives a purely in-memory store (used by the simulation
    tests); otherwise state is durable under ``root``.
    """

    def __init__(
        self,
        site: str,
        federation: Federation,
        root: Union[str, Path, None] = None,
        *,
        sync: bool = True,
        readonly: bool = False,
        clock: Callable[[], datetime] = utc_now,
        retention: int = DEFAULT_RETENTION,
        fork_snapshots: Optional[bool] = None,
    ) -> None:
        if site not in federation:
            raise SiteMismatch(f"{site} is not a member of the federation")
        self.site = site
        self.federation = federation
        self.root = Path(root) if root is not None else None
        self.sync = sync
        self.readonly = readonly
        self.clock = clock
        self.retention = retention
        if fork_snapshots is None:
            fork_snapshots = hasattr(os, "fork")
        self.fork_snapshots = fork_snapshots

        self._wlock = threading.Lock()      # buffer, queue, local log appends
        self._dlock = threading.RLock()     # data, remote logs, cursors file
        self._apply_lock = threading.Lock()
        self._flock: Optional[_FileLock] = None
        self._closed = False
        self._reset()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
            self._flock = _FileLock(self.root / "lock", shared=readonly)
        with self._disk():
            with self._dlock, self._wlock:
                self._load()

    # -- state ------------------------------------------------------------

    def _reset(self) -> None:
        self._logs: dict[str, _OriginLog] = {m.site: _OriginLog(m.site, m.ordinal) for m in self.federation}
        self._parts: dict[str, _Partition] = {m.site: _Partition() for m in self.federation}
        self._applied: dict[str, int] = {m.site: 0 for m in self.federation}
        self._lfn_index: dict[str, set[tuple[str, Key]]] = {}
        self._buffer: dict[tuple[Subject, Key], Row] = {}
        # captured, unapplied local ops: (op, row or None, key)
        self._queue: deque[tuple[OperationRecord, Optional[Row], Key]] = deque()
        self._captured = 0
        self._acks: dict[str, dict[str, int]] = {}
        self._epoch = 0
        self._snap_digest: Optional[bytes] = None
        self._cursors_fp: Optional[tuple[int, int, int]] = None
        self._version = 0
        self._topo_cache = None

    @property
    def version(self) -> int:
        """Bumped on every change to the data tables."""
        return self._version

    @property
    def captured(self) -> SequenceNumber:
        """Highest local sequence number captured (applied or queued)."""
        return self._captured

    @property
    def last_operations(self) -> list[OperationRecord]:
        with self._wlock:
            return [op for op, _, _ in self._queue]

    @property
    def queue_depth(self) -> int:
        return len(self._queue)

    def cursors(self) -> dict[str, SequenceNumber]:
        """Highest sequence number applied to data, per origin."""
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                return dict(self._applied)

    def cursor(self, origin: str) -> SequenceNumber:
        return self.cursors()[origin]

    def log_base(self, origin: str) -> SequenceNumber:
        """Sequence numbers at or below this were pruned from ``origin``'s log."""
        return self._logs[origin].base

    # -- locking and multi-process refresh ---------------------------------

    def _disk(self):
        """Context manager holding the cross-process file lock."""
        if self._closed:
            raise StoreError("store is closed")
        return self._flock or _NO_LOCK

    def _require_writable(self) -> None:
        if self.readonly:
            raise StoreError("store was opened read-only")

    def _cursors_path(self) -> Path:
        return self.root / "cursors"

    def _fingerprint(self, path: Path) -> Optional[tuple[int, int, int]]:
        try:
            st = os.stat(path)
        except FileNotFoundError:
            return None
        return (st.st_ino, st.st_size, st.st_mtime_ns)

    def _check_epoch(self) -> None:
        """Reload everything if another process rewrote log files.  Call with
        the file lock held and no thread locks."""
        if self.root is None:
            return
        fp = self._fingerprint(self._cursors_path())
        if fp == self._cursors_fp or fp is None:
            return
        cur = _Cursors.decode(self._cursors_path().read_bytes())
        if cur.epoch != self._epoch or cur.snapshot != self._snap_digest:
            log.info("store %s changed underneath us (epoch %d -> %d), reloading", self.root, self._epoch, cur.epoch)
            with self._dlock, self._wlock:
                self._close_files()
                self._reset()
                self._load()

    def _tail(self, lg: _OriginLog) -> list[bytes]:
        """New complete records appended to ``lg`` by other processes."""
        if lg.path is None:
            return []
        try:
            size = os.stat(lg.path).st_size
        except FileNotFoundError:
            return []
        if size == lg.size:
            return []
        with open(lg.path, "rb") as f:
            f.seek(lg.size)
            data = f.read()
        records, good = _read_records(data)
        lg.size += good
        if good != len(data) and not self.readonly:
            # torn tail left by a crashed writer; we hold the lock so nobody is mid-append
            os.truncate(lg.path, lg.size)
        return records

    def _refresh_local(self) -> None:
        """Pick up local ops captured by other processes.  Needs ``_wlock``."""
        if self.root is None:
            return
        lg = self._logs[self.site]
        for body in self._tail(lg):
            op = self._decode_logged(body, self.site, lg.high + 1)
            lg.raw.append(body)
            self._capture(op)

    def _refresh_data(self) -> None:
        """Pick up remote ops and apply markers written by other processes.
        Needs ``_dlock``."""
        if self.root is None:
            return
        fp = self._fingerprint(self._cursors_path())
        if fp is not None and fp != self._cursors_fp:
            cur = _Cursors.decode(self._cursors_path().read_bytes())
            self._cursors_fp = fp
            self._merge_acks(cur.acks or [])
            if cur.local_applied > self._applied[self.site]:
                with self._wlock:
                    self._refresh_local()
                    self._fold_local_upto(cur.local_applied)
        for origin, lg in self._logs.items():
            if origin == self.site:
                continue
            for body in self._tail(lg):
                op = self._decode_logged(body, origin, lg.high + 1)
                lg.raw.append(body)
                self._fold_op(op)
                self._applied[origin] = op.seq

    def _decode_logged(self, body: bytes, origin: str, expect_seq: int) -> OperationRecord:
        try:
            op = decode_operation(body)
        except DecodeError as exc:
            raise CorruptLog(f"undecodable record in {origin} log: {exc}") from None
        if op.origin != origin or op.seq != expect_seq:
            raise CorruptLog(f"{origin} log: expected seq {expect_seq}, found {op.origin}:{op.seq}")
        return op

    # -- loading ------------------------------------------------------------

    def _load(self) -> None:
        if self.root is None:
            return
        (self.root / "log").mkdir(exist_ok=True)
        (self.root / "snap").mkdir(exist_ok=True)
        site_file = self.root / "site"
        if site_file.exists():
            owner = site_file.read_text().strip()
            if owner != self.site:
                raise SiteMismatch(f"store at {self.root} belongs to site {owner}, not {self.site}")
        elif self.readonly:
            raise StoreError(f"no store at {self.root}")
        else:
            self._write_atomic(site_file, f"{self.site}\n".encode())

        cur = _Cursors()
        cpath = self._cursors_path()
        if cpath.exists():
            cur = _Cursors.decode(cpath.read_bytes())
        self._cursors_fp = self._fingerprint(cpath)
        self._epoch = cur.epoch
        self._merge_acks(cur.acks or [])

        as_of: dict[str, int] = {}
        if cur.snapshot is not None:
            self._snap_digest = cur.snapshot
            spath = self.root / "snap" / f"{cur.snapshot.hex()}.snap"
            try:
                snap = Snapshot.decode(spath.read_bytes())
                snap.verify()
            except (OSError, DecodeError, DigestMismatch) as exc:
                raise CorruptLog(f"checkpoint {spath.name} unusable: {exc}") from None
            if snap.digest != cur.snapshot:
                raise CorruptLog(f"checkpoint {spath.name} has the wrong digest")
            as_of = snap.as_of
            for origin, part in self._partitions_from(snap).items():
                self._swap_partition(origin, part)

        for origin, lg in self._logs.items():
            self._load_log(lg, as_of.get(origin, 0), cur.local_applied)

    def _load_log(self, lg: _OriginLog, snap_as_of: int, local_applied: int) -> None:
        origin = lg.origin
        path = self.root / "log" / f"{lg.ordinal}.oplog"
        data = path.read_bytes() if path.exists() else b""
        bodies, good = _read_records(data)
        if good != len(data) and not self.readonly:
            log.warning("truncating torn tail of %s (%d bytes)", path, len(data) - good)
            os.truncate(path, good)
        ops = []
        for i, body in enumerate(bodies):
            try:
                op = decode_operation(body)
            except DecodeError as exc:
                raise CorruptLog(f"{path.name}: undecodable record {i}: {exc}") from None
            if op.origin != origin or (ops and op.seq != ops[-1].seq + 1):
                raise CorruptLog(f"{path.name}: sequence break at record {i}")
            ops.append(op)
        if ops and ops[0].seq - 1 > snap_as_of:
            raise CorruptLog(f"{path.name}: log starts at {ops[0].seq} but checkpoint covers only {snap_as_of}")
        if ops and ops[-1].seq < snap_as_of:
            # everything here is older than the checkpoint
            ops, bodies, good = [], [], 0
            if not self.readonly:
                self._write_atomic(path, b"")
        lg.base = ops[0].seq - 1 if ops else snap_as_of
        lg.raw = bodies
        lg.path = path
        lg.size = good
        if not self.readonly:
            lg.fh = open(path, "ab", buffering=0)

        if origin != self.site:
            for op in ops:
                if op.seq > snap_as_of:
                    self._fold_op(op)
            self._applied[origin] = lg.high
            return
        if not snap_as_of <= local_applied <= lg.high:
            raise CorruptLog(f"applied marker {local_applied} outside log range [{snap_as_of}, {lg.high}]")
        applied = local_applied
        for op in ops:
            if snap_as_of < op.seq <= applied:
                self._fold_op(op)
        self._applied[origin] = applied
        self._captured = max(lg.high, applied)
        part = self._parts[self.site]
        self._buffer = {k: dr.row for k, dr in part.rows.items()}
        for op in ops:
            if op.seq > applied:
                self._capture(op)

    def _capture(self, op: OperationRecord) -> None:
        """Replay a logged local op into the buffer and queue."""
        if op.kind == OpKind.DELETE:
            subject, key = decode_key(op.payload)
            self._buffer.pop((subject, key), None)
            self._queue.append((op, None, key))
        else:
            row = decode_row(op.payload)
            key = key_of(row)
            self._buffer[(op.subject, key)] = row
            self._queue.append((op, row, key))
        self._captured = op.seq

    # -- durable helpers ----------------------------------------------------

    def _write_atomic(self, path: Path, data: bytes) -> None:
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            if self.sync:
                f.flush()
                os.fsync(f.fileno())
        os.replace(tmp, path)
        if self.sync:
            dfd = os.open(path.parent, os.O_RDONLY)
            try:
                os.fsync(dfd)
            finally:
                os.close(dfd)

    def _append(self, lg: _OriginLog, bodies: list[bytes]) -> None:
        lg.raw.extend(bodies)
        if lg.fh is None:
            return
        data = b"".join(_frame_record(b) for b in bodies)
        lg.fh.write(data)
        if self.sync:
            os.fsync(lg.fh.fileno())
        lg.size += len(data)
        self._after_append(lg)

    def _after_append(self, lg: _OriginLog) -> None:
        """Fault-injection hook: called after every durable log append."""

    def _write_cursors(self, local_applied: Optional[int] = None) -> None:
        if self.root is None:
            return
        if local_applied is None:
            local_applied = self._applied[self.site]
        acks = []
        for peer, per_origin in sorted(self._acks.items()):
            for origin, seq in sorted(per_origin.items()):
                if peer in self.federation and origin in self.federation:
                    acks.append((self.federation.ordinal(peer), self.federation.ordinal(origin), seq))
        cur = _Cursors(local_applied, self._epoch, self._snap_digest, acks)
        self._write_atomic(self._cursors_path(), cur.encode())
        self._cursors_fp = self._fingerprint(self._cursors_path())

    def _merge_acks(self, acks: list[tuple[int, int, int]]) -> None:
        by_ordinal = {m.ordinal: m.site for m in self.federation}
        for peer_ord, origin_ord, seq in acks:
            peer, origin = by_ordinal.get(peer_ord), by_ordinal.get(origin_ord)
            if peer and origin:
                slot = self._acks.setdefault(peer, {})
                slot[origin] = max(slot.get(origin, 0), seq)

    def _close_files(self) -> None:
        for lg in self._logs.values():
            if lg.fh is not None:
                lg.fh.close()
                lg.fh = None

    def close(self) -> None:
        if self._closed:
            return
        with self._dlock, self._wlock:
            self._close_files()
            if self._flock is not None:
                self._flock.close()
            self._closed = True

    def __enter__(self) -> "Store":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- data-table mutation --------------------------------------------------

    def _index_add(self, origin: str, key: Key) -> None:
        self._lfn_index.setdefault(key[0], set()).add((origin, key))

    def _index_remove(self, origin: str, key: Key) -> None:
        entries = self._lfn_index.get(key[0])
        if entries is not None:
            entries.discard((origin, key))
            if not entries:
                del self._lfn_index[key[0]]

    def _fold(self, origin: str, seq: int, kind: OpKind, subject: Subject, key: Key,
              row: Optional[Row], payload: bytes) -> None:
        part = self._parts[origin]
        k = (subject, key)
        old = part.rows.pop(k, None)
        if old is not None:
            del part.by_seq[old.seq]
            if subject is Subject.FILES:
                self._index_remove(origin, key)
        if kind != OpKind.DELETE:
            part.rows[k] = DataRow(seq, row, payload)
            part.by_seq[seq] = k
            if subject is Subject.FILES:
                self._index_add(origin, key)
        self._version += 1

    def _fold_op(self, op: OperationRecord) -> None:
        if op.kind == OpKind.DELETE:
            subject, key = decode_key(op.payload)
            self._fold(op.origin, op.seq, op.kind, subject, key, None, op.payload)
        else:
            row = decode_row(op.payload)
            self._fold(op.origin, op.seq, op.kind, op.subject, key_of(row), row, op.payload)

    def _partitions_from(self, snap: Snapshot) -> dict[str, _Partition]:
        parts: dict[str, _Partition] = {}
        for origin, seq, payload in snap.rows:
            part = parts.get(origin)
            if part is None:
                if origin not in self.federation:
                    raise UnknownOrigin(f"snapshot holds rows of unknown origin {origin}")
                part = parts[origin] = _Partition()
            try:
                row = decode_row(payload)
            except DecodeError as exc:
                raise DigestMismatch(f"snapshot row {origin}:{seq} undecodable: {exc}") from None
            if origin_of(row) != origin:
                raise DigestMismatch(f"snapshot row {origin}:{seq} is owned by {origin_of(row)}")
            k = (subject_of(row), key_of(row))
            if k in part.rows or seq > snap.as_of.get(origin, 0):
                raise DigestMismatch(f"snapshot row {origin}:{seq} is inconsistent")
            part.rows[k] = DataRow(seq, row, payload)
            part.by_seq[seq] = k
        return parts

    def _swap_partition(self, origin: str, part: _Partition) -> None:
        old = self._parts[origin]
        for subject, key in old.rows:
            if subject is Subject.FILES:
                self._index_remove(origin, key)
        self._parts[origin] = part
        for subject, key in part.rows:
            if subject is Subject.FILES:
                self._index_add(origin, key)
        self._version += 1

    # -- local writes -------------------------------------------------------

    def write_local(self, kind: OpKind, subject: Subject, row) -> SequenceNumber:
        """Apply a client write to the buffer and capture it.

        For inserts and updates ``row`` is the full row; for deletes it may be
        the row or its primary-key tuple.  Returns the new local sequence
        number once the operation is durable.
        """
        self._require_writable()
        if type(kind) is not OpKind:
            kind = OpKind(kind)
        if type(subject) is not Subject:
            subject = Subject(subject)
        if kind == OpKind.DELETE and isinstance(row, tuple):
            key = row
            row = None
        else:
            validate_row(row)
            if subject_of(row) != subject:
                raise InvalidRecord(f"{type(row).__name__} does not belong to table {subject}")
            if origin_of(row) != self.site:
                raise OwnershipViolation(f"row owned by {origin_of(row)} cannot be written at {self.site}")
            key = key_of(row)
        k = (subject, key)
        with self._disk():
            self._check_epoch()
            with self._wlock:
                self._refresh_local()
                exists = k in self._buffer
                if kind == OpKind.INSERT:
                    if exists or self._owned_elsewhere(k):
                        raise DuplicateKey(f"{subject} row {key} already exists")
                    if subject is Subject.SITES and row.ordinal != self.federation.ordinal(row.id):
                        raise InvalidRecord(f"site {row.id} has ordinal {self.federation.ordinal(row.id)}")
                elif not exists:
                    if self._owned_elsewhere(k):
                        raise OwnershipViolation(f"{subject} row {key} belongs to another site")
                    raise UnknownKey(f"no {subject} row {key} at {self.site}")
                if kind == OpKind.DELETE:
                    payload = encode_key(subject, key)
                else:
                    payload = encode_row(row)
                seq = self._captured + 1
                op = OperationRecord(self.site, seq, kind, subject, payload, self.clock())
                self._append(self._logs[self.site], [encode_operation(op)])
                self._captured = seq
                if kind == OpKind.DELETE:
                    del self._buffer[k]
                else:
                    self._buffer[k] = row
                self._queue.append((op, row, key))
                return seq

    def _owned_elsewhere(self, k: tuple[Subject, Key]) -> bool:
        for origin, part in self._parts.items():
            if origin != self.site and k in part.rows:
                return True
        return False

    def insert(self, row: Row) -> SequenceNumber:
        return self.write_local(OpKind.INSERT, subject_of(row), row)

    def update(self, row: Row) -> SequenceNumber:
        return self.write_local(OpKind.UPDATE, subject_of(row), row)

    def delete(self, subject: Subject, key_or_row) -> SequenceNumber:
        return self.write_local(OpKind.DELETE, subject, key_or_row)

    def apply_buffer(self) -> int:
        """Fold the queued operations into the data tables; return how many."""
        self._require_writable()
        with self._disk():
            self._check_epoch()
            with self._apply_lock:
                with self._wlock:
                    self._refresh_local()
                    target = self._captured
                with self._dlock:
                    self._refresh_data()
                    before = self._applied[self.site]
                    if target <= before:
                        return 0
                    # the marker on disk is the commit point
                    self._write_cursors(local_applied=target)
                    with self._wlock:
                        self._fold_local_upto(target)
                    return target - before

    def _fold_local_upto(self, target: int) -> None:
        """Move queued local ops with seq <= target into data.  Needs both locks."""
        q = self._queue
        while q and q[0][0].seq <= target:
            op, row, key = q.popleft()
            if op.seq > self._applied[self.site]:
                self._fold(self.site, op.seq, op.kind, op.subject, key, row, op.payload)
        self._applied[self.site] = max(self._applied[self.site], target)

    # -- replication surface ------------------------------------------------

    def scan_raw(self, origin: str, after: SequenceNumber, limit: Optional[int] = None) -> list[bytes]:
        """Encoded ops of ``origin`` with seq > after, from the applied log only."""
        if origin not in self.federation:
            raise UnknownOrigin(f"unknown origin {origin}")
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                lg = self._logs[origin]
                high = self._applied[origin]
                if after >= high:
                    return []
                if after < lg.base:
                    raise GapDetected(f"{origin} log pruned through {lg.base}, cannot serve from {after}")
                stop = high if limit is None else min(high, after + limit)
                return lg.raw[after - lg.base:stop - lg.base]

    def scan_partition(self, origin: str, after: SequenceNumber) -> list[OperationRecord]:
        return [decode_operation(b) for b in self.scan_raw(origin, after)]

    def apply_remote(self, ops: Iterable[OperationRecord]) -> dict[str, SequenceNumber]:
        """Apply a batch of remote operations.

        Already-applied (origin, seq) pairs are skipped, so re-delivery is
        harmless.  The whole batch is validated before anything is written.
        Returns the new high-water mark of every origin present in the batch.
        """
        self._require_writable()
        ops = list(ops)
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                fresh: dict[str, list[tuple[OperationRecord, Optional[Row], Key, Subject]]] = {}
                expect: dict[str, int] = {}
                for op in ops:
                    origin = op.origin
                    if origin == self.site:
                        raise OriginIsSelf(f"operation {origin}:{op.seq} originates here")
                    if origin not in self.federation:
                        raise UnknownOrigin(f"unknown origin {origin}")
                    nxt = expect.get(origin)
                    if nxt is None:
                        nxt = self._applied[origin] + 1
                    if op.seq < nxt:
                        if origin in fresh:
                            raise OutOfOrder(f"{origin}:{op.seq} repeats within batch")
                        continue
                    if op.seq != nxt:
                        raise OutOfOrder(f"{origin}: expected seq {nxt}, got {op.seq}")
                    expect[origin] = nxt + 1
                    fresh.setdefault(origin, []).append(self._decode_remote(op))
                for origin, items in fresh.items():
                    self._append(self._logs[origin], [encode_operation(op) for op, _, _, _ in items])
                    for op, row, key, subject in items:
                        self._fold(origin, op.seq, op.kind, subject, key, row, op.payload)
                    self._applied[origin] = items[-1][0].seq
                return {origin: self._applied[origin] for origin in {op.origin for op in ops}}

    def _decode_remote(self, op: OperationRecord) -> tuple[OperationRecord, Optional[Row], Key, Subject]:
        if op.kind == OpKind.DELETE:
            subject, key = decode_key(op.payload)
            if subject != op.subject:
                raise DecodeError(f"{op.origin}:{op.seq}: key subject does not match")
            return op, None, key, subject
        row = decode_row(op.payload)
        if subject_of(row) != op.subject:
            raise DecodeError(f"{op.origin}:{op.seq}: payload is not a {op.subject} row")
        if origin_of(row) != op.origin:
            raise OwnershipViolation(f"{op.origin}:{op.seq} carries a row owned by {origin_of(row)}")
        return op, row, key_of(row), op.subject

    def record_ack(self, peer: str, origin: str, seq: SequenceNumber) -> None:
        """Note that ``peer`` holds ``origin``'s ops through ``seq``."""
        if peer not in self.federation or origin not in self.federation:
            return
        with self._dlock:
            slot = self._acks.setdefault(peer, {})
            if seq > slot.get(origin, 0):
                slot[origin] = seq

    # -- snapshots ------------------------------------------------------------

    def _ordered_rows(self) -> Iterator[tuple[str, int, bytes]]:
        for m in self.federation:
            part = self._parts[m.site]
            rows = part.rows
            for seq, k in part.by_seq.items():
                yield m.site, seq, rows[k].payload

    def _snapshot_unlocked(self) -> Snapshot:
        rows = list(self._ordered_rows())
        return Snapshot(dict(self._applied), rows, rows_digest(rows))

    def take_snapshot(self) -> Snapshot:
        """Copy the data tables.  Holds the data lock only; local writes keep
        landing in the buffer meanwhile."""
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                return self._snapshot_unlocked()

    def export_snapshot(self, dest: Union[str, Path]) -> Snapshot:
        """Write an encoded snapshot to ``dest`` and return its header
        (``rows`` left empty).

        Large stores are serialized in a forked child, so the parent only
        holds the data lock for the duration of ``fork()`` and its threads
        (notably client writers) never compete with the serializer for the
        interpreter lock.
        """
        dest = Path(dest)
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                n_rows = sum(len(p.rows) for p in self._parts.values())
                as_of = dict(self._applied)
                if not (self.fork_snapshots and n_rows >= FORK_SNAPSHOT_MIN_ROWS):
                    snap = self._snapshot_unlocked()
                    dest.write_bytes(snap.encode())
                    return Snapshot(as_of, [], snap.digest)
                pid = os.fork()
                if pid == 0:  # pragma: no cover - runs in the child
                    status = 1
                    try:
                        # background work: yield the CPU to foreground writers
                        os.nice(SNAPSHOT_NICENESS)
                        dest.write_bytes(self._snapshot_unlocked().encode())
                        status = 0
                    finally:
                        os._exit(status)
        _, status = os.waitpid(pid, 0)
        if status != 0:
            raise StoreError(f"snapshot child exited with status {status}")
        with open(dest, "rb") as f:
            f.seek(-32, os.SEEK_END)
            digest = f.read(32)
        return Snapshot(as_of, [], digest)

    def install_snapshot(self, snap: Snapshot) -> list[str]:
        """Replace remote partitions that ``snap`` holds newer copies of.

        Partitions are independent, so each origin is taken from the snapshot
        only if the snapshot is ahead of us; cursors never move backwards and
        the local partition is never touched.  Returns the replaced origins.
        """
        self._require_writable()
        snap.verify()
        for origin, seq in snap.as_of.items():
            if origin not in self.federation:
                raise UnknownOrigin(f"snapshot covers unknown origin {origin}")
        order = {m.site: m.ordinal for m in self.federation}
        prev = (0, 0)
        for origin, seq, _ in snap.rows:
            pos = (order.get(origin, 0), seq)
            if pos <= prev:
                raise DigestMismatch("snapshot rows are not in canonical order")
            prev = pos
        parts = self._partitions_from(snap)
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                replaced = [
                    o for o, seq in snap.as_of.items()
                    if o != self.site and seq > self._applied[o]
                ]
                if not replaced:
                    return []
                for origin in replaced:
                    self._swap_partition(origin, parts.get(origin, _Partition()))
                    lg = self._logs[origin]
                    lg.base = snap.as_of[origin]
                    lg.raw = []
                    self._applied[origin] = lg.base
                if self.root is not None:
                    with self._wlock:
                        self._checkpoint_unlocked(bump_epoch=True)
                        for origin in replaced:
                            self._rewrite_log(self._logs[origin])
                return replaced

    def _checkpoint_unlocked(self, *, bump_epoch: bool) -> None:
        snap = self._snapshot_unlocked()
        path = self.root / "snap" / f"{snap.digest.hex()}.snap"
        if not path.exists():
            self._write_atomic(path, snap.encode())
        old = self._snap_digest
        self._snap_digest = snap.digest
        if bump_epoch:
            self._epoch += 1
        self._write_cursors()
        if old is not None and old != snap.digest:
            with contextlib.suppress(FileNotFoundError):
                (self.root / "snap" / f"{old.hex()}.snap").unlink()

    def _rewrite_log(self, lg: _OriginLog) -> None:
        data = b"".join(_frame_record(b) for b in lg.raw)
        if lg.fh is not None:
            lg.fh.close()
        self._write_atomic(lg.path, data)
        lg.fh = open(lg.path, "ab", buffering=0)
        lg.size = len(data)

    def checkpoint(self) -> bytes:
        """Persist a snapshot of the data tables; return its digest."""
        self._require_writable()
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                if self.root is None:
                    return self._snapshot_unlocked().digest
                with self._wlock:
                    self._checkpoint_unlocked(bump_epoch=False)
                return self._snap_digest

    def prune(self, peers: Optional[Iterable[str]] = None) -> dict[str, int]:
        """Drop log prefixes every peer has acknowledged, keeping at least
        ``retention`` ops per origin.  Returns the new log base of each
        pruned origin."""
        self._require_writable()
        peers = [p for p in (peers if peers is not None else self.federation.site_ids) if p != self.site]
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                cut = {}
                for origin, lg in self._logs.items():
                    point = self._applied[origin] - self.retention
                    for peer in peers:
                        if peer != origin:
                            point = min(point, self._acks.get(peer, {}).get(origin, 0))
                    if point > lg.base:
                        cut[origin] = point
                if not cut:
                    return {}
                with self._wlock:
                    for origin, point in cut.items():
                        lg = self._logs[origin]
                        lg.raw = lg.raw[point - lg.base:]
                        lg.base = point
                    if self.root is not None:
                        self._checkpoint_unlocked(bump_epoch=True)
                        for origin in cut:
                            self._rewrite_log(self._logs[origin])
                return cut

    # -- reads ---------------------------------------------------------------

    @contextlib.contextmanager
    def reading(self, include_pending: bool = False) -> Iterator["DataView"]:
        """Consistent read access to the data tables."""
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                if not include_pending:
                    yield DataView(self, None)
                    return
                with self._wlock:
                    self._refresh_local()
                    yield DataView(self, dict(self._buffer))

    def checksum_data(self) -> bytes:
        """SHA-256 over all data rows in (origin ordinal, seq) order."""
        with self._disk():
            self._check_epoch()
            with self._dlock:
                self._refresh_data()
                return rows_digest(self._ordered_rows())

    def data_rows(self, origin: Optional[str] = None) -> dict[tuple[str, Subject, Key], Row]:
        with self.reading() as view:
            return {(o, s, k): row for o, s, k, row in view.rows(origin=origin)}

    def buffer_rows(self) -> dict[tuple[Subject, Key], Row]:
        with self._disk():
            self._check_epoch()
            with self._wlock:
                self._refresh_local()
                return dict(self._buffer)

    def row_count(self) -> int:
        with self._dlock:
            return sum(len(p.rows) for p in self._parts.values())


class DataView:
    """Read handle returned by :meth:`Store.reading`; valid inside the block."""

    def __init__(self, store: Store, pending: Optional[dict]) -> None:
        self._store = store
        self._pending = pending

    @property
    def site(self) -> str:
        return self._store.site

    @property
    def federation(self) -> Federation:
        return self._store.federation

    def rows(self, subject: Optional[Subject] = None, origin: Optional[str] = None
             ) -> Iterator[tuple[str, Subject, Key, Row]]:
        local = self._store.site
        for o, part in self._store._parts.items():
            if origin is not None and o != origin:
                continue
            if self._pending is not None and o == local:
                items = self._pending.items()
                for (s, k), row in items:
                    if subject is None or s == subject:
                        yield o, s, k, row
                continue
            for (s, k), dr in part.rows.items():
                if subject is None or s == subject:
                    yield o, s, k, dr.row

    def files(self) -> Iterator[FileRecord]:
        for _, _, _, row in self.rows(Subject.FILES):
            yield row

    def files_named(self, lfn: str) -> list[FileRecord]:
        store = self._store
        local = store.site
        out = []
        for origin, key in store._lfn_index.get(lfn, ()):
            if self._pending is not None and origin == local:
                continue
            out.append(store._parts[origin].rows[(Subject.FILES, key)].row)
        if self._pending is not None:
            out.extend(row for (s, k), row in self._pending.items() if s is Subject.FILES and k[0] == lfn)
        return out

    def topology(self) -> Topology:
        """Sites from the federation plus replicated cluster, host and cost rows."""
        store = self._store
        cache = store._topo_cache
        if self._pending is None and cache is not None and cache[0] == store.version:
            return cache[1]
        rows = (row for _, s, _, row in self.rows() if s is not Subject.FILES)
        topo = Topology.from_rows(self.federation.sites(), rows)
        if self._pending is None:
            store._topo_cache = (store.version, topo)
        return topo


def open_store(path: Union[str, Path, None], site: str, federation: Federation, **options) -> Store:
    """Open (creating if needed) the store of ``site`` at ``path``.

    Recovery replays the operation logs on top of the latest checkpoint.
    """
    return Store(site, federation, path, **options)
