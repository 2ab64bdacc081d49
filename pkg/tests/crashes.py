"""Crash injection at log-record boundaries.

A workload runs once against a durable store whose every log append is
followed by a copy of the store directory: that copy is exactly what a
process killed right after the append leaves behind (appends are unbuffered
and the cursors file is replaced atomically).  Cuts inside a multi-record
append and torn final records are derived from the same copies by
truncating the log file.
"""

from __future__ import annotations

import random
import shutil
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

from oracles import ReferenceCatalog

from repcat.federation import Federation
from repcat.model import FileRecord, StorageClass, Subject
from repcat.store import Store, open_store

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
LOCAL, REMOTE = "BNL", "SBU"


@dataclass
class CrashPoint:
    copy: Path
    log: str            # file name of the log cut by this point
    size: int           # byte length the log is truncated to
    local: int          # local records durable at this point
    remote: int         # remote records durable at this point
    applied: int        # local applied marker committed at this point


def _clock():
    n = 0

    def tick():
        nonlocal n
        n += 1
        return T0 + timedelta(microseconds=n)
    return tick


class _Recording(Store):
    on_append = None

    def _append(self, lg, bodies):
        super()._append(lg, bodies)
        if self.on_append is not None and lg.fh is not None:
            self.on_append(lg, bodies)


def _record_len(body: bytes) -> int:
    return 4 + len(body) + 4


def run_workload(root: Path, seed: int, n_ops: int = 500):
    """Run ``n_ops`` local writes and remote ops against a store at
    ``root/live``; return (oracle, crash points, final local seq)."""
    rng = random.Random(seed)
    fed = Federation.of(LOCAL, REMOTE)
    oracle = ReferenceCatalog({m.site: m.ordinal for m in fed})
    source = open_store(None, REMOTE, fed, clock=_clock())
    store = _Recording(LOCAL, fed, root / "live", sync=False, clock=_clock(), fork_snapshots=False)
    points: list[CrashPoint] = []
    count = {"local": 0, "remote": 0, "applied": 0}
    copies = root / "copies"
    copies.mkdir()

    def on_append(lg, bodies):
        before = lg.size - sum(_record_len(b) for b in bodies)
        # cuts strictly inside this append: each earlier record boundary, and
        # a torn byte inside each record
        pos = before
        kind = "local" if lg.origin == LOCAL else "remote"
        base = count[kind]
        dest = copies / str(len(points))
        shutil.copytree(root / "live", dest)
        name = lg.path.name
        for i, body in enumerate(bodies):
            n = _record_len(body)
            points.append(_point(dest, name, pos + n // 2, count, kind, base + i))
            pos += n
            points.append(_point(dest, name, pos, count, kind, base + i + 1))
        count[kind] = base + len(bodies)

    store.on_append = on_append
    live: list[tuple] = []
    remote_live: list[tuple] = []
    remote_sent = 0
    done = 0
    while done < n_ops:
        r = rng.random()
        if r < 0.1:
            store.apply_buffer()
            count["applied"] = count["local"]
            continue
        if r < 0.25:
            # a remote batch of 1..8 ops, produced by the remote site
            for _ in range(rng.randint(1, 8)):
                _random_write(rng, source, REMOTE, remote_live, oracle)
            source.apply_buffer()
            ops = source.scan_partition(REMOTE, remote_sent)
            store.apply_remote(ops)
            remote_sent += len(ops)
            done += len(ops)
            continue
        _random_write(rng, store, LOCAL, live, oracle)
        done += 1
    store.close()
    return oracle, points, count


def _point(dest, name, size, count, kind, n):
    local = n if kind == "local" else count["local"]
    remote = n if kind == "remote" else count["remote"]
    return CrashPoint(dest, name, size, local, remote, count["applied"])


def _random_write(rng, store, site, live, oracle):
    r = rng.random()
    if r < 0.7 or not live:
        key = (f"f{rng.randrange(60)}", f"h{rng.randrange(3)}", f"/{site}/{store.captured + 1}")
        row = FileRecord(*key, StorageClass.DISK, "p", rng.randrange(1000), T0, site)
        store.insert(row)
        oracle.write(site, "insert", row)
        live.append(key)
    elif r < 0.9:
        key = rng.choice(live)
        row = FileRecord(*key, StorageClass.TAPE, "q", rng.randrange(1000), T0, site)
        store.update(row)
        oracle.write(site, "update", row)
    else:
        key = live.pop(rng.randrange(len(live)))
        store.delete(Subject.FILES, key)
        oracle.write(site, "delete", (Subject.FILES, key))


def recover(point: CrashPoint, scratch: Path) -> Store:
    """Materialize ``point`` in ``scratch`` and open a store on it."""
    if scratch.exists():
        shutil.rmtree(scratch)
    shutil.copytree(point.copy, scratch)
    log = scratch / "log" / point.log
    with open(log, "r+b") as f:
        f.truncate(point.size)
    return open_store(scratch, LOCAL, Federation.of(LOCAL, REMOTE), sync=False, fork_snapshots=False)


def check_point(point: CrashPoint, oracle: ReferenceCatalog, scratch: Path) -> list[str]:
    """Recover ``point``; return a list of problems (empty when it is a
    committed prefix)."""
    problems = []
    try:
        store = recover(point, scratch)
    except Exception as exc:  # any failure to open is corruption
        return [f"recovery failed: {type(exc).__name__}: {exc}"]
    try:
        applied = store.cursor(LOCAL)
        if applied != min(point.applied, point.local):
            problems.append(f"applied marker {applied}, expected {min(point.applied, point.local)}")
        if store.captured != point.local:
            problems.append(f"captured {store.captured}, expected {point.local}")
        if store.cursor(REMOTE) != point.remote:
            problems.append(f"remote cursor {store.cursor(REMOTE)}, expected {point.remote}")
        want = oracle.digest_at({LOCAL: applied, REMOTE: store.cursor(REMOTE)})
        if store.checksum_data() != want:
            problems.append("data digest is not the committed prefix")
        buffer = {k: row for k, (_, row) in oracle.prefix_rows(LOCAL, point.local).items()}
        if store.buffer_rows() != buffer:
            problems.append("buffer is not the captured prefix")
        store.apply_buffer()
        if store.checksum_data() != oracle.digest_at({LOCAL: point.local, REMOTE: point.remote}):
            problems.append("state after re-apply diverges")
    finally:
        store.close()
    return problems
