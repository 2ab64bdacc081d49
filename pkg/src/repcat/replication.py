"""Pull-based anti-entropy between sites.

A site asks a peer for its cursors, then for every origin where the peer is
ahead, pulls the missing operations and applies them.  Peers relay
third-party partitions: operations are keyed by (origin, seq), so getting
the same op from two peers is harmless.

Replication code only needs a ``connect(peer) -> ClientSession`` callable;
see :func:`tcp_connector` and :meth:`SimNetwork.connector`.
"""

from __future__ import annotations

import enum
import logging
import signal
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Iterable, Optional

from repcat.errors import (
    CatalogError,
    DecodeError,
    GapNeedsSnapshot,
    StoreError,
    TransportError,
    Unreachable,
)
from repcat.federation import Federation
from repcat.model import utc_now
from repcat.store import Store
from repcat.transport.session import ClientSession
from repcat.transport.wire import DEFAULT_MAX_BATCH

log = logging.getLogger(__name__)

# catch-up rounds below this many ops end a bootstrap
BOOTSTRAP_THRESHOLD = 100


class Outcome(str, enum.Enum):
    SUCCESS = "Success"
    UNREACHABLE = "Unreachable"
    PROTOCOL_ERROR = "ProtocolError"
    GAP_NEEDS_SNAPSHOT = "GapNeedsSnapshot"

    def __str__(self) -> str:
        return self.value


@dataclass
class Peer:
    site: str
    address: str = ""
    last_success: Optional[datetime] = None
    consecutive_failures: int = 0
    next_attempt: float = 0.0


@dataclass
class SyncReport:
    peer: str
    ops_pulled: dict[str, int] = field(default_factory=dict)
    ops_transferred: int = 0
    delta_frames: int = 0
    bytes: int = 0
    duration: float = 0.0
    outcome: Outcome = Outcome.SUCCESS
    error: Optional[str] = None
    snapshot_origins: list[str] = field(default_factory=list)

    @property
    def total_pulled(self) -> int:
        return sum(self.ops_pulled.values())

    def as_dict(self) -> dict:
        return {
            "peer": self.peer,
            "outcome": str(self.outcome),
            "ops_pulled": dict(self.ops_pulled),
            "ops_transferred": self.ops_transferred,
            "bytes": self.bytes,
            "duration": round(self.duration, 6),
            "error": self.error,
        }


@dataclass(frozen=True)
class RetryPolicy:
    """Failed peers wait ``min(interval * 2**(failures-1), max_backoff)``."""

    interval: float = 30.0
    max_backoff: float = 600.0

    def __post_init__(self) -> None:
        if self.interval <= 0:
            raise ValueError("retry interval must be positive")
        if self.max_backoff < self.interval:
            raise ValueError("max_backoff must be at least the interval")

    def delay(self, failures: int) -> float:
        if failures <= 0:
            return 0.0
        return min(self.interval * 2 ** min(failures - 1, 62), self.max_backoff)


Connector = Callable[[Peer], ClientSession]


def peers_of(federation: Federation, site: str) -> list[Peer]:
    return [Peer(m.site, m.address) for m in federation if m.site != site]


def tcp_connector(site: str, federation: Federation, **options) -> Connector:
    from repcat.transport.tcp import connect

    def connect_peer(peer: Peer) -> ClientSession:
        address = peer.address or federation.member(peer.site).address
        return connect(address, site, federation, **options)
    return connect_peer


def _pull(store: Store, session: ClientSession, report: SyncReport, max_batch: int) -> int:
    """Pull every origin the peer is ahead on; return ops newly applied."""
    theirs = session.request_cursors()
    ours = store.cursors()
    pulled = 0
    for member in store.federation:
        origin = member.site
        if origin == store.site:
            continue
        report.ops_pulled.setdefault(origin, 0)
        if theirs.get(origin, 0) <= ours[origin]:
            continue
        for batch in session.request_delta(origin, ours[origin], max_batch):
            if not batch:
                continue
            before = store.cursor(origin)
            store.apply_remote(batch)
            gained = store.cursor(origin) - before
            report.ops_pulled[origin] += gained
            report.ops_transferred += len(batch)
            pulled += gained
    return pulled


def _classify(exc: Exception) -> Outcome:
    if isinstance(exc, Unreachable):
        return Outcome.UNREACHABLE
    if isinstance(exc, GapNeedsSnapshot):
        return Outcome.GAP_NEEDS_SNAPSHOT
    return Outcome.PROTOCOL_ERROR


def _finish(peer: Peer, report: SyncReport, session: Optional[ClientSession], started: float) -> SyncReport:
    if session is not None:
        report.bytes = session.bytes_received
        report.delta_frames = session.delta_frames
        session.close()
    report.duration = time.perf_counter() - started
    if report.outcome is Outcome.SUCCESS:
        peer.last_success = utc_now()
        peer.consecutive_failures = 0
    else:
        peer.consecutive_failures += 1
    return report


def sync_with_peer(store: Store, peer: Peer, connect: Connector, *,
                   max_batch: int = DEFAULT_MAX_BATCH) -> SyncReport:
    """Pull ``peer``'s delta into ``store``.  Failures go into the report;
    progress made before a failure is kept."""
    started = time.perf_counter()
    report = SyncReport(peer.site)
    session = None
    try:
        session = connect(peer)
        _pull(store, session, report, max_batch)
    except (TransportError, DecodeError, StoreError) as exc:
        report.outcome = _classify(exc)
        report.error = f"{type(exc).__name__}: {exc}"
        log.info("sync with %s: %s", peer.site, report.error)
    return _finish(peer, report, session, started)


def sync_round(store: Store, peers: Iterable[Peer], connect: Connector, *,
               max_batch: int = DEFAULT_MAX_BATCH) -> list[SyncReport]:
    return [sync_with_peer(store, p, connect, max_batch=max_batch) for p in peers]


def bootstrap_from(store: Store, peer: Peer, connect: Connector, *,
                   threshold: int = BOOTSTRAP_THRESHOLD, max_batch: int = DEFAULT_MAX_BATCH,
                   max_rounds: int = 1000) -> SyncReport:
    """Install ``peer``'s snapshot, then pull deltas until a round brings
    fewer than ``threshold`` ops, then pull once more.

    Unlike :func:`sync_with_peer` this raises on failure: it is an explicit
    operator action and a half-finished bootstrap should be visible.
    """
    started = time.perf_counter()
    report = SyncReport(peer.site)
    session = connect(peer)
    try:
        snap = session.request_snapshot()
        report.snapshot_origins = store.install_snapshot(snap)
        for _ in range(max_rounds):
            if _pull(store, session, report, max_batch) < threshold:
                break
        _pull(store, session, report, max_batch)
    except CatalogError:
        peer.consecutive_failures += 1
        session.close()
        raise
    return _finish(peer, report, session, started)


class Scheduler:
    """Periodic apply + sync loop with per-peer backoff.

    :meth:`tick` does one round at virtual time ``now``, which lets tests
    drive many ticks without sleeping; :meth:`run` ticks every
    ``policy.interval`` seconds of real time.
    """

    def __init__(self, store: Store, peers: Iterable[Peer], connect: Connector,
                 policy: RetryPolicy = RetryPolicy(), *, max_batch: int = DEFAULT_MAX_BATCH,
                 bootstrap_on_gap: bool = True, prune: bool = False,
                 on_tick: Optional[Callable[[list[SyncReport]], None]] = None) -> None:
        self.store = store
        self.peers = list(peers)
        self.connect = connect
        self.policy = policy
        self.max_batch = max_batch
        self.bootstrap_on_gap = bootstrap_on_gap
        self.prune = prune
        self.on_tick = on_tick
        self.ticks = 0
        self.last_reports: dict[str, SyncReport] = {}

    def tick(self, now: Optional[float] = None) -> list[SyncReport]:
        if now is None:
            now = time.monotonic()
        self.ticks += 1
        self.store.apply_buffer()
        reports = []
        for peer in self.peers:
            if now < peer.next_attempt:
                continue
            report = sync_with_peer(self.store, peer, self.connect, max_batch=self.max_batch)
            if report.outcome is Outcome.GAP_NEEDS_SNAPSHOT and self.bootstrap_on_gap:
                report = self._bootstrap(peer, report)
            if report.outcome is Outcome.SUCCESS:
                peer.next_attempt = 0.0
            else:
                peer.next_attempt = now + self.policy.delay(peer.consecutive_failures)
            self.last_reports[peer.site] = report
            reports.append(report)
        if self.prune:
            self.store.prune([p.site for p in self.peers])
        if self.on_tick is not None:
            self.on_tick(reports)
        return reports

    def _bootstrap(self, peer: Peer, failed: SyncReport) -> SyncReport:
        log.warning("%s pruned ops we still need; bootstrapping from its snapshot", peer.site)
        # the failed sync already counted one failure
        peer.consecutive_failures -= 1
        try:
            return bootstrap_from(self.store, peer, self.connect, max_batch=self.max_batch)
        except CatalogError as exc:
            failed.error = f"bootstrap failed: {type(exc).__name__}: {exc}"
            failed.outcome = _classify(exc)
            return failed

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            started = time.monotonic()
            try:
                reports = self.tick(started)
            except CatalogError:
                log.exception("scheduler tick failed")
            else:
                for r in reports:
                    log.info("tick %d %s %s pulled=%d bytes=%d", self.ticks, r.peer, r.outcome,
                             r.total_pulled, r.bytes)
            stop.wait(max(0.0, self.policy.interval - (time.monotonic() - started)))


def run_scheduler(store: Store, peers: Iterable[Peer], policy: RetryPolicy, connect: Connector, *,
                  stop: Optional[threading.Event] = None, **options) -> Scheduler:
    """Run the scheduler until ``stop`` is set or SIGTERM/SIGINT arrives."""
    stop = stop or threading.Event()
    scheduler = Scheduler(store, peers, connect, policy, **options)
    previous = {}
    if threading.current_thread() is threading.main_thread():
        for sig in (signal.SIGTERM, signal.SIGINT):
            previous[sig] = signal.signal(sig, lambda *_: stop.set())
    try:
        scheduler.run(stop)
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)
    return scheduler
