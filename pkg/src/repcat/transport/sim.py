"""In-process simulated network for deterministic replication tests.

Frames are really encoded and decoded, but delivery is a synchronous call
into the destination's :class:`ServerSession`.  Latency only advances a
virtual clock.  Every random draw comes from one seeded generator, so the
same seed and the same call sequence give a byte-identical traffic trace.
"""

from __future__ import annotations

import hashlib
import random
from collections import deque
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Union

from repcat.errors import ProtocolError, UnknownSite, Unreachable
from repcat.federation import Federation
from repcat.store import Store
from repcat.transport.session import ClientSession, ServerSession
from repcat.transport.wire import PROTOCOL_VERSION, Frame, decode_frame, encode_frame


@dataclass(frozen=True)
class LinkFaults:
    """Fault settings of one directed link.  Latency is uniform in seconds."""

    latency: tuple[float, float] = (0.001, 0.010)
    drop: float = 0.0
    partitioned: bool = False


class SimNetwork:
    def __init__(self, sites: Iterable[str],
                 faults: Union[LinkFaults, dict[tuple[str, str], LinkFaults], None] = None,
                 seed: int = 0, *, keep_trace: bool = False) -> None:
        self.sites = list(sites)
        default = faults if isinstance(faults, LinkFaults) else LinkFaults()
        self.links: dict[tuple[str, str], LinkFaults] = {
            (a, b): default for a in self.sites for b in self.sites if a != b
        }
        if isinstance(faults, dict):
            for pair, f in faults.items():
                self._link(*pair)
                self.links[pair] = f
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0.0
        self.isolated: set[str] = set()
        self.stores: dict[str, Store] = {}
        self.versions: dict[str, int] = {}
        self.frames = 0
        self.bytes = 0
        self.dropped = 0
        self._trace = hashlib.sha256()
        self.trace: Optional[list[tuple[str, str, bytes]]] = [] if keep_trace else None

    def _require(self, site: str) -> None:
        if site not in self.sites:
            raise UnknownSite(f"{site} is not on the simulated network")

    def _link(self, a: str, b: str) -> LinkFaults:
        self._require(a)
        self._require(b)
        try:
            return self.links[(a, b)]
        except KeyError:
            raise UnknownSite(f"no link from {a} to {b}") from None

    # -- topology of the fault model -----------------------------------------

    def attach(self, store: Store, *, version: int = PROTOCOL_VERSION) -> None:
        """Make ``store`` answer sync requests addressed to its site."""
        self._require(store.site)
        self.stores[store.site] = store
        self.versions[store.site] = version

    def partition(self, site: str) -> None:
        """Cut ``site`` off from everyone."""
        self._require(site)
        self.isolated.add(site)

    def heal(self, site: str) -> None:
        self._require(site)
        self.isolated.discard(site)

    def cut(self, a: str, b: str) -> None:
        """Cut the link between ``a`` and ``b`` in both directions."""
        for pair in ((a, b), (b, a)):
            self.links[pair] = replace(self._link(*pair), partitioned=True)

    def restore(self, a: str, b: str) -> None:
        for pair in ((a, b), (b, a)):
            self.links[pair] = replace(self._link(*pair), partitioned=False)

    def set_faults(self, a: str, b: str, faults: LinkFaults) -> None:
        self._link(a, b)
        self.links[(a, b)] = faults

    def reachable(self, src: str, dst: str) -> bool:
        return (src not in self.isolated and dst not in self.isolated
                and not self._link(src, dst).partitioned)

    # -- traffic --------------------------------------------------------------

    @property
    def trace_digest(self) -> bytes:
        return self._trace.digest()

    def _transmit(self, src: str, dst: str, frame: Frame) -> Frame:
        if not self.reachable(src, dst):
            raise Unreachable(f"{dst} is unreachable from {src}")
        link = self.links[(src, dst)]
        lo, hi = link.latency
        self.clock += self.rng.uniform(lo, hi)
        if link.drop and self.rng.random() < link.drop:
            self.dropped += 1
            raise Unreachable(f"frame from {src} to {dst} lost; timed out")
        data = encode_frame(frame)
        self.frames += 1
        self.bytes += len(data)
        self._trace.update(f"{src}>{dst}:{len(data)}:".encode())
        self._trace.update(data)
        if self.trace is not None:
            self.trace.append((src, dst, data))
        received, _ = decode_frame(data)
        return received

    def connect(self, src: str, dst: str, federation: Federation, *,
                version: int = PROTOCOL_VERSION, handshake: bool = True) -> ClientSession:
        """Open a client session from ``src`` to ``dst``'s attached store."""
        self._require(src)
        self._require(dst)
        if dst not in self.stores:
            raise Unreachable(f"nothing listens for {dst}")
        if not self.reachable(src, dst):
            raise Unreachable(f"{dst} is unreachable from {src}")
        server = ServerSession(self.stores[dst], version=self.versions[dst])
        session = ClientSession(SimChannel(self, src, dst, server), src, federation, version=version)
        if handshake:
            session.handshake()
        return session

    def connector(self, site: str, federation: Federation):
        """Return ``connect(peer) -> ClientSession`` for replication code."""
        def connect(peer) -> ClientSession:
            return self.connect(site, getattr(peer, "site", peer), federation)
        return connect


class SimChannel:
    """Client end of a simulated connection."""

    def __init__(self, net: SimNetwork, src: str, dst: str, server: ServerSession) -> None:
        self.net = net
        self.src = src
        self.dst = dst
        self.server = server
        self._inbox: deque[Frame] = deque()
        self._closed = False

    def send(self, frame: Frame) -> None:
        if self._closed:
            raise Unreachable("session is closed")
        try:
            delivered = self.net._transmit(self.src, self.dst, frame)
            for reply in self.server.handle(delivered):
                self._inbox.append(self.net._transmit(self.dst, self.src, reply))
        except Unreachable:
            self.close()
            raise

    def recv(self) -> Frame:
        if self._inbox:
            return self._inbox.popleft()
        self.close()
        if self.server.closed:
            raise ProtocolError(f"{self.dst} closed the session")
        raise Unreachable(f"no reply from {self.dst}")

    def close(self) -> None:
        self._closed = True
        self._inbox.clear()


def sim_create(sites: Iterable[str], faults=None, seed: int = 0, **options) -> SimNetwork:
    return SimNetwork(sites, faults, seed, **options)


def sim_partition(net: SimNetwork, site: str) -> None:
    net.partition(site)


def sim_heal(net: SimNetwork, site: str) -> None:
    net.heal(site)
