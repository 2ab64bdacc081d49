"""Catalog domain types.

All records are frozen, slotted dataclasses: plain immutable values that are
safe to share between threads.  Each record belongs to exactly one table
(:class:`Subject`) and is owned by exactly one site, its partition origin.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from typing import Iterable, Union

from repcat.errors import (
    EmptyName,
    IllegalCharacter,
    InvalidRecord,
    MissingLinkCost,
    TooLong,
    TopologyError,
    UnknownCluster,
    UnknownSite,
)

LFN_MAX_BYTES = 255
LFN_PATTERN = re.compile(r"[A-Za-z0-9._-]{1,255}")
SITE_ID_PATTERN = re.compile(r"[A-Za-z0-9_-]{1,32}")
U64_MAX = 2**64 - 1

_LFN_CHARS = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789._-")


class StorageClass(enum.IntEnum):
    DISK = 1
    TAPE = 2

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "StorageClass":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise InvalidRecord(f"unknown storage class {text!r} (expected disk or tape)") from None


class OpKind(enum.IntEnum):
    INSERT = 1
    UPDATE = 2
    DELETE = 3

    def __str__(self) -> str:
        return self.name.lower()


class Subject(enum.IntEnum):
    """The replicated tables."""

    FILES = 1
    HOSTS = 2
    CLUSTERS = 3
    SITES = 4
    COSTS = 5

    def __str__(self) -> str:
        return self.name.lower()


def validate_lfn(raw: str) -> str:
    """Return ``raw`` if it is a legal logical file name, else raise."""
    if LFN_PATTERN.fullmatch(raw):
        return raw
    if not raw:
        raise EmptyName("logical file name is empty")
    for ch in raw:
        if ch not in _LFN_CHARS:
            raise IllegalCharacter(f"illegal character {ch!r} in logical file name {raw!r}")
    # charset is ASCII, so characters == bytes
    if len(raw) > LFN_MAX_BYTES:
        raise TooLong(f"logical file name is {len(raw)} bytes, max {LFN_MAX_BYTES}")
    return raw


def validate_site_id(raw: str) -> str:
    if not SITE_ID_PATTERN.fullmatch(raw or ""):
        raise InvalidRecord(f"bad site id {raw!r}")
    return raw


@dataclass(frozen=True, slots=True)
class Site:
    id: str
    ordinal: int


@dataclass(frozen=True, slots=True)
class ClusterId:
    name: str
    site: str


@dataclass(frozen=True, slots=True)
class Host:
    hostname: str
    cluster: ClusterId
    storage: StorageClass


@dataclass(frozen=True, slots=True)
class LinkCost:
    source: str
    target: str
    cost: Fraction


@dataclass(frozen=True, slots=True)
class FileRecord:
    lfn: str
    host: str
    path: str
    storage: StorageClass
    production: str
    size_bytes: int
    created_at: datetime
    origin: str


@dataclass(frozen=True, slots=True)
class OperationRecord:
    """One captured change: the unit of replication."""

    origin: str
    seq: int
    kind: OpKind
    subject: Subject
    payload: bytes
    committed_at: datetime
    # canonical encoding, filled in lazily by the codec
    _raw: Union[bytes, None] = field(default=None, compare=False, repr=False, hash=False)


Row = Union[FileRecord, Host, ClusterId, Site, LinkCost]
Key = tuple

_ROW_SUBJECT = {
    FileRecord: Subject.FILES,
    Host: Subject.HOSTS,
    ClusterId: Subject.CLUSTERS,
    Site: Subject.SITES,
    LinkCost: Subject.COSTS,
}


def subject_of(row: Row) -> Subject:
    try:
        return _ROW_SUBJECT[type(row)]
    except KeyError:
        raise InvalidRecord(f"not a catalog row: {row!r}") from None


def key_of(row: Row) -> Key:
    """Primary key of a row within its table."""
    t = type(row)
    if t is FileRecord:
        return (row.lfn, row.host, row.path)
    if t is Host:
        return (row.hostname,)
    if t is ClusterId:
        return (row.name,)
    if t is Site:
        return (row.id,)
    if t is LinkCost:
        return (row.source, row.target)
    raise InvalidRecord(f"not a catalog row: {row!r}")


def origin_of(row: Row) -> str:
    """The site whose partition owns ``row``."""
    t = type(row)
    if t is FileRecord:
        return row.origin
    if t is Host:
        return row.cluster.site
    if t is ClusterId:
        return row.site
    if t is Site:
        return row.id
    if t is LinkCost:
        return row.source
    raise InvalidRecord(f"not a catalog row: {row!r}")


KEY_ARITY = {
    Subject.FILES: 3,
    Subject.HOSTS: 1,
    Subject.CLUSTERS: 1,
    Subject.SITES: 1,
    Subject.COSTS: 2,
}


def _check_str(value, what: str, *, empty_ok: bool = False) -> None:
    if not isinstance(value, str):
        raise InvalidRecord(f"{what} must be a string")
    if not value and not empty_ok:
        raise InvalidRecord(f"{what} is empty")


def _check_time(value, what: str) -> None:
    if not isinstance(value, datetime) or value.tzinfo is None:
        raise InvalidRecord(f"{what} must be a timezone-aware datetime")


def validate_row(row: Row) -> Row:
    """Check field-level constraints; raise :class:`InvalidRecord` or a name error."""
    t = type(row)
    if t is FileRecord:
        validate_lfn(row.lfn)
        _check_str(row.host, "host")
        _check_str(row.path, "path")
        if not row.path.startswith("/"):
            raise InvalidRecord(f"physical path must be absolute: {row.path!r}")
        if not isinstance(row.storage, StorageClass):
            raise InvalidRecord("storage must be a StorageClass")
        _check_str(row.production, "production", empty_ok=True)
        if not isinstance(row.size_bytes, int) or not 0 <= row.size_bytes <= U64_MAX:
            raise InvalidRecord("size_bytes must be a non-negative 64-bit integer")
        _check_time(row.created_at, "created_at")
        validate_site_id(row.origin)
    elif t is Host:
        _check_str(row.hostname, "hostname")
        validate_row(row.cluster)
        if not isinstance(row.storage, StorageClass):
            raise InvalidRecord("storage must be a StorageClass")
    elif t is ClusterId:
        _check_str(row.name, "cluster name")
        validate_site_id(row.site)
    elif t is Site:
        validate_site_id(row.id)
        if not isinstance(row.ordinal, int) or not 0 < row.ordinal < 2**32:
            raise InvalidRecord("site ordinal must be a positive 32-bit integer")
    elif t is LinkCost:
        validate_site_id(row.source)
        validate_site_id(row.target)
        if not isinstance(row.cost, Fraction) or row.cost < 0:
            raise InvalidRecord("link cost must be a non-negative Fraction")
        if row.cost.numerator > U64_MAX or row.cost.denominator > U64_MAX:
            raise InvalidRecord("link cost does not fit in 64-bit rational")
        if row.source == row.target and row.cost != 0:
            raise InvalidRecord("cost from a site to itself must be 0")
    else:
        raise InvalidRecord(f"not a catalog row: {row!r}")
    return row


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class Topology:
    """Sites, clusters, hosts and the directed link-cost table.

    Registration enforces referential integrity host -> cluster -> site.
    """

    def __init__(self) -> None:
        self.sites: dict[str, Site] = {}
        self.clusters: dict[str, ClusterId] = {}
        self.hosts: dict[str, Host] = {}
        self.costs: dict[tuple[str, str], Fraction] = {}

    def add_site(self, site: Site) -> None:
        validate_row(site)
        current = self.sites.get(site.id)
        if current is not None and current != site:
            raise TopologyError(f"site {site.id} already registered with ordinal {current.ordinal}")
        for other in self.sites.values():
            if other.ordinal == site.ordinal and other.id != site.id:
                raise TopologyError(f"ordinal {site.ordinal} already used by {other.id}")
        self.sites[site.id] = site

    def add_cluster(self, cluster: ClusterId) -> None:
        validate_row(cluster)
        if cluster.site not in self.sites:
            raise UnknownSite(f"cluster {cluster.name}: unknown site {cluster.site}")
        current = self.clusters.get(cluster.name)
        if current is not None and current.site != cluster.site:
            raise TopologyError(f"cluster {cluster.name} already belongs to {current.site}")
        self.clusters[cluster.name] = cluster

    def add_host(self, host: Host) -> None:
        validate_row(host)
        if self.clusters.get(host.cluster.name) != host.cluster:
            raise UnknownCluster(f"host {host.hostname}: unknown cluster {host.cluster.name}")
        self.hosts[host.hostname] = host

    def set_cost(self, link: LinkCost) -> None:
        validate_row(link)
        for s in (link.source, link.target):
            if s not in self.sites:
                raise UnknownSite(f"link cost: unknown site {s}")
        self.costs[(link.source, link.target)] = link.cost

    def site_of_host(self, hostname: str) -> Union[str, None]:
        host = self.hosts.get(hostname)
        return None if host is None else host.cluster.site

    def cost(self, source: str, target: str) -> Fraction:
        if source == target:
            return Fraction(0)
        try:
            return self.costs[(source, target)]
        except KeyError:
            raise MissingLinkCost(f"no link cost from {source} to {target}") from None

    def require_site(self, site: str) -> Site:
        try:
            return self.sites[site]
        except KeyError:
            raise UnknownSite(f"unknown site {site}") from None

    def require_cluster(self, name: str) -> ClusterId:
        try:
            return self.clusters[name]
        except KeyError:
            raise UnknownCluster(f"unknown cluster {name}") from None

    def missing_costs(self) -> list[tuple[str, str]]:
        ids = sorted(self.sites)
        return [(a, b) for a in ids for b in ids if a != b and (a, b) not in self.costs]

    def integrity_problems(self) -> list[str]:
        problems = []
        for c in self.clusters.values():
            if c.site not in self.sites:
                problems.append(f"cluster {c.name} references unknown site {c.site}")
        for h in self.hosts.values():
            if self.clusters.get(h.cluster.name) != h.cluster:
                problems.append(f"host {h.hostname} references unknown cluster {h.cluster.name}")
        for a, b in self.costs:
            for s in (a, b):
                if s not in self.sites:
                    problems.append(f"link cost {a}->{b} references unknown site {s}")
        return problems

    @classmethod
    def from_rows(cls, sites: Iterable[Site], rows: Iterable[Row]) -> "Topology":
        """Build leniently from replicated rows: dangling references are kept
        so that :meth:`integrity_problems` can report them."""
        topo = cls()
        for s in sites:
            topo.sites[s.id] = s
        for row in rows:
            t = type(row)
            if t is Site:
                topo.sites.setdefault(row.id, row)
            elif t is ClusterId:
                topo.clusters[row.name] = row
            elif t is Host:
                topo.hosts[row.hostname] = row
            elif t is LinkCost:
                topo.costs[(row.source, row.target)] = row.cost
        return topo
