"""The fixed catalog queries, evaluated against a store's data tables.

Queries read the replicated data only, so a local write shows up after the
next :meth:`Store.apply_buffer`.  Pass ``include_pending=True`` to read the
local buffer in place of the local data partition.

A replica's site is derived host -> cluster -> site through the replicated
topology rows.  Replicas on hosts the topology does not know have
``site=None``; they are listed but never picked as local or closest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Union

from repcat.errors import UnknownSite, UsageError
from repcat.model import FileRecord, Host, StorageClass, Topology, validate_lfn
from repcat.store import DataView, Store


@dataclass(frozen=True)
class ReplicaView:
    lfn: str
    host: str
    path: str
    storage: StorageClass
    site: Optional[str]
    origin: str

    def fields(self) -> list:
        return [self.lfn, self.host, self.path, str(self.storage), self.site or "", self.origin]


@dataclass(frozen=True)
class CostedReplica:
    replica: ReplicaView
    cost: Fraction

    def fields(self) -> list:
        return [*self.replica.fields(), str(self.cost)]


def _view_of(rec: FileRecord, topo: Topology) -> ReplicaView:
    return ReplicaView(rec.lfn, rec.host, rec.path, rec.storage, topo.site_of_host(rec.host), rec.origin)


def _sorted(view: DataView, replicas: Iterable[ReplicaView]) -> list[ReplicaView]:
    ordinal = {m.site: m.ordinal for m in view.federation}
    return sorted(replicas, key=lambda r: (r.host, r.path, ordinal.get(r.origin, 0)))


def _require_site(view: DataView, site: str) -> None:
    if site not in view.federation:
        raise UnknownSite(f"unknown site {site}")


def replicas_in(view: DataView, lfn: str) -> list[ReplicaView]:
    topo = view.topology()
    return _sorted(view, (_view_of(r, topo) for r in view.files_named(validate_lfn(lfn))))


def local_disk_in(view: DataView, lfn: str, site: str) -> Optional[ReplicaView]:
    _require_site(view, site)
    local = [r for r in replicas_in(view, lfn) if r.storage is StorageClass.DISK and r.site == site]
    return min(local, key=lambda r: (r.host, r.path), default=None)


def closest_in(view: DataView, lfn: str, from_site: str) -> Optional[CostedReplica]:
    _require_site(view, from_site)
    topo = view.topology()
    best = None
    for r in replicas_in(view, lfn):
        if r.site is None:
            continue
        rank = (topo.cost(from_site, r.site), r.storage is not StorageClass.DISK, r.host, r.path)
        if best is None or rank < best[0]:
            best = (rank, r)
    if best is None:
        return None
    return CostedReplica(best[1], best[0][0])


# -- public queries ----------------------------------------------------------

def find_replicas(store: Store, lfn: str, *, include_pending: bool = False) -> list[ReplicaView]:
    with store.reading(include_pending) as view:
        return replicas_in(view, lfn)


def find_disk_replicas(store: Store, lfn: str, *, include_pending: bool = False) -> list[ReplicaView]:
    with store.reading(include_pending) as view:
        return [r for r in replicas_in(view, lfn) if r.storage is StorageClass.DISK]


def find_local_disk_replica(store: Store, lfn: str, site: Optional[str] = None, *,
                            include_pending: bool = False) -> Optional[ReplicaView]:
    """Disk replica on a host of ``site`` (default: this store's site); the
    smallest (host, path) wins when there are several."""
    with store.reading(include_pending) as view:
        return local_disk_in(view, lfn, site or store.site)


def find_closest_replica(store: Store, lfn: str, from_site: Optional[str] = None, *,
                         include_pending: bool = False) -> Optional[CostedReplica]:
    """Replica with the lowest link cost from ``from_site``.  Ties go to
    disk over tape, then to the smallest (host, path)."""
    with store.reading(include_pending) as view:
        return closest_in(view, lfn, from_site or store.site)


def list_files_at_site(store: Store, site: str, *, include_pending: bool = False) -> list[str]:
    with store.reading(include_pending) as view:
        _require_site(view, site)
        topo = view.topology()
        return sorted({r.lfn for r in view.files() if topo.site_of_host(r.host) == site})


def list_hosts_in_cluster(store: Store, cluster: str, *, include_pending: bool = False) -> list[Host]:
    with store.reading(include_pending) as view:
        topo = view.topology()
        topo.require_cluster(cluster)
        return sorted((h for h in topo.hosts.values() if h.cluster.name == cluster), key=lambda h: h.hostname)


def list_files_by_production(store: Store, tag: str, *, include_pending: bool = False) -> list[str]:
    if not tag:
        raise UsageError("production tag must not be empty")
    with store.reading(include_pending) as view:
        return sorted({r.lfn for r in view.files() if r.production == tag})


# -- output formats -----------------------------------------------------------

Result = Union[ReplicaView, CostedReplica, Host, str]

_JSON_FIELDS = {
    ReplicaView: ("lfn", "host", "path", "storage", "site", "origin"),
    CostedReplica: ("lfn", "host", "path", "storage", "site", "origin", "cost"),
    Host: ("hostname", "cluster", "site", "storage"),
}


def _fields(item: Result) -> list:
    if isinstance(item, str):
        return [item]
    if isinstance(item, Host):
        return [item.hostname, item.cluster.name, item.cluster.site, str(item.storage)]
    return item.fields()


def format_tsv(items: Iterable[Result]) -> str:
    """One tab-separated line per result, in result order."""
    return "".join("\t".join(_fields(i)) + "\n" for i in items)


def format_json(items: Iterable[Result]) -> str:
    """One JSON object per line with keys in a fixed order."""
    lines = []
    for item in items:
        if isinstance(item, str):
            obj = {"lfn": item}
        else:
            values = _fields(item)
            if isinstance(item, (ReplicaView, CostedReplica)):
                values[4] = values[4] or None
            obj = dict(zip(_JSON_FIELDS[type(item)], values))
        lines.append(json.dumps(obj, separators=(",", ":")) + "\n")
    return "".join(lines)
