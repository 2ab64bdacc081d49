"""``catalog`` command-line interface.

Exit status: 0 success, 1 not found or empty result, 2 usage error,
3 store or protocol error.  Errors go to stderr as one line prefixed
``E:<code>:``.

Settings come from flags, then the environment (``CATALOG_HOME``,
``CATALOG_FEDERATION``, ``CATALOG_SEARCH_PATH``, ``CATALOG_SITE``), then
``key=value`` lines in ``catalog.conf`` (``--config``, else the current
directory, else the store home).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from datetime import datetime
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

from repcat.errors import CatalogError, NotFound, UnknownSite, UsageError
from repcat.federation import DEFAULT_PORT, Federation, split_endpoint
from repcat.model import (
    ClusterId,
    FileRecord,
    Host,
    LinkCost,
    StorageClass,
    Subject,
    utc_now,
)
from repcat.query import (
    find_closest_replica,
    find_disk_replicas,
    find_local_disk_replica,
    find_replicas,
    format_json,
    format_tsv,
    list_files_at_site,
    list_files_by_production,
    list_hosts_in_cluster,
)
from repcat.replication import (
    Outcome,
    RetryPolicy,
    Scheduler,
    SyncReport,
    bootstrap_from,
    peers_of,
    run_scheduler,
    sync_round,
    tcp_connector,
)
from repcat.resolver import ENV_VAR as SEARCH_PATH_VAR
from repcat.resolver import parse_search_path, resolve
from repcat.store import Store, open_store
from repcat.transport.tcp import SyncServer

log = logging.getLogger("repcat")

CONFIG_NAME = "catalog.conf"
STATUS_NAME = "status.json"

_ENV = {
    "home": "CATALOG_HOME",
    "federation": "CATALOG_FEDERATION",
    "search_path": SEARCH_PATH_VAR,
    "site": "CATALOG_SITE",
}

_DURATION = re.compile(r"^(\d+(?:\.\d*)?)(ms|s|m|h)?$")
_UNITS = {"ms": 0.001, "s": 1.0, "m": 60.0, "h": 3600.0, None: 1.0}


def parse_duration(text: str) -> float:
    m = _DURATION.match(text.strip())
    if not m:
        raise UsageError(f"bad duration {text!r}; use e.g. 30s, 10m, 1h")
    seconds = float(m.group(1)) * _UNITS[m.group(2)]
    if seconds <= 0:
        raise UsageError("duration must be positive")
    return seconds


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{CONFIG_NAME} line {lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


class Settings:
    """Flags > environment > config file."""

    def __init__(self, args: argparse.Namespace, env: Mapping[str, str]) -> None:
        self.args = args
        self.env = env
        conf_path = getattr(args, "config", None)
        self.file: dict[str, str] = {}
        candidates = [Path(conf_path)] if conf_path else [Path(CONFIG_NAME)]
        if not conf_path:
            home = args.home or env.get(_ENV["home"])
            if home:
                candidates.append(Path(home) / CONFIG_NAME)
        for path in candidates:
            if path.is_file():
                self.file = parse_config(path.read_text())
                break
            if conf_path:
                raise UsageError(f"config file {path} not found")

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        var = _ENV.get(key)
        if var and self.env.get(var):
            return self.env[var]
        return self.file.get(key, default)

    def require(self, key: str) -> str:
        value = self.get(key)
        if not value:
            hint = f" or {_ENV[key]}" if key in _ENV else ""
            raise UsageError(f"--{key.replace('_', '-')}{hint} is required")
        return value

    @property
    def home(self) -> Path:
        return Path(self.require("home"))

    def federation(self) -> Federation:
        return Federation.load(self.require("federation"))

    def site(self) -> str:
        site = self.get("site")
        if site:
            return site
        site_file = self.home / "site"
        if site_file.is_file():
            return site_file.read_text().strip()
        raise UsageError("--site is required for a new store")


def _open(settings: Settings, *, readonly: bool = False) -> Store:
    fed = settings.federation()
    site = settings.site()
    if site not in fed:
        raise UnknownSite(f"{site} is not listed in the federation config")
    home = settings.home
    if readonly and not (home / "site").exists():
        raise NotFound(f"no store at {home}")
    return open_store(home, site, fed, readonly=readonly)


def _emit(items: list, fmt: str, out) -> int:
    out.write(format_json(items) if fmt == "json" else format_tsv(items))
    return 0 if items else 1


def _write_status(home: Path, reports: list[SyncReport]) -> None:
    path = home / STATUS_NAME
    try:
        state = json.loads(path.read_text())
    except (OSError, ValueError):
        state = {}
    peers = state.setdefault("peers", {})
    now = utc_now().isoformat()
    for r in reports:
        entry = r.as_dict()
        entry["at"] = now
        peers[r.peer] = entry
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(state, indent=2, sort_keys=True))
    os.replace(tmp, path)


def _print_reports(reports: list[SyncReport], out) -> None:
    for r in reports:
        pulled = ",".join(f"{o}={n}" for o, n in sorted(r.ops_pulled.items()))
        line = f"{r.peer}\t{r.outcome}\t{pulled or '-'}\t{r.bytes}\t{r.duration:.3f}"
        if r.error:
            line += f"\t{r.error}"
        out.write(line + "\n")


# -- commands -----------------------------------------------------------------

def cmd_serve(args, settings: Settings, out) -> int:
    policy = RetryPolicy(
        interval=parse_duration(settings.get("tick", "30s")),
        max_backoff=parse_duration(settings.get("backoff_max", "10m")),
    )
    store = _open(settings)
    with store:
        fed = store.federation
        host, port = split_endpoint(fed.member(store.site).address)
        if settings.get("port"):
            port = int(settings.get("port"))
        server = SyncServer(store, settings.get("listen") or f"{host}:{port}").start()
        log.info("%s serving sync on %s", store.site, server.address)
        home = settings.home
        try:
            if args.once:
                scheduler = Scheduler(store, peers_of(fed, store.site), tcp_connector(store.site, fed),
                                      policy, on_tick=lambda rs: _write_status(home, rs))
                _print_reports(scheduler.tick(), out)
            else:
                run_scheduler(store, peers_of(fed, store.site), policy, tcp_connector(store.site, fed),
                              on_tick=lambda rs: _write_status(home, rs), prune=True)
        finally:
            server.stop()
    return 0


def _file_record(args, site: str) -> FileRecord:
    created = datetime.fromisoformat(args.created_at) if args.created_at else utc_now()
    if created.tzinfo is None:
        raise UsageError("--created-at needs a UTC offset")
    if args.size < 0:
        raise UsageError("--size must be non-negative")
    return FileRecord(args.lfn, args.host, args.path, StorageClass.parse(args.storage),
                      args.production, args.size, created, site)


def cmd_add_file(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        row = _file_record(args, store.site)
        seq = store.update(row) if args.replace else store.insert(row)
        if args.apply:
            store.apply_buffer()
    out.write(f"{seq}\n")
    return 0


def cmd_delete_file(args, settings: Settings, out) -> int:
    from repcat.model import validate_lfn

    validate_lfn(args.lfn)
    with _open(settings) as store:
        seq = store.delete(Subject.FILES, (args.lfn, args.host, args.path))
        if args.apply:
            store.apply_buffer()
    out.write(f"{seq}\n")
    return 0


def cmd_add_cluster(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        seq = store.insert(ClusterId(args.name, store.site))
        if args.apply:
            store.apply_buffer()
    out.write(f"{seq}\n")
    return 0


def cmd_add_host(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        row = Host(args.hostname, ClusterId(args.cluster, store.site), StorageClass.parse(args.storage))
        seq = store.insert(row)
        if args.apply:
            store.apply_buffer()
    out.write(f"{seq}\n")
    return 0


def cmd_set_cost(args, settings: Settings, out) -> int:
    try:
        cost = Fraction(args.cost)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"bad cost {args.cost!r}") from None
    with _open(settings) as store:
        if args.to not in store.federation:
            raise UnknownSite(f"unknown site {args.to}")
        row = LinkCost(store.site, args.to, cost)
        exists = (Subject.COSTS, (store.site, args.to)) in store.buffer_rows()
        seq = store.update(row) if exists else store.insert(row)
        if args.apply:
            store.apply_buffer()
    out.write(f"{seq}\n")
    return 0


def cmd_apply(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        out.write(f"{store.apply_buffer()}\n")
    return 0


def cmd_query(args, settings: Settings, out) -> int:
    with _open(settings, readonly=True) as store:
        kind, arg, pending = args.kind, args.arg, args.include_pending
        if kind == "replicas":
            items = find_replicas(store, arg, include_pending=pending)
        elif kind == "disk":
            items = find_disk_replicas(store, arg, include_pending=pending)
        elif kind == "local":
            hit = find_local_disk_replica(store, arg, args.site_filter, include_pending=pending)
            items = [hit] if hit else []
        elif kind == "closest":
            hit = find_closest_replica(store, arg, args.from_site, include_pending=pending)
            items = [hit] if hit else []
        elif kind == "site":
            items = list_files_at_site(store, arg, include_pending=pending)
        elif kind == "cluster":
            items = list_hosts_in_cluster(store, arg, include_pending=pending)
        else:
            items = list_files_by_production(store, arg, include_pending=pending)
    return _emit(items, args.format, out)


def cmd_resolve(args, settings: Settings, out) -> int:
    path = parse_search_path(settings.require("search_path"))
    with _open(settings, readonly=True) as store:
        res = resolve(args.lfn, path, store, args.from_site)
    host = res.replica.host if res.replica else ""
    if args.format == "json":
        obj = {"lfn": res.lfn, "physical_path": res.physical_path, "source": res.source.value,
               "host": host or None}
        out.write(json.dumps(obj, separators=(",", ":")) + "\n")
    else:
        out.write(f"{res.physical_path}\t{res.source.value}\t{host}\n")
    return 0


def cmd_sync_now(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        store.apply_buffer()
        fed = store.federation
        peers = peers_of(fed, store.site)
        if args.peer:
            unknown = set(args.peer) - {p.site for p in peers}
            if unknown:
                raise UnknownSite(f"not a peer: {', '.join(sorted(unknown))}")
            peers = [p for p in peers if p.site in args.peer]
        reports = sync_round(store, peers, tcp_connector(store.site, fed))
        _write_status(settings.home, reports)
    _print_reports(reports, out)
    return 0 if all(r.outcome is Outcome.SUCCESS for r in reports) else 3


def cmd_add_site(args, settings: Settings, out) -> int:
    with _open(settings) as store:
        fed = store.federation
        peer = next((p for p in peers_of(fed, store.site) if p.site == args.donor), None)
        if peer is None:
            raise UnknownSite(f"donor {args.donor} is not a peer of {store.site}")
        report = bootstrap_from(store, peer, tcp_connector(store.site, fed))
        store.checkpoint()
        _write_status(settings.home, [report])
    _print_reports([report], out)
    return 0


def fsck_findings(store: Store) -> list[str]:
    findings = []
    with store.reading() as view:
        topo = view.topology()
        findings += topo.integrity_problems()
        findings += [f"no link cost from {a} to {b}" for a, b in topo.missing_costs()]
        for origin, _, key, row in view.rows(Subject.FILES):
            if row.host not in topo.hosts:
                findings.append(f"file {row.lfn} at {row.host}:{row.path} ({origin}) references unknown host")
    if store.queue_depth == 0:
        local = {(s, k): row for (o, s, k), row in store.data_rows(store.site).items()}
        if local != store.buffer_rows():
            findings.append("buffer and local data partition differ with an empty queue")
    return findings


def cmd_fsck(args, settings: Settings, out) -> int:
    with _open(settings, readonly=True) as store:
        findings = fsck_findings(store)
        pending = store.queue_depth
    for f in findings:
        out.write(f + "\n")
    if pending:
        out.write(f"note: {pending} captured ops not yet applied\n")
    return 1 if findings else 0


def cmd_status(args, settings: Settings, out) -> int:
    with _open(settings, readonly=True) as store:
        cursors = store.cursors()
        out.write(f"site\t{store.site}\n")
        out.write(f"captured\t{store.captured}\n")
        out.write(f"queue_depth\t{store.queue_depth}\n")
        for m in store.federation:
            out.write(f"cursor\t{m.site}\t{cursors[m.site]}\n")
    try:
        state = json.loads((settings.home / STATUS_NAME).read_text())
    except (OSError, ValueError):
        state = {}
    for peer, r in sorted(state.get("peers", {}).items()):
        pulled = sum(r.get("ops_pulled", {}).values())
        out.write(f"last_sync\t{peer}\t{r['outcome']}\t{pulled}\t{r.get('at', '')}\n")
    return 0


# -- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="catalog", description="Replicated file catalog")
    p.add_argument("--home", help="store directory (CATALOG_HOME)")
    p.add_argument("--federation", help="federation config file (CATALOG_FEDERATION)")
    p.add_argument("--site", help="this store's site id (CATALOG_SITE); read from the store if omitted")
    p.add_argument("--config", help=f"settings file (default ./{CONFIG_NAME})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("serve", help="run the sync server and scheduler")
    s.add_argument("--tick", help="scheduler interval (default 30s)")
    s.add_argument("--port", help=f"listen port (default from federation, else {DEFAULT_PORT})")
    s.add_argument("--backoff-max", dest="backoff_max", help="retry backoff cap (default 10m)")
    s.add_argument("--listen", help="listen address, host:port")
    s.add_argument("--once", action="store_true", help="run one tick and exit")
    s.set_defaults(func=cmd_serve)

    def writes(sp):
        sp.add_argument("--apply", action="store_true", help="apply the buffer right away")

    s = sub.add_parser("add-file", help="record a replica")
    s.add_argument("--lfn", required=True)
    s.add_argument("--host", required=True)
    s.add_argument("--path", required=True)
    s.add_argument("--storage", default="disk", help="disk or tape")
    s.add_argument("--production", default="")
    s.add_argument("--size", type=int, default=0)
    s.add_argument("--created-at", dest="created_at", help="ISO-8601 timestamp with offset")
    s.add_argument("--replace", action="store_true", help="update an existing replica row")
    writes(s)
    s.set_defaults(func=cmd_add_file)

    s = sub.add_parser("delete-file", help="remove a replica")
    s.add_argument("--lfn", required=True)
    s.add_argument("--host", required=True)
    s.add_argument("--path", required=True)
    writes(s)
    s.set_defaults(func=cmd_delete_file)

    s = sub.add_parser("add-cluster", help="register a cluster of this site")
    s.add_argument("name")
    writes(s)
    s.set_defaults(func=cmd_add_cluster)

    s = sub.add_parser("add-host", help="register a host of this site")
    s.add_argument("--hostname", required=True)
    s.add_argument("--cluster", required=True)
    s.add_argument("--storage", default="disk")
    writes(s)
    s.set_defaults(func=cmd_add_host)

    s = sub.add_parser("set-cost", help="set the link cost from this site")
    s.add_argument("--to", required=True)
    s.add_argument("--cost", required=True, help="non-negative rational, e.g. 5 or 3/2")
    writes(s)
    s.set_defaults(func=cmd_set_cost)

    s = sub.add_parser("apply", help="fold captured writes into the data tables")
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("query", help="run a catalog query")
    s.add_argument("kind", choices=["replicas", "disk", "local", "site", "cluster", "production", "closest"])
    s.add_argument("arg", help="lfn, site, cluster or production tag")
    s.add_argument("--at", dest="site_filter", help="site for 'local' (default: this site)")
    s.add_argument("--from", dest="from_site", help="site for 'closest' (default: this site)")
    s.add_argument("--format", choices=["tsv", "json"], default="tsv")
    s.add_argument("--include-pending", dest="include_pending", action="store_true")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("resolve", help="translate a logical file name")
    s.add_argument("lfn")
    s.add_argument("--search-path", dest="search_path", help=f"overrides {SEARCH_PATH_VAR}")
    s.add_argument("--from", dest="from_site")
    s.add_argument("--format", choices=["tsv", "json"], default="tsv")
    s.set_defaults(func=cmd_resolve)

    s = sub.add_parser("sync-now", help="sync with every peer once")
    s.add_argument("--peer", action="append", help="limit to this peer (repeatable)")
    s.set_defaults(func=cmd_sync_now)

    s = sub.add_parser("add-site", help="bootstrap this new site from a donor")
    s.add_argument("--from", dest="donor", required=True, help="donor site id")
    s.set_defaults(func=cmd_add_site)

    s = sub.add_parser("fsck", help="lint topology references and buffer/data agreement")
    s.set_defaults(func=cmd_fsck)

    s = sub.add_parser("status", help="cursors, queue depth and last sync reports")
    s.set_defaults(func=cmd_status)
    return p


def main(argv: Optional[Sequence[str]] = None, env: Optional[Mapping[str, str]] = None,
         out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    env = os.environ if env is None else env
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args, Settings(args, env), out)
    except CatalogError as exc:
        code = "USAGE" if isinstance(exc, UsageError) else exc.code
        detail = f"{exc.code}: " if code != exc.code else ""
        err.write(f"E:{code}:{detail}{exc}\n")
        return exc.exit_status
    except OSError as exc:
        err.write(f"E:IO:{exc}\n")
        return 3
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
