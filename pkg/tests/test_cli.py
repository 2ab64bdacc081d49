import io
import json
import socket

import pytest

from repcat.cli import main, parse_config, parse_duration
from repcat.errors import UsageError
from repcat.federation import Federation
from repcat.store import open_store
from repcat.transport.tcp import SyncServer


def _port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class Catalog:
    """Runs ``main`` against one site's home with a fixed environment."""

    def __init__(self, tmp_path, fed_file, site):
        self.home = tmp_path / site
        self.env = {"CATALOG_HOME": str(self.home), "CATALOG_FEDERATION": str(fed_file),
                    "CATALOG_SITE": site}

    def __call__(self, *argv, **env):
        out, err = io.StringIO(), io.StringIO()
        code = main(list(argv), {**self.env, **env}, out, err)
        return code, out.getvalue(), err.getvalue()


@pytest.fixture
def sites(tmp_path):
    fed_file = tmp_path / "federation"
    fed_file.write_text(f"1 BNL 127.0.0.1:{_port()}\n2 SBU 127.0.0.1:{_port()}\n")
    bnl, sbu = Catalog(tmp_path, fed_file, "BNL"), Catalog(tmp_path, fed_file, "SBU")
    for cat, site, store in ((bnl, "BNL", "tape"), (sbu, "SBU", "disk")):
        host = f"{site.lower()}1"
        assert cat("add-cluster", f"{host}c")[0] == 0
        assert cat("add-host", "--hostname", host, "--cluster", f"{host}c", "--storage", store)[0] == 0
        assert cat("set-cost", "--to", "SBU" if site == "BNL" else "BNL", "--cost", "3/2")[0] == 0
        assert cat("add-file", "--lfn", "XYZ", "--host", host, "--path", f"/{store}/XYZ",
                   "--storage", store, "--production", "P01", "--size", "10",
                   "--created-at", "2004-01-01T00:00:00+00:00", "--apply")[0] == 0
    return bnl, sbu, Federation.load(fed_file)


def _converge(bnl, sbu, fed):
    sbu_store = open_store(sbu.home, "SBU", fed)
    try:
        with SyncServer(sbu_store, fed.member("SBU").address):
            code, out, err = bnl("sync-now")
    finally:
        sbu_store.close()
    return code, out, err


def test_replicas_of_xyz_after_sync(sites):
    bnl, sbu, fed = sites
    code, out, _ = bnl("query", "replicas", "XYZ")
    assert (code, len(out.splitlines())) == (0, 1)
    code, out, _ = _converge(bnl, sbu, fed)
    assert code == 0 and out.startswith("SBU\tSuccess")
    code, out, _ = bnl("query", "replicas", "XYZ")
    assert code == 0
    assert [line.split("\t")[:3] for line in out.splitlines()] == [
        ["XYZ", "bnl1", "/tape/XYZ"], ["XYZ", "sbu1", "/disk/XYZ"]]


def test_empty_result_exits_one(sites):
    bnl, _, _ = sites
    assert bnl("query", "replicas", "nosuchfile") == (1, "", "")


def test_invalid_lfn_is_usage_error(sites):
    bnl, _, _ = sites
    code, out, err = bnl("add-file", "--lfn", "a/b", "--host", "bnl1", "--path", "/x")
    assert code == 2 and out == ""
    assert err.startswith("E:USAGE:") and err.count("\n") == 1


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["query", "bogus", "x"], ["serve", "--tick", "soon"]])
def test_usage_errors(sites, argv):
    bnl, _, _ = sites
    code, _, err = bnl(*argv)
    assert code == 2 and err.startswith("E:USAGE:")


def test_missing_store_setting(tmp_path):
    out, err = io.StringIO(), io.StringIO()
    assert main(["apply"], {}, out, err) == 2
    assert err.getvalue().startswith("E:USAGE:") and "is required" in err.getvalue()


def test_closest_and_json(sites):
    bnl, sbu, fed = sites
    _converge(bnl, sbu, fed)
    code, out, _ = bnl("query", "closest", "XYZ", "--from", "SBU", "--format", "json")
    assert code == 0
    obj = json.loads(out)
    assert (obj["host"], obj["path"]) == ("sbu1", "/disk/XYZ")
    code, out, _ = bnl("query", "local", "XYZ", "--at", "BNL")
    assert code == 1      # BNL only holds a tape copy


def test_resolve(sites, tmp_path):
    bnl, sbu, fed = sites
    _converge(bnl, sbu, fed)
    scratch = tmp_path / "scratch"
    scratch.mkdir()
    code, out, _ = bnl("resolve", "XYZ", CATALOG_SEARCH_PATH=f"{scratch}:DB_LOCAL_DISK:DB_CLOSEST")
    assert (code, out) == (0, "/tape/XYZ\tcatalog\tbnl1\n")
    (scratch / "XYZ").write_bytes(b"")
    code, out, _ = bnl("resolve", "XYZ", "--search-path", f"{scratch}:DB_ANY")
    assert (code, out) == (0, f"{scratch}/XYZ\tdirectory\t\n")
    code, _, err = bnl("resolve", "other", "--search-path", "DB_ANY")
    assert code == 1 and err.startswith("E:NOT_FOUND:")
    code, _, err = bnl("resolve", "XYZ", "--search-path", "db_any")
    assert code == 2 and err.startswith("E:USAGE:")


def test_sync_with_dead_peer_exits_three(sites):
    bnl, _, _ = sites
    code, out, _ = bnl("sync-now")
    assert code == 3
    assert out.startswith("SBU\tUnreachable")


def test_status_and_fsck(sites):
    bnl, sbu, fed = sites
    _converge(bnl, sbu, fed)
    code, out, _ = bnl("status")
    assert code == 0
    lines = out.splitlines()
    assert "queue_depth\t0" in lines and "cursor\tSBU\t4" in lines
    assert any(line.startswith("last_sync\tSBU\tSuccess\t4") for line in lines)
    assert bnl("fsck") == (0, "", "")


def test_fsck_flags_cluster_name_clash(sites):
    bnl, sbu, fed = sites
    # cluster names are federation-wide; a second site reusing one is reported
    sbu("add-cluster", "bnl1c", "--apply")
    _converge(bnl, sbu, fed)
    code, out, _ = bnl("fsck")
    assert code == 1 and "host bnl1 references unknown cluster bnl1c" in out


def test_pending_writes_visible_on_request(sites):
    bnl, _, _ = sites
    bnl("add-file", "--lfn", "new", "--host", "bnl1", "--path", "/n", "--storage", "tape")
    assert bnl("query", "replicas", "new")[0] == 1
    assert bnl("query", "replicas", "new", "--include-pending")[0] == 0


def test_settings_helpers():
    assert parse_duration("30s") == 30 and parse_duration("10m") == 600 and parse_duration("250ms") == 0.25
    with pytest.raises(UsageError):
        parse_duration("0s")
    assert parse_config("# note\ntick = 5s\nbackoff-max=1m\n") == {"tick": "5s", "backoff_max": "1m"}
    with pytest.raises(UsageError):
        parse_config("tick 5s")
