import socket
import threading

import pytest

from repcat.errors import ConnectionRefused, HandshakeTimeout, VersionMismatch
from repcat.federation import Federation
from repcat.model import ClusterId
from repcat.replication import Outcome, Peer, bootstrap_from, sync_with_peer, tcp_connector
from repcat.store import open_store
from repcat.transport.tcp import SyncServer, connect

FED = Federation.of("BNL", "SBU", "VU")


@pytest.fixture
def served():
    store = open_store(None, "BNL", FED)
    for i in range(120):
        store.insert(ClusterId(f"c{i}", "BNL"))
    store.apply_buffer()
    with SyncServer(store) as server:
        yield store, server


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_sync_over_loopback(served):
    store, server = served
    dst = open_store(None, "SBU", FED)
    report = sync_with_peer(dst, Peer("BNL", server.address), tcp_connector("SBU", FED), max_batch=50)
    assert report.outcome is Outcome.SUCCESS
    assert report.ops_pulled["BNL"] == 120
    assert report.delta_frames == 3
    assert dst.checksum_data() == store.checksum_data()


def test_handshake_carries_peer_site(served):
    _, server = served
    with connect(server.address, "VU", FED) as session:
        assert session.peer_site == "BNL"
        assert session.request_cursors()["BNL"] == 120


def test_version_mismatch_over_tcp(served):
    _, server = served
    with pytest.raises(VersionMismatch):
        connect(server.address, "VU", FED, version=2)


def test_dead_endpoint():
    address = f"127.0.0.1:{_free_port()}"
    with pytest.raises(ConnectionRefused):
        connect(address, "SBU", FED)
    report = sync_with_peer(open_store(None, "SBU", FED), Peer("BNL", address), tcp_connector("SBU", FED))
    assert report.outcome is Outcome.UNREACHABLE


def test_silent_peer_times_out():
    listener = socket.create_server(("127.0.0.1", 0))
    accepted = []
    t = threading.Thread(target=lambda: accepted.append(listener.accept()), daemon=True)
    t.start()
    try:
        with pytest.raises(HandshakeTimeout):
            connect("127.0.0.1:%d" % listener.getsockname()[1], "SBU", FED, timeout=0.3)
    finally:
        t.join(2)
        for conn, _ in accepted:
            conn.close()
        listener.close()


def test_bootstrap_over_tcp(served):
    store, server = served
    new = open_store(None, "VU", FED)
    report = bootstrap_from(new, Peer("BNL", server.address), tcp_connector("VU", FED))
    assert report.snapshot_origins == ["BNL"]
    assert new.checksum_data() == store.checksum_data()


def test_concurrent_peers(served):
    store, server = served
    results = {}

    def pull(site):
        dst = open_store(None, site, FED)
        results[site] = (sync_with_peer(dst, Peer("BNL", server.address), tcp_connector(site, FED)), dst)

    threads = [threading.Thread(target=pull, args=(s,)) for s in ("SBU", "VU")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for report, dst in results.values():
        assert report.outcome is Outcome.SUCCESS
        assert dst.checksum_data() == store.checksum_data()
