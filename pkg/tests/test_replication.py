import pytest

from harness import Federated
from oracles import ReferenceCatalog

from repcat.errors import UnknownSite
from repcat.federation import Federation
from repcat.model import ClusterId
from repcat.replication import Outcome, Peer, RetryPolicy, Scheduler, bootstrap_from, sync_with_peer
from repcat.store import open_store
from repcat.transport.sim import LinkFaults, SimNetwork, sim_create, sim_heal, sim_partition


@pytest.fixture
def fed3():
    f = Federated(11)
    f.setup_topology()
    yield f
    f.close()


def test_pairwise_pull_and_relay(fed3):
    for _ in range(300):
        fed3.random_write()
    for st in fed3.stores.values():
        st.apply_buffer()
    fed3.net.cut("BNL", "VU")
    # VU learns BNL's partition only through SBU
    fed3.sync("SBU", "BNL")
    report = fed3.sync("VU", "SBU")
    assert report.outcome is Outcome.SUCCESS
    assert report.ops_pulled["BNL"] == fed3.stores["BNL"].cursor("BNL")
    assert fed3.sync("VU", "BNL").outcome is Outcome.UNREACHABLE
    fed3.sync("SBU", "VU")
    fed3.sync("BNL", "SBU")
    assert fed3.converged()
    assert all(fed3.matches_oracle(s) for s in fed3.sites)
    assert fed3.digests()["BNL"] == fed3.oracle.digest()


def test_delta_is_exact(fed3):
    fed3.quiesce()
    before = fed3.stores["SBU"].cursors()
    for _ in range(1234):
        fed3.random_write("BNL")
    fed3.stores["BNL"].apply_buffer()
    report = fed3.sync("SBU", "BNL")
    assert report.ops_pulled == {"BNL": 1234, "VU": 0}
    assert report.ops_transferred == 1234
    assert fed3.stores["SBU"].cursors()["BNL"] == before["BNL"] + 1234
    again = fed3.sync("SBU", "BNL")
    assert again.total_pulled == 0 and again.ops_transferred == 0


def test_unapplied_writes_are_not_shipped(fed3):
    fed3.quiesce()
    fed3.random_write("BNL")
    assert fed3.sync("SBU", "BNL").total_pulled == 0
    fed3.stores["BNL"].apply_buffer()
    assert fed3.sync("SBU", "BNL").total_pulled == 1


def test_partition_and_heal():
    net = sim_create(["BNL", "SBU", "VU"], seed=3)
    fed = Federation.of("BNL", "SBU", "VU")
    stores = {s: open_store(None, s, fed) for s in fed.site_ids}
    for st in stores.values():
        net.attach(st)
    sim_partition(net, "BNL")
    assert sync_with_peer(stores["SBU"], Peer("BNL"), net.connector("SBU", fed)).outcome is Outcome.UNREACHABLE
    assert sync_with_peer(stores["SBU"], Peer("VU"), net.connector("SBU", fed)).outcome is Outcome.SUCCESS
    sim_heal(net, "BNL")
    assert sync_with_peer(stores["SBU"], Peer("BNL"), net.connector("SBU", fed)).outcome is Outcome.SUCCESS
    with pytest.raises(UnknownSite):
        sim_partition(net, "CERN")


def _scripted_run(seed):
    f = Federated(seed, faults=LinkFaults(drop=0.05))
    f.setup_topology()
    log = []
    for t in range(30):
        for _ in range(20):
            f.random_write()
        for site, reports in f.tick_all(float(t)).items():
            log.extend((site, r.peer, r.outcome, tuple(sorted(r.ops_pulled.items())), r.ops_transferred)
                       for r in reports)
    return log, f.net.trace_digest, f.digests()


def test_simulation_is_deterministic():
    a, b = _scripted_run(5), _scripted_run(5)
    assert a == b
    assert any(o is Outcome.UNREACHABLE for _, _, o, _, _ in a[0])
    assert _scripted_run(6)[1] != a[1]


def test_lossy_links_eventually_deliver():
    f = Federated(9, faults=LinkFaults(drop=0.2))
    f.setup_topology()
    for _ in range(500):
        f.random_write()
    for t in range(60):
        f.tick_all(float(t))
        if f.converged() and f.matches_oracle("VU"):
            break
    assert f.net.dropped > 0
    assert f.converged()
    assert all(f.matches_oracle(s) for s in f.sites)


# -- scheduler -----------------------------------------------------------------

def test_backoff_schedule():
    p = RetryPolicy(interval=30, max_backoff=600)
    assert [p.delay(n) for n in range(7)] == [0, 30, 60, 120, 240, 480, 600]
    with pytest.raises(ValueError):
        RetryPolicy(interval=30, max_backoff=10)


def test_scheduler_backs_off_and_recovers():
    f = Federated(2, policy=RetryPolicy(interval=1, max_backoff=8))
    f.setup_topology()
    f.net.partition("BNL")
    sched = f.schedulers["SBU"]
    attempts = []
    for t in range(20):
        attempts.append(len([r for r in sched.tick(float(t)) if r.peer == "BNL"]))
    # failures at t=0,1,3,7,15 (delays 1,2,4,8,8...)
    assert [t for t, n in enumerate(attempts) if n] == [0, 1, 3, 7, 15]
    peer = next(p for p in sched.peers if p.site == "BNL")
    assert peer.consecutive_failures == 5
    f.net.heal("BNL")
    assert sched.tick(23.0)[0].outcome is Outcome.SUCCESS
    assert peer.consecutive_failures == 0 and peer.next_attempt == 0.0


def test_scheduler_five_ticks_down_then_converges():
    f = Federated(4)
    f.setup_topology()
    f.net.partition("VU")
    for t in range(5):
        for _ in range(30):
            f.random_write()
        reports = f.tick_all(float(t))
        assert all(r.outcome is Outcome.UNREACHABLE for r in reports["VU"])
    f.net.heal("VU")
    for t in range(5, 8):
        f.tick_all(float(t))
    assert f.converged()
    assert all(f.matches_oracle(s) for s in f.sites)


def test_bootstrap_new_site_from_snapshot():
    fed = Federation.of("BNL", "SBU", "VU")
    net = SimNetwork(fed.site_ids)
    donor = open_store(None, "BNL", fed, retention=0)
    for i in range(500):
        donor.insert(ClusterId(f"c{i}", "BNL"))
    donor.apply_buffer()
    donor.record_ack("SBU", "BNL", 400)
    donor.record_ack("VU", "BNL", 400)
    donor.prune()
    net.attach(donor)
    new = open_store(None, "VU", fed)
    connect = net.connector("VU", fed)
    assert sync_with_peer(new, Peer("BNL"), connect).outcome is Outcome.GAP_NEEDS_SNAPSHOT
    report = bootstrap_from(new, Peer("BNL"), connect)
    assert report.snapshot_origins == ["BNL"]
    assert new.checksum_data() == donor.checksum_data()
    donor.insert(ClusterId("late", "BNL"))
    donor.apply_buffer()
    assert sync_with_peer(new, Peer("BNL"), connect).total_pulled == 1


def test_scheduler_bootstraps_on_gap():
    fed = Federation.of("BNL", "SBU")
    net = SimNetwork(fed.site_ids)
    donor = open_store(None, "BNL", fed, retention=0)
    for i in range(50):
        donor.insert(ClusterId(f"c{i}", "BNL"))
    donor.apply_buffer()
    donor.record_ack("SBU", "BNL", 50)
    donor.prune()
    net.attach(donor)
    new = open_store(None, "SBU", fed)
    sched = Scheduler(new, [Peer("BNL")], net.connector("SBU", fed), RetryPolicy(1, 1))
    (report,) = sched.tick(0.0)
    assert report.outcome is Outcome.SUCCESS
    assert report.snapshot_origins == ["BNL"]
    assert new.checksum_data() == donor.checksum_data()


def test_restart_resumes_from_durable_cursors(tmp_path):
    fed = Federation.of("BNL", "SBU")
    net = SimNetwork(fed.site_ids)
    src = open_store(None, "BNL", fed)
    oracle = ReferenceCatalog({"BNL": 1, "SBU": 2})
    for i in range(100):
        row = ClusterId(f"c{i}", "BNL")
        src.insert(row)
        oracle.write("BNL", "insert", row)
    src.apply_buffer()
    net.attach(src)
    dst = open_store(tmp_path / "sbu", "SBU", fed, sync=False)
    sync_with_peer(dst, Peer("BNL"), net.connector("SBU", fed))
    dst.close()
    for i in range(100, 130):
        row = ClusterId(f"c{i}", "BNL")
        src.insert(row)
        oracle.write("BNL", "insert", row)
    src.apply_buffer()
    dst = open_store(tmp_path / "sbu", "SBU", fed, sync=False)
    report = sync_with_peer(dst, Peer("BNL"), net.connector("SBU", fed))
    assert report.ops_pulled == {"BNL": 30}
    assert dst.checksum_data() == oracle.digest()
    dst.close()
