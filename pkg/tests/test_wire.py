import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuzzing import CorruptingChannel, fuzz_batches, fuzz_frames
from oracles import ceil_frames

from repcat.errors import (
    DecodeError,
    FederationMismatch,
    FrameTooLarge,
    GapNeedsSnapshot,
    ProtocolError,
    Unreachable,
    VersionMismatch,
)
from repcat.federation import Federation
from repcat.model import ClusterId
from repcat.replication import Outcome, Peer, sync_with_peer
from repcat.transport.session import ClientSession, ServerSession
from repcat.transport.sim import SimNetwork
from repcat.transport.wire import (
    MAX_FRAME,
    ErrorCode,
    Frame,
    Hello,
    MsgType,
    cursors_frame,
    decode_cursors,
    decode_delta_req,
    decode_error,
    decode_frame,
    decode_hello,
    decode_snap_chunk,
    delta_req_frame,
    encode_frame,
    error_frame,
    hello_frame,
    snap_chunk_frame,
    snap_final_frame,
)
from repcat.store import open_store

FED = Federation.of("BNL", "SBU", "VU")


def test_header_layout():
    assert encode_frame(Frame(MsgType.SNAP_REQ)) == b"\x00\x00\x00\x00\x06"
    assert encode_frame(Frame(0x08, b"xyz")) == b"\x00\x00\x00\x03\x08xyz"


@settings(max_examples=300)
@given(st.integers(0, 255), st.binary(max_size=2000))
def test_frame_round_trip(msg_type, payload):
    frame = Frame(msg_type, payload)
    data = encode_frame(frame)
    assert decode_frame(data) == (frame, len(data))


def test_seeded_fuzz():
    assert fuzz_frames(1, 500) == []
    assert fuzz_batches(2, 300) == []


def test_truncated_and_oversized_frames():
    data = encode_frame(Frame(1, b"abcdef"))
    for cut in range(len(data)):
        with pytest.raises(DecodeError):
            decode_frame(data[:cut])
    with pytest.raises(FrameTooLarge):
        decode_frame(struct.pack(">IB", MAX_FRAME + 1, 5))


def test_payload_codecs():
    assert decode_hello(hello_frame(Hello(1, "VU", FED.digest)).payload) == Hello(1, "VU", FED.digest)
    assert decode_cursors(cursors_frame({"SBU": 3, "BNL": 2**64 - 1}).payload) == {"BNL": 2**64 - 1, "SBU": 3}
    assert decode_delta_req(delta_req_frame("BNL", 7, 5000).payload) == ("BNL", 7, 5000)
    assert decode_error(error_frame(ErrorCode.GAP, "pruned").payload) == (4, "pruned")
    assert decode_snap_chunk(snap_chunk_frame(b"abc").payload) == (b"abc", None)
    assert decode_snap_chunk(snap_final_frame(b"\x01" * 32).payload) == (b"", b"\x01" * 32)
    with pytest.raises(DecodeError):
        decode_snap_chunk(struct.pack(">I", 0) + b"short")


@pytest.mark.parametrize("n,batch", [(0, 5000), (1, 5000), (5000, 5000), (5001, 5000), (20_000, 5000), (777, 100)])
def test_delta_frame_count(n, batch):
    src = open_store(None, "BNL", FED)
    for i in range(n):
        src.insert(ClusterId(f"c{i}", "BNL"))
    src.apply_buffer()
    net = SimNetwork(FED.site_ids)
    net.attach(src)
    with net.connect("SBU", "BNL", FED) as session:
        batches = list(session.request_delta("BNL", 0, batch))
    assert len(batches) == session.delta_frames == ceil_frames(n, batch)
    assert sum(len(b) for b in batches) == n
    assert all(len(b) <= batch for b in batches)


# -- session failures ------------------------------------------------------

@pytest.fixture
def net():
    n = SimNetwork(FED.site_ids, seed=1)
    store = open_store(None, "BNL", FED)
    store.insert(ClusterId("c", "BNL"))
    store.apply_buffer()
    n.attach(store)
    return n


def test_version_mismatch(net):
    with pytest.raises(VersionMismatch):
        net.connect("SBU", "BNL", FED, version=2)


def test_version_mismatch_error_frame(net):
    server = ServerSession(net.stores["BNL"])
    (reply,) = server.handle(hello_frame(Hello(2, "SBU", FED.digest)))
    assert reply.msg_type == MsgType.ERROR
    assert decode_error(reply.payload)[0] == ErrorCode.VERSION
    assert server.closed
    assert list(server.handle(Frame(MsgType.CURSORS_REQ))) == []


def test_federation_mismatch(net):
    other = Federation.of("BNL", "SBU", "CERN")
    with pytest.raises(FederationMismatch):
        net.connect("SBU", "BNL", other)


@pytest.mark.parametrize("first", [Frame(MsgType.CURSORS_REQ), Frame(MsgType.HELLO, b"\x00")])
def test_bad_opening_frame(net, first):
    server = ServerSession(net.stores["BNL"])
    (reply,) = server.handle(first)
    assert decode_error(reply.payload)[0] == ErrorCode.BAD_REQUEST
    assert server.closed


def test_self_and_stranger_rejected(net):
    server = ServerSession(net.stores["BNL"])
    (reply,) = server.handle(hello_frame(Hello(1, "BNL", FED.digest)))
    assert decode_error(reply.payload)[0] == ErrorCode.UNKNOWN_SITE


def test_unknown_type_answered_with_error(net):
    server = ServerSession(net.stores["BNL"])
    list(server.handle(hello_frame(Hello(1, "SBU", FED.digest))))
    (reply,) = server.handle(Frame(0x42))
    assert decode_error(reply.payload)[0] == ErrorCode.UNKNOWN_TYPE
    assert not server.closed


def test_zero_batch_rejected(net):
    session = net.connect("SBU", "BNL", FED)
    with pytest.raises(ProtocolError):
        list(session.request_delta("BNL", 0, 0))


def test_pruned_range_needs_snapshot(net):
    store = net.stores["BNL"]
    store.retention = 0
    for i in range(5):
        store.insert(ClusterId(f"x{i}", "BNL"))
    store.apply_buffer()
    store.record_ack("SBU", "BNL", 4)
    store.record_ack("VU", "BNL", 4)
    assert store.prune() == {"BNL": 4}
    with pytest.raises(GapNeedsSnapshot):
        list(net.connect("SBU", "BNL", FED).request_delta("BNL", 1))


@pytest.mark.parametrize("where", [
    lambda body: 4 + 3 + 1 + 4 + 4,          # first record's op tag
    lambda body: 4 + 3,                      # the 'more' flag
    lambda body: 4 + 3 + 1,                  # high byte of the op count
])
def test_corrupt_delta_drops_session(net, where):
    client = net.connect("SBU", "BNL", FED)
    session = ClientSession(CorruptingChannel(client.channel, where), "SBU", FED)
    session.peer_site = "BNL"
    with pytest.raises(ProtocolError):
        list(session.request_delta("BNL", 0))
    with pytest.raises(Unreachable):
        session.request_cursors()


def test_corrupt_request_gets_bad_request(net):
    server = ServerSession(net.stores["BNL"])
    list(server.handle(hello_frame(Hello(1, "SBU", FED.digest))))
    (reply,) = server.handle(Frame(MsgType.DELTA_REQ, b"\xff\xff\xff\xff"))
    assert decode_error(reply.payload)[0] == ErrorCode.BAD_REQUEST
    assert server.closed


def test_corrupt_row_payload_fails_sync_atomically(net):
    def connect(peer):
        client = net.connect("SBU", peer.site, FED)
        # high byte of the cluster name length inside the last op's row payload
        session = ClientSession(CorruptingChannel(client.channel, lambda body: len(body) - 8 - 12),
                                "SBU", FED)
        session.peer_site = peer.site
        return session

    store = open_store(None, "SBU", FED)
    report = sync_with_peer(store, Peer("BNL"), connect)
    assert report.outcome is Outcome.PROTOCOL_ERROR
    assert "DecodeError" in report.error
    assert store.cursor("BNL") == 0
