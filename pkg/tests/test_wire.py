import json
import pathlib
import struct

import pytest
from hypothesis import given, strategies as st

from reinit_harness import verify, wire
from reinit_harness.wire import FrameReader, Kind, ProtocolError, decode, encode, msg

GOLDEN = json.loads((pathlib.Path(__file__).parent / "golden" / "wire_vectors.json").read_text())
SAMPLES = verify.sample_messages()


def test_every_kind_has_a_golden_vector():
    assert set(GOLDEN) == {k.name for k in Kind}


@pytest.mark.parametrize("kind", list(Kind), ids=lambda k: k.name)
def test_golden_vectors(kind):
    m = SAMPLES[kind]
    raw = bytes.fromhex(GOLDEN[kind.name])
    assert encode(m) == raw
    back = decode(raw)
    assert back == m
    assert encode(back) == raw


def test_header_by_hand():
    # BARRIER_RELEASE epoch 1 seq 0: len=14, kind=7, epoch=1, seq=0
    raw = struct.pack("<IHQ", 14, 7, 1) + struct.pack("<I", 0)
    assert encode(msg(Kind.BARRIER_RELEASE, 1, seq=0)) == raw


def test_reinit_cmd_by_hand():
    m = msg(Kind.REINIT_CMD, 2, commit_iter=-1, assignment=[(3, 9)])
    body = struct.pack("<q", -1) + struct.pack("<III", 1, 3, 9)
    assert encode(m) == struct.pack("<IHQ", 10 + len(body), 4, 2) + body


def test_register_daemon_string_tail():
    m = decode(bytes.fromhex(GOLDEN["REGISTER_DAEMON"]))
    assert m.address == "/tmp/rh/d2.sock" and m.daemon == 2 and m.pid == 4242


def test_msg_rejects_wrong_fields():
    with pytest.raises(ProtocolError):
        msg(Kind.ROLLBACK, 0, commit=1)
    with pytest.raises(ProtocolError):
        msg(Kind.FAULT_NOTIFY, 0)


def test_decode_errors():
    with pytest.raises(ProtocolError):
        decode(b"\x00\x01")
    good = bytes.fromhex(GOLDEN["FAULT_NOTIFY"])
    with pytest.raises(ProtocolError):
        decode(good[:-1])  # length no longer matches
    bad_kind = struct.pack("<IHQ", 10, 999, 0)
    with pytest.raises(ProtocolError):
        decode(bad_kind)
    trailing = struct.pack("<IHQ", 16, 3, 0) + b"\x00" * 6
    with pytest.raises(ProtocolError):
        decode(trailing)
    short_list = struct.pack("<IHQ", 10 + 12, 4, 0) + struct.pack("<qI", 0, 5)
    with pytest.raises(ProtocolError):
        decode(short_list)


def test_frame_reader_handles_split_and_coalesced_frames():
    stream = b"".join(encode(m) for m in SAMPLES.values())
    r = FrameReader()
    got = []
    for i in range(len(stream)):
        got += r.feed(stream[i:i + 1])
    assert got == list(SAMPLES.values())
    assert r.pending == 0
    assert FrameReader().feed(stream) == list(SAMPLES.values())


def test_frame_reader_rejects_absurd_length():
    with pytest.raises(ProtocolError):
        FrameReader().feed(struct.pack("<I", 3) + b"xyz")


@given(st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 2**32 - 1), st.binary(max_size=300))
def test_data_round_trip(epoch, src, dst, tag, payload):
    m = msg(Kind.DATA, epoch, src=src, dst=dst, tag=tag, payload=payload)
    assert decode(encode(m)) == m


@given(st.lists(st.integers(0, 2**32 - 1), max_size=50), st.integers(-2**63, 2**63 - 1))
def test_ulfm_reply_round_trip(ranks, commit):
    m = msg(Kind.ULFM_REPLY, 3, op=int(wire.UlfmOp.MERGE), flag=0, commit_iter=commit, ranks=ranks)
    assert decode(encode(m)) == m


def test_verify_check_wire_against_golden():
    ok, detail = verify.check_wire(GOLDEN)
    assert ok, detail
