import os
import pathlib

import pytest

from oracle import crc32_bitwise
from reinit_harness import checkpoint
from reinit_harness.checkpoint import (Checkpoint, CheckpointError, CheckpointUnavailable, CkptStore,
                                       CrcMismatch, ckpt_path, pack_file, unpack_file, write_file_atomic)
from reinit_harness.core import CkptMode, ProcessState

GOLDEN = (pathlib.Path(__file__).parent / "golden" / "rck1_sample.ckpt").read_bytes()
SAMPLE = Checkpoint.make(3, 17, b"reinit checkpoint payload")


def test_crc_check_values():
    assert crc32_bitwise(b"123456789") == 0xCBF43926
    assert checkpoint.crc32(b"123456789") == 0xCBF43926
    assert checkpoint.crc32(b"\x00") == 0xD202EF8D == crc32_bitwise(b"\x00")
    assert checkpoint.crc32(b"") == 0


@pytest.mark.parametrize("data", [b"a", b"\xff" * 33, bytes(range(256)), b"reinit" * 100])
def test_crc_matches_reference(data):
    assert checkpoint.crc32(data) == crc32_bitwise(data)


def test_golden_file_bytes():
    assert pack_file(SAMPLE) == GOLDEN
    assert GOLDEN[:4] == b"RCK1"
    assert len(GOLDEN) == 30 + len(SAMPLE.payload)  # 4+2+4+8+8+4 header bytes
    assert unpack_file(GOLDEN) == SAMPLE


def test_corrupted_payload_raises_crc_mismatch():
    blob = bytearray(GOLDEN)
    blob[-3] ^= 0x10
    with pytest.raises(CrcMismatch):
        unpack_file(bytes(blob))


def test_bad_magic_and_truncation():
    with pytest.raises(CheckpointError):
        unpack_file(b"XXXX" + GOLDEN[4:])
    with pytest.raises(CheckpointError):
        unpack_file(GOLDEN[:-1])
    with pytest.raises(CheckpointError):
        unpack_file(GOLDEN[:10])


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "x.ckpt"
    write_file_atomic(str(p), b"one")
    write_file_atomic(str(p), b"two")
    assert p.read_bytes() == b"two"
    assert os.listdir(tmp_path) == ["x.ckpt"]


class FakeComm:
    def __init__(self, rank=0, size=2):
        self.rank, self.size = rank, size
        self.puts, self.reports = [], []
        self.remote = {}

    def send_ckpt_put(self, buddy, ck):
        self.puts.append((buddy, ck))

    def fetch_ckpt(self, buddy, it):
        return self.remote.get(it)

    def report_ckpt(self, it):
        self.reports.append(it)


def test_buddy_needs_two_ranks():
    with pytest.raises(CheckpointError):
        CkptStore(CkptMode.BUDDY, 0, 1)


def test_file_mode_needs_directory():
    with pytest.raises(CheckpointError):
        CkptStore(CkptMode.FILE, 0, 2)


def test_file_store_keeps_two_newest_and_reloads(tmp_path):
    s = CkptStore(CkptMode.FILE, 1, 4, str(tmp_path), "run")
    c = FakeComm(1, 4)
    for it in range(4):
        s.write(c, it, bytes([it]) * 8)
    files = sorted(os.listdir(tmp_path / "run"))
    assert files == [os.path.basename(ckpt_path(str(tmp_path), "run", 1, i)) for i in (2, 3)]
    assert c.reports == [0, 1, 2, 3]
    fresh = CkptStore(CkptMode.FILE, 1, 4, str(tmp_path), "run")
    assert fresh.load(c, 2, ProcessState.RESTARTED) == b"\x02" * 8
    with pytest.raises(CheckpointUnavailable):
        fresh.load(c, 0, ProcessState.RESTARTED)


def test_file_store_detects_corruption_on_restart(tmp_path):
    s = CkptStore(CkptMode.FILE, 0, 2, str(tmp_path), "run")
    s.write(FakeComm(), 5, b"payload!")
    path = ckpt_path(str(tmp_path), "run", 0, 5)
    blob = bytearray(open(path, "rb").read())
    blob[-1] ^= 1
    open(path, "wb").write(bytes(blob))
    with pytest.raises(CrcMismatch):
        CkptStore(CkptMode.FILE, 0, 2, str(tmp_path), "run").load(FakeComm(), 5, ProcessState.RESTARTED)


def test_buddy_write_sends_to_next_rank_and_restart_fetches():
    c = FakeComm(3, 4)
    s = CkptStore(CkptMode.BUDDY, 3, 4)
    s.write(c, 7, b"abc")
    assert c.puts[0][0] == 0 and c.puts[0][1].iter == 7
    # a survivor reads its own copy
    assert s.load(c, 7, ProcessState.REINITED) == b"abc"
    # a respawned rank has nothing local and asks its buddy
    fresh = CkptStore(CkptMode.BUDDY, 3, 4)
    c.remote[7] = Checkpoint.make(3, 7, b"abc")
    assert fresh.load(c, 7, ProcessState.RESTARTED) == b"abc"
    with pytest.raises(CheckpointUnavailable):
        fresh.load(c, 6, ProcessState.RESTARTED)


def test_buddy_copy_from_the_wrong_rank_is_rejected():
    c = FakeComm(1, 4)
    c.remote[2] = Checkpoint.make(0, 2, b"x")
    with pytest.raises(CheckpointError):
        CkptStore(CkptMode.BUDDY, 1, 4).load(c, 2, ProcessState.RESTARTED)


def test_remote_window_and_discard():
    s = CkptStore(CkptMode.BUDDY, 1, 4)
    for it in range(5):
        s.put_remote(Checkpoint.make(0, it, b"p"))
    assert sorted(s.remote) == [(0, 3), (0, 4)]
    s.discard_below(5)
    assert sorted(s.remote) == [(0, 4)]
    assert s.get_remote(0, 4).iter == 4 and s.get_remote(0, 1) is None


def test_load_trims_newer_local_copies():
    c = FakeComm()
    s = CkptStore(CkptMode.BUDDY, 0, 2)
    s.write(c, 1, b"1")
    s.write(c, 2, b"2")
    s.load(c, 1, ProcessState.REINITED)
    assert sorted(s.local) == [1]


def test_no_commit_means_nothing_to_load():
    with pytest.raises(CheckpointUnavailable):
        CkptStore(CkptMode.BUDDY, 0, 2).load(FakeComm(), -1, ProcessState.REINITED)


def test_disabled_store_writes_nothing():
    c = FakeComm()
    s = CkptStore(CkptMode.NONE, 0, 1)
    s.write(c, 0, b"x")
    assert not s.local and not c.reports and s.t_write == 0.0
