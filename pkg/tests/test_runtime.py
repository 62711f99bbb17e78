"""Worker runtime against a scripted in-process peer standing in for the daemon."""
import socket
import struct
import threading

import pytest

from reinit_harness import runtime
from reinit_harness.core import ProcessState
from reinit_harness.runtime import (CommInvalid, CommRevoked, Endpoint, PeerLost, RollbackPending,
                                    WorldComm, pack_gather, reinit_entry, ulfm_entry, unpack_gather)
from reinit_harness.transport import BlockingChannel
from reinit_harness.wire import FrameReader, Kind, UlfmOp, encode, msg


class Peer(threading.Thread):
    """Answers barriers and collectives like a one-rank root would."""

    def __init__(self, sock, commit=3):
        super().__init__(daemon=True)
        self.sock = sock
        self.commit = commit
        self.seen = []
        self.hold_barrier = threading.Event()
        self.hold_barrier.set()

    def push(self, m):
        self.sock.sendall(encode(m))

    def run(self):
        r = FrameReader()
        while True:
            try:
                data = self.sock.recv(65536)
            except OSError:
                return
            if not data:
                return
            for m in r.feed(data):
                self.seen.append(m)
                if m.kind is Kind.BARRIER_ENTER:
                    self.hold_barrier.wait()
                    self.push(msg(Kind.BARRIER_RELEASE, m.epoch, seq=m.seq))
                elif m.kind is Kind.COLL:
                    self.push(msg(Kind.COLL_RESULT, m.epoch, seq=m.seq,
                                  payload=pack_gather([m.payload]) if m.op == 5 else m.payload))
                elif m.kind is Kind.ULFM_REQ and m.op != UlfmOp.REVOKE:
                    ranks = [0] if m.op != UlfmOp.AGREE else []
                    self.push(msg(Kind.ULFM_REPLY, m.epoch, op=m.op, flag=1, commit_iter=self.commit,
                                  ranks=ranks))


@pytest.fixture
def world():
    a, b = socket.socketpair()
    peer = Peer(b)
    peer.start()
    ep = Endpoint(BlockingChannel(a), 0, 1, 0, -1)
    comm = runtime._set_world(WorldComm(ep, 0, ProcessState.NEW))
    yield comm, peer
    a.close()
    b.close()


def test_self_send_and_recv(world):
    comm, _ = world
    comm.send(0, b"x", tag=4)
    assert comm.recv(0, tag=4) == b"x"
    with pytest.raises(ValueError):
        comm.send(1, b"x")


def test_collectives_round_trip(world):
    comm, _ = world
    comm.barrier()
    assert comm.allreduce("sum", [1.5, 2.0]) == [1.5, 2.0]
    assert comm.gather(b"me") == [b"me"]
    assert comm.bcast(0, b"root") == b"root"
    with pytest.raises(ValueError):
        comm.allreduce("bcast", [1.0])


def test_stale_frames_are_dropped(world):
    comm, peer = world
    comm.ep.advance(2, 1)
    comm = runtime._set_world(WorldComm(comm.ep, 2, ProcessState.REINITED))
    peer.push(msg(Kind.DATA, 1, src=0, dst=0, tag=0, payload=b"old"))
    peer.push(msg(Kind.ROLLBACK, 2, commit_iter=0))  # not for the next epoch: ignored
    peer.push(msg(Kind.DATA, 2, src=0, dst=0, tag=0, payload=b"new"))
    assert comm.recv(0, 0) == b"new"
    assert comm.poll_rollback() is False


def test_rollback_surfaces_at_the_next_safe_point(world):
    comm, peer = world
    peer.push(msg(Kind.ROLLBACK, 1, commit_iter=7))
    peer.push(msg(Kind.KEEPALIVE, 1))  # something after it, so we know it arrived
    while not comm.poll_rollback():
        pass
    with pytest.raises(RollbackPending) as e:
        comm.safe_point()
    assert (e.value.epoch, e.value.commit_iter) == (1, 7)


def test_rollback_interrupts_a_blocked_recv(world):
    comm, peer = world
    threading.Timer(0.05, peer.push, [msg(Kind.ROLLBACK, 1, commit_iter=2)]).start()
    with pytest.raises(RollbackPending):
        comm.recv(0, tag=99)


def test_reinit_entry_reenters_with_reinited_state(world):
    comm, peer = world
    calls = []

    def point(args, state):
        c = runtime.world()
        calls.append((state, c.epoch, c.commit_iter))
        if state is ProcessState.NEW:
            peer.push(msg(Kind.ROLLBACK, 1, commit_iter=4))
            c.recv(0, tag=1)  # blocks until the rollback unwinds us
        return c.allreduce("sum", [float(c.epoch)])[0]

    assert reinit_entry(comm, point) == 1.0
    assert calls == [(ProcessState.NEW, 0, -1), (ProcessState.REINITED, 1, 4)]
    assert comm.ep.states == [ProcessState.NEW, ProcessState.REINITED]
    with pytest.raises(CommInvalid):
        comm.safe_point()  # the pre-failure communicator is dead


def test_ulfm_checks(world):
    comm, peer = world
    peer.push(msg(Kind.FAULT_NOTIFY, 0, rank=0))
    peer.push(msg(Kind.KEEPALIVE, 0))
    with pytest.raises(PeerLost):
        while True:
            comm.safe_point()
    comm.ep.failed.clear()
    comm.ulfm_revoke()
    with pytest.raises(CommRevoked):
        comm.safe_point()


def test_ulfm_entry_repairs_and_reenters(world):
    comm, peer = world
    peer.commit = 5

    def point(args, state):
        c = runtime.world()
        if state is ProcessState.NEW:
            peer.push(msg(Kind.FAULT_NOTIFY, 0, rank=0))
            c.recv(0, tag=1)
        return (c.epoch, c.commit_iter)

    assert ulfm_entry(comm, point) == (1, 5)
    ops = [m.op for m in peer.seen if m.kind is Kind.ULFM_REQ]
    assert ops == [UlfmOp.REVOKE, UlfmOp.SHRINK, UlfmOp.AGREE, UlfmOp.MERGE]
    assert comm.ep.states == [ProcessState.NEW, ProcessState.REINITED]


def test_ckpt_get_is_served_from_the_remote_store(world):
    from reinit_harness.checkpoint import Checkpoint, CkptStore
    from reinit_harness.core import CkptMode
    comm, peer = world
    comm.ep.store = CkptStore(CkptMode.BUDDY, 0, 2)
    comm.ep.store.put_remote(Checkpoint.make(1, 3, b"copy"))
    peer.push(msg(Kind.CKPT_GET, 0, dst=0, rank=1, iter=3))
    peer.push(msg(Kind.CKPT_GET, 0, dst=0, rank=1, iter=9))
    comm.barrier()
    replies = [m for m in peer.seen if m.kind is Kind.CKPT_DATA]
    assert [(m.rank, m.iter, m.ok, m.payload) for m in replies] == [(1, 3, 1, b"copy"), (1, 9, 0, b"")]


def test_gather_packing():
    parts = [b"", b"a", b"bc" * 100]
    assert unpack_gather(pack_gather(parts)) == parts


def test_world_before_init():
    runtime._world = None
    with pytest.raises(CommInvalid):
        runtime.world()
