"""Worker-side runtime: world communicator, restart point and rollback.

Rollback is synchronous. A ROLLBACK frame from the daemon is only acted on
at a safe point: any communication call, or an explicit `poll_rollback` /
`safe_point`. The call raises `RollbackPending`, which unwinds the
application back into `reinit_entry`.

Collectives (barrier, allreduce, bcast, gather) are reduced by the root, in
rank-ascending order, so results are bit-identical from run to run.
"""
from __future__ import annotations

import logging
import os
import struct
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .checkpoint import Checkpoint
from .core import HarnessError, ProcessState
from .transport import BlockingChannel, ChannelClosed, connect_unix
from .wire import NO_ITER, CollOp, ControlMessage, Kind, UlfmOp, msg

log = logging.getLogger(__name__)

WAIT_TIMEOUT = 120.0


class RuntimeFault(HarnessError):
    pass


class ConnectFailed(RuntimeFault):
    pass


class RollbackPending(RuntimeFault):
    """Raised from a safe point when the daemon has ordered a rollback."""

    def __init__(self, epoch: int, commit_iter: int):
        super().__init__(f"rollback to epoch {epoch}, checkpoint {commit_iter}")
        self.epoch = epoch
        self.commit_iter = commit_iter


class PeerLost(RuntimeFault):
    pass


class CommRevoked(RuntimeFault):
    pass


class CommInvalid(RuntimeFault):
    pass


@dataclass
class WorkerEnv:
    rank: int
    size: int
    epoch: int
    state: ProcessState
    daemon_addr: str
    commit_iter: int

    @classmethod
    def from_environ(cls, env=None) -> "WorkerEnv":
        env = os.environ if env is None else env
        try:
            return cls(
                rank=int(env["RH_RANK"]),
                size=int(env["RH_SIZE"]),
                epoch=int(env["RH_EPOCH"]),
                state=ProcessState(int(env["RH_STATE"])),
                daemon_addr=env["RH_DAEMON_ADDR"],
                commit_iter=int(env.get("RH_COMMIT_ITER", NO_ITER)),
            )
        except (KeyError, ValueError) as e:
            raise ConnectFailed(f"incomplete worker environment: {e}") from e


class Endpoint:
    """The process's single link to its daemon, shared by every epoch's comm."""

    def __init__(self, chan: BlockingChannel, rank: int, size: int, epoch: int, commit_iter: int):
        self.chan = chan
        self.rank = rank
        self.size = size
        self.epoch = epoch
        self.commit_iter = commit_iter
        self.store = None
        self.pending_rollback: Optional[Tuple[int, int]] = None
        self.failed: Dict[int, set] = defaultdict(set)
        self.revoked: set = set()
        self.data: Dict[tuple, deque] = defaultdict(deque)
        self.coll: Dict[tuple, bytes] = {}
        self.released: set = set()
        self.ckpt_data: Dict[tuple, ControlMessage] = {}
        self.ulfm: Dict[tuple, ControlMessage] = {}
        self.t_app = 0.0
        self._reported = [0.0, 0.0, 0.0]
        self.states: List[ProcessState] = []

    # -- inbound ---------------------------------------------------------
    def dispatch(self, m: ControlMessage) -> None:
        k = m.kind
        if k is Kind.ROLLBACK:
            if m.epoch == self.epoch + 1:
                self.pending_rollback = (m.epoch, m.commit_iter)
            else:
                log.debug("rank %d: stale ROLLBACK(epoch %d) at epoch %d", self.rank, m.epoch, self.epoch)
            return
        if k is Kind.SHUTDOWN:
            raise SystemExit(0)
        if k is Kind.CKPT_GET:
            self._serve_ckpt(m)
            return
        if m.epoch < self.epoch:
            return
        if k is Kind.DATA:
            self.data[(m.epoch, m.src, m.tag)].append(m.payload)
        elif k is Kind.COLL_RESULT:
            self.coll[(m.epoch, m.seq)] = m.payload
        elif k is Kind.BARRIER_RELEASE:
            self.released.add((m.epoch, m.seq))
        elif k is Kind.CKPT_PUT:
            if self.store is not None:
                self.store.put_remote(Checkpoint.make(m.rank, m.iter, m.payload))
        elif k is Kind.CKPT_DATA:
            self.ckpt_data[(m.rank, m.iter)] = m
        elif k is Kind.FAULT_NOTIFY:
            self.failed[m.epoch].add(m.rank)
        elif k is Kind.ULFM_REPLY:
            if m.op == UlfmOp.REVOKE:
                self.revoked.add(m.epoch)
            else:
                self.ulfm[(m.epoch, m.op)] = m
        else:
            log.warning("rank %d: unexpected %s", self.rank, k.name)

    def _serve_ckpt(self, m: ControlMessage) -> None:
        ck = self.store.get_remote(m.rank, m.iter) if self.store is not None else None
        self.chan.send(msg(Kind.CKPT_DATA, m.epoch, dst=m.rank, rank=m.rank, iter=m.iter,
                           ok=int(ck is not None), payload=ck.payload if ck else b""))

    def drain(self) -> None:
        while True:
            m = self.chan.poll()
            if m is None:
                return
            self.dispatch(m)

    def wait(self, ready: Callable[[], bool], epoch: int, ulfm_checks: bool = True) -> None:
        """Block until ``ready()``; honours rollback and failure notices first."""
        deadline = time.monotonic() + WAIT_TIMEOUT
        while True:
            self.check(epoch, ulfm_checks)
            if ready():
                return
            left = deadline - time.monotonic()
            if left <= 0:
                raise RuntimeFault(f"rank {self.rank}: timed out in a communication call")
            m = self.chan.recv(timeout=left)
            if m is not None:
                self.dispatch(m)

    def check(self, epoch: int, ulfm_checks: bool = True) -> None:
        if self.pending_rollback is not None:
            raise RollbackPending(*self.pending_rollback)
        if ulfm_checks:
            if epoch in self.revoked:
                raise CommRevoked(f"communicator of epoch {epoch} was revoked")
            if self.failed.get(epoch):
                raise PeerLost(f"ranks {sorted(self.failed[epoch])} failed")

    # -- outbound --------------------------------------------------------
    def send(self, m: ControlMessage) -> None:
        self.chan.send(m)

    def timing_deltas(self) -> Tuple[float, float, float]:
        now = [self.t_app, self.store.t_write if self.store else 0.0, self.store.t_read if self.store else 0.0]
        out = tuple(a - b for a, b in zip(now, self._reported))
        self._reported = now
        return out

    def advance(self, epoch: int, commit_iter: int) -> None:
        """Discard everything tied to earlier epochs."""
        self.epoch = epoch
        self.commit_iter = commit_iter
        self.pending_rollback = None
        for table in (self.data, self.coll, self.ulfm):
            for key in [k for k in table if k[0] < epoch]:
                del table[key]
        self.released = {k for k in self.released if k[0] >= epoch}
        self.ckpt_data.clear()
        if self.store is not None:
            self.store.discard_below(commit_iter)


_world: Optional["WorldComm"] = None


def world() -> "WorldComm":
    if _world is None:
        raise CommInvalid("runtime not initialized")
    return _world


def _set_world(comm: "WorldComm") -> "WorldComm":
    global _world
    if _world is not None:
        _world.valid = False
    _world = comm
    return comm


class WorldComm:
    """The world communicator of one epoch."""

    def __init__(self, ep: Endpoint, epoch: int, state: ProcessState):
        self.ep = ep
        self.epoch = epoch
        self.rank = ep.rank
        self.size = ep.size
        self.state = state
        self.valid = True
        self._barrier_seq = 0
        self._coll_seq = 0

    def __repr__(self):
        return f"WorldComm(rank={self.rank}, size={self.size}, epoch={self.epoch})"

    @property
    def commit_iter(self) -> int:
        return self.ep.commit_iter

    def _live(self, ulfm_checks: bool = True) -> Endpoint:
        if not self.valid:
            raise CommInvalid(f"{self!r} was discarded by recovery")
        self.ep.drain()
        self.ep.check(self.epoch, ulfm_checks)
        return self.ep

    # -- safe points -----------------------------------------------------
    def poll_rollback(self) -> bool:
        self.ep.drain()
        return self.ep.pending_rollback is not None

    def safe_point(self) -> None:
        self._live()

    # -- point to point ----------------------------------------------------
    def send(self, to: int, data: bytes, tag: int = 0) -> None:
        ep = self._live()
        if not 0 <= to < self.size:
            raise ValueError(f"no rank {to} in a world of {self.size}")
        m = msg(Kind.DATA, self.epoch, src=self.rank, dst=to, tag=tag, payload=data)
        if to == self.rank:
            ep.dispatch(m)
        else:
            ep.send(m)

    def recv(self, frm: int, tag: int = 0) -> bytes:
        ep = self._live()
        q = ep.data[(self.epoch, frm, tag)]
        ep.wait(lambda: bool(q), self.epoch)
        return q.popleft()

    # -- collectives -------------------------------------------------------
    def barrier(self, ulfm_checks: bool = True) -> None:
        ep = self._live(ulfm_checks)
        seq = self._barrier_seq
        self._barrier_seq += 1
        ep.send(msg(Kind.BARRIER_ENTER, self.epoch, rank=self.rank, seq=seq))
        key = (self.epoch, seq)
        ep.wait(lambda: key in ep.released, self.epoch, ulfm_checks)
        ep.released.discard(key)

    def _collective(self, op: CollOp, payload: bytes, arg: int = 0) -> bytes:
        ep = self._live()
        seq = self._coll_seq
        self._coll_seq += 1
        ep.send(msg(Kind.COLL, self.epoch, rank=self.rank, seq=seq, op=op, arg=arg, payload=payload))
        key = (self.epoch, seq)
        ep.wait(lambda: key in ep.coll, self.epoch)
        return ep.coll.pop(key)

    def allreduce(self, op, values: Sequence[float]) -> List[float]:
        op = CollOp[op.upper()] if isinstance(op, str) else CollOp(op)
        if op not in (CollOp.SUM, CollOp.MAX, CollOp.MIN):
            raise ValueError(f"{op.name} is not a reduction")
        out = self._collective(op, struct.pack(f"<{len(values)}d", *values))
        return list(struct.unpack(f"<{len(out) // 8}d", out))

    def bcast(self, root: int, data: bytes = b"") -> bytes:
        return self._collective(CollOp.BCAST, data if self.rank == root else b"", arg=root)

    def gather(self, data: bytes) -> List[bytes]:
        """Every rank's contribution, in rank order (delivered to all ranks)."""
        return unpack_gather(self._collective(CollOp.GATHER, data))

    # -- checkpoint transport (used by CkptStore) --------------------------
    def send_ckpt_put(self, buddy: int, ck: Checkpoint) -> None:
        ep = self._live()
        ep.send(msg(Kind.CKPT_PUT, self.epoch, dst=buddy, rank=ck.rank, iter=ck.iter, payload=ck.payload))

    def fetch_ckpt(self, buddy: int, it: int) -> Optional[Checkpoint]:
        ep = self._live()
        ep.send(msg(Kind.CKPT_GET, self.epoch, dst=buddy, rank=self.rank, iter=it))
        key = (self.rank, it)
        ep.wait(lambda: key in ep.ckpt_data, self.epoch)
        reply = ep.ckpt_data.pop(key)
        if not reply.ok:
            return None
        return Checkpoint.make(self.rank, it, reply.payload)

    def report_ckpt(self, it: int) -> None:
        t_app, t_w, t_r = self.ep.timing_deltas()
        self.ep.send(msg(Kind.CKPT_REPORT, self.epoch, rank=self.rank, iter=it,
                         t_app=t_app, t_write=t_w, t_read=t_r))

    # -- ULFM-style repair ---------------------------------------------------
    def ulfm_revoke(self) -> None:
        if not self.valid:
            raise CommInvalid(repr(self))
        self.ep.revoked.add(self.epoch)
        self.ep.send(msg(Kind.ULFM_REQ, self.epoch, rank=self.rank, op=UlfmOp.REVOKE, flag=0))

    def _ulfm_call(self, op: UlfmOp, flag: int = 0) -> ControlMessage:
        ep = self.ep
        ep.send(msg(Kind.ULFM_REQ, self.epoch, rank=self.rank, op=op, flag=flag))
        key = (self.epoch, op)
        ep.wait(lambda: key in ep.ulfm, self.epoch, ulfm_checks=False)
        return ep.ulfm.pop(key)

    def ulfm_shrink(self) -> "ShrunkComm":
        reply = self._ulfm_call(UlfmOp.SHRINK)
        return ShrunkComm(self, list(reply.ranks))


class ShrunkComm:
    """Survivor-only communicator produced by shrink; ranks are renumbered."""

    def __init__(self, parent: WorldComm, members: List[int]):
        self.parent = parent
        self.members = members
        self.size = len(members)
        self.rank = members.index(parent.rank)

    def ulfm_agree(self, flag: int) -> Tuple[int, List[int]]:
        """Bitwise AND of ``flag`` over survivors, plus the agreed failed set."""
        reply = self.parent._ulfm_call(UlfmOp.AGREE, flag)
        return reply.flag, list(reply.ranks)

    def ulfm_spawn_merge(self, missing: Sequence[int]) -> WorldComm:
        """Respawn ``missing`` ranks and return the full-size world at epoch+1."""
        parent = self.parent
        reply = parent._ulfm_call(UlfmOp.MERGE, len(missing))
        ep = parent.ep
        ep.advance(parent.epoch + 1, reply.commit_iter)
        comm = _set_world(WorldComm(ep, ep.epoch, ProcessState.REINITED))
        comm.barrier()
        return comm


def unpack_gather(blob: bytes) -> List[bytes]:
    out, off = [], 0
    while off < len(blob):
        (n,) = struct.unpack_from("<I", blob, off)
        out.append(blob[off + 4:off + 4 + n])
        off += 4 + n
    return out


def pack_gather(parts: Sequence[bytes]) -> bytes:
    return b"".join(struct.pack("<I", len(p)) + p for p in parts)


def runtime_init(env: Optional[WorkerEnv] = None) -> WorldComm:
    """Register with the daemon and pass the startup barrier."""
    env = env or WorkerEnv.from_environ()
    try:
        chan = BlockingChannel(connect_unix(env.daemon_addr))
        ep = Endpoint(chan, env.rank, env.size, env.epoch, env.commit_iter)
        chan.send(msg(Kind.REGISTER_WORKER, env.epoch, rank=env.rank, pid=os.getpid()))
        comm = _set_world(WorldComm(ep, env.epoch, env.state))
        comm.barrier(ulfm_checks=False)
    except (OSError, ChannelClosed) as e:
        raise ConnectFailed(f"rank {env.rank}: {e}") from e
    return comm


RestartPoint = Callable[[object, ProcessState], object]


def _rollback(comm: WorldComm, rb: RollbackPending) -> WorldComm:
    ep = comm.ep
    # discard communicator-derived state, then rebuild the world after the barrier
    ep.advance(rb.epoch, rb.commit_iter)
    fresh = _set_world(WorldComm(ep, rb.epoch, ProcessState.REINITED))
    fresh.barrier(ulfm_checks=False)
    return fresh


def reinit_entry(comm: WorldComm, point: RestartPoint, app_args=None):
    """Run ``point`` and re-enter it after every rollback."""
    state = comm.state
    while True:
        comm.ep.states.append(state)
        try:
            return point(app_args, state)
        except RollbackPending as rb:
            log.debug("rank %d: %s", comm.rank, rb)
            comm = _rollback(world(), rb)
            state = ProcessState.REINITED


def ulfm_entry(comm: WorldComm, point: RestartPoint, app_args=None):
    """Global restart built from revoke / shrink / agree / spawn_merge."""
    state = comm.state
    while True:
        comm.ep.states.append(state)
        try:
            return point(app_args, state)
        except (PeerLost, CommRevoked) as e:
            log.debug("rank %d: %s", comm.rank, e)
            comm = world()
            comm.ulfm_revoke()
            shrunk = comm.ulfm_shrink()
            flag, failed = shrunk.ulfm_agree(1)
            if not flag:
                raise RuntimeFault("survivors disagreed on recovery") from e
            comm = shrunk.ulfm_spawn_merge(failed)
            state = ProcessState.REINITED
