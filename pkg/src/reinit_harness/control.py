"""The root process: launches daemons, detects failures, drives recovery.

All state lives in one `Root` object mutated only from its selector loop.
Besides recovery, the root is the rendezvous point for barriers and
collectives and routes rank-to-rank frames between daemons.
"""
from __future__ import annotations

import enum
import logging
import os
import selectors
import shutil
import signal
import struct
import subprocess
import sys
import tempfile
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .core import (CkptMode, FailedEntity, HarnessError, LaunchTimeout, NoAliveDaemons,
                   ProcessState, Strategy, Topology, UnrecoverableFailure, plan_recovery)
from .faults import InjectionPlan
from .runtime import pack_gather
from .transport import Channel, listen_unix
from .wire import NO_ITER, CollOp, ControlMessage, Kind, UlfmOp, msg
from .worker import unpack_done

log = logging.getLogger(__name__)

_SRC = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


class Phase(enum.Enum):
    LAUNCHING = "launching"
    RUNNING = "running"
    RECOVERING = "recovering"
    DONE = "done"
    ABORTED = "aborted"


_EDGES = {
    Phase.LAUNCHING: {Phase.RUNNING, Phase.ABORTED},
    Phase.RUNNING: {Phase.RECOVERING, Phase.DONE, Phase.ABORTED},
    Phase.RECOVERING: {Phase.RUNNING, Phase.ABORTED},
    Phase.DONE: set(),
    Phase.ABORTED: set(),
}


class RunAborted(HarnessError):
    pass


@dataclass
class LaunchConfig:
    world_size: int
    num_daemons: int = 1
    spares: int = 0
    app: str = "jacobi"
    strategy: Strategy = Strategy.REINIT
    ckpt_mode: CkptMode = CkptMode.BUDDY
    ckpt_dir: str = ""
    run_id: str = "run"
    iterations: int = 20
    vector_size: int = 4096
    plan: InjectionPlan = field(default_factory=InjectionPlan)
    commit_iter: int = NO_ITER
    launch_timeout: float = 10.0
    run_timeout: float = 300.0
    keepalive: float = 0.0
    spawn_method: str = "fork"

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.ckpt_mode = CkptMode(self.ckpt_mode)
        if self.world_size < 1:
            raise ValueError("world_size must be >= 1")
        if self.num_daemons < 1 or self.spares < 0:
            raise ValueError("need at least one daemon and a non-negative spare count")


@dataclass
class RunState:
    topology: Topology
    epoch: int = 0
    phase: Phase = Phase.LAUNCHING
    committed_iter: int = NO_ITER


@dataclass(frozen=True)
class FailureEvent:
    failed: FailedEntity
    t_detect: float


@dataclass(frozen=True)
class Completion:
    checksum: int
    residual: float
    states: Dict[int, List[ProcessState]]


@dataclass
class RecoveryRecord:
    epoch: int
    failed: FailedEntity
    assignment: List[Tuple[int, int]]
    commit_iter: int
    t_detect: float
    t_done: float = 0.0

    @property
    def duration(self) -> float:
        return self.t_done - self.t_detect


def collect_commit(reports: Dict[int, int]) -> int:
    """Latest iteration every rank holds: min over per-rank latest reports."""
    if not reports:
        raise ValueError("no checkpoint reports")
    return min(reports.values())


def reduce_collective(op: CollOp, arg: int, contributions: Dict[int, bytes]) -> bytes:
    ranks = sorted(contributions)
    if op is CollOp.BCAST:
        return contributions[arg]
    if op is CollOp.GATHER:
        return pack_gather([contributions[r] for r in ranks])
    vectors = [struct.unpack(f"<{len(contributions[r]) // 8}d", contributions[r]) for r in ranks]
    acc = list(vectors[0])
    for v in vectors[1:]:
        if len(v) != len(acc):
            raise HarnessError("allreduce contributions differ in length")
        if op is CollOp.SUM:
            acc = [a + b for a, b in zip(acc, v)]
        elif op is CollOp.MAX:
            acc = [max(a, b) for a, b in zip(acc, v)]
        else:
            acc = [min(a, b) for a, b in zip(acc, v)]
    return struct.pack(f"<{len(acc)}d", *acc)


class Root:
    def __init__(self, cfg: LaunchConfig):
        self.cfg = cfg
        self.state = RunState(Topology.round_robin(cfg.world_size, cfg.num_daemons, cfg.spares),
                              committed_iter=cfg.commit_iter)
        self.sel = selectors.DefaultSelector()
        self.sock_dir = ""
        self.address = ""
        self.procs: Dict[int, subprocess.Popen] = {}
        self.chans: Dict[int, Channel] = {}
        self.barriers: Dict[Tuple[int, int], set] = {}
        self.colls: Dict[Tuple[int, int], Dict[int, Tuple[int, int, bytes]]] = {}
        self.reports: Dict[int, int] = {}
        self.timings: Dict[int, List[float]] = {r: [0.0, 0.0, 0.0] for r in range(cfg.world_size)}
        self.done: Dict[int, bytes] = {}
        self.events: deque = deque()
        self.recoveries: List[RecoveryRecord] = []
        self.reinit_log: List[Tuple[int, List[Tuple[int, int]], List[int]]] = []
        self.released: List[Tuple[int, int]] = []
        self.last_seen: Dict[int, float] = {}
        self._last_ping = 0.0
        self._tearing_down = False
        self._abort_reason = ""
        self._ulfm: Dict[str, object] = {}

    # -- small helpers -------------------------------------------------------
    @property
    def epoch(self) -> int:
        return self.state.epoch

    @property
    def topology(self) -> Topology:
        return self.state.topology

    def _set_phase(self, phase: Phase) -> None:
        cur = self.state.phase
        if phase is not cur and phase not in _EDGES[cur]:
            raise HarnessError(f"illegal phase change {cur.value} -> {phase.value}")
        self.state.phase = phase

    def _broadcast(self, m: ControlMessage) -> List[int]:
        sent = []
        for d in self.topology.alive_daemons():
            ch = self.chans.get(d)
            if ch is not None and not ch.closed:
                ch.send(m)
                sent.append(d)
        return sent

    def _daemon_env(self) -> Dict[str, str]:
        cfg = self.cfg
        env = dict(os.environ)
        env["PYTHONPATH"] = os.pathsep.join(p for p in (_SRC, env.get("PYTHONPATH", "")) if p)
        env.update(RH_SIZE=str(cfg.world_size), RH_APP=cfg.app, RH_CKPT_MODE=cfg.ckpt_mode.value,
                   RH_CKPT_DIR=cfg.ckpt_dir, RH_RUN_ID=cfg.run_id, RH_ITERS=str(cfg.iterations),
                   RH_VECTOR=str(cfg.vector_size), RH_INJECT=cfg.plan.to_env(),
                   RH_STRATEGY=cfg.strategy.value)
        return env

    # -- launch ----------------------------------------------------------------
    def launch(self) -> RunState:
        cfg = self.cfg
        self.sock_dir = tempfile.mkdtemp(prefix="rh-")
        self.address = os.path.join(self.sock_dir, "root.sock")
        self.listener = listen_unix(self.address)
        self.sel.register(self.listener, selectors.EVENT_READ, "listener")
        env = self._daemon_env()
        n_total = cfg.num_daemons + cfg.spares
        for d in range(n_total):
            cmd = [sys.executable, "-m", "reinit_harness.daemon", "--root", self.address, "--id", str(d),
                   "--slots", str(len(self.topology.children(d))), "--sock-dir", self.sock_dir,
                   "--spawn", cfg.spawn_method]
            self.procs[d] = subprocess.Popen(cmd, env=env, start_new_session=True)
        deadline = time.monotonic() + cfg.launch_timeout
        try:
            self._run_until(lambda: len(self.chans) == n_total, deadline, "daemon registration")
            for d in self.topology.alive_daemons():
                for r in sorted(self.topology.children(d)):
                    self.chans[d].send(msg(Kind.SPAWN, self.epoch, rank=r, state=ProcessState.NEW,
                                           commit_iter=self.state.committed_iter))
            self._run_until(lambda: (self.epoch, 0) in self.released, deadline, "startup barrier")
        except (LaunchTimeout, UnrecoverableFailure):
            self._set_phase(Phase.ABORTED)
            raise
        self._set_phase(Phase.RUNNING)
        return self.state

    def _run_until(self, pred, deadline: float, what: str) -> None:
        while not pred():
            if self.events:
                ev = self.events[0]
                if isinstance(ev, FailureEvent):
                    raise UnrecoverableFailure(f"{ev.failed} failed during {what}")
                if ev == "abort":
                    raise RunAborted(self._abort_reason)
            left = deadline - time.monotonic()
            if left <= 0:
                raise LaunchTimeout(f"timed out waiting for {what}")
            self._step(min(left, 0.5))

    # -- event loop --------------------------------------------------------------
    def _step(self, timeout: float) -> None:
        for key, events in self.sel.select(timeout):
            if key.data == "listener":
                try:
                    sock, _ = self.listener.accept()
                except BlockingIOError:
                    continue
                Channel(sock, self.sel, owner=None, on_lost=self._on_channel_closed)
                continue
            chan: Channel = key.data
            if chan.closed:
                continue
            if events & selectors.EVENT_WRITE:
                chan.on_writable()
            if events & selectors.EVENT_READ and not chan.closed:
                frames = chan.on_readable()
                if frames is None:
                    self._on_channel_closed(chan)
                    continue
                for m in frames:
                    self._on_message(chan, m)
        if self.cfg.keepalive > 0:
            self._keepalive()

    def _keepalive(self) -> None:
        now = time.monotonic()
        period = self.cfg.keepalive
        if now - self._last_ping >= period:
            self._last_ping = now
            self._broadcast(msg(Kind.KEEPALIVE, self.epoch))
        for d in self.topology.alive_daemons():
            seen = self.last_seen.get(d)
            if seen is not None and now - seen > 3 * period and d in self.chans:
                log.warning("root: daemon %d missed keepalives", d)
                self._on_channel_closed(self.chans[d])

    def _on_channel_closed(self, chan: Channel) -> None:
        chan.close()
        d = chan.owner
        if self._tearing_down or d is None:
            return
        if not self.topology.daemons[d].alive:
            return
        log.info("root: channel to daemon %d broke", d)
        self.events.append(FailureEvent(FailedEntity(daemon=d), time.perf_counter()))

    def _on_message(self, chan: Channel, m: ControlMessage) -> None:
        k = m.kind
        if k is Kind.REGISTER_DAEMON:
            chan.owner = m.daemon
            self.chans[m.daemon] = chan
            self.last_seen[m.daemon] = time.monotonic()
            self.state.topology = self.topology.with_address(m.daemon, m.address)
            return
        if k is Kind.KEEPALIVE:
            self.last_seen[chan.owner] = time.monotonic()
            return
        if k is Kind.CKPT_REPORT:
            self._add_timing(m.rank, (m.t_app, m.t_write, m.t_read))
            if m.epoch == self.epoch:
                self.reports[m.rank] = max(m.iter, self.reports.get(m.rank, NO_ITER))
                if len(self.reports) == self.cfg.world_size:
                    self.state.committed_iter = max(self.state.committed_iter, collect_commit(self.reports))
            return
        if k is Kind.WORKER_DONE:
            self._on_done(m)
            return
        if m.epoch < self.epoch:
            log.debug("root: fenced stale %s (epoch %d < %d)", k.name, m.epoch, self.epoch)
            return
        if k is Kind.FAULT_NOTIFY:
            log.info("root: daemon %s reports rank %d failed", chan.owner, m.rank)
            self.events.append(FailureEvent(FailedEntity(rank=m.rank), time.perf_counter()))
        elif k is Kind.BARRIER_ENTER:
            self._barrier(m)
        elif k is Kind.COLL:
            self._collective(m)
        elif k in (Kind.DATA, Kind.CKPT_PUT, Kind.CKPT_GET, Kind.CKPT_DATA):
            self._route(m)
        elif k is Kind.ULFM_REQ:
            self._ulfm_request(m)
        else:
            log.warning("root: unexpected %s", k.name)

    def _add_timing(self, rank: int, deltas: Sequence[float]) -> None:
        acc = self.timings.setdefault(rank, [0.0, 0.0, 0.0])
        for i, v in enumerate(deltas):
            acc[i] += v

    def _on_done(self, m: ControlMessage) -> None:
        if m.status != 0:
            self._abort_reason = f"rank {m.rank} failed: {m.payload.decode(errors='replace')}"
            self.events.append("abort")
            return
        timings, _, _, _ = unpack_done(m.payload)
        self._add_timing(m.rank, timings)
        if m.epoch < self.epoch:
            return
        self.done[m.rank] = m.payload
        if len(self.done) == self.cfg.world_size:
            states = {}
            for r, payload in self.done.items():
                _, checksum, residual, seq = unpack_done(payload)
                states[r] = [ProcessState(s) for s in seq]
            _, checksum, residual, _ = unpack_done(self.done[0])
            self.events.append(Completion(checksum, residual, states))

    def _route(self, m: ControlMessage) -> None:
        try:
            d = self.topology.parent(m.dst)
        except KeyError:
            return
        ch = self.chans.get(d)
        if ch is not None and self.topology.daemons[d].alive:
            ch.send(m)

    def _barrier(self, m: ControlMessage) -> None:
        key = (m.epoch, m.seq)
        entered = self.barriers.setdefault(key, set())
        entered.add(m.rank)
        if len(entered) == self.cfg.world_size and m.epoch == self.epoch:
            del self.barriers[key]
            self._broadcast(msg(Kind.BARRIER_RELEASE, m.epoch, seq=m.seq))
            self.released.append(key)
            if m.seq == 0 and self.state.phase is Phase.RECOVERING:
                rec = self.recoveries[-1]
                rec.t_done = time.perf_counter()
                self._set_phase(Phase.RUNNING)

    def _collective(self, m: ControlMessage) -> None:
        key = (m.epoch, m.seq)
        parts = self.colls.setdefault(key, {})
        parts[m.rank] = (m.op, m.arg, m.payload)
        if len(parts) < self.cfg.world_size:
            return
        del self.colls[key]
        ops = {(op, arg) for op, arg, _ in parts.values()}
        if len(ops) != 1:
            raise HarnessError(f"mismatched collective at epoch {m.epoch} seq {m.seq}: {ops}")
        op, arg = ops.pop()
        result = reduce_collective(CollOp(op), arg, {r: p for r, (_, _, p) in parts.items()})
        self._broadcast(msg(Kind.COLL_RESULT, m.epoch, seq=m.seq, payload=result))

    # -- detection & recovery ----------------------------------------------------
    def monitor(self, timeout: Optional[float] = None):
        """Block until the first failure or normal completion of all workers."""
        deadline = time.monotonic() + (self.cfg.run_timeout if timeout is None else timeout)
        while not self.events:
            left = deadline - time.monotonic()
            if left <= 0:
                raise UnrecoverableFailure("run timed out")
            self._step(min(left, 0.5))
        ev = self.events.popleft()
        if ev == "abort":
            self._set_phase(Phase.ABORTED)
            raise RunAborted(self._abort_reason)
        if isinstance(ev, Completion):
            self._set_phase(Phase.DONE)
        return ev

    def handle_failure(self, event: FailureEvent) -> RunState:
        """Plan placement, broadcast REINIT (or drive ULFM repair), wait for the barrier."""
        if self.state.phase is not Phase.RUNNING:
            self._set_phase(Phase.ABORTED)
            raise UnrecoverableFailure(f"{event.failed} failed while {self.state.phase.value}")
        strategy = self.cfg.strategy
        if strategy is Strategy.CR:
            self._set_phase(Phase.ABORTED)
            return self.state
        topo = self.topology
        try:
            assignment = plan_recovery(topo, event.failed)
        except NoAliveDaemons:
            self._set_phase(Phase.ABORTED)
            raise
        if event.failed.is_daemon:
            topo = topo.mark_dead(event.failed.daemon)
            ch = self.chans.pop(event.failed.daemon, None)
            if ch is not None:
                ch.close()
        self._set_phase(Phase.RECOVERING)
        commit = self.state.committed_iter
        rec = RecoveryRecord(self.epoch + 1, event.failed, assignment, commit, event.t_detect)
        self.recoveries.append(rec)
        lost = [r for _, r in assignment]
        if strategy is Strategy.REINIT:
            self.state.topology = topo.apply(assignment)
            self._new_epoch(commit)
            cmd = msg(Kind.REINIT_CMD, self.epoch, commit_iter=commit, assignment=assignment)
            sent = self._broadcast(cmd)
            self.reinit_log.append((self.epoch, assignment, sent))
        else:
            self.state.topology = topo
            self._ulfm = {"epoch": self.epoch, "lost": set(lost), "assignment": assignment,
                          "revoked": False, "shrink": set(), "agree": {}, "merge": set()}
            for r in lost:
                self._broadcast(msg(Kind.FAULT_NOTIFY, self.epoch, rank=r))
        deadline = time.monotonic() + self.cfg.run_timeout
        try:
            self._run_until(lambda: self.state.phase is Phase.RUNNING, deadline, "recovery")
        except (UnrecoverableFailure, LaunchTimeout, RunAborted):
            if self.state.phase is not Phase.ABORTED:
                self._set_phase(Phase.ABORTED)
            raise
        return self.state

    def _new_epoch(self, commit: int) -> None:
        self.state.epoch += 1
        # every rank now holds exactly the committed checkpoint (or newer rewrites of it)
        self.reports = {r: commit for r in range(self.cfg.world_size)}
        self.barriers = {k: v for k, v in self.barriers.items() if k[0] >= self.epoch}
        self.colls = {k: v for k, v in self.colls.items() if k[0] >= self.epoch}
        self.done.clear()

    # -- ULFM-style coordination ---------------------------------------------------
    def _survivors(self) -> List[int]:
        return sorted(set(range(self.cfg.world_size)) - self._ulfm["lost"])

    def _ulfm_request(self, m: ControlMessage) -> None:
        u = self._ulfm
        if not u or m.epoch != u["epoch"]:
            log.warning("root: ULFM request outside recovery: %s", m)
            return
        op = UlfmOp(m.op)
        survivors = self._survivors()
        commit = self.state.committed_iter
        if op is UlfmOp.REVOKE:
            if not u["revoked"]:
                u["revoked"] = True
                self._broadcast(msg(Kind.ULFM_REPLY, m.epoch, op=op, flag=0, commit_iter=commit, ranks=[]))
        elif op is UlfmOp.SHRINK:
            u["shrink"].add(m.rank)
            if u["shrink"] == set(survivors):
                self._broadcast(msg(Kind.ULFM_REPLY, m.epoch, op=op, flag=0, commit_iter=commit,
                                    ranks=survivors))
        elif op is UlfmOp.AGREE:
            u["agree"][m.rank] = m.flag
            if set(u["agree"]) == set(survivors):
                flag = 0xFFFFFFFF
                for r in survivors:
                    flag &= u["agree"][r]
                self._broadcast(msg(Kind.ULFM_REPLY, m.epoch, op=op, flag=flag, commit_iter=commit,
                                    ranks=sorted(u["lost"])))
        elif op is UlfmOp.MERGE:
            u["merge"].add(m.rank)
            if u["merge"] == set(survivors):
                assignment = u["assignment"]
                self._broadcast(msg(Kind.ULFM_REPLY, m.epoch, op=op, flag=len(assignment),
                                    commit_iter=commit, ranks=[r for _, r in assignment]))
                self.state.topology = self.topology.apply(assignment)
                self._new_epoch(commit)
                for d, r in assignment:
                    self.chans[d].send(msg(Kind.SPAWN, self.epoch, rank=r, state=ProcessState.RESTARTED,
                                           commit_iter=commit))
                self._ulfm = {}

    # -- teardown ----------------------------------------------------------------
    def kill_all(self) -> None:
        """Forcibly take the whole tree down (checkpoint-restart teardown)."""
        self._tearing_down = True
        for p in self.procs.values():
            try:
                os.killpg(p.pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        for p in self.procs.values():
            p.wait()
        self._close()

    def teardown(self) -> None:
        self._tearing_down = True
        self._broadcast(msg(Kind.SHUTDOWN, self.epoch))
        end = time.monotonic() + 1.0
        while any(ch.out for ch in self.chans.values() if not ch.closed) and time.monotonic() < end:
            self._step(0.05)
        for p in self.procs.values():
            try:
                p.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                pass
        self.kill_all()

    def _close(self) -> None:
        for ch in list(self.chans.values()):
            ch.close()
        for key in list(self.sel.get_map().values()):
            try:
                self.sel.unregister(key.fileobj)
                key.fileobj.close()
            except (KeyError, ValueError, OSError):
                pass
        self.sel.close()
        if self.sock_dir:
            shutil.rmtree(self.sock_dir, ignore_errors=True)
            self.sock_dir = ""

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self._tearing_down:
            self.teardown()
        return False
