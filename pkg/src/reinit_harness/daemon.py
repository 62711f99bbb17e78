"""Per-node daemon: spawns and watches local workers, relays faults, obeys REINIT.

The daemon never decides anything about recovery. It forwards child
failures to the root and executes the root's REINIT command: roll back
every surviving child, then spawn the ranks assigned to it.
"""
from __future__ import annotations

import argparse
import logging
import os
import selectors
import signal
import subprocess
import sys
from dataclasses import dataclass
from typing import Dict, Optional

from . import worker  # loaded up front so forked ranks start warm
from .core import HarnessError, ProcessState
from .transport import Channel, connect_unix, listen_unix
from .wire import ControlMessage, Kind, msg

log = logging.getLogger(__name__)

# root -> daemon frames fanned out to every local child
BROADCAST_DOWN = {Kind.BARRIER_RELEASE, Kind.COLL_RESULT, Kind.ULFM_REPLY, Kind.FAULT_NOTIFY}
# frames routed to one rank, named by their ``dst`` field
ROUTED = {Kind.DATA, Kind.CKPT_PUT, Kind.CKPT_GET, Kind.CKPT_DATA}


class SpawnFailed(HarnessError):
    pass


@dataclass
class ChildRecord:
    rank: int
    pid: int
    state: ProcessState
    epoch: int
    alive: bool = True
    pidfd: int = -1
    chan: Optional[Channel] = None


class _Pidfd:
    """Selector key data for a child's pidfd."""

    def __init__(self, rank: int, pid: int):
        self.rank = rank
        self.pid = pid


class Daemon:
    def __init__(self, daemon_id: int, root_addr: str, sock_dir: str, slots: int = 0,
                 spawn_method: str = "fork", env: Optional[Dict[str, str]] = None):
        self.id = daemon_id
        self.root_addr = root_addr
        self.address = os.path.join(sock_dir, f"d{daemon_id}.sock")
        self.slots = slots
        self.spawn_method = spawn_method
        self.env = dict(os.environ if env is None else env)
        self.epoch = 0
        self.children: Dict[int, ChildRecord] = {}
        self.completed: set = set()
        self.sel = selectors.DefaultSelector()
        self.root: Optional[Channel] = None
        self.running = False

    # -- setup ---------------------------------------------------------------
    def start(self) -> None:
        self.listener = listen_unix(self.address)
        self.sel.register(self.listener, selectors.EVENT_READ, "listener")
        self.root = Channel(connect_unix(self.root_addr), self.sel, owner="root",
                            on_lost=lambda ch: self.shutdown())
        self.root.send(msg(Kind.REGISTER_DAEMON, 0, daemon=self.id, pid=os.getpid(), address=self.address))
        self.running = True

    # -- spawning ------------------------------------------------------------
    def worker_env(self, rank: int, epoch: int, state: ProcessState, commit_iter: int) -> Dict[str, str]:
        env = dict(self.env)
        env.update(RH_RANK=str(rank), RH_EPOCH=str(epoch), RH_STATE=str(int(state)),
                   RH_DAEMON_ADDR=self.address, RH_COMMIT_ITER=str(commit_iter))
        return env

    def spawn_child(self, rank: int, epoch: int, state: ProcessState, commit_iter: int) -> ChildRecord:
        env = self.worker_env(rank, epoch, state, commit_iter)
        try:
            if self.spawn_method == "exec":
                pid = subprocess.Popen([sys.executable, "-m", "reinit_harness.worker"], env=env,
                                       close_fds=True).pid
            else:
                pid = _fork_worker(env)
            pidfd = os.pidfd_open(pid)
        except OSError as e:
            raise SpawnFailed(f"rank {rank}: {e}") from e
        rec = ChildRecord(rank, pid, state, epoch, pidfd=pidfd)
        self.children[rank] = rec
        self.completed.discard(rank)
        self.sel.register(pidfd, selectors.EVENT_READ, _Pidfd(rank, pid))
        log.debug("daemon %d: spawned rank %d pid %d (%s, epoch %d)", self.id, rank, pid, state.name, epoch)
        return rec

    # -- events --------------------------------------------------------------
    def on_child_exit(self, rank: int, pid: int, status: int) -> None:
        rec = self.children.get(rank)
        if rec is None or rec.pid != pid or not rec.alive:
            log.debug("daemon %d: dropping stale exit of rank %d", self.id, rank)
            return
        rec.alive = False
        if rec.chan is not None:
            # read whatever the child wrote before it died
            while not rec.chan.closed:
                frames = rec.chan.on_readable()
                if not frames:
                    break
                for m in frames:
                    self.on_child_message(rec, m)
            rec.chan.close()
        code = os.waitstatus_to_exitcode(status)
        if code == 0:
            self.completed.add(rank)
            return
        log.info("daemon %d: rank %d exited with %d, notifying root", self.id, rank, code)
        self.root.send(msg(Kind.FAULT_NOTIFY, self.epoch, rank=rank))

    def handle_reinit(self, assignment, epoch: int, commit_iter: int) -> None:
        if epoch != self.epoch + 1:
            log.warning("daemon %d: REINIT for epoch %d at epoch %d ignored", self.id, epoch, self.epoch)
            return
        self.epoch = epoch
        for rank in [r for r, rec in self.children.items() if not rec.alive]:
            self._forget(rank)
        rollback = msg(Kind.ROLLBACK, epoch, commit_iter=commit_iter)
        for rec in self.children.values():
            rec.state = ProcessState.REINITED
            rec.epoch = epoch
            if rec.chan is not None:
                rec.chan.send(rollback)
        for d, rank in assignment:
            if d == self.id:
                self.spawn_child(rank, epoch, ProcessState.RESTARTED, commit_iter)

    def _forget(self, rank: int) -> None:
        rec = self.children.pop(rank)
        if rec.pidfd >= 0:
            try:
                self.sel.unregister(rec.pidfd)
            except (KeyError, ValueError):
                pass
            os.close(rec.pidfd)

    def on_root_message(self, m: ControlMessage) -> None:
        k = m.kind
        if k is Kind.REINIT_CMD:
            self.handle_reinit(m.assignment, m.epoch, m.commit_iter)
            return
        if k is Kind.SHUTDOWN:
            self.shutdown()
            return
        if k is Kind.KEEPALIVE:
            self.root.send(msg(Kind.KEEPALIVE, self.epoch))
            return
        if m.epoch < self.epoch:
            return
        if k is Kind.SPAWN:
            self.epoch = max(self.epoch, m.epoch)
            old = self.children.get(m.rank)
            if old is not None and not old.alive:
                self._forget(m.rank)
            self.spawn_child(m.rank, m.epoch, ProcessState(m.state), m.commit_iter)
        elif k in BROADCAST_DOWN:
            for rec in self.children.values():
                if rec.chan is not None and rec.alive:
                    rec.chan.send(m)
        elif k in ROUTED:
            self._deliver(m.dst, m)
        else:
            log.warning("daemon %d: unexpected %s from root", self.id, k.name)

    def _deliver(self, rank: int, m: ControlMessage) -> bool:
        rec = self.children.get(rank)
        if rec is None or rec.chan is None or not rec.alive:
            return False
        rec.chan.send(m)
        return True

    def on_child_message(self, rec: ChildRecord, m: ControlMessage) -> None:
        if m.epoch < self.epoch:
            return
        if m.kind in ROUTED and self._deliver(m.dst, m):
            return
        self.root.send(m)

    def on_register(self, chan: Channel, m: ControlMessage) -> None:
        rec = self.children.get(m.rank)
        if m.kind is not Kind.REGISTER_WORKER or rec is None or m.epoch != rec.epoch:
            log.warning("daemon %d: rejecting registration %s", self.id, m)
            chan.close()
            return
        rec.chan = chan
        chan.owner = rec

    # -- loop ----------------------------------------------------------------
    def serve(self) -> None:
        while self.running:
            for key, events in self.sel.select(timeout=1.0):
                data = key.data
                if data == "listener":
                    try:
                        sock, _ = self.listener.accept()
                    except BlockingIOError:
                        continue
                    Channel(sock, self.sel, owner=None)
                elif isinstance(data, _Pidfd):
                    rec = self.children.get(data.rank)
                    if rec is None or rec.pid != data.pid or rec.pidfd < 0:
                        continue
                    try:
                        _, status = os.waitpid(data.pid, 0)
                    except ChildProcessError:
                        status = 1 << 8
                    self._unwatch(data)
                    self.on_child_exit(data.rank, data.pid, status)
                elif isinstance(data, Channel) and not data.closed:
                    self._on_channel(data, events)
                if not self.running:
                    return

    def _unwatch(self, data: _Pidfd) -> None:
        rec = self.children.get(data.rank)
        if rec is not None and rec.pid == data.pid and rec.pidfd >= 0:
            self.sel.unregister(rec.pidfd)
            os.close(rec.pidfd)
            rec.pidfd = -1

    def _on_channel(self, chan: Channel, events: int) -> None:
        if events & selectors.EVENT_WRITE:
            chan.on_writable()
            if chan.closed:
                return
        if not events & selectors.EVENT_READ:
            return
        frames = chan.on_readable()
        if frames is None:
            if chan is self.root:
                # root gone: nothing left to serve
                log.info("daemon %d: root channel closed", self.id)
                self.shutdown()
            return
        for m in frames:
            if chan is self.root:
                self.on_root_message(m)
            elif isinstance(chan.owner, ChildRecord):
                self.on_child_message(chan.owner, m)
            else:
                self.on_register(chan, m)
            if chan.closed or not self.running:
                return

    def shutdown(self) -> None:
        self.running = False
        for rec in self.children.values():
            if rec.alive:
                try:
                    os.kill(rec.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
        if self.root is not None:
            self.root.close()


def _fork_worker(env: Dict[str, str]) -> int:
    pid = os.fork()
    if pid:
        return pid
    code = 1
    try:
        signal.set_wakeup_fd(-1)
        for sig in (signal.SIGCHLD, signal.SIGTERM, signal.SIGINT):
            signal.signal(sig, signal.SIG_DFL)
        os.closerange(3, 1 << 16)
        os.environ.clear()
        os.environ.update(env)
        code = worker.run(env)
    except SystemExit as e:
        code = e.code if isinstance(e.code, int) else 1
    except BaseException:
        import traceback
        traceback.print_exc()
        code = 1
    finally:
        sys.stderr.flush()
        os._exit(code)


def main(argv=None) -> None:
    p = argparse.ArgumentParser(prog="reinit-daemon")
    p.add_argument("--root", required=True, help="root socket address")
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--slots", type=int, default=0)
    p.add_argument("--sock-dir", required=True)
    p.add_argument("--spawn", choices=["fork", "exec"], default="fork")
    a = p.parse_args(argv)
    logging.basicConfig(level=os.environ.get("RH_LOG", "WARNING").upper(), stream=sys.stderr,
                        format=f"%(asctime)s daemon{a.id} %(levelname)s %(message)s")
    d = Daemon(a.id, a.root, a.sock_dir, a.slots, a.spawn)
    d.start()
    d.serve()


if __name__ == "__main__":
    main()
