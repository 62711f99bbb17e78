"""Worker process entry point.

Environment contract (set by the daemon): RH_RANK, RH_SIZE, RH_EPOCH,
RH_STATE, RH_DAEMON_ADDR, RH_COMMIT_ITER, RH_APP, RH_CKPT_MODE,
RH_CKPT_DIR, RH_RUN_ID, RH_ITERS, RH_VECTOR, RH_INJECT, RH_STRATEGY.
"""
from __future__ import annotations

import logging
import os
import struct
import sys

from . import runtime
from .app import APPS, AppArgs
from .checkpoint import CheckpointError, CkptStore
from .core import Strategy
from .faults import InjectionPlan
from .transport import ChannelClosed
from .wire import Kind, msg

log = logging.getLogger(__name__)

EXIT_CONNECT = 3
EXIT_FAULT = 4
EXIT_CKPT = 5

DONE = struct.Struct("<dddQd")
WORKER_NICE = int(os.environ.get("RH_WORKER_NICE", "10"))


def pack_done(timings, checksum: int, residual: float, states) -> bytes:
    return DONE.pack(*timings, checksum, residual) + bytes(int(s) for s in states)


def unpack_done(payload: bytes):
    t_app, t_w, t_r, checksum, residual = DONE.unpack_from(payload)
    return (t_app, t_w, t_r), checksum, residual, list(payload[DONE.size:])


def run(environ=None) -> int:
    env = os.environ if environ is None else environ
    try:
        comm = runtime.runtime_init(runtime.WorkerEnv.from_environ(env))
    except runtime.ConnectFailed as e:
        log.error("%s", e)
        return EXIT_CONNECT
    if WORKER_NICE:
        # compute yields to the root and daemons, as it would on dedicated cores
        os.nice(WORKER_NICE)
    try:
        store = CkptStore(env.get("RH_CKPT_MODE", "none"), comm.rank, comm.size,
                          env.get("RH_CKPT_DIR", ""), env.get("RH_RUN_ID", "run"))
        comm.ep.store = store
        args = AppArgs(store=store,
                       iterations=int(env.get("RH_ITERS", 20)),
                       vector_size=int(env.get("RH_VECTOR", 4096)),
                       plan=InjectionPlan.from_env(env.get("RH_INJECT", "")))
        point = APPS[env.get("RH_APP", "jacobi")]
        if Strategy(env.get("RH_STRATEGY", "reinit")) is Strategy.ULFM:
            checksum, residual = runtime.ulfm_entry(comm, point, args)
        else:
            checksum, residual = runtime.reinit_entry(comm, point, args)
        ep = runtime.world().ep
        payload = pack_done(ep.timing_deltas(), checksum, residual, ep.states)
        ep.send(msg(Kind.WORKER_DONE, ep.epoch, rank=comm.rank, status=0, payload=payload))
    except CheckpointError as e:
        # a bad checkpoint must end the run, never yield a wrong answer
        log.error("rank %d: %s", comm.rank, e)
        ep = comm.ep
        ep.send(msg(Kind.WORKER_DONE, ep.epoch, rank=comm.rank, status=EXIT_CKPT,
                    payload=f"{type(e).__name__}: {e}".encode()))
        return EXIT_CKPT
    except ChannelClosed:
        return EXIT_FAULT
    except runtime.RuntimeFault as e:
        log.error("rank %d: %s", comm.rank, e)
        return EXIT_FAULT
    return 0


def main() -> None:
    logging.basicConfig(level=os.environ.get("RH_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(asctime)s worker %(process)d %(levelname)s %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
