"""Synthetic proxy application: a weak-scaled 1-D Jacobi sweep.

Each rank owns ``vector_size`` points of a global line. One iteration:
injection check, halo exchange with rank-1 / rank+1, stencil update,
allreduce of the squared update norm, checkpoint. The final answer is an
FNV-1a digest of every rank's vector, combined in rank order.
"""
from __future__ import annotations

import struct
import time
from array import array
from dataclasses import dataclass, field

from . import faults, runtime
from .checkpoint import CkptStore
from .core import ProcessState
from .faults import InjectionPlan

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1
CHUNK = 128


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def source_term(g: int) -> float:
    return ((g * 7919) % 1000) / 1000.0 - 0.5


@dataclass
class AppArgs:
    store: CkptStore
    iterations: int = 20
    vector_size: int = 4096
    plan: InjectionPlan = field(default_factory=InjectionPlan)


def jacobi(args: AppArgs, state: ProcessState):
    """Restart point; returns (combined checksum, last global residual)."""
    comm = runtime.world()
    rank, size, n = comm.rank, comm.size, args.vector_size
    store = args.store
    f = [source_term(rank * n + j) for j in range(n)]
    u = [0.0] * n
    start = 0
    commit = comm.commit_iter
    if store.enabled and commit >= 0:
        u = list(array("d", store.load(comm, commit, state)))
        start = commit + 1
    residual = 0.0
    for it in range(start, args.iterations):
        t0 = time.perf_counter()
        comm.safe_point()
        faults.trigger(args.plan, comm, it)
        tag = it & 0xFFFFFFFF
        if rank > 0:
            comm.send(rank - 1, struct.pack("<d", u[0]), tag)
        if rank < size - 1:
            comm.send(rank + 1, struct.pack("<d", u[-1]), tag)
        left = struct.unpack("<d", comm.recv(rank - 1, tag))[0] if rank > 0 else 0.0
        right = struct.unpack("<d", comm.recv(rank + 1, tag))[0] if rank < size - 1 else 0.0
        padded = [left] + u + [right]
        new: list = []
        local = 0.0
        for lo in range(0, n, CHUNK):
            # safe point per chunk so a rollback never waits for a whole sweep
            comm.safe_point()
            part = [0.5 * (padded[j] + padded[j + 2] + f[j]) for j in range(lo, min(lo + CHUNK, n))]
            for a, b in zip(part, u[lo:lo + CHUNK]):
                local += (a - b) * (a - b)
            new.extend(part)
        u = new
        residual = comm.allreduce("sum", [local])[0]
        comm.ep.t_app += time.perf_counter() - t0
        store.write(comm, it, array("d", u).tobytes())
    digest = fnv1a64(array("d", u).tobytes())
    parts = comm.gather(struct.pack("<Q", digest))
    return fnv1a64(b"".join(parts)), residual


APPS = {"jacobi": jacobi}
