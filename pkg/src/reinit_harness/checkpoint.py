"""Application checkpointing: file checkpoints and local+buddy memory copies.

File format (little-endian)::

    b"RCK1" | u16 version=1 | u32 rank | u64 iter | u64 payload_len | u32 crc | payload
"""
from __future__ import annotations

import os
import struct
import time
import zlib
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from .core import CkptMode, HarnessError, ProcessState, buddy_of

MAGIC = b"RCK1"
VERSION = 1
FILE_HEADER = struct.Struct("<4sHIQQI")
WINDOW = 2


class CheckpointError(HarnessError):
    pass


class CheckpointUnavailable(CheckpointError):
    pass


class CrcMismatch(CheckpointError):
    pass


def crc32(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Checkpoint:
    rank: int
    iter: int
    payload: bytes
    crc: int

    @classmethod
    def make(cls, rank: int, it: int, payload: bytes) -> "Checkpoint":
        return cls(rank, it, bytes(payload), crc32(payload))

    def verify(self) -> "Checkpoint":
        if crc32(self.payload) != self.crc:
            raise CrcMismatch(f"rank {self.rank} iter {self.iter}: crc mismatch")
        return self


def pack_file(ck: Checkpoint) -> bytes:
    return FILE_HEADER.pack(MAGIC, VERSION, ck.rank, ck.iter, len(ck.payload), ck.crc) + ck.payload


def unpack_file(blob: bytes) -> Checkpoint:
    if len(blob) < FILE_HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, rank, it, n, crc = FILE_HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"not an RCK1 checkpoint (magic={magic!r}, version={version})")
    payload = blob[FILE_HEADER.size:]
    if len(payload) != n:
        raise CheckpointError(f"payload length {len(payload)} != header {n}")
    return Checkpoint(rank, it, payload, crc).verify()


def ckpt_path(ckpt_dir: str, run_id: str, rank: int, it: int) -> str:
    return os.path.join(ckpt_dir, run_id, "r%04d_i%010d.ckpt" % (rank, it))


def write_file_atomic(path: str, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
    os.replace(tmp, path)


class CkptStore:
    """Per-rank checkpoint store.

    ``comm`` only needs ``rank``, ``size``, ``send_ckpt_put``, ``fetch_ckpt``
    and ``report_ckpt``; the worker runtime's WorldComm provides them. The
    store also serves the remote copies other ranks park here in buddy mode.
    """

    def __init__(self, mode: CkptMode, rank: int, world_size: int,
                 ckpt_dir: str = "", run_id: str = "run"):
        mode = CkptMode(mode)
        if mode is CkptMode.BUDDY and world_size < 2:
            raise CheckpointError("buddy checkpointing needs at least two ranks")
        if mode is CkptMode.FILE and not ckpt_dir:
            raise CheckpointError("file checkpointing needs a checkpoint directory")
        self.mode = mode
        self.rank = rank
        self.world_size = world_size
        self.ckpt_dir = ckpt_dir
        self.run_id = run_id
        self.local: Dict[int, Checkpoint] = {}
        self.remote: Dict[Tuple[int, int], Checkpoint] = {}
        self.t_write = 0.0
        self.t_read = 0.0
        if mode is CkptMode.FILE:
            os.makedirs(os.path.join(ckpt_dir, run_id), exist_ok=True)

    @property
    def enabled(self) -> bool:
        return self.mode is not CkptMode.NONE

    def latest(self) -> int:
        return max(self.local, default=-1)

    def write(self, comm, it: int, payload: bytes) -> None:
        if not payload:
            raise CheckpointError("empty checkpoint payload")
        if not self.enabled:
            return
        t0 = time.perf_counter()
        ck = Checkpoint.make(self.rank, it, payload)
        if self.mode is CkptMode.FILE:
            path = ckpt_path(self.ckpt_dir, self.run_id, self.rank, it)
            try:
                write_file_atomic(path, pack_file(ck))
            except OSError as e:
                raise CheckpointError(f"checkpoint write failed: {e}") from e
        else:
            comm.send_ckpt_put(buddy_of(self.rank, self.world_size), ck)
        self.local[it] = ck
        self._prune_local()
        self.t_write += time.perf_counter() - t0
        comm.report_ckpt(it)

    def _prune_local(self) -> None:
        for old in sorted(self.local)[:-WINDOW]:
            del self.local[old]
            if self.mode is CkptMode.FILE:
                try:
                    os.unlink(ckpt_path(self.ckpt_dir, self.run_id, self.rank, old))
                except FileNotFoundError:
                    pass

    def put_remote(self, ck: Checkpoint) -> None:
        self.remote[(ck.rank, ck.iter)] = ck
        mine = sorted(i for (r, i) in self.remote if r == ck.rank)
        for old in mine[:-WINDOW]:
            del self.remote[(ck.rank, old)]

    def get_remote(self, origin: int, it: int) -> Optional[Checkpoint]:
        return self.remote.get((origin, it))

    def discard_below(self, commit_iter: int) -> None:
        """Drop copies that can never be a rollback target again."""
        for key in [k for k in self.remote if k[1] < commit_iter - 1]:
            del self.remote[key]

    def load(self, comm, commit_iter: int, state: ProcessState) -> bytes:
        if commit_iter < 0:
            raise CheckpointUnavailable("no committed checkpoint")
        t0 = time.perf_counter()
        ck = self.local.get(commit_iter)
        if ck is None or state is ProcessState.RESTARTED:
            if self.mode is CkptMode.FILE:
                path = ckpt_path(self.ckpt_dir, self.run_id, self.rank, commit_iter)
                try:
                    with open(path, "rb") as f:
                        ck = unpack_file(f.read())
                except FileNotFoundError:
                    raise CheckpointUnavailable(path) from None
            elif self.mode is CkptMode.BUDDY:
                ck = comm.fetch_ckpt(buddy_of(self.rank, self.world_size), commit_iter)
                if ck is None:
                    raise CheckpointUnavailable(f"buddy lost rank {self.rank} iter {commit_iter}")
            else:
                raise CheckpointUnavailable("checkpointing disabled")
        ck.verify()
        if ck.rank != self.rank or ck.iter != commit_iter:
            raise CheckpointError(f"got rank {ck.rank} iter {ck.iter}, wanted {self.rank}/{commit_iter}")
        self.local = {i: c for i, c in self.local.items() if i <= commit_iter}
        self.local[commit_iter] = ck
        self.t_read += time.perf_counter() - t0
        return ck.payload
