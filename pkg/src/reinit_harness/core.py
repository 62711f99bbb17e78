"""Domain types and pure placement functions shared by root, daemons and workers."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple


class HarnessError(Exception):
    pass


class NoAliveDaemons(HarnessError):
    pass


class UnrecoverableFailure(HarnessError):
    pass


class LaunchTimeout(HarnessError):
    pass


class ProcessState(enum.IntEnum):
    NEW = 0
    REINITED = 1
    RESTARTED = 2


class Strategy(str, enum.Enum):
    CR = "cr"
    REINIT = "reinit"
    ULFM = "ulfm"


class CkptMode(str, enum.Enum):
    NONE = "none"
    FILE = "file"
    BUDDY = "buddy"


class InjectKind(str, enum.Enum):
    NONE = "none"
    PROCESS = "proc"
    NODE = "node"


@dataclass(frozen=True)
class DaemonRecord:
    address: str = ""
    alive: bool = True
    children: frozenset = frozenset()


@dataclass(frozen=True)
class FailedEntity:
    """Either a daemon (node) or a single rank."""
    daemon: Optional[int] = None
    rank: Optional[int] = None

    @property
    def is_daemon(self) -> bool:
        return self.daemon is not None


# A list of (daemon id, rank) pairs, in ascending rank order.
ReinitAssignment = List[Tuple[int, int]]


@dataclass(frozen=True)
class Topology:
    daemons: Dict[int, DaemonRecord] = field(default_factory=dict)
    spares: int = 0

    @classmethod
    def round_robin(cls, world_size: int, num_daemons: int, spares: int = 0) -> "Topology":
        if num_daemons < 1:
            raise ValueError("need at least one daemon")
        kids: Dict[int, set] = {d: set() for d in range(num_daemons + spares)}
        for r in range(world_size):
            kids[r % num_daemons].add(r)
        return cls({d: DaemonRecord(children=frozenset(c)) for d, c in kids.items()}, spares)

    def parent(self, rank: int) -> int:
        for d, rec in self.daemons.items():
            if rank in rec.children:
                return d
        raise KeyError(rank)

    def parents(self) -> Dict[int, int]:
        return {r: d for d, rec in self.daemons.items() for r in rec.children}

    def children(self, daemon: int) -> frozenset:
        return self.daemons[daemon].children

    def alive_daemons(self) -> List[int]:
        return sorted(d for d, rec in self.daemons.items() if rec.alive)

    def loads(self) -> Dict[int, int]:
        return {d: len(rec.children) for d, rec in self.daemons.items() if rec.alive}

    @property
    def world_size(self) -> int:
        return sum(len(rec.children) for rec in self.daemons.values() if rec.alive)

    def with_address(self, daemon: int, address: str) -> "Topology":
        ds = dict(self.daemons)
        ds[daemon] = replace(ds[daemon], address=address)
        return replace(self, daemons=ds)

    def mark_dead(self, daemon: int) -> "Topology":
        """Dead daemons keep no children: their ranks are lost with the node."""
        ds = dict(self.daemons)
        ds[daemon] = replace(ds[daemon], alive=False, children=frozenset())
        return replace(self, daemons=ds)

    def apply(self, assignment: ReinitAssignment) -> "Topology":
        ds = dict(self.daemons)
        for d, r in assignment:
            for other, rec in ds.items():
                if r in rec.children and other != d:
                    ds[other] = replace(rec, children=rec.children - {r})
            ds[d] = replace(ds[d], children=ds[d].children | {r})
        return replace(self, daemons=ds)


def buddy_of(rank: int, world_size: int) -> int:
    """Cyclically next rank; the holder of ``rank``'s remote checkpoint copy."""
    if world_size < 1 or not 0 <= rank < world_size:
        raise ValueError(f"rank {rank} outside world of size {world_size}")
    return (rank + 1) % world_size


def least_loaded(topology: Topology) -> int:
    loads = topology.loads()
    if not loads:
        raise NoAliveDaemons("no alive daemon left")
    # min over (load, id) gives the lowest id on ties
    return min(loads, key=lambda d: (loads[d], d))


def plan_recovery(topology: Topology, failed: FailedEntity) -> ReinitAssignment:
    """Decide where every lost rank is respawned.

    A failed daemon loses all of its children; they all go to the single
    least-loaded surviving daemon. A failed rank goes back to its parent.
    """
    if failed.is_daemon:
        if failed.daemon not in topology.daemons:
            raise KeyError(f"unknown daemon {failed.daemon}")
        lost = sorted(topology.children(failed.daemon))
        if not lost:
            return []
        target = least_loaded(topology.mark_dead(failed.daemon))
        return [(target, r) for r in lost]
    return [(topology.parent(failed.rank), failed.rank)]
