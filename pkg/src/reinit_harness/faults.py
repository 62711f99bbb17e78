"""Deterministic single-failure injection."""
from __future__ import annotations

import os
import signal
from dataclasses import dataclass

from .core import InjectKind

MASK64 = (1 << 64) - 1


def splitmix64(seed: int):
    """Yield the SplitMix64 output stream for ``seed``."""
    state = seed & MASK64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        yield z ^ (z >> 31)


@dataclass(frozen=True)
class InjectionPlan:
    kind: InjectKind = InjectKind.NONE
    iteration: int = 0
    victim: int = 0
    seed: int = 0

    @property
    def active(self) -> bool:
        return self.kind is not InjectKind.NONE

    def to_env(self) -> str:
        return f"{self.kind.value}:{self.iteration}:{self.victim}:{self.seed}"

    @classmethod
    def from_env(cls, text: str) -> "InjectionPlan":
        if not text:
            return cls()
        kind, it, victim, seed = text.split(":")
        return cls(InjectKind(kind), int(it), int(victim), int(seed))


def make_plan(seed: int, world_size: int, iterations: int, kind=InjectKind.NONE) -> InjectionPlan:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if world_size < 1:
        raise ValueError("world_size must be >= 1")
    kind = InjectKind(kind)
    if kind is InjectKind.NONE:
        return InjectionPlan(seed=seed)
    gen = splitmix64(seed)
    x1, x2 = next(gen), next(gen)
    return InjectionPlan(kind, x1 % iterations, x2 % world_size, seed)


def trigger(plan: InjectionPlan, comm, current_iter: int) -> None:
    """Kill the victim (or its daemon's whole process group) on schedule.

    Only the first lifetime of the job injects: the recovered world runs
    at a later epoch and a checkpoint-restart relaunch clears the plan.
    """
    if not plan.active or comm.epoch != 0:
        return
    if current_iter != plan.iteration or comm.rank != plan.victim:
        return
    if plan.kind is InjectKind.PROCESS:
        os.kill(os.getpid(), signal.SIGKILL)
    else:
        # the daemon leads the group its workers were forked into
        os.killpg(os.getpgid(os.getppid()), signal.SIGKILL)
    signal.pause()
