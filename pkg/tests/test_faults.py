import itertools

import pytest
from hypothesis import given, strategies as st

from oracle import splitmix64_ref
from reinit_harness.core import InjectKind
from reinit_harness.faults import InjectionPlan, make_plan, splitmix64, trigger


def test_splitmix64_published_vector():
    # first outputs for seed 1234567 from the reference C implementation
    got = list(itertools.islice(splitmix64(1234567), 3))
    assert got == [6457827717110365317, 3203168211198807973, 9817491932198370423]


@given(st.integers(0, 2**64 - 1))
def test_splitmix64_matches_reference(seed):
    assert list(itertools.islice(splitmix64(seed), 4)) == splitmix64_ref(seed, 4)


@given(st.integers(0, 2**64 - 1), st.integers(1, 256), st.integers(1, 100))
def test_plan_is_first_two_draws(seed, world, iters):
    x1, x2 = splitmix64_ref(seed, 2)
    p = make_plan(seed, world, iters, InjectKind.PROCESS)
    assert (p.iteration, p.victim) == (x1 % iters, x2 % world)
    assert make_plan(seed, world, iters, "proc") == p


def test_no_injection_plan_is_inactive():
    p = make_plan(5, 4, 10)
    assert not p.active and p.kind is InjectKind.NONE


def test_plan_env_round_trip():
    p = make_plan(99, 8, 20, InjectKind.NODE)
    assert InjectionPlan.from_env(p.to_env()) == p
    assert InjectionPlan.from_env("") == InjectionPlan()


def test_plan_rejects_empty_world():
    with pytest.raises(ValueError):
        make_plan(1, 0, 10, InjectKind.PROCESS)
    with pytest.raises(ValueError):
        make_plan(1, 4, 0, InjectKind.PROCESS)


class Comm:
    def __init__(self, rank, epoch):
        self.rank, self.epoch = rank, epoch


@pytest.mark.parametrize("rank,epoch,it", [(1, 0, 2), (0, 0, 3), (0, 1, 2)])
def test_trigger_only_fires_on_schedule_in_the_first_epoch(rank, epoch, it, monkeypatch):
    fired = []
    monkeypatch.setattr("os.kill", lambda pid, sig: fired.append(pid))
    monkeypatch.setattr("signal.pause", lambda: None)
    trigger(InjectionPlan(InjectKind.PROCESS, 2, 0, 1), Comm(rank, epoch), it)
    assert fired == []


def test_trigger_kills_self(monkeypatch):
    import os
    fired = []
    monkeypatch.setattr("os.kill", lambda pid, sig: fired.append(pid))
    monkeypatch.setattr("signal.pause", lambda: None)
    trigger(InjectionPlan(InjectKind.PROCESS, 2, 0, 1), Comm(0, 0), 2)
    assert fired == [os.getpid()]
