"""The acceptance matrix, shared by ``bench verify`` and the test-suite.

Each check returns a `CriterionResult`; none of them raise on a failed
property, so a full sweep always reports every line.
"""
from __future__ import annotations

import glob
import itertools
import math
import os
import random
import statistics
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from . import bench, checkpoint, wire
from .bench import ExperimentConfig, run_once
from .core import (CkptMode, DaemonRecord, FailedEntity, InjectKind, ProcessState, Strategy,
                   Topology, buddy_of, plan_recovery)
from .faults import make_plan


@dataclass
class CriterionResult:
    number: int
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.number}. {self.name}: {self.detail} ({self.seconds:.1f}s)"


# the five recovery cells the compatibility table allows
CELLS = (
    (Strategy.REINIT, CkptMode.BUDDY, InjectKind.PROCESS),
    (Strategy.REINIT, CkptMode.FILE, InjectKind.NODE),
    (Strategy.ULFM, CkptMode.BUDDY, InjectKind.PROCESS),
    (Strategy.CR, CkptMode.FILE, InjectKind.PROCESS),
    (Strategy.CR, CkptMode.FILE, InjectKind.NODE),
)


def _cfg(n, d, strategy=Strategy.REINIT, ckpt=CkptMode.BUDDY, inject=InjectKind.NONE, seed=1,
         iterations=20, spares=0, **kw) -> ExperimentConfig:
    if inject is InjectKind.NODE and strategy is not Strategy.CR and d + spares < 2:
        spares = 1
    return ExperimentConfig(world_size=n, num_daemons=d, spares=spares, strategy=strategy,
                            ckpt_mode=ckpt, inject=inject, seed=seed, iterations=iterations,
                            repetitions=1, **kw)


def oracle_checksum(n: int, d: int, iterations: int = 20, vector_size: int = 4096) -> int:
    """Checksum of the fault-free run: the reference every recovered run must hit."""
    o = run_once(_cfg(n, d, ckpt=CkptMode.NONE, iterations=iterations, vector_size=vector_size))
    return o.checksum


def seed_for(pred: Callable, n: int, iterations: int, kind=InjectKind.PROCESS, start: int = 1) -> int:
    """First seed whose injection plan satisfies ``pred(plan)``."""
    for s in itertools.count(start):
        if pred(make_plan(s, n, iterations, kind)):
            return s


def _timed(number: int, name: str, fn) -> CriterionResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as e:  # a crashed check is a failed check, with the reason
        ok, detail = False, f"{type(e).__name__}: {e}"
    return CriterionResult(number, name, ok, detail, time.perf_counter() - t0)


# -- 1 -------------------------------------------------------------------------
def check_oracle_matrix(sizes=(4, 8, 16), daemons=(1, 2, 4), iterations: int = 20,
                        budget: float = 120.0):
    t0 = time.perf_counter()
    bad = []
    runs = 0
    for n, d in itertools.product(sizes, daemons):
        want = oracle_checksum(n, d, iterations)
        for i, (strategy, ckpt, inject) in enumerate(CELLS):
            # vary the seed per cell so victims and iterations differ across the matrix
            o = run_once(_cfg(n, d, strategy, ckpt, inject, seed=n * 100 + d * 10 + i, iterations=iterations))
            runs += 1
            if o.checksum != want:
                bad.append(f"n={n} d={d} {strategy.value}/{ckpt.value}/{inject.value}: "
                           f"{o.checksum:#018x} != {want:#018x}")
    took = time.perf_counter() - t0
    if bad:
        return False, "; ".join(bad)
    if took > budget:
        return False, f"all {runs} checksums equal the oracle, but the matrix took {took:.0f}s > {budget:.0f}s"
    return True, f"{runs} recovered runs equal their fault-free checksum in {took:.0f}s"


# -- 2 -------------------------------------------------------------------------
def state_violations(o: bench.RunOutcome) -> List[str]:
    respawned = {r for rec in o.recoveries for _, r in rec.assignment}
    out = []
    for r, seq in sorted(o.states.items()):
        want = [ProcessState.RESTARTED] if r in respawned else [ProcessState.NEW, ProcessState.REINITED]
        if seq != want:
            out.append(f"rank {r}: {[s.name for s in seq]} != {[s.name for s in want]}")
    if not respawned:
        out.append("no rank was respawned")
    return out


def check_state_machine(runs: int = 50, n: int = 4, iterations: int = 6):
    bad = []
    for s in range(1, runs + 1):
        strategy = (Strategy.REINIT, Strategy.ULFM)[s % 2]
        if s % 5 == 0:
            cfg = _cfg(n, 2, Strategy.REINIT, CkptMode.FILE, InjectKind.NODE, seed=s, iterations=iterations)
        else:
            cfg = _cfg(n, 2, strategy, CkptMode.BUDDY, InjectKind.PROCESS, seed=s, iterations=iterations)
        o = run_once(cfg)
        bad += [f"seed {s} {cfg.strategy.value}/{cfg.inject.value}: {v}" for v in state_violations(o)]
    if bad:
        return False, f"{len(bad)} violations: " + "; ".join(bad[:5])
    return True, f"{runs} injected runs, 0 violations"


# -- 3 -------------------------------------------------------------------------
def random_topology(rng: random.Random) -> Topology:
    nd = rng.randint(1, 12)
    ranks = list(range(rng.randint(0, 64)))
    rng.shuffle(ranks)
    kids = {d: set() for d in range(nd)}
    for r in ranks:
        kids[rng.randrange(nd)].add(r)
    alive = {d: rng.random() > 0.2 for d in range(nd)}
    alive[rng.randrange(nd)] = True
    return Topology({d: DaemonRecord(alive=alive[d], children=frozenset(kids[d] if alive[d] else ()))
                     for d in range(nd)})


def placement_counterexample(topo: Topology, failed: FailedEntity) -> Optional[str]:
    """Independent statement of the placement rule; returns a description of any violation."""
    got = plan_recovery(topo, failed)
    if failed.is_daemon:
        lost = sorted(topo.daemons[failed.daemon].children)
        if not lost:
            return None if got == [] else f"expected no placement, got {got}"
        cands = [(len(rec.children), d) for d, rec in topo.daemons.items()
                 if rec.alive and d != failed.daemon]
        if not cands:
            return "placement without a surviving daemon"
        best = min(cands)[1]
        if got != [(best, r) for r in lost]:
            return f"daemon {failed.daemon} lost {lost}: got {got}, want all on {best}"
        return None
    parent = next(d for d, rec in topo.daemons.items() if failed.rank in rec.children)
    return None if got == [(parent, failed.rank)] else f"rank {failed.rank}: got {got}, want parent {parent}"


def single_cycle(n: int) -> bool:
    seen, r = set(), 0
    for _ in range(n):
        seen.add(r)
        r = buddy_of(r, n)
    return r == 0 and len(seen) == n


def check_placement(trials: int = 1000, max_n: int = 1024, seed: int = 7):
    rng = random.Random(seed)
    bad = []
    checked = 0
    for _ in range(trials):
        topo = random_topology(rng)
        alive = topo.alive_daemons()
        victims = [FailedEntity(daemon=d) for d in alive if len(alive) > 1]
        victims += [FailedEntity(rank=r) for r in sorted(topo.parents())]
        for f in victims:
            checked += 1
            why = placement_counterexample(topo, f)
            if why:
                bad.append(why)
    bad += [f"buddy_of not a single cycle for n={n}" for n in range(1, max_n + 1) if not single_cycle(n)]
    if bad:
        return False, f"{len(bad)} counterexamples: " + "; ".join(bad[:3])
    return True, f"{trials} topologies ({checked} failures), buddy cycles n=1..{max_n}: 0 counterexamples"


# -- 4 / 5 ---------------------------------------------------------------------
def median_recovery(cfg_factory, reps: int) -> Tuple[float, List[float]]:
    vals = [run_once(cfg_factory(rep), rep).timing.t_recovery for rep in range(reps)]
    return statistics.median(vals), vals


def check_recovery_ordering(n: int = 16, reps: int = 10, iterations: int = 10):
    def cfg(strategy, ckpt):
        return lambda rep: _cfg(n, 4, strategy, ckpt, InjectKind.PROCESS, seed=rep + 1, iterations=iterations)
    re, _ = median_recovery(cfg(Strategy.REINIT, CkptMode.BUDDY), reps)
    cr, _ = median_recovery(cfg(Strategy.CR, CkptMode.FILE), reps)
    ok = re < cr and re <= 0.5 * cr
    return ok, f"median REINIT {re * 1e3:.1f} ms vs CR {cr * 1e3:.1f} ms (ratio {re / cr:.2f}, need <= 0.50)"


def check_reinit_scaling(reps: int = 10, iterations: int = 8, ranks_per_daemon: int = 8):
    def cfg(n):
        return lambda rep: _cfg(n, n // ranks_per_daemon, Strategy.REINIT, CkptMode.BUDDY,
                                InjectKind.PROCESS, seed=rep + 1, iterations=iterations)
    small, _ = median_recovery(cfg(8), reps)
    big, _ = median_recovery(cfg(64), reps)
    ratio = big / small
    return ratio <= 2.0, (f"median REINIT recovery {small * 1e3:.1f} ms at 8 ranks, "
                          f"{big * 1e3:.1f} ms at 64 ranks (ratio {ratio:.2f}, need <= 2.00)")


# -- 6 -------------------------------------------------------------------------
def check_node_failure(daemons: int = 4, spares: int = 1, n: int = 8, iterations: int = 10):
    want = oracle_checksum(n, daemons, iterations)
    bad, notes = [], []
    for victim_d in range(daemons):
        seed = seed_for(lambda p: p.victim % daemons == victim_d and p.iteration > 0, n, iterations,
                        InjectKind.NODE)
        topo0 = Topology.round_robin(n, daemons, spares)
        lost = sorted(topo0.children(victim_d))
        loads = {d: len(rec.children) for d, rec in topo0.daemons.items() if d != victim_d}
        target = min(loads, key=lambda d: (loads[d], d))
        o = run_once(_cfg(n, daemons, Strategy.REINIT, CkptMode.FILE, InjectKind.NODE,
                          seed=seed, iterations=iterations, spares=spares))
        if o.checksum != want:
            bad.append(f"daemon {victim_d}: checksum {o.checksum:#x} != {want:#x}")
        placed = {r: o.topology.parent(r) for r in lost}
        if any(d != target for d in placed.values()):
            bad.append(f"daemon {victim_d}: ranks placed {placed}, want all on {target}")
        if o.topology.daemons[victim_d].alive:
            bad.append(f"daemon {victim_d} still marked alive")
        notes.append(f"d{victim_d}->{target}")
    if bad:
        return False, "; ".join(bad)
    return True, f"every victim daemon recovered onto the argmin daemon ({', '.join(notes)}), checksums equal"


# -- 7 -------------------------------------------------------------------------
RCK1_SAMPLE = checkpoint.Checkpoint.make(3, 17, b"reinit checkpoint payload")
# magic | version | rank 3 | iter 17 | length 25 | crc | payload
RCK1_GOLDEN_HEX = ("52434b31" "0100" "03000000" "1100000000000000" "1900000000000000" "4ee042b5"
                   "7265696e697420636865636b706f696e74207061796c6f6164")


def crc32_reference(data: bytes) -> int:
    """Bit-at-a-time reflected CRC-32 (poly 0xEDB88320), independent of zlib."""
    crc = 0xFFFFFFFF
    for b in data:
        crc ^= b
        for _ in range(8):
            crc = (crc >> 1) ^ (0xEDB88320 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def _corrupt_files(root_dir: str) -> int:
    n = 0
    for path in glob.glob(os.path.join(root_dir, "**", "*.ckpt"), recursive=True):
        with open(path, "r+b") as f:
            f.seek(-1, os.SEEK_END)
            last = f.read(1)
            f.seek(-1, os.SEEK_END)
            f.write(bytes([last[0] ^ 0xFF]))
        n += 1
    return n


def check_checkpoint_format(e2e: bool = True, tmpdir: Optional[str] = None):
    problems = []
    if checkpoint.pack_file(RCK1_SAMPLE).hex() != RCK1_GOLDEN_HEX:
        problems.append("RCK1 encoding differs from the golden bytes")
    if checkpoint.unpack_file(bytes.fromhex(RCK1_GOLDEN_HEX)) != RCK1_SAMPLE:
        problems.append("golden RCK1 bytes do not decode to the sample")
    if crc32_reference(b"123456789") != 0xCBF43926 or checkpoint.crc32(b"123456789") != 0xCBF43926:
        problems.append("CRC-32 check value is not 0xCBF43926")
    blob = bytearray(checkpoint.pack_file(RCK1_SAMPLE))
    blob[-1] ^= 0x01
    try:
        checkpoint.unpack_file(bytes(blob))
        problems.append("corrupted payload decoded without error")
    except checkpoint.CrcMismatch:
        pass
    if e2e:
        problems += _corrupted_restart(tmpdir)
    if problems:
        return False, "; ".join(problems)
    return True, "golden RCK1 bytes match, CRC-32('123456789') = 0xCBF43926, corruption -> CrcMismatch" + (
        ", corrupted restart aborts" if e2e else "")


def _corrupted_restart(tmpdir: Optional[str]) -> List[str]:
    import tempfile
    from .control import RunAborted

    n, iterations = 4, 8
    seed = seed_for(lambda p: p.iteration >= 2, n, iterations)
    d = tempfile.mkdtemp(prefix="rh-corrupt-", dir=tmpdir)
    hits = []
    cfg = _cfg(n, 1, Strategy.CR, CkptMode.FILE, InjectKind.PROCESS, seed=seed, iterations=iterations,
               ckpt_dir=d)
    try:
        run_once(cfg, hooks={"on_failure": lambda root, ev: hits.append(_corrupt_files(d))})
    except (RunAborted, checkpoint.CheckpointError) as e:
        if "crc" not in str(e).lower():
            return [f"corrupted restart aborted for another reason: {e}"]
        return [] if hits and hits[0] else ["no checkpoint file was corrupted"]
    finally:
        import shutil
        shutil.rmtree(d, ignore_errors=True)
    return ["a run restarted from corrupted checkpoints completed"]


# -- 8 -------------------------------------------------------------------------
# (samples, mean, half-width) worked by hand from the t-table
CI95_EXAMPLES = (
    ([1.0] * 10, 1.0, 0.0),
    (list(map(float, range(1, 11))), 5.5, 2.262 * math.sqrt(55 / 6) / math.sqrt(10)),
    ([0.0, 2.0], 1.0, 12.706),
    ([2.0, 4.0, 6.0], 4.0, 4.303 * 2.0 / math.sqrt(3)),
    ([0.5, 0.7, 0.6, 0.9, 0.8], 0.7, 2.776 * math.sqrt(0.025) / math.sqrt(5)),
)


def check_ci95(rel: float = 1e-3):
    bad = []
    for samples, mean, hw in CI95_EXAMPLES:
        m, h = bench.ci95(samples)
        if not math.isclose(m, mean, rel_tol=rel, abs_tol=1e-12) or not math.isclose(h, hw, rel_tol=rel, abs_tol=1e-12):
            bad.append(f"{samples}: ({m:.6g}, {h:.6g}) != ({mean:.6g}, {hw:.6g})")
    try:
        bench.ci95([1.0])
        bad.append("one sample did not raise InsufficientSamples")
    except bench.InsufficientSamples:
        pass
    return (not bad), ("; ".join(bad) if bad else f"{len(CI95_EXAMPLES)} hand-worked intervals within {rel:g}")


# -- 9 -------------------------------------------------------------------------
def sample_messages() -> Dict[wire.Kind, wire.ControlMessage]:
    """One representative, fully populated message per kind."""
    K, m = wire.Kind, wire.msg
    return {
        K.REGISTER_DAEMON: m(K.REGISTER_DAEMON, 0, daemon=2, pid=4242, address="/tmp/rh/d2.sock"),
        K.REGISTER_WORKER: m(K.REGISTER_WORKER, 1, rank=5, pid=777),
        K.FAULT_NOTIFY: m(K.FAULT_NOTIFY, 0, rank=3),
        K.REINIT_CMD: m(K.REINIT_CMD, 1, commit_iter=9, assignment=[(1, 3), (1, 7)]),
        K.ROLLBACK: m(K.ROLLBACK, 1, commit_iter=9),
        K.BARRIER_ENTER: m(K.BARRIER_ENTER, 1, rank=6, seq=0),
        K.BARRIER_RELEASE: m(K.BARRIER_RELEASE, 1, seq=0),
        K.CKPT_PUT: m(K.CKPT_PUT, 0, dst=1, rank=0, iter=4, payload=b"\x00\x01\x02\x03"),
        K.CKPT_GET: m(K.CKPT_GET, 2, dst=1, rank=0, iter=4),
        K.CKPT_DATA: m(K.CKPT_DATA, 2, dst=0, rank=0, iter=4, ok=1, payload=b"\xff\xfe"),
        K.CKPT_REPORT: m(K.CKPT_REPORT, 0, rank=2, iter=11, t_app=0.5, t_write=0.25, t_read=0.0),
        K.SHUTDOWN: m(K.SHUTDOWN, 3),
        K.SPAWN: m(K.SPAWN, 1, rank=7, state=int(ProcessState.RESTARTED), commit_iter=-1),
        K.DATA: m(K.DATA, 0, src=1, dst=2, tag=19, payload=b"halo"),
        K.COLL: m(K.COLL, 0, rank=1, seq=5, op=int(wire.CollOp.SUM), arg=0, payload=b"\x00" * 8),
        K.COLL_RESULT: m(K.COLL_RESULT, 0, seq=5, payload=b"\x00\x00\x00\x00\x00\x00\xf0\x3f"),
        K.WORKER_DONE: m(K.WORKER_DONE, 1, rank=0, status=0, payload=b"done"),
        K.ULFM_REQ: m(K.ULFM_REQ, 0, rank=2, op=int(wire.UlfmOp.AGREE), flag=1),
        K.ULFM_REPLY: m(K.ULFM_REPLY, 0, op=int(wire.UlfmOp.SHRINK), flag=1, commit_iter=3, ranks=[0, 1, 2]),
        K.KEEPALIVE: m(K.KEEPALIVE, 0),
    }


def check_wire(golden: Optional[Dict[str, str]] = None):
    """Round-trip every kind; with ``golden`` ({kind name: hex}) also pin the bytes."""
    bad = []
    samples = sample_messages()
    missing = set(wire.Kind) - set(samples)
    if missing:
        bad.append(f"no sample for {sorted(k.name for k in missing)}")
    for k, m in samples.items():
        raw = wire.encode(m)
        back = wire.decode(raw)
        if back != m or wire.encode(back) != raw:
            bad.append(f"{k.name} does not round-trip")
        if golden is not None and golden.get(k.name) != raw.hex():
            bad.append(f"{k.name} differs from its golden vector")
    stream = b"".join(wire.encode(m) for m in samples.values())
    reader = wire.FrameReader()
    got = [f for i in range(0, len(stream), 7) for f in reader.feed(stream[i:i + 7])]
    if got != list(samples.values()):
        bad.append("byte-at-a-time stream decode lost or reordered frames")
    if bad:
        return False, "; ".join(bad)
    return True, f"{len(samples)} kinds round-trip bit-exactly" + (" and match golden vectors" if golden else "")


CRITERIA = {
    1: ("end-to-end oracle equivalence", check_oracle_matrix),
    2: ("state-machine suite", check_state_machine),
    3: ("placement properties", check_placement),
    4: ("recovery ordering REINIT vs CR", check_recovery_ordering),
    5: ("near-constant REINIT recovery scaling", check_reinit_scaling),
    6: ("node-failure recovery", check_node_failure),
    7: ("checkpoint format and CRC", check_checkpoint_format),
    8: ("ci95 statistics", check_ci95),
    9: ("wire-protocol golden vectors", check_wire),
}


def run_criterion(number: int, **kw) -> CriterionResult:
    name, fn = CRITERIA[number]
    return _timed(number, name, lambda: fn(**kw))


def run_all(selected: Optional[Sequence[int]] = None, report=print) -> List[CriterionResult]:
    out = []
    for number in selected or sorted(CRITERIA):
        res = run_criterion(number)
        if report:
            report(res.line())
        out.append(res)
    return out
