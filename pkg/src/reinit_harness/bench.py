"""Experiment orchestration: strategies, timing breakdown, statistics, CSV."""
from __future__ import annotations

import csv
import logging
import math
import os
import shutil
import statistics
import tempfile
import time
import uuid
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence

from .control import Completion, LaunchConfig, RecoveryRecord, Root
from .core import CkptMode, HarnessError, InjectKind, ProcessState, Strategy, Topology
from .faults import InjectionPlan, make_plan
from .wire import NO_ITER

log = logging.getLogger(__name__)

# two-sided 95% Student-t quantiles, t_{0.975, df} for df = 1..30
T975 = (
    12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
    2.201, 2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
    2.080, 2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
)

CSV_HEADER = ["app", "strategy", "ckpt_mode", "inject", "world_size", "rep",
              "t_app", "t_ckpt_write", "t_ckpt_read", "t_recovery", "t_total"]


class ConfigError(HarnessError, ValueError):
    pass


class InsufficientSamples(HarnessError, ValueError):
    pass


@dataclass
class ExperimentConfig:
    app: str = "jacobi"
    world_size: int = 4
    num_daemons: int = 1
    spares: int = 0
    strategy: Strategy = Strategy.REINIT
    ckpt_mode: CkptMode = CkptMode.BUDDY
    inject: InjectKind = InjectKind.NONE
    seed: int = 1
    iterations: int = 20
    repetitions: int = 10
    vector_size: int = 4096
    ckpt_dir: str = ""
    out: str = ""
    spawn_method: str = "fork"

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        self.ckpt_mode = CkptMode(self.ckpt_mode)
        self.inject = InjectKind(self.inject)
        self.validate()

    def validate(self) -> None:
        if self.world_size < 1 or self.iterations < 1 or self.repetitions < 1:
            raise ConfigError("world size, iterations and repetitions must be positive")
        if self.strategy is Strategy.CR and self.ckpt_mode is CkptMode.BUDDY:
            raise ConfigError("checkpoint-restart needs file checkpoints (re-deployment loses memory)")
        if self.inject is InjectKind.NODE and self.ckpt_mode is CkptMode.BUDDY:
            raise ConfigError("buddy checkpoints cannot survive a node failure; use file")
        if self.ckpt_mode is CkptMode.BUDDY and self.world_size < 2:
            raise ConfigError("buddy checkpointing needs at least two ranks")
        if self.inject is not InjectKind.NONE and self.ckpt_mode is CkptMode.NONE:
            raise ConfigError("fault injection needs checkpointing")
        if (self.inject is InjectKind.NODE and self.strategy is not Strategy.CR
                and self.num_daemons + self.spares < 2):
            raise ConfigError("node failure recovery needs a second daemon or a spare")

    def plan(self) -> InjectionPlan:
        return make_plan(self.seed, self.world_size, self.iterations, self.inject)


@dataclass
class TimingBreakdown:
    t_app: float = 0.0
    t_ckpt_write: float = 0.0
    t_ckpt_read: float = 0.0
    t_recovery: float = 0.0
    t_total: float = 0.0


@dataclass
class RunOutcome:
    config: ExperimentConfig
    rep: int
    timing: TimingBreakdown
    checksum: int
    residual: float
    states: Dict[int, List[ProcessState]]
    recoveries: List[RecoveryRecord] = field(default_factory=list)
    topology: Optional[Topology] = None
    reinit_log: list = field(default_factory=list)


def _mean_timings(timings: Dict[int, List[float]], world_size: int) -> List[float]:
    out = [0.0, 0.0, 0.0]
    for r in range(world_size):
        for i, v in enumerate(timings.get(r, (0.0, 0.0, 0.0))):
            out[i] += v / world_size
    return out


def run_once(cfg: ExperimentConfig, rep: int = 0, hooks=None) -> RunOutcome:
    """One launch of the application under ``cfg.strategy``, start to finish."""
    own_dir = not cfg.ckpt_dir and cfg.ckpt_mode is CkptMode.FILE
    ckpt_dir = tempfile.mkdtemp(prefix="rh-ckpt-") if own_dir else cfg.ckpt_dir
    run_id = f"{cfg.app}-{cfg.strategy.value}-{cfg.inject.value}-n{cfg.world_size}-r{rep}-{uuid.uuid4().hex[:8]}"
    lc = LaunchConfig(world_size=cfg.world_size, num_daemons=cfg.num_daemons, spares=cfg.spares,
                      app=cfg.app, strategy=cfg.strategy, ckpt_mode=cfg.ckpt_mode, ckpt_dir=ckpt_dir,
                      run_id=run_id, iterations=cfg.iterations, vector_size=cfg.vector_size,
                      plan=cfg.plan(), spawn_method=cfg.spawn_method)
    timings: Dict[int, List[float]] = {}
    recoveries: List[RecoveryRecord] = []
    reinit_log = []
    t0 = time.perf_counter()
    root = Root(lc)
    try:
        root.launch()
        while True:
            ev = root.monitor()
            if isinstance(ev, Completion):
                break
            if hooks and "on_failure" in hooks:
                hooks["on_failure"](root, ev)
            if cfg.strategy is Strategy.CR:
                root.handle_failure(ev)
                commit = root.state.committed_iter
                _merge(timings, root.timings)
                root.kill_all()
                # the relaunched job must not inject again
                lc = replace(lc, plan=InjectionPlan(), commit_iter=commit)
                root = Root(lc)
                root.launch()
                rec = RecoveryRecord(1, ev.failed, [], commit, ev.t_detect, time.perf_counter())
                recoveries.append(rec)
            else:
                root.handle_failure(ev)
        _merge(timings, root.timings)
        recoveries.extend(root.recoveries)
        reinit_log = list(root.reinit_log)
        topology = root.topology
    finally:
        root.teardown()
        if own_dir:
            shutil.rmtree(ckpt_dir, ignore_errors=True)
        elif cfg.ckpt_mode is CkptMode.FILE:
            shutil.rmtree(os.path.join(ckpt_dir, run_id), ignore_errors=True)
    t_total = time.perf_counter() - t0
    t_app, t_w, t_r = _mean_timings(timings, cfg.world_size)
    timing = TimingBreakdown(t_app, t_w, t_r, sum(r.duration for r in recoveries), t_total)
    return RunOutcome(cfg, rep, timing, ev.checksum, ev.residual, ev.states, recoveries, topology, reinit_log)


def _merge(into: Dict[int, List[float]], new: Dict[int, List[float]]) -> None:
    for r, vals in new.items():
        acc = into.setdefault(r, [0.0, 0.0, 0.0])
        for i, v in enumerate(vals):
            acc[i] += v


def run_strategy(cfg: ExperimentConfig) -> List[RunOutcome]:
    """Run ``cfg.repetitions`` independent measurements, sequentially."""
    return [run_once(cfg, rep) for rep in range(cfg.repetitions)]


def ci95(samples: Sequence[float]):
    """Mean and half-width of the 95% t-interval.

    Degrees of freedom above 30 use the df=30 quantile, which slightly
    overstates the interval.
    """
    n = len(samples)
    if n < 2:
        raise InsufficientSamples("need at least two samples")
    mean = statistics.fmean(samples)
    s = statistics.stdev(samples)
    t = T975[min(n - 1, len(T975)) - 1]
    return mean, t * s / math.sqrt(n)


def csv_rows(outcomes: Iterable[RunOutcome]) -> List[dict]:
    rows = []
    for o in outcomes:
        c, t = o.config, o.timing
        rows.append(dict(app=c.app, strategy=c.strategy.value, ckpt_mode=c.ckpt_mode.value,
                         inject=c.inject.value, world_size=c.world_size, rep=o.rep,
                         t_app=t.t_app, t_ckpt_write=t.t_ckpt_write, t_ckpt_read=t.t_ckpt_read,
                         t_recovery=t.t_recovery, t_total=t.t_total))
    return rows


def emit_csv(rows: Iterable[dict], path: str) -> None:
    rows = sorted(rows, key=lambda r: (r["strategy"], int(r["world_size"]), int(r["rep"])))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([f"{r[k]:.6f}" if isinstance(r[k], float) else r[k] for k in CSV_HEADER])


def summarize(outcomes: Sequence[RunOutcome]) -> Dict[str, tuple]:
    """Median and ci95 per timing column (median only when there is one sample)."""
    out = {}
    for name in ("t_app", "t_ckpt_write", "t_ckpt_read", "t_recovery", "t_total"):
        vals = [getattr(o.timing, name) for o in outcomes]
        med = statistics.median(vals)
        out[name] = (med,) + (ci95(vals) if len(vals) > 1 else (med, 0.0))
    return out
