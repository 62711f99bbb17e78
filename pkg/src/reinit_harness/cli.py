"""``bench``: run recovery experiments or the acceptance matrix.

    bench run --app jacobi --n 16 --daemons 4 --strategy reinit --ckpt buddy \\
              --inject proc --seed 7 --iters 20 --reps 10 --out reinit.csv
    bench verify [--only 1,3,9]

RH_LOG sets the log level (DEBUG, INFO, WARNING, ...) for every process
in the tree.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import bench
from .core import HarnessError

log = logging.getLogger("reinit_harness")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one experiment configuration")
    r.add_argument("--app", default="jacobi", choices=["jacobi"])
    r.add_argument("--n", type=int, required=True, help="world size (ranks)")
    r.add_argument("--daemons", type=int, default=1)
    r.add_argument("--spares", type=int, default=0, help="extra daemons that start with no ranks")
    r.add_argument("--strategy", choices=["cr", "reinit", "ulfm"], default="reinit")
    r.add_argument("--ckpt", choices=["file", "buddy", "none"], default="buddy")
    r.add_argument("--ckpt-dir", default="", help="directory for file checkpoints (default: a temp dir)")
    r.add_argument("--inject", choices=["none", "proc", "node"], default="none")
    r.add_argument("--seed", type=_u64, default=1)
    r.add_argument("--iters", type=int, default=20)
    r.add_argument("--vector", type=int, default=4096, help="points per rank")
    r.add_argument("--reps", type=int, default=10)
    r.add_argument("--out", default="", help="CSV path (default: stdout)")

    v = sub.add_parser("verify", help="run the acceptance matrix; exit 0 iff every property holds")
    v.add_argument("--only", default="", help="comma-separated criterion numbers")
    return p


def cmd_run(a) -> int:
    cfg = bench.ExperimentConfig(app=a.app, world_size=a.n, num_daemons=a.daemons, spares=a.spares,
                                 strategy=a.strategy, ckpt_mode=a.ckpt, inject=a.inject, seed=a.seed,
                                 iterations=a.iters, repetitions=a.reps, vector_size=a.vector,
                                 ckpt_dir=a.ckpt_dir, out=a.out)
    outcomes = []
    for rep in range(cfg.repetitions):
        o = bench.run_once(cfg, rep)
        log.info("rep %d: checksum %#018x t_recovery %.6f s", rep, o.checksum, o.timing.t_recovery)
        outcomes.append(o)
    rows = bench.csv_rows(outcomes)
    bench.emit_csv(rows, a.out or "/dev/stdout")
    sums = set(o.checksum for o in outcomes)
    print(f"# checksum {', '.join(f'{c:#018x}' for c in sorted(sums))}", file=sys.stderr)
    for name, (med, mean, hw) in bench.summarize(outcomes).items():
        print(f"# {name:<13} median {med:.6f}  mean {mean:.6f} +- {hw:.6f}", file=sys.stderr)
    return 0


def cmd_verify(a) -> int:
    from . import verify
    only = [int(x) for x in a.only.split(",") if x.strip()] or None
    results = verify.run_all(only, report=lambda line: print(line, flush=True))
    failed = [r.number for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} criteria hold" +
          (f"; failing: {failed}" if failed else ""))
    return 1 if failed else 0


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("RH_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(asctime)s root %(levelname)s %(message)s")
    try:
        return cmd_run(a) if a.cmd == "run" else cmd_verify(a)
    except (HarnessError, ValueError) as e:
        print(f"bench: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
