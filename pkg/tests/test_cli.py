import csv
import subprocess
import sys

import pytest

from reinit_harness.bench import CSV_HEADER
from reinit_harness.cli import build_parser, main


def bench(*args):
    return subprocess.run([sys.executable, "-m", "reinit_harness", *args], capture_output=True,
                          text=True, timeout=300)


@pytest.mark.slow
def test_run_writes_one_row_per_rep(tmp_path):
    out = tmp_path / "r.csv"
    p = bench("run", "--n", "4", "--daemons", "2", "--strategy", "reinit", "--ckpt", "buddy",
              "--inject", "proc", "--seed", "7", "--iters", "6", "--reps", "2", "--out", str(out))
    assert p.returncode == 0, p.stderr
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert list(rows[0]) == list(CSV_HEADER)
    assert [r["rep"] for r in rows] == ["0", "1"]
    assert {r["strategy"] for r in rows} == {"reinit"}
    assert "# checksum 0x" in p.stderr and p.stderr.count("# checksum") == 1


def test_incompatible_config_exits_2(capsys):
    assert main(["run", "--n", "4", "--strategy", "cr", "--ckpt", "buddy", "--reps", "1"]) == 2
    assert "file checkpoints" in capsys.readouterr().err


def test_seed_must_be_u64():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--n", "2", "--seed", str(1 << 64)])
    assert build_parser().parse_args(["run", "--n", "2", "--seed", "0xff"]).seed == 255


def test_verify_subset_exits_zero():
    p = bench("verify", "--only", "3,8,9")
    assert p.returncode == 0, p.stdout + p.stderr
    lines = p.stdout.splitlines()
    assert [ln[:9] for ln in lines[:3]] == ["[PASS] 3.", "[PASS] 8.", "[PASS] 9."]
    assert lines[-1] == "3/3 criteria hold"
