import os
import subprocess
import sys

import pytest

from rune import bench
from rune.bench import BenchmarkRecord, Mode, compute_overhead, read_csv, report, run_sweep
from rune.errors import NonPositiveBaseline


@pytest.mark.parametrize("t_rune, t_native, expect", [
    (1.4, 1.0, 0.40), (1.28, 1.0, 0.28), (1.45, 1.0, 0.45), (1.0, 1.0, 0.0), (3.0, 2.0, 0.5),
])
def test_compute_overhead(t_rune, t_native, expect):
    assert compute_overhead(t_rune, t_native) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("t_native", [0.0, -1.0])
def test_non_positive_baseline(t_native):
    with pytest.raises(NonPositiveBaseline):
        compute_overhead(1.0, t_native)


def test_record_invariants():
    BenchmarkRecord(Mode.NATIVE, 10, 0.1)
    BenchmarkRecord(Mode.RUNE_FIXED, 10, 0.1, 0.2)
    with pytest.raises(ValueError):
        BenchmarkRecord(Mode.NATIVE, 10, 0.1, 0.2)
    with pytest.raises(ValueError):
        BenchmarkRecord(Mode.RUNE_VARINT, 10, 0.1)
    with pytest.raises(ValueError):
        BenchmarkRecord(Mode.NATIVE, 0, 0.1)
    with pytest.raises(ValueError):
        BenchmarkRecord(Mode.NATIVE, 10, 0.0)


def twelve_records():
    out = []
    for n in (10**3, 10**4, 10**5, 10**6):
        out.append(BenchmarkRecord(Mode.NATIVE, n, n * 1e-5, None, (1.0, 1.1)))
        out.append(BenchmarkRecord(Mode.RUNE_FIXED, n, n * 1.4e-5, 0.4))
        out.append(BenchmarkRecord(Mode.RUNE_VARINT, n, n * 1.45e-5, 0.45))
    return out


def test_report_csv(tmp_path):
    path = tmp_path / "results.csv"
    table = report(twelve_records(), path)
    lines = path.read_text().splitlines()
    assert len(lines) == 13
    assert lines[0] == "mode,iterations,t_total_s,overhead"
    assert read_csv(path) == twelve_records()
    assert (tmp_path / "results.csv.txt").read_text() == table
    assert "+40.0%" in table and "9.5%" in table


def test_report_empty(tmp_path):
    with pytest.raises(ValueError):
        report([], tmp_path / "x.csv")


def test_small_sweep():
    records = run_sweep([300, 500], repeats=2, chunk=128)
    assert [(r.mode, r.iterations) for r in records] == [
        (m, n) for n in (300, 500) for m in Mode]
    for r in records:
        assert len(r.samples) == 2
        assert (r.overhead is None) == (r.mode == Mode.NATIVE)


def test_sweep_adds_baseline():
    records = run_sweep([100], modes=[Mode.RUNE_FIXED], repeats=1)
    assert {r.mode for r in records} == {Mode.NATIVE, Mode.RUNE_FIXED}


def test_time_modes_same_inputs():
    fixture = bench.sine_fixture()
    result = bench.time_modes(fixture, 1000, list(Mode), seed=4, chunk=300)
    digests = {digest for _, digest, _ in result.values()}
    assert len(digests) == 1
    other = bench.time_modes(fixture, 1000, list(Mode), seed=5, chunk=1000)
    assert {d for _, d, _ in other.values()} != digests


def test_cli(tmp_path):
    out = tmp_path / "r.csv"
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "rune.bench", "--iterations", "200,400",
                           "--repeats", "2", "--out", str(out)],
                          capture_output=True, text=True, env=env, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert len(read_csv(out)) == 6
    assert proc.stdout.splitlines()[0].split()[:2] == ["Mode", "Iterations"]


def test_cli_bad_iterations(tmp_path):
    assert bench.run_cli(bench.cli, ["--iterations", "10,x", "--out", str(tmp_path / "a")]) != 0
    assert bench.run_cli(bench.cli, ["--iterations", "0", "--out", str(tmp_path / "a")]) != 0
