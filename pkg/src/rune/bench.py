"""Containerization overhead: the sine pipeline run natively and as a rune.

overhead = (t_rune - t_native) / t_native

Each timed run executes ``iterations`` inferences. Modes are interleaved in
chunks of at most ``chunk`` inferences (rotating the order every chunk) so
clock drift and background load land on all three modes alike; a mode's
``t_total`` is the sum of its chunks. Every mode owns its own device seeded
identically, so all three see the same input sequence, and each serial sink
feeds a running digest that must agree across modes.
"""
import csv
import enum
import gc
import hashlib
import statistics
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import click

from rune import kernels, runefile
from rune.errors import NonPositiveBaseline, RuneError
from rune.forge import compile_text, run_cli
from rune.pipeline import load_rmodel
from rune.runicos import SerialSink, compile_native, load, simulated_device
from rune.tensor import Codec

DEFAULT_ITERATIONS = (1_000, 10_000, 100_000, 1_000_000)


class Mode(enum.Enum):
    NATIVE = "NATIVE"
    RUNE_FIXED = "RUNE_FIXED"
    RUNE_VARINT = "RUNE_VARINT"


CODECS = {Mode.RUNE_FIXED: Codec.FIXED, Mode.RUNE_VARINT: Codec.VARINT}


@dataclass(frozen=True)
class BenchmarkRecord:
    mode: Mode
    iterations: int
    t_total: float
    overhead: float = None
    samples: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not self.t_total > 0:
            raise ValueError("t_total must be positive")
        if (self.overhead is None) != (self.mode == Mode.NATIVE):
            raise ValueError("overhead is present exactly for rune modes")

    @property
    def spread(self):
        """(max - min) / median over the repeats."""
        if len(self.samples) < 2:
            return 0.0
        return (max(self.samples) - min(self.samples)) / statistics.median(self.samples)


def compute_overhead(t_rune, t_native):
    if not t_native > 0:
        raise NonPositiveBaseline(f"native time must be positive, got {t_native}")
    return (t_rune - t_native) / t_native


# -- fixture ----------------------------------------------------------------

def sine_fixture():
    """(bundle bytes, pipeline graph, model) for the packaged sine Runefile."""
    data = resources.files("rune") / "data"
    text = (data / "sine.Runefile").read_text(encoding="utf-8")
    with resources.as_file(data) as base:
        bundle, ast = compile_text(text, base)
        model = load_rmodel((Path(base) / "sine.rmodel").read_bytes())
    return bundle, runefile.analyze(ast), model


class DigestStream:
    """Text sink that keeps only a running hash of what was written."""

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def write(self, text):
        self._h.update(text.encode())
        return len(text)

    def hexdigest(self):
        return self._h.hexdigest()


class _Runner:
    def __init__(self, mode, fixture, seed):
        bundle, graph, model = fixture
        self.mode = mode
        self.stream = DigestStream()
        device = simulated_device("bench", seed=seed, sink=SerialSink(self.stream))
        if mode == Mode.NATIVE:
            self.step = compile_native(graph, model, device)
        else:
            instance = load(bundle, device)
            instance.manifest()
            codec = CODECS[mode]
            call = instance.call
            self.step = lambda: call(codec)
        self.elapsed = 0.0
        self.last = None

    def run(self, n):
        step = self.step
        out = None
        enabled = gc.isenabled()
        gc.disable()  # as timeit does: collector pauses are not pipeline cost
        try:
            start = time.perf_counter()
            for _ in range(n):
                out = step()
            self.elapsed += time.perf_counter() - start
        finally:
            if enabled:
                gc.enable()
        self.last = out


def time_modes(fixture, iterations, modes, seed=0, chunk=10_000, warmup=1_000):
    """One interleaved timed run per mode. Returns {mode: (seconds, digest, last output)}."""
    # warm the code paths, then start over from identically seeded devices
    for r in [_Runner(m, fixture, seed) for m in modes]:
        r.run(warmup)
    runners = [_Runner(m, fixture, seed) for m in modes]
    done = 0
    turn = 0
    while done < iterations:
        n = min(chunk, iterations - done)
        k = turn % len(runners)
        for r in runners[k:] + runners[:k]:
            r.run(n)
        done += n
        turn += 1
    return {r.mode: (r.elapsed, r.stream.hexdigest(), r.last) for r in runners}


def run_sweep(iterations_list=DEFAULT_ITERATIONS, modes=tuple(Mode), repeats=5, seed=0,
              chunk=10_000, fixture=None, progress=None):
    """Median-of-``repeats`` timing for every (iterations, mode) pair."""
    modes = tuple(Mode(m) for m in modes)
    if Mode.NATIVE not in modes and any(m != Mode.NATIVE for m in modes):
        modes = (Mode.NATIVE,) + modes  # overhead needs the baseline
    fixture = fixture if fixture is not None else sine_fixture()
    records = []
    for iterations in iterations_list:
        times = {m: [] for m in modes}
        for rep in range(repeats):
            result = time_modes(fixture, iterations, modes, seed=seed, chunk=chunk)
            digests = {d for _, d, _ in result.values()}
            outputs = {out.payload for _, _, out in result.values()}
            if len(digests) != 1 or len(outputs) != 1:
                raise RuneError(f"outputs differ across modes at {iterations} iterations")
            for m in modes:
                times[m].append(result[m][0])
            if progress:
                progress(iterations, rep, result)
        native = times.get(Mode.NATIVE)
        for m in modes:
            t = statistics.median(times[m])
            overhead = None
            if m != Mode.NATIVE:
                paired = [compute_overhead(a, b) for a, b in zip(times[m], native)]
                overhead = statistics.median(paired)
            records.append(BenchmarkRecord(m, iterations, t, overhead, tuple(times[m])))
    return records


# -- reporting --------------------------------------------------------------

CSV_COLUMNS = ("mode", "iterations", "t_total_s", "overhead")


def render_table(records):
    rows = [("Mode", "Iterations", "t_total (s)", "Overhead", "Spread")]
    for r in records:
        rows.append((
            r.mode.value,
            f"{r.iterations:,}",
            f"{r.t_total:.4f}",
            "-" if r.overhead is None else f"{100 * r.overhead:+.1f}%",
            f"{100 * r.spread:.1f}%" if r.samples else "-",
        ))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(rows[0], widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows[1:]:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w)
                               for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def report(records, path):
    """Write ``path`` as CSV and ``path`` + ``.txt`` as a text table; return the table."""
    records = list(records)
    if not records:
        raise ValueError("no benchmark records to report")
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.mode.value, r.iterations, repr(r.t_total),
                        "" if r.overhead is None else repr(r.overhead)])
    table = render_table(records)
    path.with_name(path.name + ".txt").write_text(table)
    return table


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        BenchmarkRecord(Mode(row["mode"]), int(row["iterations"]), float(row["t_total_s"]),
                        float(row["overhead"]) if row["overhead"] else None)
        for row in rows
    ]


# -- CLI --------------------------------------------------------------------

def _int_list(ctx, param, value):
    try:
        out = tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise click.BadParameter("expected comma-separated integers") from None
    if not out or any(v <= 0 for v in out):
        raise click.BadParameter("iteration counts must be positive")
    return out


@click.command()
@click.option("--iterations", default="1000,10000,100000,1000000", callback=_int_list,
              show_default=True, help="Comma-separated inference counts.")
@click.option("--repeats", default=5, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out", default="results.csv", show_default=True,
              type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--chunk", default=10_000, show_default=True, type=click.IntRange(min=1),
              help="Interleaving granularity in inferences.")
def cli(iterations, repeats, out, seed, chunk):
    """Time the sine pipeline natively and as a rune under both codecs."""
    click.echo(f"kernel backend: {kernels.BACKEND}", err=True)

    def progress(n, rep, result):
        parts = ", ".join(f"{m.value} {t:.3f}s" for m, (t, _, _) in result.items())
        click.echo(f"  {n:>9,} iterations, repeat {rep + 1}/{repeats}: {parts}", err=True)

    records = run_sweep(iterations, repeats=repeats, seed=seed, chunk=chunk,
                        progress=progress)
    click.echo(report(records, out), nl=False)
    click.echo(f"wrote {out}", err=True)


def main(argv=None):
    sys.exit(run_cli(cli, argv))


if __name__ == "__main__":
    main()
