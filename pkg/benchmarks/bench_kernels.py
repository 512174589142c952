"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--number N]

Prints microseconds per call for each kernel on each available backend and
the speedup of the compiled core over the fallback.
"""
import argparse
import timeit

import numpy as np

from rune import kernels
from rune.bench import sine_fixture


def cases(backend):
    rng = np.random.default_rng(0)
    small = rng.uniform(-1, 1, 1).astype("<f4").tobytes()
    frame = rng.uniform(-1, 1, 150).astype("<f4").tobytes()
    big = rng.uniform(-1, 1, 1024).astype("<f4").tobytes()
    fixed = backend.encode_fixed(0, (150, 1), frame)
    varint = backend.encode_varint(0, (150, 1), frame)
    _, _, sine = sine_fixture()
    net = backend.DenseNet(sine.packed)
    return {
        "encode_fixed [150,1]": lambda: backend.encode_fixed(0, (150, 1), frame),
        "decode_fixed [150,1]": lambda: backend.decode_fixed(fixed),
        "encode_varint [150,1]": lambda: backend.encode_varint(0, (150, 1), frame),
        "decode_varint [150,1]": lambda: backend.decode_varint(varint),
        "fft_magnitude n=150": lambda: backend.fft_magnitude(frame, 150),
        "fft_magnitude n=1024": lambda: backend.fft_magnitude(big, 1024),
        "normalize n=150": lambda: backend.normalize(frame),
        "dense sine model": lambda: net.forward(small),
    }


def measure(fn, number):
    best = min(timeit.repeat(fn, number=number, repeat=5))
    return best / number * 1e6


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--number", type=int, default=2000, help="calls per timing run")
    args = parser.parse_args(argv)

    names = kernels.available_backends()
    results = {}
    for name in names:
        backend = kernels.load_backend(name)
        for label, fn in cases(backend).items():
            results.setdefault(label, {})[name] = measure(fn, args.number)

    header = f"{'kernel':<24}" + "".join(f"{n + ' (us)':>14}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, row in results.items():
        line = f"{label:<24}" + "".join(f"{row[n]:>14.2f}" for n in names)
        if len(names) == 2:
            line += f"{row['python'] / row['cython']:>9.1f}x"
        print(line)
    if len(names) < 2:
        print(f"only the {names[0]} backend is available")


if __name__ == "__main__":
    main()
