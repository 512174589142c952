"""Independent reference implementations used as test oracles."""
import cmath
import math
import struct


def naive_dft_magnitude(x):
    """|X[k]| straight from the definition, in double precision."""
    n = len(x)
    out = []
    for k in range(n):
        acc = 0j
        for t, v in enumerate(x):
            acc += v * cmath.exp(-2j * math.pi * k * t / n)
        out.append(abs(acc))
    return out


def naive_dft_magnitude_np(x):
    """Same definition via an explicit O(n^2) matrix; fast enough for n=1024."""
    import numpy as np

    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    k = np.arange(n).reshape(-1, 1)
    t = np.arange(n).reshape(1, -1)
    return np.abs(np.exp(-2j * np.pi * k * t / n) @ x)


def reference_dense(layers, x):
    """Dense forward pass in float64 from (weights, bias, activation) triples."""
    for w, b, act in layers:
        y = [sum(wi * xi for wi, xi in zip(row, x)) + bi for row, bi in zip(w, b)]
        if act == 1:
            y = [max(0.0, v) for v in y]
        elif act == 2:
            y = [math.tanh(v) for v in y]
        x = y
    return x


def fixed_encoding(dtype, dims, payload):
    """FIXED layout written out by hand."""
    return bytes([dtype, len(dims)]) + b"".join(struct.pack("<I", d) for d in dims) + payload


def uvarint(value):
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)
