"""Pure-Python kernels. Same contract as the compiled ``_core`` module.

Payloads are little-endian ``bytes``; dtype codes are F32=0, U8=1, I32=2.
"""
import math
import struct

import numpy as np

from rune.errors import Malformed

ELEMENT_SIZE = (4, 1, 4)

LINEAR, RELU, TANH = 0, 1, 2

MAX_RANK = 255
VARINT_MAX_BYTES = 5

_TAG_DTYPE = 0x08   # field 1, varint
_TAG_DIMS = 0x12    # field 2, length-delimited (packed varints)
_TAG_PAYLOAD = 0x1A  # field 3, length-delimited

_u32 = struct.Struct("<I")


def element_size(dtype):
    return ELEMENT_SIZE[dtype]


# -- varints ----------------------------------------------------------------

def encode_uvarint(value):
    if value < 0 or value > 0xFFFFFFFF:
        raise ValueError(f"varint out of u32 range: {value}")
    out = bytearray()
    while value > 0x7F:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)
    return bytes(out)


def decode_uvarint(buf, pos):
    """Return ``(value, new_pos)``. At most 5 bytes, value must fit in u32."""
    result = 0
    shift = 0
    start = pos
    n = len(buf)
    while True:
        if pos >= n:
            raise Malformed(pos, "truncated varint")
        if pos - start >= VARINT_MAX_BYTES:
            raise Malformed(start, "varint longer than 5 bytes")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            break
        shift += 7
    if result > 0xFFFFFFFF:
        raise Malformed(start, "varint exceeds u32")
    return result, pos


# -- tensor codecs ----------------------------------------------------------

def _expected_payload(dtype, dims, offset, available):
    size = ELEMENT_SIZE[dtype]
    for d in dims:
        size *= d
        if size > available:
            raise Malformed(offset + available, "payload shorter than dims imply")
    return size


def encode_fixed(dtype, dims, payload):
    head = bytearray((dtype, len(dims)))
    for d in dims:
        head += _u32.pack(d)
    return bytes(head) + payload


def decode_fixed(buf):
    n = len(buf)
    if n < 2:
        raise Malformed(n, "missing header")
    dtype = buf[0]
    if dtype >= len(ELEMENT_SIZE):
        raise Malformed(0, "unknown dtype")
    rank = buf[1]
    if rank == 0:
        raise Malformed(1, "rank must be at least 1")
    end = 2 + 4 * rank
    if n < end:
        raise Malformed(n, "truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 2)
    for i, d in enumerate(dims):
        if d == 0:
            raise Malformed(2 + 4 * i, "zero dimension")
    size = _expected_payload(dtype, dims, end, n - end)
    if n - end != size:
        raise Malformed(end + size, "trailing bytes after payload")
    return dtype, dims, bytes(buf[end:])


def encode_varint(dtype, dims, payload):
    packed = b"".join(encode_uvarint(d) for d in dims)
    return b"".join((
        bytes((_TAG_DTYPE,)), encode_uvarint(dtype),
        bytes((_TAG_DIMS,)), encode_uvarint(len(packed)), packed,
        bytes((_TAG_PAYLOAD,)), encode_uvarint(len(payload)), payload,
    ))


def _expect_tag(buf, pos, tag):
    if pos >= len(buf):
        raise Malformed(pos, "truncated record")
    if buf[pos] != tag:
        raise Malformed(pos, f"unexpected tag 0x{buf[pos]:02x}")
    return pos + 1


def decode_varint(buf):
    n = len(buf)
    pos = _expect_tag(buf, 0, _TAG_DTYPE)
    dtype, pos = decode_uvarint(buf, pos)
    if dtype >= len(ELEMENT_SIZE):
        raise Malformed(pos - 1, "unknown dtype")

    pos = _expect_tag(buf, pos, _TAG_DIMS)
    length, pos = decode_uvarint(buf, pos)
    end = pos + length
    if end > n:
        raise Malformed(n, "truncated dims record")
    dims = []
    while pos < end:
        start = pos
        d, pos = decode_uvarint(buf[:end], pos)
        if d == 0:
            raise Malformed(start, "zero dimension")
        dims.append(d)
    if not dims or len(dims) > MAX_RANK:
        raise Malformed(end, "rank out of range")

    pos = _expect_tag(buf, pos, _TAG_PAYLOAD)
    length, pos = decode_uvarint(buf, pos)
    if pos + length > n:
        raise Malformed(n, "truncated payload")
    if pos + length != n:
        raise Malformed(pos + length, "trailing bytes after payload")
    size = _expected_payload(dtype, dims, pos, length)
    if size != length:
        raise Malformed(pos, "payload length disagrees with dims")
    return dtype, tuple(dims), bytes(buf[pos:])


# -- numerics ---------------------------------------------------------------

def _f32(payload):
    return np.frombuffer(payload, dtype="<f4")


def _dft_table(n):
    angles = (2.0 * math.pi / n) * np.arange(n, dtype=np.float64)
    return np.cos(angles), -np.sin(angles)


def fft_magnitude(payload, n):
    x = _f32(payload).astype(np.float64)
    if len(x) != n:
        raise ValueError(f"expected {n} samples, got {len(x)}")
    if n & (n - 1) == 0:
        re, im = _radix2(x)
    else:
        cos_t, sin_t = _dft_table(n)
        idx = np.outer(np.arange(n), np.arange(n)) % n
        re = cos_t[idx] @ x
        im = sin_t[idx] @ x
    return np.hypot(re, im).astype("<f4").tobytes()


def _radix2(x):
    n = len(x)
    bits = n.bit_length() - 1
    order = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        order |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    re = x[order].copy()
    im = np.zeros(n)
    size = 2
    while size <= n:
        half = size // 2
        k = np.arange(half)
        wr = np.cos(2.0 * math.pi * k / size)
        wi = -np.sin(2.0 * math.pi * k / size)
        re = re.reshape(-1, size)
        im = im.reshape(-1, size)
        ar, ai = re[:, :half], im[:, :half]
        br, bi = re[:, half:], im[:, half:]
        tr = br * wr - bi * wi
        ti = br * wi + bi * wr
        re = np.concatenate((ar + tr, ar - tr), axis=1).ravel()
        im = np.concatenate((ai + ti, ai - ti), axis=1).ravel()
        size *= 2
    return re, im


def normalize(payload):
    x = _f32(payload)
    if len(x) == 0:
        return b""
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return bytes(len(payload))
    span = np.float32(hi - lo)
    return ((x - lo) / span).astype("<f4").tobytes()


class DenseNet:
    """Dense stack over (n_in, n_out, act, weights, bias) layer tuples."""

    def __init__(self, layers):
        self.layers = []
        prev = None
        for n_in, n_out, act, weights, bias in layers:
            if len(weights) != 4 * n_in * n_out or len(bias) != 4 * n_out:
                raise ValueError("layer buffers do not match dims")
            if prev is not None and n_in != prev:
                raise ValueError("layer dims do not chain")
            w = np.frombuffer(weights, dtype="<f4").reshape(n_out, n_in)
            self.layers.append((w, np.frombuffer(bias, dtype="<f4"), act))
            prev = n_out
        self.inputs = self.layers[0][0].shape[1]
        self.outputs = prev

    def forward(self, payload):
        x = _f32(payload)
        if len(x) != self.inputs:
            raise ValueError(f"expected {self.inputs} inputs, got {len(x)}")
        for w, b, act in self.layers:
            y = w @ x + b
            if act == RELU:
                y = np.where(y < 0, np.float32(0.0), y)
            elif act == TANH:
                y = np.tanh(y)
            x = y.astype(np.float32, copy=False)
        return x.astype("<f4").tobytes()


def dense_forward(layers, payload):
    return DenseNet(layers).forward(payload)
