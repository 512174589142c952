"""Stage kernels: dense-network inference and the built-in processing blocks."""
import enum
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from rune import kernels
from rune.errors import ModelFormatError, ShapeMismatch
from rune.tensor import DType, Tensor

RMODEL_MAGIC = b"RMDL"


class Activation(enum.IntEnum):
    LINEAR = 0
    RELU = 1
    TANH = 2


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray  # float32 [out, in]
    bias: np.ndarray     # float32 [out]
    activation: Activation = Activation.LINEAR

    @property
    def n_in(self):
        return self.weights.shape[1]

    @property
    def n_out(self):
        return self.weights.shape[0]


class DenseModel:
    """Stack of fully connected layers, evaluated in float32."""

    def __init__(self, layers):
        self.layers = []
        for layer in layers:
            w = np.ascontiguousarray(layer.weights, dtype="<f4")
            b = np.ascontiguousarray(layer.bias, dtype="<f4").ravel()
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ModelFormatError(f"bad layer shapes {w.shape} / {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ModelFormatError("non-finite weights")
            self.layers.append(Layer(w, b, Activation(layer.activation)))
        if not self.layers:
            raise ModelFormatError("model has no layers")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ModelFormatError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")
        # packed once; the kernels read raw little-endian f32 bytes
        self.packed = tuple(
            (l.n_in, l.n_out, int(l.activation), l.weights.tobytes(), l.bias.tobytes())
            for l in self.layers
        )
        self.net = kernels.DenseNet(self.packed)
        self.n_in = self.layers[0].n_in
        self.n_out = self.layers[-1].n_out
        self._in_bytes = 4 * self.n_in

    def __eq__(self, other):
        if not isinstance(other, DenseModel):
            return NotImplemented
        return self.packed == other.packed

    def to_bytes(self):
        return dump_rmodel(self)

    @classmethod
    def from_bytes(cls, data):
        return load_rmodel(data)


def dump_rmodel(model):
    out = bytearray(RMODEL_MAGIC)
    out += struct.pack("<H", len(model.layers))
    for n_in, n_out, act, w, b in model.packed:
        out += struct.pack("<IIB", n_in, n_out, act)
        out += w
        out += b
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def load_rmodel(data):
    data = bytes(data)
    if data[:4] != RMODEL_MAGIC:
        raise ModelFormatError("not an .rmodel file (missing RMDL magic)")
    if len(data) < 10:
        raise ModelFormatError("truncated .rmodel file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ModelFormatError(".rmodel checksum mismatch")
    (count,) = struct.unpack_from("<H", data, 4)
    pos = 6
    end = len(data) - 4
    layers = []
    for _ in range(count):
        if pos + 9 > end:
            raise ModelFormatError("truncated layer header")
        n_in, n_out, act = struct.unpack_from("<IIB", data, pos)
        pos += 9
        nbytes = 4 * (n_in * n_out + n_out)
        if n_in < 1 or n_out < 1 or pos + nbytes > end:
            raise ModelFormatError("truncated layer body")
        try:
            activation = Activation(act)
        except ValueError:
            raise ModelFormatError(f"unknown activation code {act}") from None
        w = np.frombuffer(data, "<f4", n_in * n_out, pos).reshape(n_out, n_in)
        pos += 4 * n_in * n_out
        b = np.frombuffer(data, "<f4", n_out, pos)
        pos += 4 * n_out
        layers.append(Layer(w, b, activation))
    if pos != end:
        raise ModelFormatError("trailing bytes in .rmodel file")
    return DenseModel(layers)


def infer(model, x, output_shape=None):
    if x.dtype is not DType.F32 or len(x.payload) != model._in_bytes:
        raise ShapeMismatch("input", "model", x.dims, (model.n_in,))
    out = model.net.forward(x.payload)
    dims = output_shape if output_shape is not None else (model.n_out,)
    if output_shape is not None and math.prod(dims) != model.n_out:
        raise ShapeMismatch("model", "output", (model.n_out,), dims)
    return Tensor._trusted(DType.F32, dims, out)


def fft_magnitude(x):
    """Full-length DFT magnitude spectrum; output has the input's shape."""
    return Tensor._trusted(DType.F32, x.dims, kernels.fft_magnitude(_f32_payload(x), x.size))


def normalize(x):
    """Min-max scale into [0, 1]; a constant input maps to all zeros."""
    return Tensor._trusted(DType.F32, x.dims, kernels.normalize(_f32_payload(x)))


def _f32_payload(x):
    if x.dtype != DType.F32:
        return x.to_numpy().astype("<f4").tobytes()
    return x.payload


class Block(enum.IntEnum):
    FFT = 1
    NORMALIZE = 2


BLOCK_IDS = {"runicos/fft": Block.FFT, "runicos/normalize": Block.NORMALIZE}
BLOCK_SOURCES = {v: k for k, v in BLOCK_IDS.items()}
BLOCK_FUNCS = {Block.FFT: fft_magnitude, Block.NORMALIZE: normalize}
