"""Tensors and the two codecs used at the host/guest boundary."""
import enum
import math

import numpy as np

from rune import kernels


class DType(enum.IntEnum):
    F32 = 0
    U8 = 1
    I32 = 2

    @property
    def size(self):
        return _ELEMENT_SIZE[self]

    @property
    def numpy(self):
        return _NUMPY[self]


_ELEMENT_SIZE = {DType.F32: 4, DType.U8: 1, DType.I32: 4}
_NUMPY = {DType.F32: np.dtype("<f4"), DType.U8: np.dtype("u1"), DType.I32: np.dtype("<i4")}
_FROM_NUMPY = {v: k for k, v in _NUMPY.items()}


_DTYPES = tuple(DType)


class Codec(enum.IntEnum):
    FIXED = 0
    VARINT = 1


class Tensor:
    """Row-major little-endian tensor. ``payload`` holds the raw element bytes.

    Treat instances as immutable; equality is bit-exact on the payload.
    """

    __slots__ = ("dtype", "dims", "payload")

    def __init__(self, dtype, dims, payload):
        dtype = DType(dtype)
        dims = tuple(int(d) for d in dims)
        payload = bytes(payload)
        if not 1 <= len(dims) <= 255:
            raise ValueError(f"rank must be in 1..255, got {len(dims)}")
        if any(d < 1 or d > 0xFFFFFFFF for d in dims):
            raise ValueError(f"dims must be in 1..2**32-1, got {list(dims)}")
        need = dtype.size * math.prod(dims)
        if len(payload) != need:
            raise ValueError(
                f"payload is {len(payload)} bytes, dims {list(dims)} "
                f"of {dtype.name} need {need}")
        self.dtype = dtype
        self.dims = dims
        self.payload = payload

    @classmethod
    def _trusted(cls, dtype, dims, payload):
        # skips validation; only for values a codec or kernel already checked
        t = cls.__new__(cls)
        t.dtype = dtype
        t.dims = dims
        t.payload = payload
        return t

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.dtype == other.dtype and self.dims == other.dims
                and self.payload == other.payload)

    def __hash__(self):
        return hash((self.dtype, self.dims, self.payload))

    def __repr__(self):
        if len(self.payload) <= 64:
            values = self.tolist()
        else:
            values = f"<{len(self.payload)} bytes>"
        return f"Tensor({self.dtype.name}, dims={list(self.dims)}, {values})"

    @property
    def rank(self):
        return len(self.dims)

    @property
    def size(self):
        return math.prod(self.dims)

    @classmethod
    def from_array(cls, array, dims=None):
        a = np.asarray(array)
        if a.dtype.newbyteorder("<") in _FROM_NUMPY:
            dtype = _FROM_NUMPY[a.dtype.newbyteorder("<")]
        elif a.dtype == np.float64:
            dtype = DType.F32
        else:
            raise TypeError(f"unsupported array dtype {a.dtype}")
        if dims is None:
            dims = a.shape or (1,)
        payload = np.ascontiguousarray(a, dtype=dtype.numpy).tobytes()
        return cls(dtype, tuple(dims), payload)

    @classmethod
    def f32(cls, values, dims=None):
        a = np.asarray(values, dtype="<f4")
        return cls.from_array(a, dims if dims is not None else (a.shape or (1,)))

    def to_numpy(self):
        return np.frombuffer(self.payload, dtype=self.dtype.numpy).reshape(self.dims)

    def reshape(self, dims):
        return Tensor(self.dtype, tuple(dims), self.payload)

    def tolist(self):
        return self.to_numpy().ravel().tolist()


def encode_tensor(t, codec):
    if codec == Codec.FIXED:
        return kernels.encode_fixed(t.dtype, t.dims, t.payload)
    if codec == Codec.VARINT:
        return kernels.encode_varint(t.dtype, t.dims, t.payload)
    raise ValueError(f"unknown codec {codec!r}")


def decode_tensor(data, codec):
    """Inverse of :func:`encode_tensor`. Raises ``Malformed`` on bad input."""
    if type(data) is not bytes:
        data = bytes(data)
    if codec == Codec.FIXED:
        dtype, dims, payload = kernels.decode_fixed(data)
    elif codec == Codec.VARINT:
        dtype, dims, payload = kernels.decode_varint(data)
    else:
        raise ValueError(f"unknown codec {codec!r}")
    return Tensor._trusted(_DTYPES[dtype], dims, payload)
