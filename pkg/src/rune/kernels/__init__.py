"""Hot kernels: tensor codecs, FFT magnitude, normalize, dense forward pass.

The compiled ``_core`` extension is used when it was built; otherwise the
pure-Python ``_fallback`` module is used. Set ``RUNE_PURE_PYTHON=1`` to force
the fallback.
"""
import importlib
import os

from rune.kernels import _fallback

BACKENDS = ("cython", "python")


def load_backend(name):
    if name == "python":
        return _fallback
    if name == "cython":
        return importlib.import_module("rune.kernels._core")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    found = []
    for name in BACKENDS:
        try:
            load_backend(name)
        except ImportError:
            continue
        found.append(name)
    return found


def _select():
    if os.environ.get("RUNE_PURE_PYTHON", "") not in ("", "0"):
        return "python", _fallback
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _fallback


BACKEND, _impl = _select()

encode_uvarint = _impl.encode_uvarint
decode_uvarint = _impl.decode_uvarint
encode_fixed = _impl.encode_fixed
decode_fixed = _impl.decode_fixed
encode_varint = _impl.encode_varint
decode_varint = _impl.decode_varint
fft_magnitude = _impl.fft_magnitude
normalize = _impl.normalize
dense_forward = _impl.dense_forward
DenseNet = _impl.DenseNet
