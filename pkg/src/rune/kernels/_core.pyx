# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Mirrors ``_fallback`` function for function."""
from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_FromStringAndSize, PyBytes_GET_SIZE
from libc.math cimport cos, sin, sqrt, M_PI, tanhf
from libc.stdint cimport uint8_t, uint32_t, uint64_t
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy

from rune.errors import Malformed

ELEMENT_SIZE = (4, 1, 4)
LINEAR, RELU, TANH = 0, 1, 2
MAX_RANK = 255
VARINT_MAX_BYTES = 5

cdef int _ELSIZE[3]
_ELSIZE[0] = 4
_ELSIZE[1] = 1
_ELSIZE[2] = 4

cdef enum:
    TAG_DTYPE = 0x08
    TAG_DIMS = 0x12
    TAG_PAYLOAD = 0x1A


def element_size(int dtype):
    return _ELSIZE[dtype]


# -- varints ----------------------------------------------------------------

cdef inline Py_ssize_t _put_varint(uint8_t* out, uint32_t value) noexcept nogil:
    cdef Py_ssize_t i = 0
    while value > 0x7F:
        out[i] = <uint8_t>((value & 0x7F) | 0x80)
        value >>= 7
        i += 1
    out[i] = <uint8_t>value
    return i + 1


cdef inline Py_ssize_t _varint_len(uint32_t value) noexcept nogil:
    cdef Py_ssize_t i = 1
    while value > 0x7F:
        value >>= 7
        i += 1
    return i


cdef Py_ssize_t _get_varint(const uint8_t* buf, Py_ssize_t n, Py_ssize_t pos,
                            uint32_t* value) except -1:
    cdef uint64_t result = 0
    cdef int shift = 0
    cdef Py_ssize_t start = pos
    cdef uint8_t b
    while True:
        if pos >= n:
            raise Malformed(pos, "truncated varint")
        if pos - start >= VARINT_MAX_BYTES:
            raise Malformed(start, "varint longer than 5 bytes")
        b = buf[pos]
        pos += 1
        result |= (<uint64_t>(b & 0x7F)) << shift
        if not (b & 0x80):
            break
        shift += 7
    if result > 0xFFFFFFFFu:
        raise Malformed(start, "varint exceeds u32")
    value[0] = <uint32_t>result
    return pos


def encode_uvarint(value):
    if value < 0 or value > 0xFFFFFFFF:
        raise ValueError(f"varint out of u32 range: {value}")
    cdef uint8_t tmp[5]
    cdef Py_ssize_t k = _put_varint(tmp, <uint32_t>value)
    return PyBytes_FromStringAndSize(<char*>tmp, k)


def decode_uvarint(const uint8_t[:] buf, Py_ssize_t pos):
    cdef uint32_t value
    cdef Py_ssize_t n = buf.shape[0]
    if n == 0:
        raise Malformed(pos, "truncated varint")
    pos = _get_varint(&buf[0], n, pos, &value)
    return value, pos


# -- tensor codecs ----------------------------------------------------------

cdef Py_ssize_t _payload_size(int dtype, dims, Py_ssize_t offset,
                              Py_ssize_t available) except -1:
    cdef uint64_t size = _ELSIZE[dtype]
    cdef uint64_t d
    for dd in dims:
        d = dd
        size *= d
        if size > <uint64_t>available:
            raise Malformed(offset + available, "payload shorter than dims imply")
    return <Py_ssize_t>size


def encode_fixed(int dtype, dims, bytes payload):
    cdef Py_ssize_t rank = len(dims)
    cdef Py_ssize_t plen = PyBytes_GET_SIZE(payload)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 2 + 4 * rank + plen)
    cdef uint8_t* p = <uint8_t*>PyBytes_AS_STRING(out)
    cdef uint32_t d
    cdef Py_ssize_t i = 0
    p[0] = <uint8_t>dtype
    p[1] = <uint8_t>rank
    for dd in dims:
        d = dd
        p[2 + 4 * i] = d & 0xFF
        p[3 + 4 * i] = (d >> 8) & 0xFF
        p[4 + 4 * i] = (d >> 16) & 0xFF
        p[5 + 4 * i] = (d >> 24) & 0xFF
        i += 1
    memcpy(p + 2 + 4 * rank, PyBytes_AS_STRING(payload), plen)
    return out


def decode_fixed(bytes buf):
    cdef Py_ssize_t n = PyBytes_GET_SIZE(buf)
    cdef const uint8_t* p = <const uint8_t*>PyBytes_AS_STRING(buf)
    cdef int dtype, rank, i
    cdef uint32_t d
    if n < 2:
        raise Malformed(n, "missing header")
    dtype = p[0]
    if dtype >= 3:
        raise Malformed(0, "unknown dtype")
    rank = p[1]
    if rank == 0:
        raise Malformed(1, "rank must be at least 1")
    cdef Py_ssize_t end = 2 + 4 * rank
    if n < end:
        raise Malformed(n, "truncated dims")
    dims = []
    for i in range(rank):
        d = (<uint32_t>p[2 + 4 * i] | (<uint32_t>p[3 + 4 * i] << 8)
             | (<uint32_t>p[4 + 4 * i] << 16) | (<uint32_t>p[5 + 4 * i] << 24))
        if d == 0:
            raise Malformed(2 + 4 * i, "zero dimension")
        dims.append(d)
    cdef Py_ssize_t size = _payload_size(dtype, dims, end, n - end)
    if n - end != size:
        raise Malformed(end + size, "trailing bytes after payload")
    return dtype, tuple(dims), PyBytes_FromStringAndSize(<const char*>(p + end), size)


def encode_varint(int dtype, dims, bytes payload):
    cdef Py_ssize_t plen = PyBytes_GET_SIZE(payload)
    cdef Py_ssize_t dims_len = 0
    cdef uint32_t d
    for dd in dims:
        d = dd
        dims_len += _varint_len(d)
    cdef Py_ssize_t total = (1 + _varint_len(dtype) + 1 + _varint_len(<uint32_t>dims_len)
                             + dims_len + 1 + _varint_len(<uint32_t>plen) + plen)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, total)
    cdef uint8_t* p = <uint8_t*>PyBytes_AS_STRING(out)
    cdef Py_ssize_t k = 0
    p[k] = TAG_DTYPE
    k += 1
    k += _put_varint(p + k, <uint32_t>dtype)
    p[k] = TAG_DIMS
    k += 1
    k += _put_varint(p + k, <uint32_t>dims_len)
    for dd in dims:
        d = dd
        k += _put_varint(p + k, d)
    p[k] = TAG_PAYLOAD
    k += 1
    k += _put_varint(p + k, <uint32_t>plen)
    memcpy(p + k, PyBytes_AS_STRING(payload), plen)
    return out


cdef inline Py_ssize_t _expect_tag(const uint8_t* p, Py_ssize_t n, Py_ssize_t pos,
                                   uint8_t tag) except -1:
    if pos >= n:
        raise Malformed(pos, "truncated record")
    if p[pos] != tag:
        raise Malformed(pos, f"unexpected tag 0x{p[pos]:02x}")
    return pos + 1


def decode_varint(bytes buf):
    cdef Py_ssize_t n = PyBytes_GET_SIZE(buf)
    cdef const uint8_t* p = <const uint8_t*>PyBytes_AS_STRING(buf)
    cdef uint32_t value
    cdef Py_ssize_t pos, end, start
    cdef int dtype

    pos = _expect_tag(p, n, 0, TAG_DTYPE)
    pos = _get_varint(p, n, pos, &value)
    if value >= 3:
        raise Malformed(pos - 1, "unknown dtype")
    dtype = value

    pos = _expect_tag(p, n, pos, TAG_DIMS)
    pos = _get_varint(p, n, pos, &value)
    end = pos + value
    if end > n:
        raise Malformed(n, "truncated dims record")
    dims = []
    while pos < end:
        start = pos
        pos = _get_varint(p, end, pos, &value)
        if value == 0:
            raise Malformed(start, "zero dimension")
        dims.append(value)
    if len(dims) == 0 or len(dims) > MAX_RANK:
        raise Malformed(end, "rank out of range")

    pos = _expect_tag(p, n, pos, TAG_PAYLOAD)
    pos = _get_varint(p, n, pos, &value)
    if pos + value > n:
        raise Malformed(n, "truncated payload")
    if pos + value != n:
        raise Malformed(pos + value, "trailing bytes after payload")
    cdef Py_ssize_t size = _payload_size(dtype, dims, pos, value)
    if size != value:
        raise Malformed(pos, "payload length disagrees with dims")
    return dtype, tuple(dims), PyBytes_FromStringAndSize(<const char*>(p + pos), size)


# -- numerics ---------------------------------------------------------------

cdef void _radix2(double* re, double* im, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, k, bit, size, half, start
    cdef double tr, ti, wr, wi, ang, ur, ui
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        if i < j:
            tr = re[i]; re[i] = re[j]; re[j] = tr
            ti = im[i]; im[i] = im[j]; im[j] = ti
    size = 2
    while size <= n:
        half = size // 2
        for k in range(half):
            ang = 2.0 * M_PI * k / size
            wr = cos(ang)
            wi = -sin(ang)
            start = k
            while start < n:
                j = start + half
                tr = re[j] * wr - im[j] * wi
                ti = re[j] * wi + im[j] * wr
                ur = re[start]
                ui = im[start]
                re[start] = ur + tr
                im[start] = ui + ti
                re[j] = ur - tr
                im[j] = ui - ti
                start += size
        size *= 2


def fft_magnitude(bytes payload, Py_ssize_t n):
    if PyBytes_GET_SIZE(payload) != 4 * n:
        raise ValueError(f"expected {n} samples, got {PyBytes_GET_SIZE(payload) // 4}")
    cdef const float* x = <const float*>PyBytes_AS_STRING(payload)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 4 * n)
    cdef float* y = <float*>PyBytes_AS_STRING(out)
    cdef double* re = <double*>malloc(2 * n * sizeof(double))
    cdef double* im
    cdef double* ct
    cdef double* st
    cdef Py_ssize_t k, t, idx
    cdef double sr, si, ang
    if re == NULL:
        raise MemoryError()
    im = re + n
    try:
        if n & (n - 1) == 0:
            for t in range(n):
                re[t] = x[t]
                im[t] = 0.0
            _radix2(re, im, n)
        else:
            ct = <double*>malloc(2 * n * sizeof(double))
            if ct == NULL:
                raise MemoryError()
            st = ct + n
            for t in range(n):
                ang = 2.0 * M_PI * t / n
                ct[t] = cos(ang)
                st[t] = -sin(ang)
            for k in range(n):
                sr = 0.0
                si = 0.0
                idx = 0
                for t in range(n):
                    sr += ct[idx] * x[t]
                    si += st[idx] * x[t]
                    idx += k
                    if idx >= n:
                        idx -= n
                re[k] = sr
                im[k] = si
            free(ct)
        for k in range(n):
            y[k] = <float>sqrt(re[k] * re[k] + im[k] * im[k])
    finally:
        free(re)
    return out


def normalize(bytes payload):
    cdef Py_ssize_t n = PyBytes_GET_SIZE(payload) // 4
    cdef const float* x = <const float*>PyBytes_AS_STRING(payload)
    cdef bytes out = PyBytes_FromStringAndSize(NULL, 4 * n)
    cdef float* y = <float*>PyBytes_AS_STRING(out)
    cdef float lo, hi, span
    cdef Py_ssize_t i
    if n == 0:
        return b""
    lo = x[0]
    hi = x[0]
    for i in range(1, n):
        if x[i] < lo:
            lo = x[i]
        if x[i] > hi:
            hi = x[i]
    if hi == lo:
        for i in range(n):
            y[i] = 0.0
        return out
    span = hi - lo
    for i in range(n):
        y[i] = (x[i] - lo) / span
    return out


def dense_forward(layers, bytes payload):
    return DenseNet(layers).forward(payload)


cdef class DenseNet:
    """Dense stack with weights copied once into C arrays."""
    cdef int n_layers
    cdef int* n_in
    cdef int* n_out
    cdef int* act
    cdef float** w
    cdef float** b
    cdef float* scratch
    cdef int width
    cdef readonly int inputs, outputs

    def __cinit__(self, layers):
        layers = list(layers)
        cdef int k = len(layers)
        cdef int i
        self.n_layers = k
        self.n_in = <int*>malloc(k * sizeof(int))
        self.n_out = <int*>malloc(k * sizeof(int))
        self.act = <int*>malloc(k * sizeof(int))
        self.w = <float**>malloc(k * sizeof(float*))
        self.b = <float**>malloc(k * sizeof(float*))
        if not (self.n_in and self.n_out and self.act and self.w and self.b):
            raise MemoryError()
        for i in range(k):
            self.w[i] = NULL
            self.b[i] = NULL
        self.width = 1
        for i, (n_in, n_out, act, weights, bias) in enumerate(layers):
            if len(weights) != 4 * n_in * n_out or len(bias) != 4 * n_out:
                raise ValueError("layer buffers do not match dims")
            if i > 0 and n_in != self.n_out[i - 1]:
                raise ValueError("layer dims do not chain")
            self.n_in[i] = n_in
            self.n_out[i] = n_out
            self.act[i] = act
            self.w[i] = <float*>malloc(4 * n_in * n_out)
            self.b[i] = <float*>malloc(4 * n_out)
            if self.w[i] == NULL or self.b[i] == NULL:
                raise MemoryError()
            memcpy(self.w[i], PyBytes_AS_STRING(weights), 4 * n_in * n_out)
            memcpy(self.b[i], PyBytes_AS_STRING(bias), 4 * n_out)
            if n_in > self.width:
                self.width = n_in
            if n_out > self.width:
                self.width = n_out
        self.scratch = <float*>malloc(2 * self.width * sizeof(float))
        if self.scratch == NULL:
            raise MemoryError()
        self.inputs = self.n_in[0]
        self.outputs = self.n_out[k - 1]

    def __dealloc__(self):
        cdef int i
        if self.w != NULL:
            for i in range(self.n_layers):
                free(self.w[i])
                free(self.b[i])
        free(self.w)
        free(self.b)
        free(self.n_in)
        free(self.n_out)
        free(self.act)
        free(self.scratch)

    def forward(self, bytes payload):
        if PyBytes_GET_SIZE(payload) != 4 * self.inputs:
            raise ValueError(f"expected {self.inputs} inputs, got {PyBytes_GET_SIZE(payload) // 4}")
        cdef const float* x = <const float*>PyBytes_AS_STRING(payload)
        cdef float* a = self.scratch
        cdef float* c = self.scratch + self.width
        cdef float* tmp
        cdef const float* w
        cdef float acc
        cdef int layer, o, i, n_in, n_out, act
        cdef bytes out = PyBytes_FromStringAndSize(NULL, 4 * self.outputs)
        memcpy(a, x, 4 * self.inputs)
        for layer in range(self.n_layers):
            n_in = self.n_in[layer]
            n_out = self.n_out[layer]
            act = self.act[layer]
            for o in range(n_out):
                w = self.w[layer] + o * n_in
                acc = self.b[layer][o]
                for i in range(n_in):
                    acc = acc + w[i] * a[i]
                if act == 1:
                    if acc < 0.0:
                        acc = 0.0
                elif act == 2:
                    acc = tanhf(acc)
                c[o] = acc
            tmp = a
            a = c
            c = tmp
        memcpy(PyBytes_AS_STRING(out), a, 4 * self.outputs)
        return out
