"""The ``.rune`` container: manifest, pipeline bytecode and model blobs.

Layout (all integers little-endian)::

    "RUNE" | version u16
    | manifest length u32 | manifest
    | bytecode length u32 | bytecode
    | blob count u16 | (crc32 u32 | length u32 | bytes) * count
    | crc32 u32 over every preceding byte
"""
import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

from rune.errors import (
    BadMagic,
    BundleError,
    DanglingReference,
    DigestMismatch,
    Truncated,
    UnsupportedVersion,
)
from rune.pipeline import Block
from rune.runefile import CapabilityKind, OutputKind

MAGIC = b"RUNE"
FORMAT_VERSION = 1


def crc32(data):
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class CapabilityRequest:
    kind: CapabilityKind
    name: str
    params: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def samples(self):
        return self.params.get("samples", 1)

    @property
    def output_shape(self):
        return (self.samples, 1)


@dataclass(frozen=True)
class ModelInfo:
    name: str
    input_shape: tuple
    output_shape: tuple
    digest: int


@dataclass(frozen=True)
class Manifest:
    capabilities: tuple
    out: OutputKind
    models: tuple

    @property
    def kinds(self):
        return frozenset(c.kind for c in self.capabilities)

    def capability(self, kind):
        for c in self.capabilities:
            if c.kind == kind:
                return c
        return None


class Op(enum.IntEnum):
    READ_CAP = 0x01
    PROC = 0x02
    INFER = 0x03
    WRITE_OUT = 0x04


class Instruction(NamedTuple):
    op: Op
    arg: int = 0

    def __str__(self):
        if self.op == Op.READ_CAP:
            return f"READ_CAP {CapabilityKind(self.arg).name}"
        if self.op == Op.PROC:
            return f"PROC {Block(self.arg).name}"
        if self.op == Op.INFER:
            return f"INFER {self.arg}"
        return self.op.name


@dataclass(frozen=True)
class RuneBundle:
    format_version: int
    manifest: Manifest
    bytecode: tuple
    model_blobs: tuple  # (crc32, bytes) pairs, parallel to manifest.models
    digest: int = field(default=0, compare=False)


# -- primitive writer / reader ----------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def str(self, s):
        data = s.encode("utf-8")
        self.u16(len(data))
        self.buf += data

    def shape(self, dims):
        self.u8(len(dims))
        for d in dims:
            self.u32(d)


class _Reader:
    def __init__(self, data, pos=0, end=None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def take(self, n):
        if self.pos + n > self.end:
            raise Truncated(f"need {n} bytes at offset {self.pos}, section ends at {self.end}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self):
        return self.take(1)[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def str(self):
        try:
            return self.take(self.u16()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleError(f"bad string in manifest: {exc}") from None

    def shape(self):
        return tuple(self.u32() for _ in range(self.u8()))

    def done(self):
        return self.pos >= self.end


def _enum(cls, value, what):
    try:
        return cls(value)
    except ValueError:
        raise BundleError(f"unknown {what} code {value}") from None


# -- manifest ---------------------------------------------------------------

def encode_manifest(manifest):
    w = _Writer()
    w.u16(len(manifest.capabilities))
    for cap in manifest.capabilities:
        w.u8(cap.kind)
        w.str(cap.name)
        w.u16(len(cap.params))
        for k, v in cap.params.items():
            w.str(k)
            w.u32(v)
        w.u16(len(cap.extras))
        for k, v in cap.extras.items():
            w.str(k)
            w.str(v)
    w.u8(manifest.out)
    w.u16(len(manifest.models))
    for m in manifest.models:
        w.str(m.name)
        w.shape(m.input_shape)
        w.shape(m.output_shape)
        w.u32(m.digest)
    return bytes(w.buf)


def decode_manifest(data):
    r = _Reader(data)
    caps = []
    for _ in range(r.u16()):
        kind = _enum(CapabilityKind, r.u8(), "capability")
        name = r.str()
        params = {r.str(): r.u32() for _ in range(r.u16())}
        extras = {r.str(): r.str() for _ in range(r.u16())}
        caps.append(CapabilityRequest(kind, name, params, extras))
    out = _enum(OutputKind, r.u8(), "output")
    models = []
    for _ in range(r.u16()):
        models.append(ModelInfo(r.str(), r.shape(), r.shape(), r.u32()))
    if not r.done():
        raise BundleError("trailing bytes in manifest section")
    return Manifest(tuple(caps), out, tuple(models))


# -- bytecode ---------------------------------------------------------------

def encode_bytecode(program):
    w = _Writer()
    for ins in program:
        w.u8(ins.op)
        if ins.op in (Op.READ_CAP, Op.PROC):
            w.u8(ins.arg)
        elif ins.op == Op.INFER:
            w.u16(ins.arg)
    return bytes(w.buf)


def decode_bytecode(data):
    r = _Reader(data)
    program = []
    while not r.done():
        op = _enum(Op, r.u8(), "opcode")
        if op == Op.READ_CAP:
            arg = r.u8()
        elif op == Op.PROC:
            arg = _enum(Block, r.u8(), "block")
        elif op == Op.INFER:
            arg = r.u16()
        else:
            arg = 0
        program.append(Instruction(op, arg))
    return tuple(program)


def check_references(manifest, program, n_blobs, check_capabilities=True):
    kinds = manifest.kinds
    for i, ins in enumerate(program):
        if ins.op == Op.INFER and ins.arg >= n_blobs:
            raise DanglingReference(
                f"instruction {i} ({ins}) names model {ins.arg}, bundle has {n_blobs}")
        if check_capabilities and ins.op == Op.READ_CAP and ins.arg not in kinds:
            raise DanglingReference(
                f"instruction {i} reads capability {ins.arg} absent from the manifest")


# -- bundle -----------------------------------------------------------------

def _normalize_blobs(model_blobs):
    blobs = []
    for blob in model_blobs:
        if isinstance(blob, (bytes, bytearray, memoryview)):
            data = bytes(blob)
            blobs.append((crc32(data), data))
        else:
            digest, data = blob
            blobs.append((digest, bytes(data)))
    return blobs


def encode_bundle(manifest, bytecode, model_blobs, check_capabilities=True):
    """Serialize a bundle. ``model_blobs`` are raw bytes or ``(crc32, bytes)`` pairs.

    ``check_capabilities=False`` lets a test harness assemble bundles whose
    bytecode reads capabilities the manifest never requested; the runtime
    rejects those reads.
    """
    blobs = _normalize_blobs(model_blobs)
    program = tuple(bytecode)
    check_references(manifest, program, len(blobs), check_capabilities)
    if len(manifest.models) != len(blobs):
        raise DanglingReference(
            f"manifest lists {len(manifest.models)} models, {len(blobs)} blobs given")
    for info, (digest, data) in zip(manifest.models, blobs):
        if digest != crc32(data) or info.digest != digest:
            raise DigestMismatch(f"model {info.name!r} blob digest does not match")

    w = _Writer()
    w.buf += MAGIC
    w.u16(FORMAT_VERSION)
    body = encode_manifest(manifest)
    w.u32(len(body))
    w.buf += body
    code = encode_bytecode(program)
    w.u32(len(code))
    w.buf += code
    w.u16(len(blobs))
    for digest, data in blobs:
        w.u32(digest)
        w.u32(len(data))
        w.buf += data
    w.u32(crc32(w.buf))
    return bytes(w.buf)


def decode_bundle(data):
    data = bytes(data)
    if len(data) < len(MAGIC):
        raise Truncated(f"{len(data)} bytes is too short for a bundle")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")

    # structural walk first so a short file reports Truncated, not a bad CRC
    r = _Reader(data, 4)
    r.u16()
    manifest_raw = r.take(r.u32())
    code_raw = r.take(r.u32())
    blob_spans = []
    for _ in range(r.u16()):
        digest = r.u32()
        blob_spans.append((digest, r.take(r.u32())))
    body_end = r.pos
    stored = r.u32()
    if not r.done():
        raise DigestMismatch("trailing bytes after bundle digest")
    if crc32(data[:body_end]) != stored:
        raise DigestMismatch("bundle digest does not match contents")

    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"bundle format {version}, expected {FORMAT_VERSION}")

    manifest = decode_manifest(manifest_raw)
    program = decode_bytecode(code_raw)
    for i, (digest, blob) in enumerate(blob_spans):
        if crc32(blob) != digest:
            raise DigestMismatch(f"model blob {i} digest mismatch")
    if len(manifest.models) != len(blob_spans):
        raise DanglingReference("manifest model count differs from blob table")
    for info, (digest, _) in zip(manifest.models, blob_spans):
        if info.digest != digest:
            raise DigestMismatch(f"model {info.name!r} digest differs from blob table")
    # capability reads are policed at run time, not here
    check_references(manifest, program, len(blob_spans), check_capabilities=False)
    return RuneBundle(version, manifest, program, tuple(blob_spans), stored)


def read_bundle(path):
    with open(path, "rb") as f:
        return decode_bundle(f.read())
