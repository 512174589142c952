"""Host runtime: boots bundles, gates capabilities, runs pipeline bytecode.

Booting is two-phase. :func:`load` decodes and verifies the bundle without
touching any device resource; :func:`manifest` checks the requested
capabilities and the memory bound against the device and either makes the
instance READY or faults it for good. Only then may :func:`call` run the
bytecode. Every tensor handed from one stage to the next is encoded and
decoded with the selected codec, so stage code only ever sees bytes that
crossed the boundary.
"""
import enum
import functools
import io
import math
import random
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from rune.bundle import Op, decode_bundle
from rune.errors import (
    CapabilityDenied,
    EmptyPipeline,
    InsufficientMemory,
    NotManifested,
    PermissionViolation,
    RuntimeFault,
    StageError,
)
from rune.pipeline import BLOCK_FUNCS, BLOCK_IDS, Block, DenseModel, infer, load_rmodel
from rune.runefile import CapabilityKind, OutputKind, StageKind
from rune import kernels
from rune.tensor import Codec, DType, Tensor

_READ_CAP, _PROC, _INFER, _WRITE_OUT = (int(op) for op in
                                        (Op.READ_CAP, Op.PROC, Op.INFER, Op.WRITE_OUT))
_DTYPES = tuple(DType)

# -- capability providers ---------------------------------------------------


class CapabilityProvider:
    """Source of sensor tensors for one capability kind.

    ``read`` receives the capability request (anything with ``samples`` and
    ``params``) and returns an f32 tensor of shape ``[samples, 1]``.
    """

    kind = None

    def __init__(self):
        self.reads = 0

    def read(self, request):
        self.reads += 1
        return self._read(request.samples, request)

    def _read(self, samples, request):
        raise NotImplementedError

    def reseed(self, seed):
        pass


@functools.lru_cache(maxsize=64)
def _f32_struct(n):
    return struct.Struct(f"<{n}f")


def _column(values):
    n = len(values)
    return Tensor._trusted(DType.F32, (n, 1), _f32_struct(n).pack(*values))


class RandomProvider(CapabilityProvider):
    """Seeded uniform samples in ``[low, high)``."""

    def __init__(self, kind, seed=0, low=-1.0, high=1.0):
        super().__init__()
        self.kind = CapabilityKind(kind)
        self.low = low
        self.span = high - low
        self.seed = seed
        self._rng = random.Random()
        self.reseed(seed)

    def reseed(self, seed):
        self.seed = seed
        self._rng.seed(f"{seed}:{self.kind.name}")

    def _read(self, samples, request):
        r = self._rng.random
        low, span = self.low, self.span
        return _column([low + span * r() for _ in range(samples)])


class ConstantProvider(CapabilityProvider):
    """Repeats ``values`` cyclically to fill the requested sample count."""

    def __init__(self, kind, values):
        super().__init__()
        self.kind = CapabilityKind(kind)
        self.values = [float(v) for v in np.ravel(values)]
        if not self.values:
            raise ValueError("constant provider needs at least one value")

    def _read(self, samples, request):
        v = self.values
        return _column([v[i % len(v)] for i in range(samples)])


class FileProvider(CapabilityProvider):
    """Streams raw little-endian f32 samples from a file, wrapping at EOF."""

    def __init__(self, kind, path):
        super().__init__()
        self.kind = CapabilityKind(kind)
        self.path = path
        data = np.fromfile(path, dtype="<f4")
        if data.size == 0:
            raise ValueError(f"{path}: no samples")
        if self.kind == CapabilityKind.AUDIO:
            data = np.clip(data, -1.0, 1.0)
        self.data = data
        self.pos = 0

    def reseed(self, seed):
        self.pos = seed % self.data.size

    def _read(self, samples, request):
        idx = (self.pos + np.arange(samples)) % self.data.size
        self.pos = (self.pos + samples) % self.data.size
        chunk = self.data[idx].astype("<f4")
        return Tensor._trusted(DType.F32, (samples, 1), chunk.tobytes())


# -- device -----------------------------------------------------------------


class SerialSink:
    """``OUT serial``: one line of decimal floats per inference."""

    def __init__(self, stream=None):
        self.stream = stream if stream is not None else io.StringIO()
        self.lines = 0

    def write(self, tensor):
        if tensor.dtype is DType.F32:
            values = _f32_struct(len(tensor.payload) // 4).unpack(tensor.payload)
        else:
            values = tensor.tolist()
        self.stream.write(" ".join(["%.9g" % v for v in values]) + "\n")
        self.lines += 1


class NullStream:
    def write(self, text):
        return len(text)


@dataclass
class DeviceProfile:
    name: str
    providers: dict = field(default_factory=dict)
    memory_budget: int = 256 * 1024
    outputs: frozenset = frozenset({OutputKind.SERIAL})
    sink: SerialSink = None

    def __post_init__(self):
        if isinstance(self.providers, (list, tuple)):
            providers = {}
            for p in self.providers:
                if p.kind in providers:
                    raise ValueError(f"duplicate provider for {p.kind.name}")
                providers[p.kind] = p
            self.providers = providers
        if self.sink is None:
            self.sink = SerialSink()

    @property
    def capabilities(self):
        return frozenset(self.providers)

    def reseed(self, seed):
        for p in self.providers.values():
            p.reseed(seed)


def simulated_device(name, kinds=(CapabilityKind.AUDIO, CapabilityKind.RAND), seed=0,
                     memory_budget=256 * 1024, sink=None, rand_range=(0.0, 2 * math.pi)):
    """A device whose sensors are seeded pseudo-random generators."""
    providers = []
    for kind in kinds:
        kind = CapabilityKind[kind.upper()] if isinstance(kind, str) else CapabilityKind(kind)
        if kind == CapabilityKind.AUDIO:
            providers.append(RandomProvider(kind, seed, -1.0, 1.0))
        else:
            providers.append(RandomProvider(kind, seed, *rand_range))
    return DeviceProfile(name, providers, memory_budget, sink=sink)


# -- instance ---------------------------------------------------------------


class State(enum.Enum):
    LOADED = "LOADED"
    MANIFESTED = "MANIFESTED"
    READY = "READY"
    FAULTED = "FAULTED"


@dataclass(frozen=True)
class SagaMetrics:
    invocations: int
    total_exec_nanos: int
    last_error: str
    boot_time: float
    state: str = ""

    def to_dict(self):
        return {
            "invocations": self.invocations,
            "total_exec_nanos": self.total_exec_nanos,
            "last_error": self.last_error,
            "boot_time": self.boot_time,
            "state": self.state,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["invocations"]), int(d["total_exec_nanos"]), d.get("last_error"),
                   float(d["boot_time"]), d.get("state", ""))


def working_set(manifest, program):
    """Sum over producing instructions of the larger of their in/out tensor sizes."""
    total = 0
    cur = 0
    for ins in program:
        if ins.op == Op.READ_CAP:
            cap = manifest.capability(ins.arg)
            out = 4 * cap.samples if cap is not None else 0
        elif ins.op == Op.PROC:
            out = cur
        elif ins.op == Op.INFER:
            if ins.arg < len(manifest.models):
                out = 4 * math.prod(manifest.models[ins.arg].output_shape)
            else:
                out = 0
        else:
            continue
        total += max(cur, out)
        cur = out
    return total


class RuneInstance:
    """A booted bundle on one device. Not safe for concurrent ``call``."""

    def __init__(self, bundle, device, size):
        self.bundle = bundle
        self.device = device
        self.size = size
        self.state = State.LOADED
        self.granted = frozenset()
        self.models = [load_rmodel(blob) for _, blob in bundle.model_blobs]
        self._code = tuple((int(ins.op), int(ins.arg)) for ins in bundle.bytecode)
        self.executed_instructions = 0
        self._invocations = 0
        self._exec_nanos = 0
        self._last_error = None
        self.boot_time = time.time()
        self._lock = threading.RLock()

    # phase one
    def manifest(self):
        with self._lock:
            if self.state != State.LOADED:
                raise RuntimeFault(f"manifest already ran (state {self.state.value})")
            m = self.bundle.manifest
            try:
                for cap in m.capabilities:
                    if cap.kind not in self.device.providers:
                        raise CapabilityDenied(cap.kind)
                if m.out not in self.device.outputs:
                    raise CapabilityDenied(m.out)
                need = self.size + working_set(m, self.bundle.bytecode)
                if need > self.device.memory_budget:
                    raise InsufficientMemory(need, self.device.memory_budget)
            except RuntimeFault as exc:
                self._fault(exc)
                raise
            self.state = State.MANIFESTED
            self.granted = m.kinds & self.device.capabilities
            self.state = State.READY
            return m

    # phase two
    def call(self, codec=Codec.FIXED):
        with self._lock:
            if self.state != State.READY:
                raise NotManifested(f"call refused: instance is {self.state.value}")
            self._invocations += 1
            start = time.perf_counter_ns()
            try:
                return self._execute(codec)
            except Exception as exc:
                self._fault(exc)
                raise
            finally:
                self._exec_nanos += time.perf_counter_ns() - start

    def call_many(self, n, codec=Codec.FIXED):
        """``n`` consecutive calls; returns the last output."""
        out = None
        call = self.call
        for _ in range(n):
            out = call(codec)
        return out

    def _execute(self, codec):
        manifest = self.bundle.manifest
        providers = self.device.providers
        granted = self.granted
        models = self.models
        if codec == Codec.FIXED:
            enc, dec = kernels.encode_fixed, kernels.decode_fixed
        else:
            enc, dec = kernels.encode_varint, kernels.decode_varint
        trusted = Tensor._trusted
        cur = None
        executed = 0
        try:
            for op, arg in self._code:
                executed += 1
                if op == _READ_CAP:
                    if arg not in granted:
                        raise PermissionViolation(_kind_name(arg))
                    cur = providers[arg].read(manifest.capability(arg))
                elif op == _INFER:
                    cur = infer(models[arg], _require(cur, op), manifest.models[arg].output_shape)
                elif op == _PROC:
                    cur = BLOCK_FUNCS[arg](_require(cur, op))
                elif op == _WRITE_OUT:
                    self.device.sink.write(_require(cur, op))
                    continue
                else:
                    raise StageError(f"unknown opcode {op}")
                # host/guest boundary: the next stage sees only decoded bytes
                dtype, dims, payload = dec(enc(cur.dtype, cur.dims, cur.payload))
                cur = trusted(_DTYPES[dtype], dims, payload)
        finally:
            self.executed_instructions += executed
        if cur is None:
            raise EmptyPipeline("bytecode produced no tensor")
        return cur

    def _fault(self, exc):
        self.state = State.FAULTED
        self._last_error = f"{type(exc).__name__}: {exc}"

    def reseed(self, seed):
        with self._lock:
            self.device.reseed(seed)

    def health(self):
        with self._lock:
            return SagaMetrics(self._invocations, self._exec_nanos, self._last_error,
                               self.boot_time, self.state.value)


def _kind_name(code):
    try:
        return CapabilityKind(code)
    except ValueError:
        return code


def _require(cur, op):
    if cur is None:
        raise StageError(f"{Op(op).name} has no input tensor")
    return cur


def load(bundle_bytes, device):
    """Decode and verify a bundle. No capability is touched."""
    bundle = decode_bundle(bundle_bytes)
    return RuneInstance(bundle, device, len(bundle_bytes))


def manifest(instance):
    return instance.manifest()


def call(instance, codec=Codec.FIXED):
    return instance.call(codec)


def health(instance):
    return instance.health()


# -- native baseline --------------------------------------------------------


def compile_native(graph, models, providers, sink=None):
    """Closure running ``graph`` with no boundary serialization."""
    if not graph.stages:
        raise EmptyPipeline("pipeline has no stages")
    if isinstance(providers, DeviceProfile):
        sink = sink if sink is not None else providers.sink
        providers = providers.providers
    if isinstance(models, DenseModel):
        names = [s.name for s in graph.stages if s.kind == StageKind.MODEL]
        models = {name: models for name in names}
    steps = []
    for stage in graph.stages:
        decl = stage.decl
        if stage.kind == StageKind.CAPABILITY:
            provider = providers[decl.kind]
            steps.append(_bind_read(provider, decl))
        elif stage.kind == StageKind.PROC_BLOCK:
            steps.append(BLOCK_FUNCS[Block(BLOCK_IDS[decl.source])])
        else:
            steps.append(_bind_infer(models[stage.name], stage.output_shape))
    write = sink.write if sink is not None else None

    def run():
        cur = steps[0](None)
        for step in steps[1:]:
            cur = step(cur)
        if write is not None:
            write(cur)
        return cur

    return run


def _bind_read(provider, decl):
    def read(_):
        return provider.read(decl)
    return read


def _bind_infer(model, output_shape):
    def step(x):
        return infer(model, x, output_shape)
    return step


def run_native(graph, models, providers, sink=None):
    return compile_native(graph, models, providers, sink)()
