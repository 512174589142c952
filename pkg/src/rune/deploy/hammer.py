"""``hmr``: list targets, cast runes onto them, query health, trigger inference."""
import enum
import json
import os
import signal
import sys
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import click

from rune import errors
from rune.bundle import decode_bundle
from rune.deploy import transport, wire
from rune.deploy.transport import TransportType
from rune.deploy.wire import MsgType
from rune.errors import (
    CapabilityDenied,
    DeployError,
    NoRuneDeployed,
    ProtocolError,
    ProviderMismatch,
    RemoteError,
    RuneError,
    TargetUnreachable,
    TransferCorrupt,
)
from rune.runefile import CapabilityKind
from rune.runicos import SagaMetrics, simulated_device
from rune.tensor import Codec, decode_tensor

PROVIDER_PREFIX = "runicos:"
REGISTRY_ENV = "HMR_REGISTRY"
DEFAULT_REGISTRY = "~/.config/hammer/targets"


@dataclass(frozen=True)
class Target:
    locator: str
    transport_type: TransportType
    name: str
    available: bool = False


class Stage(enum.Enum):
    VERIFY_PROVIDER = "Verifying provider"
    UPLOAD = "Uploading rune"
    VERIFY_RUNE = "Verifying rune"
    CAPABILITY_CHECK = "Capability"


class Progress(enum.Enum):
    NOT_STARTED = "NOT_STARTED"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass
class CastSession:
    target: Target
    stages: dict = field(default_factory=lambda: {s: Progress.NOT_STARTED for s in Stage})
    outcome: str = None
    fqdn: str = None

    @property
    def ok(self):
        return all(p == Progress.DONE for p in self.stages.values())

    def _advance(self, stage, progress=Progress.DONE):
        order = list(Stage)
        earlier = order[:order.index(stage)]
        if any(self.stages[s] != Progress.DONE for s in earlier):
            raise AssertionError(f"{stage.name} started before its predecessors completed")
        self.stages[stage] = progress


# -- registry ---------------------------------------------------------------

def parse_registry(text):
    """Targets from ``locator type name`` lines; ``#`` starts a comment."""
    targets = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise ValueError(f"registry line {lineno}: expected 'locator type name'")
        locator, type_name, name = parts
        try:
            declared = TransportType(type_name.upper())
        except ValueError:
            raise ValueError(f"registry line {lineno}: unknown transport {type_name!r}") from None
        try:
            actual, _ = transport.parse_locator(locator)
        except ValueError as exc:
            raise ValueError(f"registry line {lineno}: {exc}") from None
        if actual != declared:
            raise ValueError(f"registry line {lineno}: {locator} is not a {declared.value} locator")
        if locator in seen:
            raise ValueError(f"registry line {lineno}: duplicate locator {locator}")
        seen.add(locator)
        targets.append(Target(locator, declared, name))
    return targets


def load_registry(path=None):
    path = path or os.environ.get(REGISTRY_ENV) or os.path.expanduser(DEFAULT_REGISTRY)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        return []
    return parse_registry(text)


def resolve_target(target_id, registry=()):
    """A registry entry by locator or unique name, or a bare locator."""
    for t in registry:
        if t.locator == target_id:
            return t
    named = [t for t in registry if t.name == target_id]
    if len(named) == 1:
        return named[0]
    if len(named) > 1:
        raise click.UsageError(f"target name {target_id!r} is ambiguous; use its locator")
    try:
        kind, _ = transport.parse_locator(target_id)
    except ValueError:
        raise TargetUnreachable(f"unknown target {target_id!r}") from None
    return Target(target_id, kind, "")


def _locator(target):
    return target.locator if isinstance(target, Target) else target


# -- requests ---------------------------------------------------------------

_REMOTE_ERRORS = {
    "TransferCorrupt": TransferCorrupt,
    "FrameCorrupt": TransferCorrupt,
    "NoRuneDeployed": NoRuneDeployed,
    "ProtocolError": ProtocolError,
}


def remote_error(payload):
    try:
        body = wire.unpack_json(payload)
    except ProtocolError:
        return RemoteError("device sent an unreadable ERROR frame")
    code = body.get("code", "")
    message = body.get("message", "")
    if code == "CapabilityDenied":
        kind = body.get("kind")
        try:
            return CapabilityDenied(CapabilityKind[kind])
        except KeyError:
            return CapabilityDenied(kind)
    cls = _REMOTE_ERRORS.get(code)
    if cls is None:
        known = getattr(errors, code, None)
        if isinstance(known, type) and issubclass(known, RuneError):
            try:
                return known(message)
            except TypeError:
                pass
        return RemoteError(f"{code}: {message}" if code else message)
    return cls(message)


class Connection:
    def __init__(self, target, timeout=5.0):
        self.locator = _locator(target)
        self.stream = transport.connect(self.locator, timeout)

    def send(self, msg_type, payload=b""):
        self.stream.send(wire.encode_frame(msg_type, payload))

    def recv(self, expect):
        try:
            msg_type, payload = wire.read_frame(self.stream)
        except ConnectionError as exc:
            raise TargetUnreachable(f"{self.locator}: {exc}") from None
        if msg_type == MsgType.ERROR:
            raise remote_error(payload)
        if msg_type != expect:
            raise ProtocolError(f"expected {expect.name}, device sent {msg_type.name}")
        return payload

    def request(self, msg_type, payload, expect):
        try:
            self.send(msg_type, payload)
        except OSError as exc:
            # a device that hung up may have left its reason in an ERROR frame
            try:
                self.recv(expect)
            except (DeployError, OSError) as reason:
                if not isinstance(reason, (TargetUnreachable, OSError)):
                    raise reason from None
            raise TargetUnreachable(f"{self.locator}: {exc}") from None
        return self.recv(expect)

    def close(self):
        self.stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def ping(target, timeout=1.0):
    """Device name if it answers PING within ``timeout``, else None."""
    try:
        with Connection(target, timeout) as conn:
            return conn.request(MsgType.PING, b"", MsgType.PONG).decode("utf-8", "replace")
    except (DeployError, OSError):
        return None


def targets_ls(registry, timeout=1.0):
    """Probe every registered target concurrently."""
    registry = list(registry)
    if not registry:
        return []
    with ThreadPoolExecutor(max_workers=min(16, len(registry))) as pool:
        names = list(pool.map(lambda t: ping(t, timeout), registry))
    return [Target(t.locator, t.transport_type, t.name, n is not None)
            for t, n in zip(registry, names)]


def render_targets(targets):
    header = ("Target", "Type", "Name", "Available")
    rows = [(t.locator, t.transport_type.value, t.name, str(t.available)) for t in targets]
    widths = [max([len(header[i])] + [len(r[i]) for r in rows]) + 2 for i in range(4)]
    lines = ["".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append(" ".join("-" * (w - 1) for w in widths))
    for r in rows:
        lines.append("".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cast(target, rune_path, echo=None, tamper=None, timeout=5.0, chunk_size=wire.CHUNK_SIZE):
    """Deploy a bundle. ``tamper(frames) -> frames`` may rewrite the encoded UPLOAD frames."""
    echo = echo or (lambda msg: None)
    if not 0 < chunk_size <= wire.CHUNK_SIZE:
        raise ValueError(f"chunk size must be in 1..{wire.CHUNK_SIZE}")
    data = Path(rune_path).read_bytes()
    bundle = decode_bundle(data)  # refuse locally before touching the network
    target = target if isinstance(target, Target) else Target(target, transport.parse_locator(
        target)[0], "")
    session = CastSession(target)
    echo(f"Deploying {rune_path} to target {target.locator}")
    stage = Stage.VERIFY_PROVIDER
    try:
        with Connection(target, timeout) as conn:
            ident = wire.unpack_json(conn.request(MsgType.HELLO, b"", MsgType.HELLO_ACK))
            fqdn = str(ident.get("fqdn", ""))
            session.fqdn = fqdn
            if not fqdn.startswith(PROVIDER_PREFIX):
                raise ProviderMismatch(f"provider {fqdn!r} is not a RunicOS device")
            if ident.get("protocol") != wire.PROTOCOL_VERSION:
                raise ProviderMismatch(f"device speaks protocol {ident.get('protocol')}")
            session._advance(stage)
            echo("Verifying provider: 100%")
            echo(f"Provider with fqdn={fqdn} found")

            stage = Stage.UPLOAD
            conn.request(MsgType.CAST_BEGIN, wire.BEGIN.pack(len(data), zlib.crc32(data)),
                         MsgType.CAST_ACK)
            frames = [wire.encode_frame(MsgType.CAST_CHUNK, wire.pack_chunk(i, data[o:o + chunk_size]))
                      for i, o in enumerate(range(0, len(data), chunk_size))]
            if tamper is not None:
                frames = tamper(frames)
            _upload(conn, frames, echo)
            session._advance(stage)

            stage = Stage.VERIFY_RUNE
            conn.request(MsgType.CAST_END, b"", MsgType.CAST_ACK)
            session._advance(stage)
            echo("Verifying rune: 100%")

            stage = Stage.CAPABILITY_CHECK
            conn.request(MsgType.CAST_COMMIT, b"", MsgType.CAST_ACK)
            session._advance(stage)
            for cap in bundle.manifest.capabilities:
                echo(f"Capability: {cap.kind.name} OK: 100%")
    except (RuneError, OSError) as exc:
        if isinstance(exc, OSError):
            exc = TargetUnreachable(f"{target.locator}: {exc}")
        if stage in (Stage.UPLOAD, Stage.VERIFY_RUNE) \
                and isinstance(exc, (TargetUnreachable, ProtocolError)) \
                and not isinstance(exc, TransferCorrupt):
            # the device hung up or answered garbage mid-transfer: it rejected the bytes
            exc = TransferCorrupt(f"upload rejected: {exc}")
        session.stages[stage] = Progress.FAILED
        session.outcome = f"{type(exc).__name__}: {exc}"
        if stage == Stage.CAPABILITY_CHECK and isinstance(exc, CapabilityDenied):
            echo(f"Capability: {getattr(exc.kind, 'name', exc.kind)} DENIED")
        exc.session = session
        raise exc
    session.outcome = "READY"
    return session


def _upload(conn, frames, echo):
    total = len(frames)
    last = -1
    try:
        for i, frame in enumerate(frames, 1):
            conn.stream.send(frame)
            pct = 100 * i // total
            if pct // 25 != last // 25 and pct < 100:
                echo(f"Uploading rune: {pct}%")
                last = pct
    except OSError:
        # the device closes the link when it rejects a frame; fetch its reason
        try:
            conn.recv(MsgType.CAST_ACK)
        except DeployError:
            raise
        except OSError as exc:
            raise TransferCorrupt(f"device dropped the upload: {exc}") from None
        raise TransferCorrupt("device dropped the upload") from None
    echo("Uploading rune: 100%")


def health_query(target, timeout=5.0):
    with Connection(target, timeout) as conn:
        payload = conn.request(MsgType.HEALTH, b"", MsgType.HEALTH_RESULT)
    return SagaMetrics.from_dict(wire.unpack_json(payload))


def invoke(target, seed=None, codec=Codec.FIXED, timeout=5.0):
    """Run one inference on the device; returns the output tensor."""
    body = {"codec": Codec(codec).name, "seed": seed}
    with Connection(target, timeout) as conn:
        payload = conn.request(MsgType.INVOKE, wire.pack_json(body), MsgType.INVOKE_RESULT)
    return decode_tensor(payload, Codec.FIXED)


def format_output(tensor):
    return " ".join("%.9g" % v for v in tensor.tolist())


# -- CLI --------------------------------------------------------------------

registry_option = click.option(
    "--registry", type=click.Path(dir_okay=False),
    help=f"Target registry file (default: ${REGISTRY_ENV} or {DEFAULT_REGISTRY}).")


def _registry(path):
    try:
        return load_registry(path)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from None


def _fail(exc):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(1)


@click.group()
def cli():
    """Deploy and monitor runes on edge devices."""


@cli.group()
def targets():
    """Discover targets and deploy onto them."""


@targets.command("ls")
@registry_option
@click.option("--timeout", default=1.0, show_default=True, help="PING timeout in seconds.")
def targets_ls_cmd(registry, timeout):
    """List registered targets and whether they answer."""
    click.echo(render_targets(targets_ls(_registry(registry), timeout)), nl=False)


@targets.command("cast")
@click.option("-t", "--target", "target_id", required=True, help="Locator or name.")
@click.argument("rune_path", metavar="RUNE", type=click.Path(dir_okay=False, exists=True))
@registry_option
@click.option("--timeout", default=5.0, show_default=True)
def targets_cast_cmd(target_id, rune_path, registry, timeout):
    """Deploy RUNE onto a target."""
    try:
        cast(resolve_target(target_id, _registry(registry)), rune_path, click.echo,
             timeout=timeout)
    except RuneError as exc:
        _fail(exc)


@cli.command("health")
@click.option("-t", "--target", "target_id", required=True)
@registry_option
def health_cmd(target_id, registry):
    """Print the SagaMetrics of the deployed rune."""
    try:
        metrics = health_query(resolve_target(target_id, _registry(registry)))
    except RuneError as exc:
        _fail(exc)
    click.echo(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))


@cli.command("invoke")
@click.option("-t", "--target", "target_id", required=True)
@click.option("--seed", type=int, default=None, help="Reseed the device providers first.")
@click.option("--codec", type=click.Choice([c.name for c in Codec]), default="FIXED")
@registry_option
def invoke_cmd(target_id, seed, codec, registry):
    """Run one inference and print its output values."""
    try:
        out = invoke(resolve_target(target_id, _registry(registry)), seed, Codec[codec])
    except RuneError as exc:
        _fail(exc)
    click.echo(format_output(out))


@cli.command("daemon")
@click.option("--name", default="RunicOS Simulator", show_default=True)
@click.option("--listen", "locator", default="tcp://127.0.0.1:0", show_default=True)
@click.option("--capabilities", default="AUDIO,RAND", show_default=True)
@click.option("--memory", default=256 * 1024, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--fqdn", default="runicos:sim", show_default=True)
def daemon_cmd(name, locator, capabilities, memory, seed, fqdn):
    """Run a simulated device until interrupted."""
    from rune.deploy.daemon import DeviceDaemon

    try:
        kinds = [CapabilityKind[k.strip().upper()] for k in capabilities.split(",") if k.strip()]
    except KeyError as exc:
        raise click.BadParameter(f"unknown capability {exc.args[0]}") from None
    profile = simulated_device(name, kinds, seed=seed, memory_budget=memory)
    try:
        daemon = DeviceDaemon(profile, locator, fqdn=fqdn)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"cannot listen on {locator}: {exc}") from None
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    daemon.start()
    click.echo(f"listening on {daemon.locator}")
    sys.stdout.flush()
    try:
        stop.wait()
    except KeyboardInterrupt:
        pass
    daemon.stop()


def main(argv=None):
    from rune.forge import run_cli

    sys.exit(run_cli(cli, argv))


if __name__ == "__main__":
    main()
