import itertools
import random
import socket
import threading
import time

import pytest

from rune import runicos
from rune.deploy import hammer, transport, wire
from rune.deploy.daemon import DeviceDaemon
from rune.deploy.hammer import Progress, Stage, Target, TransportType
from rune.deploy.wire import MsgType
from rune.errors import (
    CapabilityDenied,
    NoRuneDeployed,
    ProtocolError,
    ProviderMismatch,
    TargetUnreachable,
    TransferCorrupt,
)
from rune.forge import run_cli
from rune.runefile import CapabilityKind
from rune.runicos import simulated_device
from rune.tensor import Codec

_names = itertools.count()


@pytest.fixture
def daemon():
    d = DeviceDaemon(simulated_device("Portenta H7", seed=0),
                     f"loop://dev{next(_names)}", frame_timeout=0.3).start()
    yield d
    d.stop()


@pytest.fixture
def rand_daemon():
    d = DeviceDaemon(simulated_device("rand-only", ["RAND"]), f"loop://rand{next(_names)}").start()
    yield d
    d.stop()


def local_call(data, seed, codec=Codec.FIXED):
    inst = runicos.load(data, simulated_device("local"))
    inst.manifest()
    inst.reseed(seed)
    return inst.call(codec)


def raw_exchange(locator, data, timeout=2.0):
    """Send raw bytes, return the frames that come back until the peer closes."""
    stream = transport.connect(locator, timeout)
    try:
        stream.send(data)
        frames = []
        while True:
            try:
                frames.append(wire.read_frame(stream))
            except (ConnectionError, ProtocolError, OSError):
                return frames
    finally:
        stream.close()


# -- wire -------------------------------------------------------------------

def test_frame_layout():
    frame = wire.encode_frame(MsgType.PING, b"hi")
    assert frame[:4] == b"HMR1"
    assert frame[4] == 0x01
    assert frame[5:9] == (2).to_bytes(4, "little")
    assert wire.decode_frame(frame) == (MsgType.PING, b"hi")


def test_type_bands():
    for t in MsgType:
        band = {"PING": 0, "PONG": 0, "HELLO": 0, "HELLO_ACK": 0, "ERROR": 0}.get(t.name)
        if band is None:
            band = 0x10 if t.name.startswith("CAST") else 0x20
        assert t & 0xF0 == band


def test_frame_errors():
    frame = wire.encode_frame(MsgType.PING, b"hi")
    with pytest.raises(ProtocolError):
        wire.decode_frame(b"XMR1" + frame[4:])
    with pytest.raises(wire.FrameCorrupt):
        wire.decode_frame(frame[:9] + b"ho" + frame[11:])
    with pytest.raises(ProtocolError):
        wire.decode_frame(frame[:4] + b"\x7e" + frame[5:])
    with pytest.raises(ProtocolError):
        wire.decode_frame(frame[:5] + (1 << 20).to_bytes(4, "little") + frame[9:])
    with pytest.raises(ValueError):
        wire.encode_frame(MsgType.CAST_CHUNK, bytes(wire.MAX_PAYLOAD + 1))


def test_locators():
    assert transport.parse_locator("tcp://127.0.0.1:7000") == (TransportType.TCP,
                                                               ("127.0.0.1", 7000))
    assert transport.parse_locator("loop://a b") == (TransportType.LOOPBACK, "a b")
    for bad in ("/dev/tty.usbmodem14301", "tcp://host", "ble://x", "tcp://h:99999"):
        with pytest.raises(ValueError):
            transport.parse_locator(bad)


# -- registry / targets ls --------------------------------------------------

def test_registry_parsing():
    text = ("# fleet\n\ntcp://127.0.0.1:7000 tcp Portenta H7\n"
            "loop://bench LOOPBACK  Desk board  # simulator\n")
    targets = hammer.parse_registry(text)
    assert targets == [Target("tcp://127.0.0.1:7000", TransportType.TCP, "Portenta H7"),
                       Target("loop://bench", TransportType.LOOPBACK, "Desk board")]
    for bad in ("tcp://h:1 tcp", "tcp://h:1 serial x", "loop://a tcp x",
                "loop://a loopback x\nloop://a loopback y"):
        with pytest.raises(ValueError):
            hammer.parse_registry(bad)


def test_targets_ls(daemon, tmp_path):
    other = DeviceDaemon(simulated_device("Portenta H7"), "loop://second").start()
    try:
        reg = [Target(daemon.locator, TransportType.LOOPBACK, "Portenta H7"),
               Target("loop://second", TransportType.LOOPBACK, "Portenta H7")]
        found = hammer.targets_ls(reg)
        assert [t.available for t in found] == [True, True]
        table = hammer.render_targets(found)
        header = table.splitlines()[0].split()
        assert header == ["Target", "Type", "Name", "Available"]
        assert set(table.splitlines()[1]) <= {"-", " "}
        assert table.count("Portenta H7") == 2
    finally:
        other.stop()


def test_targets_ls_stopped_and_empty(daemon):
    gone = DeviceDaemon(simulated_device("x"), "loop://gone").start()
    gone.stop()
    reg = [Target(daemon.locator, TransportType.LOOPBACK, "a"),
           Target("loop://gone", TransportType.LOOPBACK, "b")]
    assert [t.available for t in hammer.targets_ls(reg)] == [True, False]
    assert hammer.targets_ls([]) == []
    assert hammer.render_targets([]).split() == ["Target", "Type", "Name", "Available"] + \
        hammer.render_targets([]).split()[4:]


def test_cli_targets_ls(daemon, tmp_path, capsys, monkeypatch):
    reg = tmp_path / "targets"
    reg.write_text(f"{daemon.locator} loopback Portenta H7\n")
    monkeypatch.setenv("HMR_REGISTRY", str(reg))
    assert run_cli(hammer.cli, ["targets", "ls"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split() == ["Target", "Type", "Name", "Available"]
    assert lines[2].split()[-1] == "True"
    reg.write_text("")
    assert run_cli(hammer.cli, ["targets", "ls"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 2


# -- cast -------------------------------------------------------------------

def test_cast_stage_messages(daemon, microspeech_file):
    lines = []
    session = hammer.cast(daemon.locator, microspeech_file, lines.append)
    assert session.ok and session.outcome == "READY"
    assert lines[0] == f"Deploying {microspeech_file} to target {daemon.locator}"
    for expected in ("Verifying provider: 100%", "Provider with fqdn=runicos:sim found",
                     "Uploading rune: 100%", "Verifying rune: 100%",
                     "Capability: AUDIO OK: 100%"):
        assert expected in lines
    assert daemon.instance.state == runicos.State.READY
    stages = [name for name, _ in daemon.events]
    assert stages.index("VERIFY_RUNE") < stages.index("CAPABILITY_CHECK")


def test_cast_refuses_invalid_bundle_locally(daemon, tmp_path):
    path = tmp_path / "bad.rune"
    path.write_bytes(b"RUNE" + bytes(10))
    with pytest.raises(Exception):
        hammer.cast(daemon.locator, path)
    assert daemon.events == []


def test_cast_capability_denied(rand_daemon, microspeech_file):
    with pytest.raises(CapabilityDenied) as exc:
        hammer.cast(rand_daemon.locator, microspeech_file)
    assert exc.value.kind == CapabilityKind.AUDIO
    s = exc.value.session
    assert [s.stages[st] for st in Stage] == [Progress.DONE] * 3 + [Progress.FAILED]
    assert rand_daemon.instance is None
    with pytest.raises(NoRuneDeployed):
        hammer.health_query(rand_daemon.locator)


def test_denied_cast_keeps_previous(rand_daemon, sine_bundle, microspeech_file, tmp_path):
    sine = tmp_path / "sine.rune"
    sine.write_bytes(sine_bundle)
    hammer.cast(rand_daemon.locator, sine)
    before = rand_daemon.instance
    with pytest.raises(CapabilityDenied):
        hammer.cast(rand_daemon.locator, microspeech_file)
    assert rand_daemon.instance is before


def test_provider_mismatch(microspeech_file):
    with DeviceDaemon(simulated_device("x"), "loop://foreign", fqdn="arduino:mbed"):
        with pytest.raises(ProviderMismatch) as exc:
            hammer.cast("loop://foreign", microspeech_file)
    assert exc.value.session.stages[Stage.VERIFY_PROVIDER] == Progress.FAILED
    assert exc.value.session.stages[Stage.UPLOAD] == Progress.NOT_STARTED


def test_unreachable():
    with pytest.raises(TargetUnreachable):
        hammer.health_query("loop://nobody")
    with pytest.raises(TargetUnreachable):
        hammer.health_query("tcp://127.0.0.1:1")


def flip_one(rng):
    def tamper(frames):
        blob = bytearray(b"".join(frames))
        i = rng.randrange(len(blob))
        blob[i] ^= rng.randrange(1, 256)
        return [bytes(blob)]
    return tamper


def test_flipped_upload_rejected_then_recast(daemon, microspeech_file, microspeech_bundle):
    hammer.cast(daemon.locator, microspeech_file)
    previous = daemon.instance
    rng = random.Random(7)
    for _ in range(30):
        with pytest.raises(TransferCorrupt) as exc:
            hammer.cast(daemon.locator, microspeech_file, tamper=flip_one(rng))
        assert exc.value.session.stages[Stage.CAPABILITY_CHECK] == Progress.NOT_STARTED
        assert daemon.instance is previous
    assert hammer.ping(daemon.locator) == "Portenta H7"
    hammer.cast(daemon.locator, microspeech_file)
    assert daemon.instance is not previous
    assert hammer.invoke(daemon.locator, seed=3) == local_call(microspeech_bundle, 3)


def test_flipped_first_upload_leaves_nothing(daemon, microspeech_file):
    with pytest.raises(TransferCorrupt):
        hammer.cast(daemon.locator, microspeech_file, tamper=flip_one(random.Random(1)))
    assert daemon.instance is None


def test_dropped_chunk_rejected(daemon, microspeech_file):
    with pytest.raises(TransferCorrupt):
        hammer.cast(daemon.locator, microspeech_file, tamper=lambda frames: frames[1:])
    with pytest.raises(TransferCorrupt):
        hammer.cast(daemon.locator, microspeech_file, tamper=lambda frames: frames[::-1])
    assert daemon.instance is None


def test_small_chunks(daemon, microspeech_file):
    assert hammer.cast(daemon.locator, microspeech_file, chunk_size=100).ok
    with pytest.raises(ValueError):
        hammer.cast(daemon.locator, microspeech_file, chunk_size=wire.CHUNK_SIZE + 1)


def test_health_reads_stay_consistent_during_upload(daemon, microspeech_file):
    hammer.cast(daemon.locator, microspeech_file)
    snapshots = []
    stop = threading.Event()

    def watch():
        while not stop.is_set():
            snapshots.append(hammer.health_query(daemon.locator).state)

    t = threading.Thread(target=watch)
    t.start()
    try:
        for _ in range(5):
            hammer.cast(daemon.locator, microspeech_file, chunk_size=64)
    finally:
        stop.set()
        t.join()
    assert snapshots and set(snapshots) == {"READY"}


# -- invoke / health --------------------------------------------------------

def test_invoke_matches_local(daemon, microspeech_file, microspeech_bundle):
    hammer.cast(daemon.locator, microspeech_file)
    for seed in range(50):
        codec = Codec.VARINT if seed % 2 else Codec.FIXED
        assert hammer.invoke(daemon.locator, seed, codec) == local_call(microspeech_bundle, seed)


def test_health_after_invocations(daemon, microspeech_file):
    with pytest.raises(NoRuneDeployed):
        hammer.health_query(daemon.locator)
    with pytest.raises(NoRuneDeployed):
        hammer.invoke(daemon.locator)
    hammer.cast(daemon.locator, microspeech_file)
    hammer.invoke(daemon.locator, seed=1)
    hammer.invoke(daemon.locator)
    h = hammer.health_query(daemon.locator)
    assert h.invocations == 2 and h.total_exec_nanos > 0 and h.state == "READY"


def test_cli_cast_invoke_health(daemon, microspeech_file, microspeech_bundle, capsys):
    assert run_cli(hammer.cli, ["targets", "cast", "-t", daemon.locator,
                                str(microspeech_file)]) == 0
    out = capsys.readouterr().out
    assert "Uploading rune: 100%" in out and "Capability: AUDIO OK: 100%" in out
    assert run_cli(hammer.cli, ["invoke", "-t", daemon.locator, "--seed", "9"]) == 0
    assert capsys.readouterr().out.strip() == hammer.format_output(
        local_call(microspeech_bundle, 9))
    assert run_cli(hammer.cli, ["health", "-t", daemon.locator]) == 0
    assert '"invocations": 1' in capsys.readouterr().out


def test_cli_errors(daemon, capsys):
    assert run_cli(hammer.cli, ["health", "-t", daemon.locator]) == 1
    assert "NoRuneDeployed" in capsys.readouterr().err
    assert run_cli(hammer.cli, ["health", "-t", "no-such-target"]) == 1


def test_cli_name_lookup(daemon, microspeech_file, tmp_path, capsys):
    reg = tmp_path / "targets"
    reg.write_text(f"{daemon.locator} loopback Portenta H7\n")
    assert run_cli(hammer.cli, ["targets", "cast", "--registry", str(reg), "-t", "Portenta H7",
                                str(microspeech_file)]) == 0


# -- robustness -------------------------------------------------------------

def test_bad_magic_answered_with_error(daemon):
    frames = raw_exchange(daemon.locator, b"XXXX" + bytes(20))
    assert [t for t, _ in frames] == [MsgType.ERROR]
    assert hammer.ping(daemon.locator) == "Portenta H7"


def test_unexpected_frames(daemon):
    for frame in (wire.encode_frame(MsgType.CAST_CHUNK, b"\x00\x00\x00\x00x"),
                  wire.encode_frame(MsgType.CAST_COMMIT),
                  wire.encode_frame(MsgType.PONG),
                  wire.encode_frame(MsgType.CAST_BEGIN, b"short"),
                  wire.encode_frame(MsgType.INVOKE, b"not json")):
        frames = raw_exchange(daemon.locator, frame)
        assert frames and frames[-1][0] == MsgType.ERROR
    assert hammer.ping(daemon.locator)


def test_frame_fuzzing_never_kills_daemon(daemon, microspeech_file):
    hammer.cast(daemon.locator, microspeech_file)
    previous = daemon.instance
    rng = random.Random(3)
    seeds = [wire.encode_frame(MsgType.PING), wire.encode_frame(MsgType.HELLO),
             wire.encode_frame(MsgType.HEALTH),
             wire.encode_frame(MsgType.INVOKE, wire.pack_json({"seed": 1, "codec": "FIXED"})),
             wire.encode_frame(MsgType.CAST_BEGIN, wire.BEGIN.pack(10, 0))]
    for _ in range(150):
        frame = bytearray(rng.choice(seeds))
        frame[rng.randrange(len(frame))] ^= rng.randrange(1, 256)
        raw_exchange(daemon.locator, bytes(frame), timeout=3.0)
    assert hammer.ping(daemon.locator) == "Portenta H7"
    assert daemon.instance is previous


def test_half_frame_times_out(daemon):
    start = time.monotonic()
    frames = raw_exchange(daemon.locator, wire.encode_frame(MsgType.PING)[:6], timeout=5.0)
    assert time.monotonic() - start < 4.0
    assert frames and frames[0][0] == MsgType.ERROR


def test_tcp_transport(microspeech_file, microspeech_bundle):
    with DeviceDaemon(simulated_device("tcp-dev"), "tcp://127.0.0.1:0") as d:
        assert d.locator.startswith("tcp://127.0.0.1:")
        assert hammer.ping(d.locator) == "tcp-dev"
        hammer.cast(d.locator, microspeech_file)
        assert hammer.invoke(d.locator, seed=4) == local_call(microspeech_bundle, 4)
        # garbage straight onto the socket
        host, port = transport.parse_locator(d.locator)[1]
        with socket.create_connection((host, port), timeout=2) as s:
            s.sendall(b"GET / HTTP/1.0\r\n\r\n")
            s.recv(100)
        assert hammer.ping(d.locator) == "tcp-dev"
