"""Device simulator: hosts RunicOS behind the HMR1 protocol.

One connection per thread. The hosted instance only changes in ``_commit``,
under ``_lock``, after the uploaded bytes passed the whole-bundle digest and
decoded cleanly, so a reader always sees either the old instance or the new
one.
"""
import logging
import threading
import time
import zlib

from rune.bundle import decode_bundle
from rune.deploy import transport, wire
from rune.deploy.wire import MsgType
from rune.errors import (
    BundleError,
    NoRuneDeployed,
    ProtocolError,
    RuneError,
    TransferCorrupt,
)
from rune.runicos import load
from rune.tensor import Codec, encode_tensor

log = logging.getLogger(__name__)

DEFAULT_FQDN = "runicos:sim"
MAX_BUNDLE = 16 * 1024 * 1024


def error_payload(exc):
    body = {"code": type(exc).__name__, "message": str(exc)}
    kind = getattr(exc, "kind", None)
    if kind is not None:
        body["kind"] = getattr(kind, "name", str(kind))
    return wire.pack_json(body)


class _Upload:
    def __init__(self, total, digest):
        self.total = total
        self.digest = digest
        self.data = bytearray()
        self.next_seq = 0


class _Connection:
    """Per-connection cast state."""

    def __init__(self):
        self.upload = None
        self.staged = None


class DeviceDaemon:
    """Serve ``profile`` on ``locator`` until :meth:`stop`."""

    def __init__(self, profile, locator, fqdn=DEFAULT_FQDN, frame_timeout=1.0,
                 idle_timeout=60.0):
        self.profile = profile
        self.fqdn = fqdn
        self.frame_timeout = frame_timeout
        self.idle_timeout = idle_timeout
        self.listener = transport.listen(locator)
        self.locator = self.listener.locator
        self.instance = None
        self._lock = threading.Lock()
        self._stopping = threading.Event()
        self._thread = None
        self.events = []  # (stage, monotonic time) for ordering checks
        self.rejections = 0

    # -- lifecycle

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, name="hmr-daemon",
                                        daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        while not self._stopping.is_set():
            try:
                sock, _ = self.listener.accept(timeout=0.2)
            except (TimeoutError, OSError):
                continue
            threading.Thread(target=self._serve_connection, args=(sock,),
                             name="hmr-conn", daemon=True).start()

    def stop(self):
        self._stopping.set()
        self.listener.close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- connection loop

    def _serve_connection(self, sock):
        stream = transport.Stream(sock)
        conn = _Connection()
        try:
            while not self._stopping.is_set():
                stream.settimeout(self.idle_timeout)
                try:
                    first = stream.recv_exact(1)
                except (ProtocolError, OSError):
                    return  # idle or gone
                try:
                    # once a frame has started the rest of it must follow promptly
                    stream.settimeout(self.frame_timeout)
                    head = first + stream.recv_exact(wire.HEADER.size - 1)
                    msg_type, length = wire.parse_header(head)
                    body = stream.recv_exact(length + wire.CRC.size)
                    payload = body[:length]
                    if zlib.crc32(payload) != wire.CRC.unpack_from(body, length)[0]:
                        raise wire.FrameCorrupt(f"{msg_type.name} frame failed its CRC check")
                    reply = self._dispatch(msg_type, payload, conn)
                except (RuneError, ValueError) as exc:
                    if conn.upload is not None or isinstance(exc, TransferCorrupt):
                        self.rejections += 1
                    log.info("rejecting frame: %s", exc)
                    self._send(stream, MsgType.ERROR, error_payload(exc))
                    return
                if reply is not None:
                    stream.send(wire.encode_frame(*reply))
        except OSError:
            pass
        except Exception:  # noqa: BLE001 - a bad peer must never take the daemon down
            log.exception("connection handler failed")
        finally:
            stream.close()

    def _send(self, stream, msg_type, payload):
        try:
            stream.send(wire.encode_frame(msg_type, payload))
        except OSError:
            pass

    # -- messages

    def _dispatch(self, msg_type, payload, conn):
        if conn.upload is not None and msg_type not in (MsgType.CAST_CHUNK, MsgType.CAST_END):
            raise TransferCorrupt(f"{msg_type.name} frame in the middle of an upload")
        if msg_type == MsgType.PING:
            return MsgType.PONG, self.profile.name.encode()
        if msg_type == MsgType.HELLO:
            return MsgType.HELLO_ACK, wire.pack_json(self.identity())
        if msg_type == MsgType.CAST_BEGIN:
            conn.staged = None
            conn.upload = self._begin(payload)
            return MsgType.CAST_ACK, wire.pack_json({"stage": "BEGIN"})
        if msg_type == MsgType.CAST_CHUNK:
            self._chunk(conn.upload, payload)
            return None
        if msg_type == MsgType.CAST_END:
            conn.staged, reply = self._end(conn.upload, payload)
            conn.upload = None
            return MsgType.CAST_ACK, wire.pack_json(reply)
        if msg_type == MsgType.CAST_COMMIT:
            staged, conn.staged = conn.staged, None
            return MsgType.CAST_ACK, wire.pack_json(self._commit(staged, payload))
        if msg_type == MsgType.INVOKE:
            return MsgType.INVOKE_RESULT, self._invoke(wire.unpack_json(payload))
        if msg_type == MsgType.HEALTH:
            return MsgType.HEALTH_RESULT, wire.pack_json(self.health().to_dict())
        raise ProtocolError(f"unexpected {msg_type.name} frame")

    def identity(self):
        return {
            "name": self.profile.name,
            "fqdn": self.fqdn,
            "protocol": wire.PROTOCOL_VERSION,
            "capabilities": sorted(k.name for k in self.profile.capabilities),
            "memory_budget": self.profile.memory_budget,
        }

    def _begin(self, payload):
        if len(payload) != wire.BEGIN.size:
            raise ProtocolError("CAST_BEGIN payload must be 8 bytes")
        total, digest = wire.BEGIN.unpack(payload)
        if not 0 < total <= MAX_BUNDLE:
            raise ProtocolError(f"bundle size {total} out of range")
        return _Upload(total, digest)

    def _chunk(self, upload, payload):
        if upload is None:
            raise ProtocolError("CAST_CHUNK without CAST_BEGIN")
        seq, data = wire.unpack_chunk(payload)
        if seq != upload.next_seq:
            raise TransferCorrupt(f"chunk {seq} out of order, expected {upload.next_seq}")
        if len(upload.data) + len(data) > upload.total:
            raise TransferCorrupt("upload longer than announced")
        upload.data += data
        upload.next_seq += 1

    def _end(self, upload, payload):
        if upload is None:
            raise ProtocolError("CAST_END without CAST_BEGIN")
        if payload:
            raise ProtocolError("CAST_END carries no payload")
        data = bytes(upload.data)
        if len(data) != upload.total:
            raise TransferCorrupt(f"received {len(data)} of {upload.total} bytes")
        if zlib.crc32(data) != upload.digest:
            raise TransferCorrupt("bundle digest mismatch")
        try:
            bundle = decode_bundle(data)
        except BundleError as exc:
            raise TransferCorrupt(f"bundle rejected: {exc}") from None
        self.events.append(("VERIFY_RUNE", time.monotonic()))
        kinds = [c.kind.name for c in bundle.manifest.capabilities]
        return data, {"stage": "VERIFIED", "capabilities": kinds}

    def _commit(self, data, payload):
        if data is None:
            raise ProtocolError("CAST_COMMIT without a verified upload")
        if payload:
            raise ProtocolError("CAST_COMMIT carries no payload")
        self.events.append(("CAPABILITY_CHECK", time.monotonic()))
        with self._lock:
            instance = load(data, self.profile)
            # on CapabilityDenied the previous instance, if any, stays in place
            manifest = instance.manifest()
            self.instance = instance
        return {"stage": "COMMITTED", "granted": sorted(c.kind.name
                                                        for c in manifest.capabilities)}

    def _invoke(self, request):
        seed = request.get("seed")
        codec = request.get("codec", "FIXED")
        if codec not in Codec.__members__ or (seed is not None and not isinstance(seed, int)):
            raise ProtocolError("bad INVOKE request")
        with self._lock:
            if self.instance is None:
                raise NoRuneDeployed("no rune deployed on this device")
            if seed is not None:
                self.instance.reseed(seed)
            out = self.instance.call(Codec[codec])
        return encode_tensor(out, Codec.FIXED)

    def health(self):
        with self._lock:
            if self.instance is None:
                raise NoRuneDeployed("no rune deployed on this device")
            return self.instance.health()
