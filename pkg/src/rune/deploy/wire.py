"""HMR1 frames.

    magic "HMR1" | msg_type u8 | length u32 LE | payload | crc32(payload) u32 LE

Message types live in bands: 0x0x control, 0x1x cast, 0x2x runtime.
"""
import enum
import json
import struct
import zlib

from rune.errors import ProtocolError, TransferCorrupt

MAGIC = b"HMR1"
HEADER = struct.Struct("<4sBI")
CRC = struct.Struct("<I")
CHUNK_SIZE = 4096
# largest legal payload: a full chunk plus its sequence number
MAX_PAYLOAD = CHUNK_SIZE + 4
PROTOCOL_VERSION = 1


class MsgType(enum.IntEnum):
    PING = 0x01
    PONG = 0x02
    HELLO = 0x03
    HELLO_ACK = 0x04
    ERROR = 0x0F

    CAST_BEGIN = 0x10
    CAST_CHUNK = 0x11
    CAST_END = 0x12
    CAST_COMMIT = 0x13
    CAST_ACK = 0x14

    INVOKE = 0x20
    INVOKE_RESULT = 0x21
    HEALTH = 0x22
    HEALTH_RESULT = 0x23


class FrameCorrupt(TransferCorrupt, ProtocolError):
    """Payload CRC mismatch."""


def encode_frame(msg_type, payload=b""):
    payload = bytes(payload)
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return (HEADER.pack(MAGIC, int(msg_type), len(payload)) + payload
            + CRC.pack(zlib.crc32(payload)))


def parse_header(head):
    magic, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}") from None
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"frame length {length} exceeds {MAX_PAYLOAD}")
    return msg_type, length


def read_frame(stream):
    """Read one frame from ``stream`` (anything with ``recv_exact``)."""
    msg_type, length = parse_header(stream.recv_exact(HEADER.size))
    body = stream.recv_exact(length + CRC.size)
    payload = body[:length]
    (crc,) = CRC.unpack_from(body, length)
    if zlib.crc32(payload) != crc:
        raise FrameCorrupt(f"{msg_type.name} frame failed its CRC check")
    return msg_type, payload


def decode_frame(data):
    """Parse exactly one frame from a byte string."""
    view = _BytesStream(data)
    frame = read_frame(view)
    if view.pos != len(data):
        raise ProtocolError("trailing bytes after frame")
    return frame


class _BytesStream:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def recv_exact(self, n):
        if self.pos + n > len(self.data):
            raise ProtocolError("truncated frame")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


# -- payload helpers --------------------------------------------------------

def pack_json(obj):
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode()


def unpack_json(payload):
    try:
        obj = json.loads(payload.decode())
    except (UnicodeDecodeError, ValueError):
        raise ProtocolError("payload is not valid JSON") from None
    if not isinstance(obj, dict):
        raise ProtocolError("JSON payload must be an object")
    return obj


BEGIN = struct.Struct("<II")  # total bundle size, crc32 of the bundle
SEQ = struct.Struct("<I")


def pack_chunk(seq, data):
    if len(data) > CHUNK_SIZE:
        raise ValueError(f"chunk of {len(data)} bytes exceeds {CHUNK_SIZE}")
    return SEQ.pack(seq) + bytes(data)


def unpack_chunk(payload):
    if len(payload) < SEQ.size + 1:
        raise ProtocolError("empty upload chunk")
    (seq,) = SEQ.unpack_from(payload)
    return seq, payload[SEQ.size:]
