"""Stream transports behind one interface.

``tcp://host:port`` is a real socket. ``loop://name`` connects to a daemon
in the same process over a socket pair, standing in for a serial cable.
"""
import enum
import queue
import socket
import threading

from rune.errors import ProtocolError, TargetUnreachable


class TransportType(enum.Enum):
    TCP = "TCP"
    LOOPBACK = "LOOPBACK"


SCHEMES = {"tcp": TransportType.TCP, "loop": TransportType.LOOPBACK}


def parse_locator(locator):
    """``'tcp://h:p'`` -> ``(TransportType.TCP, ('h', p))``; loopback gives the name."""
    scheme, sep, rest = locator.partition("://")
    if not sep or scheme not in SCHEMES or not rest:
        raise ValueError(f"unsupported locator {locator!r} (want tcp://host:port or loop://name)")
    kind = SCHEMES[scheme]
    if kind == TransportType.LOOPBACK:
        return kind, rest
    host, colon, port = rest.rpartition(":")
    if not colon or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"bad tcp locator {locator!r}")
    return kind, (host.strip("[]") or "127.0.0.1", int(port))


class Stream:
    """Byte stream over a connected socket."""

    def __init__(self, sock, timeout=None):
        self.sock = sock
        self.sock.settimeout(timeout)

    def settimeout(self, timeout):
        self.sock.settimeout(timeout)

    def send(self, data):
        self.sock.sendall(data)

    def recv_exact(self, n):
        buf = bytearray()
        while len(buf) < n:
            try:
                part = self.sock.recv(n - len(buf))
            except socket.timeout:
                raise ProtocolError("timed out reading from peer") from None
            if not part:
                raise ConnectionResetError("peer closed the connection")
            buf += part
        return bytes(buf)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- loopback ---------------------------------------------------------------

_loop_lock = threading.Lock()
_loop_listeners = {}


class _LoopListener:
    def __init__(self, name):
        self.name = name
        self.pending = queue.Queue()
        self.closed = False

    def accept(self, timeout=None):
        try:
            sock = self.pending.get(timeout=timeout)
        except queue.Empty:
            raise socket.timeout() from None
        if sock is None:
            raise OSError("listener closed")
        return sock, self.name

    def close(self):
        with _loop_lock:
            if _loop_listeners.get(self.name) is self:
                del _loop_listeners[self.name]
        self.closed = True
        self.pending.put(None)


class _TcpListener:
    def __init__(self, addr):
        self.sock = socket.create_server(addr, reuse_port=False)
        host, port = self.sock.getsockname()[:2]
        self.locator = f"tcp://{host}:{port}"

    def accept(self, timeout=None):
        self.sock.settimeout(timeout)
        return self.sock.accept()

    def close(self):
        self.sock.close()


def listen(locator):
    """Bind ``locator``; returns a listener with ``accept``, ``close`` and ``locator``."""
    kind, addr = parse_locator(locator)
    if kind == TransportType.TCP:
        return _TcpListener(addr)
    with _loop_lock:
        if addr in _loop_listeners:
            raise OSError(f"loopback name {addr!r} already in use")
        listener = _loop_listeners[addr] = _LoopListener(addr)
    listener.locator = locator
    return listener


def connect(locator, timeout=5.0):
    kind, addr = parse_locator(locator)
    if kind == TransportType.TCP:
        try:
            sock = socket.create_connection(addr, timeout=timeout)
        except OSError as exc:
            raise TargetUnreachable(f"{locator}: {exc.strerror or exc}") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return Stream(sock, timeout)
    with _loop_lock:
        listener = _loop_listeners.get(addr)
    if listener is None or listener.closed:
        raise TargetUnreachable(f"{locator}: no loopback device listening")
    ours, theirs = socket.socketpair()
    listener.pending.put(theirs)
    return Stream(ours, timeout)
