"""Convergence-layer adapters: the generic interface and MTCP.

MTCP is unidirectional. The sender writes each bundle as one CBOR byte
string whose content is the encoded bundle and never reads application bytes;
the receiver only reads.
"""

from __future__ import annotations

import abc
import enum
import logging
import select
import socket
import socketserver
import threading
import time
from dataclasses import dataclass
from typing import Callable
from urllib.parse import urlsplit

from . import cbor
from .bundle import MAX_BUNDLE_SIZE, Bundle, decode_bundle, encode_bundle
from .errors import BundleError, PeerUnreachableError, StructureError, TransmissionError
from .pacing import TokenBucket

log = logging.getLogger(__name__)

DEFAULT_MTCP_PORT = 4556
IDLE_TIMEOUT = 30.0
_CHUNK = 64 * 1024


class Direction(enum.Enum):
    SEND = "send"
    RECEIVE = "receive"


@dataclass(frozen=True)
class ClaDescriptor:
    kind: str
    host: str
    port: int
    direction: Direction = Direction.SEND

    @classmethod
    def parse(cls, text: str, direction: Direction = Direction.SEND) -> "ClaDescriptor":
        parts = urlsplit(text)
        if not parts.scheme or not parts.hostname or parts.path not in ("", "/"):
            raise ValueError(f"bad CLA descriptor {text!r}, expected kind://host:port")
        try:
            port = parts.port
        except ValueError:
            raise ValueError(f"bad port in CLA descriptor {text!r}") from None
        if port is None:
            raise ValueError(f"CLA descriptor {text!r} lacks a port")
        return cls(parts.scheme, parts.hostname, port, direction)

    def __str__(self) -> str:
        host = f"[{self.host}]" if ":" in self.host else self.host
        return f"{self.kind}://{host}:{self.port}"

    @property
    def address(self) -> tuple[str, int]:
        return self.host, self.port


@dataclass(frozen=True)
class TransmissionReport:
    peer: ClaDescriptor
    bytes_sent: int
    duration: float


class ConvergenceSender(abc.ABC):
    kind: str

    @abc.abstractmethod
    def send(self, peer: ClaDescriptor, bundle: Bundle | bytes) -> TransmissionReport:
        """Transmit one bundle; raises ClaError on failure."""

    def close(self) -> None:
        pass


class ConvergenceReceiver(abc.ABC):
    kind: str

    @abc.abstractmethod
    def start(self) -> None: ...

    @abc.abstractmethod
    def stop(self) -> None: ...

    @property
    @abc.abstractmethod
    def descriptor(self) -> ClaDescriptor: ...


def frame(bundle_bytes: bytes) -> bytes:
    """One MTCP frame: a CBOR byte-string head followed by the bundle."""
    return cbor.encode_head(cbor.BYTES, len(bundle_bytes)) + bundle_bytes


class _Connection:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.last_used = time.monotonic()

    def peer_closed(self) -> bool:
        # the receiver never writes, so readability means EOF or an error
        try:
            readable, _, _ = select.select([self.sock], [], [], 0)
            return bool(readable)
        except (OSError, ValueError):
            return True

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class MTCPSender(ConvergenceSender):
    """Keeps one connection per peer; sends to one peer are serialized."""

    kind = "mtcp"

    def __init__(
        self,
        idle_timeout: float = IDLE_TIMEOUT,
        connect_timeout: float = 5.0,
        pacing_rate: float | None = None,
    ):
        self.idle_timeout = idle_timeout
        self.connect_timeout = connect_timeout
        self.pacing_rate = pacing_rate  # bits/s, applied per connection
        self._conns: dict[tuple[str, int], _Connection] = {}
        self._peer_locks: dict[tuple[str, int], threading.Lock] = {}
        self._lock = threading.Lock()
        self._buckets: dict[tuple[str, int], TokenBucket] = {}
        self.bytes_out = 0
        self.frames_out = 0
        self._closed = False

    def _peer_lock(self, addr) -> threading.Lock:
        with self._lock:
            return self._peer_locks.setdefault(addr, threading.Lock())

    def _connect(self, peer: ClaDescriptor) -> _Connection:
        try:
            sock = socket.create_connection(peer.address, timeout=self.connect_timeout)
        except OSError as exc:
            raise PeerUnreachableError(f"{peer}: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return _Connection(sock)

    def _bucket(self, addr) -> TokenBucket | None:
        if not self.pacing_rate:
            return None
        with self._lock:
            if addr not in self._buckets:
                self._buckets[addr] = TokenBucket(self.pacing_rate / 8.0)
            return self._buckets[addr]

    def send(self, peer: ClaDescriptor, bundle: Bundle | bytes) -> TransmissionReport:
        if peer.kind != self.kind:
            raise ValueError(f"MTCP sender cannot reach a {peer.kind!r} peer")
        data = bundle if isinstance(bundle, (bytes, bytearray)) else encode_bundle(bundle)
        head = cbor.encode_head(cbor.BYTES, len(data))
        addr = peer.address
        with self._peer_lock(addr):
            if self._closed:
                raise TransmissionError("sender closed")
            conn = self._conns.get(addr)
            if conn is not None and (
                time.monotonic() - conn.last_used > self.idle_timeout or conn.peer_closed()
            ):
                conn.close()
                conn = None
            if conn is None:
                conn = self._connect(peer)
                self._conns[addr] = conn
            bucket = self._bucket(addr)
            start = time.monotonic()
            try:
                view = memoryview(head + data) if len(data) < _CHUNK else None
                if view is not None:
                    if bucket:
                        bucket.consume(len(view))
                    conn.sock.sendall(view)
                else:
                    conn.sock.sendall(head)
                    view = memoryview(data)
                    for off in range(0, len(view), _CHUNK):
                        chunk = view[off:off + _CHUNK]
                        if bucket:
                            bucket.consume(len(chunk))
                        conn.sock.sendall(chunk)
            except OSError as exc:
                conn.close()
                self._conns.pop(addr, None)
                raise TransmissionError(f"{peer}: connection failed mid-stream: {exc}") from exc
            conn.last_used = time.monotonic()
            with self._lock:
                self.bytes_out += len(head) + len(data)
                self.frames_out += 1
            return TransmissionReport(peer, len(head) + len(data), conn.last_used - start)

    def close_idle(self) -> None:
        now = time.monotonic()
        for addr, conn in list(self._conns.items()):
            lock = self._peer_lock(addr)
            if lock.acquire(blocking=False):
                try:
                    if now - conn.last_used > self.idle_timeout:
                        conn.close()
                        self._conns.pop(addr, None)
                finally:
                    lock.release()

    def close(self) -> None:
        self._closed = True
        for addr, conn in list(self._conns.items()):
            conn.close()
            self._conns.pop(addr, None)


def _recv_exact(sock: socket.socket, n: int) -> bytearray | None:
    """Read exactly ``n`` bytes; ``None`` if the stream ends first."""
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], min(n - got, 1 << 20))
        if k == 0:
            return None
        got += k
    return buf


class _Handler(socketserver.BaseRequestHandler):
    server: "_Server"

    def handle(self):
        listener = self.server.listener
        sock: socket.socket = self.request
        listener._track(sock, True)
        try:
            while True:
                status = listener._read_frame(sock, self.client_address)
                if status is not True:
                    return
        finally:
            listener._track(sock, False)


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    listener: "MTCPListener"


class MTCPListener(ConvergenceReceiver):
    """Accepts MTCP connections and hands every decoded bundle to ``sink``.

    ``sink(bundle, (host, port))`` is called from connection threads and must
    be safe for concurrent use.
    """

    kind = "mtcp"

    def __init__(
        self,
        host: str,
        port: int,
        sink: Callable[[Bundle, tuple], None],
        max_size: int = MAX_BUNDLE_SIZE,
        advertise_host: str | None = None,
    ):
        self.host = host
        self.port = port
        self.sink = sink
        self.max_size = max_size
        self.advertise_host = advertise_host
        self.frames_in = 0
        self.bytes_in = 0
        self.errors = 0
        self._server: _Server | None = None
        self._thread: threading.Thread | None = None
        self._socks: set[socket.socket] = set()
        self._lock = threading.Lock()

    def start(self) -> None:
        server = _Server((self.host, self.port), _Handler, bind_and_activate=True)
        server.listener = self
        self._server = server
        self.port = server.server_address[1]
        self._thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.2}, name=f"mtcp-listen-{self.port}", daemon=True)
        self._thread.start()
        log.info("MTCP listening on %s:%d", self.host, self.port)

    def stop(self) -> None:
        if self._server is None:
            return
        self._server.shutdown()
        self._server.server_close()
        with self._lock:
            for s in list(self._socks):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        self._server = None

    @property
    def descriptor(self) -> ClaDescriptor:
        host = self.advertise_host or self.host
        return ClaDescriptor(self.kind, host, self.port, Direction.RECEIVE)

    def _track(self, sock, add: bool) -> None:
        with self._lock:
            (self._socks.add if add else self._socks.discard)(sock)

    def _error(self, addr, message: str) -> None:
        with self._lock:
            self.errors += 1
        log.warning("MTCP frame from %s:%d rejected: %s", addr[0], addr[1], message)

    def _read_frame(self, sock: socket.socket, addr) -> bool:
        head = sock.recv(1)
        if not head:
            return False
        try:
            extra = {24: 1, 25: 2, 26: 4, 27: 8}.get(head[0] & 0x1F, 0)
            if extra:
                rest = _recv_exact(sock, extra)
                if rest is None:
                    self._error(addr, "stream ended inside a frame head")
                    return False
                head += bytes(rest)
            major, length, _ = cbor.parse_head(head)
            if major != cbor.BYTES or length is None:
                raise StructureError(f"frame is not a definite-length byte string (major type {major})")
            if length > self.max_size:
                raise StructureError(f"frame of {length} bytes exceeds limit")
        except (StructureError, TypeError) as exc:
            self._error(addr, str(exc))
            return False
        body = _recv_exact(sock, length)
        if body is None:
            self._error(addr, "stream ended inside a frame")
            return False
        with self._lock:
            self.bytes_in += len(head) + length
        try:
            bundle = decode_bundle(bytes(body), self.max_size)
        except BundleError as exc:
            self._error(addr, str(exc))
            return False
        with self._lock:
            self.frames_in += 1
        try:
            self.sink(bundle, addr)
        except Exception:
            log.exception("MTCP sink failed for bundle from %s:%d", addr[0], addr[1])
        return True
