"""Peer discovery by periodic UDP beacons.

A beacon is the CBOR array ``[node-EID, [cla-descriptor, ...], sequence]``,
sent to a multicast group (limited broadcast if multicast sending fails).
"""

from __future__ import annotations

import enum
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

from . import cbor
from .cla import ClaDescriptor
from .eid import EndpointId
from .errors import BundleError, StructureError

log = logging.getLogger(__name__)

DEFAULT_PORT = 35039
DEFAULT_GROUP = "224.23.23.23"
DEFAULT_INTERVAL = 2.0
EXPIRY_INTERVALS = 3
_SEQ_MOD = 2**32


@dataclass(frozen=True)
class Beacon:
    node_id: EndpointId
    clas: tuple[ClaDescriptor, ...]
    sequence: int = 0

    def __post_init__(self):
        object.__setattr__(self, "clas", tuple(self.clas))
        if not self.clas:
            raise ValueError("a beacon must advertise at least one CLA")
        if not self.node_id.is_node_id:
            raise ValueError(f"{self.node_id} is not a node EID")

    def encode(self) -> bytes:
        return cbor.encode([self.node_id.to_cbor(), [str(c) for c in self.clas], self.sequence % _SEQ_MOD])

    @classmethod
    def decode(cls, data: bytes) -> "Beacon":
        try:
            dec = cbor.Decoder(data)
            if dec.array() != 3:
                raise StructureError("beacon must be a 3-element array")
            node_id = EndpointId.read(dec)
            n = dec.array()
            if n is None or n > 64:
                raise StructureError("bad CLA list")
            clas = tuple(ClaDescriptor.parse(dec.text()) for _ in range(n))
            seq = dec.uint()
            if not dec.at_end():
                raise StructureError("trailing bytes after beacon")
            return cls(node_id, clas, seq)
        except BundleError:
            raise
        except ValueError as exc:
            raise StructureError(f"malformed beacon: {exc}") from exc


class PeerEventKind(enum.Enum):
    APPEARED = "appeared"
    DISAPPEARED = "disappeared"


@dataclass(frozen=True)
class PeerEvent:
    kind: PeerEventKind
    node_id: EndpointId
    clas: tuple[ClaDescriptor, ...]
    last_seen: float


def _multicast_sender(interface: str) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
    sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
    if interface and interface != "0.0.0.0":
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(interface))
    return sock


class Announcer:
    """Emits one beacon per ``interval`` seconds until stopped."""

    def __init__(
        self,
        node_id: EndpointId,
        clas: list[ClaDescriptor],
        interval: float = DEFAULT_INTERVAL,
        port: int = DEFAULT_PORT,
        group: str = DEFAULT_GROUP,
        interface: str = "0.0.0.0",
    ):
        if interval <= 0:
            raise ValueError("beacon interval must be positive")
        Beacon(node_id, clas)  # validate early
        self.node_id = node_id
        self.clas = list(clas)
        self.interval = interval
        self.port = port
        self.group = group
        self.interface = interface
        self.sequence = 0
        self.sent = 0
        self.send_errors = 0
        self._stop = threading.Event()
        self._sock = _multicast_sender(interface)
        self._thread = threading.Thread(target=self._run, name="beacon-announce", daemon=True)

    def start(self) -> "Announcer":
        self._thread.start()
        return self

    def _emit(self) -> None:
        data = Beacon(self.node_id, self.clas, self.sequence).encode()
        try:
            self._sock.sendto(data, (self.group, self.port))
        except OSError as exc:
            try:
                self._sock.sendto(data, ("255.255.255.255", self.port))
            except OSError:
                self.send_errors += 1
                log.warning("beacon send failed: %s", exc)
                return
        self.sent += 1
        self.sequence = (self.sequence + 1) % _SEQ_MOD

    def _run(self) -> None:
        next_at = time.monotonic()
        while not self._stop.is_set():
            self._emit()
            next_at += self.interval
            self._stop.wait(max(0.0, next_at - time.monotonic()))

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=self.interval + 1)
        self._sock.close()


class BeaconListener:
    """Turns received beacons into peer-appeared/disappeared events.

    Beacons carrying ``own_id`` are ignored. A peer not heard for
    ``EXPIRY_INTERVALS`` intervals is reported as disappeared.
    """

    def __init__(
        self,
        own_id: EndpointId,
        sink: Callable[[PeerEvent], None],
        interval: float = DEFAULT_INTERVAL,
        port: int = DEFAULT_PORT,
        group: str = DEFAULT_GROUP,
        interface: str = "0.0.0.0",
        clock=time.monotonic,
    ):
        self.own_id = own_id
        self.sink = sink
        self.interval = interval
        self.port = port
        self.group = group
        self.interface = interface
        self.clock = clock
        self.malformed = 0
        self.peers: dict[EndpointId, tuple[tuple[ClaDescriptor, ...], float]] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._sock = self._open_socket()
        self._threads = [
            threading.Thread(target=self._recv_loop, name="beacon-listen", daemon=True),
            threading.Thread(target=self._expiry_loop, name="beacon-expiry", daemon=True),
        ]

    def _open_socket(self) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        sock.bind(("", self.port))
        mreq = struct.pack("4s4s", socket.inet_aton(self.group), socket.inet_aton(self.interface))
        try:
            sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, mreq)
        except OSError as exc:
            log.warning("could not join %s on %s (%s); relying on broadcast", self.group, self.interface, exc)
        sock.settimeout(0.25)
        return sock

    def start(self) -> "BeaconListener":
        for t in self._threads:
            t.start()
        return self

    def handle(self, data: bytes, sender_ip: str) -> PeerEvent | None:
        """Process one datagram; returns the event emitted, if any."""
        try:
            beacon = Beacon.decode(data)
        except (BundleError, ValueError):
            self.malformed += 1
            return None
        if beacon.node_id == self.own_id:
            return None
        # a wildcard listen address is reachable at the beacon's source address
        clas = tuple(
            ClaDescriptor(c.kind, sender_ip, c.port, c.direction) if c.host in ("0.0.0.0", "::", "") else c
            for c in beacon.clas
        )
        now = self.clock()
        with self._lock:
            known = self.peers.get(beacon.node_id)
            last_seen = max(now, known[1]) if known else now
            self.peers[beacon.node_id] = (clas, last_seen)
        if known is None or known[0] != clas:
            event = PeerEvent(PeerEventKind.APPEARED, beacon.node_id, clas, last_seen)
            self.sink(event)
            return event
        return None

    def expire(self) -> list[PeerEvent]:
        now = self.clock()
        limit = EXPIRY_INTERVALS * self.interval
        gone = []
        with self._lock:
            for node_id, (clas, seen) in list(self.peers.items()):
                if now - seen > limit:
                    del self.peers[node_id]
                    gone.append(PeerEvent(PeerEventKind.DISAPPEARED, node_id, clas, seen))
        for event in gone:
            self.sink(event)
        return gone

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, (ip, _port) = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    return
                continue
            try:
                self.handle(data, ip)
            except Exception:
                log.exception("peer event consumer failed")

    def _expiry_loop(self) -> None:
        while not self._stop.wait(self.interval / 2):
            try:
                self.expire()
            except Exception:
                log.exception("peer expiry failed")

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            if t.is_alive():
                t.join(timeout=self.interval + 1)
        self._sock.close()


def announce(node_id: EndpointId, clas: list[ClaDescriptor], interval: float = DEFAULT_INTERVAL, **kwargs) -> Announcer:
    return Announcer(node_id, clas, interval, **kwargs).start()


def listen_beacons(own_id: EndpointId, sink: Callable[[PeerEvent], None], **kwargs) -> BeaconListener:
    return BeaconListener(own_id, sink, **kwargs).start()
