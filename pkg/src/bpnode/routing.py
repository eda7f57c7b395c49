"""Routing decisions: which peers should receive a stored bundle."""

from __future__ import annotations

import abc
import enum
import threading
from dataclasses import dataclass

from .bundle import BundleId
from .eid import EndpointId


class EventKind(enum.Enum):
    BUNDLE_RECEIVED = "bundle_received"
    BUNDLE_SENT = "bundle_sent"
    PEER_APPEARED = "peer_appeared"
    PEER_DISAPPEARED = "peer_disappeared"


_NEEDS = {
    EventKind.BUNDLE_RECEIVED: (True, False),  # the peer is optional: locally created bundles have none
    EventKind.BUNDLE_SENT: (True, True),
    EventKind.PEER_APPEARED: (False, True),
    EventKind.PEER_DISAPPEARED: (False, True),
}


@dataclass(frozen=True)
class RoutingEvent:
    kind: EventKind
    bundle_id: BundleId | None = None
    peer: EndpointId | None = None

    def __post_init__(self):
        need_bundle, need_peer = _NEEDS[self.kind]
        if need_bundle and self.bundle_id is None:
            raise ValueError(f"{self.kind.value} event needs a bundle id")
        if need_peer and self.peer is None:
            raise ValueError(f"{self.kind.value} event needs a peer")
        if not need_bundle and self.bundle_id is not None:
            raise ValueError(f"{self.kind.value} event carries no bundle id")

    @classmethod
    def received(cls, bid: BundleId, sender: EndpointId | None = None) -> "RoutingEvent":
        return cls(EventKind.BUNDLE_RECEIVED, bid, sender)

    @classmethod
    def sent(cls, bid: BundleId, peer: EndpointId) -> "RoutingEvent":
        return cls(EventKind.BUNDLE_SENT, bid, peer)

    @classmethod
    def appeared(cls, peer: EndpointId) -> "RoutingEvent":
        return cls(EventKind.PEER_APPEARED, peer=peer)

    @classmethod
    def disappeared(cls, peer: EndpointId) -> "RoutingEvent":
        return cls(EventKind.PEER_DISAPPEARED, peer=peer)


class Routing(abc.ABC):
    """Interface the processing pipeline programs against."""

    name: str

    @abc.abstractmethod
    def note_event(self, event: RoutingEvent) -> None: ...

    @abc.abstractmethod
    def select_peers(self, bid: BundleId) -> list[EndpointId]: ...

    def live_peers(self) -> list[EndpointId]:
        return []


class EpidemicRouting(Routing):
    """Send each bundle to every live peer that has not seen it yet.

    With a store attached, ``sent_to`` is written through to the bundle's
    descriptor and read back from it, so a restarted node does not re-send.
    """

    name = "epidemic"

    def __init__(self, store=None):
        self.store = store
        self._lock = threading.RLock()
        self._peers: set[EndpointId] = set()
        self._sent: dict[str, set[EndpointId]] = {}

    def _seen_by(self, bid: BundleId) -> set[EndpointId]:
        seen = set(self._sent.get(bid.key(), ()))
        if self.store is not None:
            desc = self.store.descriptor(bid)
            if desc is not None:
                seen |= desc.sent_to
        return seen

    def note_event(self, event: RoutingEvent) -> None:
        with self._lock:
            if event.kind is EventKind.PEER_APPEARED:
                self._peers.add(event.peer)
            elif event.kind is EventKind.PEER_DISAPPEARED:
                self._peers.discard(event.peer)
            elif event.peer is not None:
                self._sent.setdefault(event.bundle_id.key(), set()).add(event.peer)
                if self.store is not None and not self.store.closed:
                    self.store.add_sent_to(event.bundle_id, event.peer)

    def select_peers(self, bid: BundleId) -> list[EndpointId]:
        with self._lock:
            return sorted(self._peers - self._seen_by(bid), key=str)

    def live_peers(self) -> list[EndpointId]:
        with self._lock:
            return sorted(self._peers, key=str)

    def forget(self, bid: BundleId) -> None:
        with self._lock:
            self._sent.pop(bid.key(), None)


class FloodRouting(Routing):
    """Send to every live peer every time; ignores delivery history."""

    name = "flood"

    def __init__(self, store=None):
        self._lock = threading.Lock()
        self._peers: set[EndpointId] = set()

    def note_event(self, event: RoutingEvent) -> None:
        with self._lock:
            if event.kind is EventKind.PEER_APPEARED:
                self._peers.add(event.peer)
            elif event.kind is EventKind.PEER_DISAPPEARED:
                self._peers.discard(event.peer)

    def select_peers(self, bid: BundleId) -> list[EndpointId]:
        return self.live_peers()

    def live_peers(self) -> list[EndpointId]:
        with self._lock:
            return sorted(self._peers, key=str)


ALGORITHMS = {EpidemicRouting.name: EpidemicRouting, FloodRouting.name: FloodRouting}


def make_routing(name: str, store=None) -> Routing:
    try:
        return ALGORITHMS[name](store)
    except KeyError:
        raise ValueError(f"unknown routing algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
