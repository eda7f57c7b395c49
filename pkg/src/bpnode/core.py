"""The bundle protocol agent: one processing pipeline for new and inbound bundles.

Work items flow through a single queue consumed by the pipeline thread.
CLA transmissions run on a small thread pool so a large transfer never
stalls reception; the store is the point of serialization between them.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import queue
import sys
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO

from .admin import REASON_TEXT, ReasonCode, StatusKind, StatusReport, decode_admin_record, status_report_bundle
from .bundle import (
    DEFAULT_HOP_LIMIT,
    DEFAULT_LIFETIME,
    BlockType,
    Bundle,
    BundleFlags,
    BundleId,
    CreationClock,
    HopCount,
    build_bundle,
    encode_bundle,
)
from .cla import ClaDescriptor, MTCPListener, MTCPSender
from .discovery import DEFAULT_GROUP, DEFAULT_INTERVAL, DEFAULT_PORT, PeerEvent, PeerEventKind
from .eid import EndpointId, parse_eid
from .errors import BundleError, ClaError, CorruptionError, NotFoundError, StoreError
from .routing import Routing, RoutingEvent, make_routing
from .store import BundleDescriptor, Constraint, Store

log = logging.getLogger(__name__)

REPORT_LIFETIME_FLOOR = 60 * 1_000_000  # microseconds


def parse_static_peer(text: str) -> tuple[EndpointId, ClaDescriptor]:
    """Parse ``"<node-eid>=<kind>://host:port"``."""
    eid_text, sep, cla_text = text.rpartition("=")
    if not sep:
        raise ValueError(f"static peer {text!r} must look like dtn:node=mtcp://host:port")
    node = parse_eid(eid_text.strip())
    if not node.is_node_id:
        raise ValueError(f"static peer {eid_text!r} is not a node EID")
    return node, ClaDescriptor.parse(cla_text.strip())


@dataclass
class NodeConfig:
    node_id: EndpointId
    endpoints: set[EndpointId] = field(default_factory=set)
    store_path: Path = Path("store")
    listen_host: str = "127.0.0.1"
    listen_port: int = 4556
    advertise_host: str | None = None
    static_peers: list[tuple[EndpointId, ClaDescriptor]] = field(default_factory=list)
    discovery_enabled: bool = False
    discovery_interval: float = DEFAULT_INTERVAL
    discovery_port: int = DEFAULT_PORT
    discovery_group: str = DEFAULT_GROUP
    discovery_interface: str = "0.0.0.0"
    retry_interval: float = 5.0
    gc_interval: float = 0.5
    hop_limit: int = DEFAULT_HOP_LIMIT
    lifetime: int = DEFAULT_LIFETIME
    routing: str = "epidemic"
    bandwidth_limit: float | None = None
    has_clock: bool = True
    fsync: bool = True
    agent_host: str = "127.0.0.1"
    agent_port: int | None = 8080
    event_log: str | None = None
    send_workers: int = 4

    def __post_init__(self):
        if isinstance(self.node_id, str):
            self.node_id = parse_eid(self.node_id)
        if not self.node_id.is_node_id:
            raise ValueError(f"node id {self.node_id} must be a node EID (no service path)")
        self.endpoints = {parse_eid(e) if isinstance(e, str) else e for e in self.endpoints}
        self.endpoints.add(self.node_id)
        self.store_path = Path(self.store_path)
        self.static_peers = [parse_static_peer(p) if isinstance(p, str) else p for p in self.static_peers]
        if self.retry_interval <= 0 or self.gc_interval <= 0:
            raise ValueError("retry and gc intervals must be positive")


class EventLog:
    """JSON-lines log of bundle events; one object per line, flushed immediately."""

    def __init__(self, node_id: EndpointId, stream: IO[str] | None = None):
        self.node = str(node_id)
        self.stream = stream
        self.history: deque[dict] = deque(maxlen=10_000)
        self._lock = threading.Lock()

    @classmethod
    def open(cls, node_id: EndpointId, path: str | None) -> "EventLog":
        if path is None:
            return cls(node_id, None)
        if path == "-":
            return cls(node_id, sys.stdout)
        return cls(node_id, open(path, "a", buffering=1, encoding="utf-8"))

    def emit(self, event: str, bundle: BundleId | None = None, ts: float | None = None, **extra) -> dict:
        rec = {"ts": time.time() if ts is None else ts, "node": self.node, "event": event}
        if bundle is not None:
            rec["bundle"] = bundle.key()
        rec.update({k: v for k, v in extra.items() if v is not None})
        with self._lock:
            self.history.append(rec)
            if self.stream is not None:
                self.stream.write(json.dumps(rec, separators=(",", ":")) + "\n")
                self.stream.flush()
        log.debug("%s", rec)
        return rec

    def close(self) -> None:
        if self.stream not in (None, sys.stdout, sys.stderr):
            self.stream.close()


@dataclass(frozen=True)
class MailboxEntry:
    id: str
    source: str
    destination: str
    creation: tuple[int, int]
    payload: bytes

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "source": self.source,
            "destination": self.destination,
            "creation": list(self.creation),
            "payload_b64": base64.b64encode(self.payload).decode("ascii"),
        }


def _hop_json(b: Bundle):
    hc = b.hop_count
    return None if hc is None else [hc.limit, hc.count]


class Node:
    """A running bundle node. Use ``start()``/``stop()`` or :func:`run_node`."""

    def __init__(self, cfg: NodeConfig, routing: Routing | None = None):
        self.cfg = cfg
        self.node_id = cfg.node_id
        cfg.store_path.mkdir(parents=True, exist_ok=True)
        self.store = Store(cfg.store_path, fsync=cfg.fsync)
        try:
            self.routing = routing or make_routing(cfg.routing, self.store)
        except Exception:
            self.store.close()
            raise
        self.clock = CreationClock(cfg.has_clock, self.store.last_creation)
        self.events = EventLog.open(cfg.node_id, cfg.event_log)
        self.sender = MTCPSender(pacing_rate=cfg.bandwidth_limit)
        self.listener = MTCPListener(cfg.listen_host, cfg.listen_port, self._on_cla_bundle, advertise_host=cfg.advertise_host)
        self.endpoints: set[EndpointId] = set(cfg.endpoints)
        self.peer_clas: dict[EndpointId, ClaDescriptor] = {}
        self.static_ids = {eid for eid, _ in cfg.static_peers}
        self.reports: list[dict] = []
        self.counters: dict[str, int] = {}
        self._queue: queue.Queue = queue.Queue()
        self._lock = threading.RLock()
        self._mailbox_lock = threading.Lock()
        self._inflight: set[tuple[str, EndpointId]] = set()
        self._stop = threading.Event()
        self._pool = ThreadPoolExecutor(max_workers=cfg.send_workers, thread_name_prefix="cla-send")
        self._threads: list[threading.Thread] = []
        self._announcer = None
        self._beacons = None
        self.started_at = time.time()
        self.running = False

    # lifecycle

    def start(self) -> "Node":
        try:
            self.listener.start()
        except OSError as exc:
            self.store.close()
            raise OSError(exc.errno, f"mtcp-cla: cannot listen on {self.cfg.listen_host}:{self.cfg.listen_port}: {exc.strerror}") from exc
        for eid, cla in self.cfg.static_peers:
            self.add_peer(eid, cla)
        if self.cfg.discovery_enabled:
            from .discovery import announce, listen_beacons

            kw = dict(port=self.cfg.discovery_port, group=self.cfg.discovery_group, interface=self.cfg.discovery_interface)
            self._beacons = listen_beacons(self.node_id, self.on_peer_event, interval=self.cfg.discovery_interval, **kw)
            self._announcer = announce(self.node_id, [self.listener.descriptor], self.cfg.discovery_interval, **kw)
        for target, name in ((self._pipeline, "bpa-pipeline"), (self._timers, "bpa-timers")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        # bundles left pending by a previous run
        for desc in self.store.pending({Constraint.DISPATCH_PENDING}):
            self._queue.put(("dispatch", desc.id))
        self._queue.put(("retry",))
        self.running = True
        self.events.emit("started", cla=str(self.listener.descriptor))
        return self

    def stop(self) -> None:
        if not self.running:
            return
        self.running = False
        self._stop.set()
        if self._announcer:
            self._announcer.stop()
        if self._beacons:
            self._beacons.stop()
        self.listener.stop()
        self._queue.put(("stop",))
        for t in self._threads:
            t.join(timeout=10)
        # in-flight sends finish; queued ones are dropped and retried next run
        self._pool.shutdown(wait=True, cancel_futures=True)
        self.sender.close()
        self.events.emit("stopped")
        self.store.close()
        self.events.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # peers

    def add_peer(self, eid: EndpointId, cla: ClaDescriptor, static: bool = False) -> None:
        with self._lock:
            if static:
                self.static_ids.add(eid)
            is_new = self.peer_clas.get(eid) != cla
            self.peer_clas[eid] = cla
        self.routing.note_event(RoutingEvent.appeared(eid))
        if is_new:
            self.events.emit("peer_appeared", peer=str(eid), cla=str(cla))
            self._queue.put(("retry",))

    def on_peer_event(self, ev: PeerEvent) -> None:
        if ev.node_id in self.static_ids:
            return
        if ev.kind is PeerEventKind.APPEARED:
            cla = next((c for c in ev.clas if c.kind == self.sender.kind), None)
            if cla is None:
                return
            self.add_peer(ev.node_id, cla)
        else:
            with self._lock:
                self.peer_clas.pop(ev.node_id, None)
            self.routing.note_event(RoutingEvent.disappeared(ev.node_id))
            self.events.emit("peer_disappeared", peer=str(ev.node_id))

    # entry points

    def _count(self, name: str) -> None:
        with self._lock:
            self.counters[name] = self.counters.get(name, 0) + 1

    def _on_cla_bundle(self, bundle: Bundle, addr) -> None:
        self._queue.put(("receive", bundle, addr, time.time()))

    def receive(self, bundle: Bundle, addr=None, received_at: float | None = None) -> None:
        """Queue an inbound bundle as if it had arrived over a CLA."""
        self._queue.put(("receive", bundle, addr, time.time() if received_at is None else received_at))

    def next_creation(self):
        ts = self.clock.next()
        self.store.record_creation(ts)
        return ts

    def send(
        self,
        destination: EndpointId | str,
        payload: bytes,
        lifetime: int | None = None,
        report_flags: int = 0,
        hop_limit: int | None = None,
    ) -> BundleId:
        """Create a bundle from a local application and hand it to the pipeline."""
        bundle = build_bundle(
            destination,
            self.node_id,
            payload,
            lifetime=self.cfg.lifetime if lifetime is None else lifetime,
            report_flags=report_flags,
            hop_limit=self.cfg.hop_limit if hop_limit is None else hop_limit,
            creation=self.next_creation(),
        )
        self._submit_local(bundle, "created")
        return bundle.id

    def _submit_local(self, bundle: Bundle, event: str) -> None:
        desc, known = self.store.push(bundle)
        if known:
            raise StoreError(f"bundle {bundle.id} already exists")
        self._count(event)
        self.events.emit(event, bundle.id, destination=str(bundle.primary.destination), size=len(bundle.payload))
        self._queue.put(("dispatch", desc.id))

    # pipeline

    def _pipeline(self) -> None:
        while True:
            item = self._queue.get()
            kind = item[0]
            if kind == "stop":
                return
            try:
                if kind == "receive":
                    self._receive(item[1], item[2], item[3])
                elif kind == "dispatch":
                    desc = self.store.descriptor(item[1])
                    if desc is not None and not desc.deleted:
                        self._dispatch(desc)
                elif kind == "retry":
                    self._retry()
                elif kind == "gc":
                    self._gc()
            except StoreError as exc:
                if self.store.closed:
                    return
                log.error("pipeline: %s failed: %s", kind, exc)
            except Exception:
                log.exception("pipeline: %s failed", kind)

    def _timers(self) -> None:
        now = time.monotonic()
        next_retry = now + self.cfg.retry_interval
        next_gc = now + self.cfg.gc_interval
        while not self._stop.is_set():
            now = time.monotonic()
            if now >= next_gc:
                self._queue.put(("gc",))
                next_gc = now + self.cfg.gc_interval
            if now >= next_retry:
                self._queue.put(("retry",))
                self.sender.close_idle()
                next_retry = now + self.cfg.retry_interval
            self._stop.wait(max(0.01, min(next_gc, next_retry) - time.monotonic()))

    def _receive(self, bundle: Bundle, addr, received_at: float) -> None:
        bid = bundle.id
        sender = bundle.previous_node
        self._count("received")
        self.events.emit(
            "received", bid, ts=received_at,
            peer=None if sender is None else str(sender),
            hop_count=_hop_json(bundle),
            previous_node=None if sender is None else str(sender),
            size=len(bundle.payload),
        )
        self.routing.note_event(RoutingEvent.received(bid, sender))
        if self.store.is_known(bid):
            self._count("duplicate")
            self.events.emit("duplicate", bid, peer=None if sender is None else str(sender))
            return
        desc, known = self.store.push(bundle, received_at=received_at, sent_to=() if sender is None else (sender,))
        if known:
            return
        if bundle.primary.has_flag(BundleFlags.REPORT_RECEPTION):
            self._report(bundle, desc, StatusKind.RECEIVED)
        if desc.expiry <= time.time():
            self._delete(bundle, desc, ReasonCode.LIFETIME_EXPIRED)
            return
        self._dispatch(desc, bundle)

    def _dispatch(self, desc: BundleDescriptor, bundle: Bundle | None = None) -> None:
        dest = desc.destination
        local = dest in self.endpoints
        if local and bundle is None:
            bundle, desc = self.store.query(desc.id)
        if local and bundle.is_admin_record:
            self._consume_admin(bundle, desc)
            return
        add = set()
        if local:
            add.add(Constraint.LOCAL_DELIVERY)
        if dest != self.node_id:
            # other registered endpoints may be served by further nodes too
            add.add(Constraint.FORWARD_PENDING)
        desc = self.store.update(desc.id, add=add, remove={Constraint.DISPATCH_PENDING})
        if local:
            self._count("delivered")
            self.events.emit(
                "delivered", desc.id, endpoint=str(dest), hop_count=_hop_json(bundle),
                previous_node=None if bundle.previous_node is None else str(bundle.previous_node),
                size=len(bundle.payload),
            )
            if bundle.primary.has_flag(BundleFlags.REPORT_DELIVERY):
                self._report(bundle, desc, StatusKind.DELIVERED)
        if Constraint.FORWARD_PENDING in add:
            self._forward(desc, bundle)

    def _consume_admin(self, bundle: Bundle, desc: BundleDescriptor) -> None:
        try:
            record = decode_admin_record(bundle.payload)
        except BundleError as exc:
            self.events.emit("admin_record_invalid", desc.id, reason=str(exc))
            record = None
        if isinstance(record, StatusReport):
            entry = {
                "report": desc.id.key(),
                "source": str(bundle.primary.source),
                "subject": record.subject.key(),
                "status": [k.value for k in record.asserted],
                "reason": int(record.reason),
                "reason_text": REASON_TEXT.get(record.reason, "unknown"),
                "received": time.time(),
            }
            with self._lock:
                self.reports.append(entry)
            self._count("status_report")
            self.events.emit(
                "status_report", record.subject, peer=str(bundle.primary.source),
                status=entry["status"], reason=entry["reason_text"],
            )
        self.store.update(desc.id, remove={Constraint.DISPATCH_PENDING})

    def _retry(self) -> None:
        for desc in self.store.pending({Constraint.FORWARD_PENDING}):
            if self._stop.is_set():
                return
            self._forward(desc)

    def _forward(self, desc: BundleDescriptor, bundle: Bundle | None = None) -> None:
        key = desc.id.key()
        peers = self.routing.select_peers(desc.id)
        with self._lock:
            targets = [(p, self.peer_clas[p]) for p in peers if p in self.peer_clas and (key, p) not in self._inflight]
        if not targets:
            return
        if bundle is None:
            try:
                bundle, desc = self.store.query(desc.id)
            except (NotFoundError, CorruptionError):
                return
        if desc.expiry <= time.time():
            self._delete(bundle, desc, ReasonCode.LIFETIME_EXPIRED)
            return
        hc = bundle.hop_count
        out = bundle
        if hc is not None:
            if hc.count + 1 > hc.limit:
                self._delete(bundle, desc, ReasonCode.HOP_LIMIT_EXCEEDED)
                return
            out = out.with_block_data(BlockType.HOP_COUNT, HopCount(hc.limit, hc.count + 1))
        out = out.with_block_data(BlockType.PREVIOUS_NODE, self.node_id)
        if bundle.bundle_age is not None or bundle.primary.creation.dtn_time == 0:
            residence = max(0, int((time.time() - desc.received_at) * 1e6))
            out = out.with_block_data(BlockType.BUNDLE_AGE, (bundle.bundle_age or 0) + residence)
        data = encode_bundle(out)
        with self._lock:
            for peer, _ in targets:
                self._inflight.add((key, peer))
        for peer, cla in targets:
            try:
                self._pool.submit(self._transmit, bundle, desc, peer, cla, data, _hop_json(out))
            except RuntimeError:  # pool shut down
                with self._lock:
                    self._inflight.discard((key, peer))

    def _transmit(self, bundle: Bundle, desc: BundleDescriptor, peer: EndpointId, cla: ClaDescriptor, data: bytes, hop) -> None:
        key = desc.id.key()
        try:
            self.events.emit("send_start", desc.id, peer=str(peer), hop_count=hop, size=len(data))
            report = self.sender.send(cla, data)
        except ClaError as exc:
            self._count("send_failed")
            self.events.emit("send_failed", desc.id, peer=str(peer), reason=str(exc))
            return
        finally:
            with self._lock:
                self._inflight.discard((key, peer))
        self._count("forwarded")
        try:
            self.routing.note_event(RoutingEvent.sent(desc.id, peer))
        except StoreError:
            pass
        self.events.emit("forwarded", desc.id, peer=str(peer), hop_count=hop, duration=round(report.duration, 6))
        if bundle.primary.has_flag(BundleFlags.REPORT_FORWARDING):
            self._report(bundle, desc, StatusKind.FORWARDED)

    def _delete(self, bundle: Bundle, desc: BundleDescriptor, reason: ReasonCode) -> None:
        self.store.delete(desc.id)
        self._count("deleted")
        self.events.emit("deleted", desc.id, reason=REASON_TEXT[reason], hop_count=_hop_json(bundle))
        if bundle.primary.has_flag(BundleFlags.REPORT_DELETION):
            self._report(bundle, desc, StatusKind.DELETED, reason)

    def _gc(self) -> None:
        now = time.time()
        expired = self.store.expired(now)
        wants_report = {}
        for desc in expired:
            try:
                bundle, _ = self.store.query(desc.id)
            except (NotFoundError, CorruptionError):
                continue
            if bundle.primary.has_flag(BundleFlags.REPORT_DELETION):
                wants_report[desc.id.key()] = bundle
        for bid in self.store.gc(now):
            self._count("deleted")
            self.events.emit("deleted", bid, reason=REASON_TEXT[ReasonCode.LIFETIME_EXPIRED])
            bundle = wants_report.get(bid.key())
            if bundle is not None:
                desc = next(d for d in expired if d.id == bid)
                self._report(bundle, desc, StatusKind.DELETED, ReasonCode.LIFETIME_EXPIRED)

    def _report(self, subject: Bundle, desc: BundleDescriptor, kind: StatusKind, reason: int = ReasonCode.NO_INFO) -> None:
        if subject.is_admin_record or subject.primary.report_to.is_null:
            return
        remaining = int((desc.expiry - time.time()) * 1e6)
        report = status_report_bundle(
            subject, kind, self.node_id, reason,
            lifetime=max(remaining, REPORT_LIFETIME_FLOOR),
            hop_limit=self.cfg.hop_limit,
            clock=_StoreClock(self),
        )
        self.events.emit("report_sent", subject.id, status=kind.value, destination=str(subject.primary.report_to))
        self._submit_local(report, "report_created")

    # application agent

    def register(self, endpoint: EndpointId | str) -> EndpointId:
        eid = parse_eid(endpoint) if isinstance(endpoint, str) else endpoint
        with self._lock:
            is_new = eid not in self.endpoints
            self.endpoints.add(eid)
        if is_new:
            self.events.emit("registered", endpoint=str(eid))
        return eid

    def fetch(self, endpoint: EndpointId | None = None) -> list[MailboxEntry]:
        """Return and remove every queued mailbox entry for ``endpoint`` (all endpoints if None)."""
        with self._lock:
            if endpoint is not None and endpoint not in self.endpoints:
                raise NotFoundError(f"endpoint {endpoint} is not registered")
            wanted = {endpoint} if endpoint is not None else set(self.endpoints)
        now = time.time()
        entries = []
        with self._mailbox_lock:
            for desc in self.store.pending({Constraint.LOCAL_DELIVERY}):
                if desc.destination not in wanted or desc.expiry <= now:
                    continue
                try:
                    bundle, _ = self.store.query(desc.id)
                except (NotFoundError, CorruptionError):
                    continue
                p = bundle.primary
                entries.append(MailboxEntry(
                    desc.id.key(), str(p.source), str(p.destination),
                    (p.creation.dtn_time, p.creation.sequence), bundle.payload,
                ))
                self.store.update(desc.id, remove={Constraint.LOCAL_DELIVERY})
                self.events.emit("fetched", desc.id, endpoint=str(desc.destination))
        return entries

    def status(self) -> dict:
        with self._lock:
            peers = {str(k): str(v) for k, v in sorted(self.peer_clas.items(), key=lambda kv: str(kv[0]))}
            counters = dict(self.counters)
            endpoints = sorted(str(e) for e in self.endpoints)
        return {
            "node_id": str(self.node_id),
            "ready": self.running,
            "uptime": time.time() - self.started_at,
            "cla": str(self.listener.descriptor),
            "peers": peers,
            "endpoints": endpoints,
            "stored": len(self.store) if not self.store.closed else 0,
            "bytes_in": self.listener.bytes_in,
            "bytes_out": self.sender.bytes_out,
            "frames_in": self.listener.frames_in,
            "frames_out": self.sender.frames_out,
            "cpu_time": time.process_time(),
            "pid": os.getpid(),
            "counters": counters,
        }

    def status_reports(self) -> list[dict]:
        with self._lock:
            return list(self.reports)


class _StoreClock:
    """Creation-clock adaptor that persists every timestamp it hands out."""

    def __init__(self, node: Node):
        self.node = node

    def next(self):
        return self.node.next_creation()


def run_node(cfg: NodeConfig, with_agent: bool = True):
    """Start a node and, unless disabled, its HTTP application agent.

    Returns ``(node, agent)``; ``agent`` is None when not started.
    """
    node = Node(cfg).start()
    agent = None
    if with_agent and cfg.agent_port is not None:
        from .agent import AgentServer

        try:
            agent = AgentServer(node, cfg.agent_host, cfg.agent_port).start()
        except OSError as exc:
            node.stop()
            raise OSError(exc.errno, f"app-agent: cannot listen on {cfg.agent_host}:{cfg.agent_port}: {exc.strerror}") from exc
    return node, agent
