"""File-backed bundle store with a central metadata index.

Layout of a store directory::

    LOCK              exclusive flock held by the owning process
    index.log         magic header + append-only JSON lines, compacted on open
    bundles/<h>.bundle  one serialized bundle per file, named by a hash of its id

A bundle file is fsynced and renamed into place before its index record is
appended, so a crash leaves at worst an unindexed file, which is reaped on
the next open.
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .bundle import Bundle, BundleId, CreationTimestamp, bundle_id, decode_bundle, encode_bundle
from .eid import EndpointId, parse_eid
from .errors import (
    BundleError,
    CorruptionError,
    NotFoundError,
    StoreClosedError,
    StoreError,
    StoreLockedError,
)

log = logging.getLogger(__name__)

INDEX_MAGIC = "BPSTORE 1"
TOMBSTONE_CAP = 24 * 3600.0


class Constraint(str, enum.Enum):
    DISPATCH_PENDING = "DISPATCH_PENDING"
    FORWARD_PENDING = "FORWARD_PENDING"
    LOCAL_DELIVERY = "LOCAL_DELIVERY"
    DELETED = "DELETED"


@dataclass(frozen=True)
class BundleDescriptor:
    id: BundleId
    destination: EndpointId
    expiry: float
    lifetime: int
    received_at: float
    constraints: frozenset = frozenset({Constraint.DISPATCH_PENDING})
    sent_to: frozenset = frozenset()
    file_ref: str | None = None
    seq: int = 0
    size: int = 0

    @property
    def key(self) -> str:
        return self.id.key()

    @property
    def deleted(self) -> bool:
        return Constraint.DELETED in self.constraints

    def to_json(self) -> dict:
        return {
            "op": "put",
            "id": self.id.to_json(),
            "dst": str(self.destination),
            "exp": self.expiry,
            "life": self.lifetime,
            "rcv": self.received_at,
            "c": sorted(c.value for c in self.constraints),
            "s": sorted(str(p) for p in self.sent_to),
            "f": self.file_ref,
            "n": self.seq,
            "size": self.size,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "BundleDescriptor":
        return cls(
            id=BundleId.from_json(rec["id"]),
            destination=parse_eid(rec["dst"]),
            expiry=float(rec["exp"]),
            lifetime=int(rec["life"]),
            received_at=float(rec["rcv"]),
            constraints=frozenset(Constraint(c) for c in rec["c"]),
            sent_to=frozenset(parse_eid(p) for p in rec["s"]),
            file_ref=rec["f"],
            seq=int(rec["n"]),
            size=int(rec.get("size", 0)),
        )


def _fsync_dir(path: Path) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class Store:
    """Thread-safe bundle store owning ``path`` exclusively."""

    def __init__(self, path: str | os.PathLike, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self.bundle_dir = self.path / "bundles"
        self.index_path = self.path / "index.log"
        self.bundle_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._lockfile = open(self.path / "LOCK", "a+")
        try:
            fcntl.flock(self._lockfile, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            self._lockfile.close()
            raise StoreLockedError(f"store {self.path} is in use by another process") from None
        self._live: dict[str, BundleDescriptor] = {}
        self._tombstones: dict[str, tuple[float, BundleDescriptor | None]] = {}
        self._writing: set[str] = set()
        self._next_seq = 0
        self.last_creation: CreationTimestamp | None = None
        self.quarantined: list[str] = []
        self._index = None
        self._recover()

    # -- lifecycle -----------------------------------------------------------

    def _recover(self) -> None:
        records = []
        if self.index_path.exists():
            with open(self.index_path, "r", encoding="utf-8") as f:
                first = f.readline().rstrip("\n")
                if first and first != INDEX_MAGIC:
                    self._lockfile.close()
                    raise StoreError(f"{self.index_path}: bad index header {first!r}")
                for lineno, line in enumerate(f, 2):
                    if not line.endswith("\n"):
                        log.warning("store %s: dropping torn index record at line %d", self.path, lineno)
                        break
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError:
                        log.warning("store %s: dropping corrupt index record at line %d", self.path, lineno)
        for rec in records:
            self._apply(rec)
        for key, desc in list(self._live.items()):
            if not (self.bundle_dir / desc.file_ref).is_file():
                log.error("store %s: indexed bundle %s has no file, quarantined", self.path, key)
                self._quarantine(key, persist=False)
        referenced = {d.file_ref for d in self._live.values()}
        for entry in self.bundle_dir.iterdir():
            if entry.name not in referenced:
                log.info("store %s: reaping orphan %s", self.path, entry.name)
                entry.unlink(missing_ok=True)
        self._compact()

    def _apply(self, rec: dict) -> None:
        op = rec.get("op")
        if op == "put":
            desc = BundleDescriptor.from_json(rec)
            self._live[desc.key] = desc
            self._tombstones.pop(desc.key, None)
            self._next_seq = max(self._next_seq, desc.seq + 1)
        elif op == "set":
            desc = self._live.get(rec["id"])
            if desc is not None:
                self._live[rec["id"]] = replace(
                    desc,
                    constraints=frozenset(Constraint(c) for c in rec["c"]),
                    sent_to=frozenset(parse_eid(p) for p in rec["s"]),
                )
        elif op == "del":
            desc = self._live.pop(rec["id"], None)
            if desc is not None:
                desc = replace(desc, constraints=frozenset({Constraint.DELETED}), file_ref=None)
            self._tombstones[rec["id"]] = (float(rec["until"]), desc)
        elif op == "clock":
            self.last_creation = CreationTimestamp(rec["t"], rec["s"])

    def _compact(self) -> None:
        now = time.time()
        tmp = self.index_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(INDEX_MAGIC + "\n")
            for desc in sorted(self._live.values(), key=lambda d: d.seq):
                f.write(json.dumps(desc.to_json()) + "\n")
            for key, (until, _) in list(self._tombstones.items()):
                if until < now:
                    del self._tombstones[key]
                    continue
                f.write(json.dumps({"op": "del", "id": key, "until": until}) + "\n")
            if self.last_creation is not None:
                f.write(json.dumps({"op": "clock", "t": self.last_creation.dtn_time, "s": self.last_creation.sequence}) + "\n")
            f.flush()
            if self.fsync:
                os.fsync(f.fileno())
        os.replace(tmp, self.index_path)
        if self.fsync:
            _fsync_dir(self.path)
        self._index = open(self.index_path, "a", encoding="utf-8")

    def close(self) -> None:
        with self._lock:
            if self._index is None:
                return
            self._index.close()
            self._index = None
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)
            self._lockfile.close()

    @property
    def closed(self) -> bool:
        return self._index is None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __len__(self) -> int:
        with self._lock:
            return len(self._live)

    # -- internals -----------------------------------------------------------

    def _check_open(self) -> None:
        if self._index is None:
            raise StoreClosedError(f"store {self.path} is closed")

    def _append(self, rec: dict) -> None:
        self._index.write(json.dumps(rec) + "\n")
        self._index.flush()
        if self.fsync:
            os.fsync(self._index.fileno())

    @staticmethod
    def file_name(bid: BundleId) -> str:
        return hashlib.sha256(bid.key().encode("utf-8")).hexdigest()[:40] + ".bundle"

    def _quarantine(self, key: str, persist: bool = True) -> None:
        desc = self._live.pop(key, None)
        self.quarantined.append(key)
        if desc is not None and desc.file_ref:
            (self.bundle_dir / desc.file_ref).unlink(missing_ok=True)
        until = time.time() + (self._horizon(desc) if desc else 0)
        self._tombstones[key] = (until, None if desc is None else replace(desc, constraints=frozenset({Constraint.DELETED}), file_ref=None))
        if persist:
            self._append({"op": "del", "id": key, "until": until})

    @staticmethod
    def _horizon(desc: BundleDescriptor) -> float:
        return min(2 * desc.lifetime / 1e6, TOMBSTONE_CAP)

    def _delete_locked(self, key: str, now: float) -> BundleDescriptor | None:
        desc = self._live.pop(key, None)
        if desc is None:
            return None
        tomb = replace(desc, constraints=frozenset({Constraint.DELETED}), file_ref=None)
        until = now + self._horizon(desc)
        self._tombstones[key] = (until, tomb)
        self._append({"op": "del", "id": key, "until": until})
        try:
            (self.bundle_dir / desc.file_ref).unlink(missing_ok=True)
        except OSError as exc:
            log.error("store %s: could not remove %s: %s", self.path, desc.file_ref, exc)
        return tomb

    # -- public API ----------------------------------------------------------

    def push(
        self,
        bundle: Bundle,
        received_at: float | None = None,
        constraints: Iterable[Constraint] = (Constraint.DISPATCH_PENDING,),
        sent_to: Iterable[EndpointId] = (),
    ) -> tuple[BundleDescriptor, bool]:
        """Persist ``bundle``; returns ``(descriptor, known)``.

        ``known`` is true when the id is already stored or tombstoned, in
        which case nothing is written.
        """
        bid = bundle_id(bundle)
        key = bid.key()
        received_at = time.time() if received_at is None else received_at
        with self._cond:
            self._check_open()
            while key in self._writing:
                self._cond.wait()
            if key in self._live:
                return self._live[key], True
            if key in self._tombstones:
                _, tomb = self._tombstones[key]
                if tomb is None:
                    tomb = BundleDescriptor(bid, bundle.primary.destination, 0.0, 0, received_at, frozenset({Constraint.DELETED}))
                return tomb, True
            self._writing.add(key)
        try:
            name = self.file_name(bid)
            data = encode_bundle(bundle)
            final = self.bundle_dir / name
            tmp = final.with_suffix(".tmp")
            with open(tmp, "wb") as f:
                f.write(data)
                f.flush()
                if self.fsync:
                    os.fsync(f.fileno())
            os.replace(tmp, final)
            with self._lock:
                self._check_open()
                desc = BundleDescriptor(
                    id=bid,
                    destination=bundle.primary.destination,
                    expiry=bundle.expiry_time(received_at),
                    lifetime=bundle.primary.lifetime,
                    received_at=received_at,
                    constraints=frozenset(constraints),
                    sent_to=frozenset(sent_to),
                    file_ref=name,
                    seq=self._next_seq,
                    size=len(data),
                )
                try:
                    self._append(desc.to_json())
                except OSError:
                    final.unlink(missing_ok=True)
                    raise
                self._next_seq += 1
                self._live[key] = desc
                return desc, False
        finally:
            with self._cond:
                self._writing.discard(key)
                self._cond.notify_all()

    def is_known(self, bid: BundleId) -> bool:
        key = bid.key()
        with self._lock:
            return key in self._live or key in self._tombstones or key in self._writing

    def descriptor(self, bid: BundleId) -> BundleDescriptor | None:
        """Live descriptor, or the tombstoned one for deleted bundles."""
        key = bid.key()
        with self._lock:
            if key in self._live:
                return self._live[key]
            entry = self._tombstones.get(key)
            return entry[1] if entry else None

    def query(self, bid: BundleId) -> tuple[Bundle, BundleDescriptor]:
        key = bid.key()
        with self._lock:
            self._check_open()
            desc = self._live.get(key)
            if desc is None:
                raise NotFoundError(key)
            path = self.bundle_dir / desc.file_ref
            try:
                data = path.read_bytes()
                bundle = decode_bundle(data)
                if bundle_id(bundle) != bid:
                    raise CorruptionError(f"{path} holds a different bundle")
            except (OSError, BundleError, CorruptionError) as exc:
                log.error("store %s: bundle %s unreadable (%s), quarantined", self.path, key, exc)
                self._quarantine(key)
                raise CorruptionError(f"bundle {key}: {exc}") from exc
            return bundle, desc

    def pending(self, constraints: Iterable[Constraint]) -> list[BundleDescriptor]:
        wanted = set(constraints)
        with self._lock:
            found = [d for d in self._live.values() if d.constraints & wanted]
        return sorted(found, key=lambda d: d.seq)

    def all(self) -> list[BundleDescriptor]:
        with self._lock:
            return sorted(self._live.values(), key=lambda d: d.seq)

    def update(
        self,
        bid: BundleId,
        add: Iterable[Constraint] = (),
        remove: Iterable[Constraint] = (),
        sent_to: Iterable[EndpointId] = (),
    ) -> BundleDescriptor | None:
        """Change constraints and grow ``sent_to``.

        A descriptor left without constraints is deleted. Deleted bundles stay
        deleted: updates to them are ignored and their tombstone returned.
        """
        key = bid.key()
        add, remove, sent_to = set(add), set(remove), set(sent_to)
        with self._lock:
            self._check_open()
            desc = self._live.get(key)
            if desc is None:
                entry = self._tombstones.get(key)
                return entry[1] if entry else None
            if Constraint.DELETED in add:
                return self._delete_locked(key, time.time())
            constraints = (desc.constraints | add) - remove
            new_sent = desc.sent_to | sent_to
            if constraints == desc.constraints and new_sent == desc.sent_to:
                return desc
            if not constraints:
                return self._delete_locked(key, time.time())
            desc = replace(desc, constraints=frozenset(constraints), sent_to=frozenset(new_sent))
            self._append({
                "op": "set",
                "id": key,
                "c": sorted(c.value for c in desc.constraints),
                "s": sorted(str(p) for p in desc.sent_to),
            })
            self._live[key] = desc
            return desc

    def add_sent_to(self, bid: BundleId, peer: EndpointId) -> BundleDescriptor | None:
        return self.update(bid, sent_to=(peer,))

    def delete(self, bid: BundleId) -> bool:
        with self._lock:
            self._check_open()
            return self._delete_locked(bid.key(), time.time()) is not None

    def expired(self, now: float | None = None) -> list[BundleDescriptor]:
        now = time.time() if now is None else now
        with self._lock:
            return sorted((d for d in self._live.values() if d.expiry < now), key=lambda d: d.seq)

    def gc(self, now: float | None = None) -> list[BundleId]:
        """Delete every bundle whose expiry lies before ``now``."""
        now = time.time() if now is None else now
        removed = []
        with self._lock:
            self._check_open()
            for desc in self.expired(now):
                try:
                    self._delete_locked(desc.key, now)
                except OSError as exc:
                    log.error("store %s: gc of %s failed: %s", self.path, desc.key, exc)
                    continue
                removed.append(desc.id)
            for key, (until, _) in list(self._tombstones.items()):
                if until < now:
                    del self._tombstones[key]
        return removed

    def record_creation(self, ts: CreationTimestamp) -> None:
        """Remember the last creation timestamp issued by this node."""
        with self._lock:
            self._check_open()
            self.last_creation = ts
            self._append({"op": "clock", "t": ts.dtn_time, "s": ts.sequence})

    def fsck(self) -> list[str]:
        """Check index/file coherence; returns a list of problems, empty if clean."""
        problems = []
        with self._lock:
            live = list(self._live.values())
            referenced = {d.file_ref for d in live}
            for desc in live:
                path = self.bundle_dir / desc.file_ref
                if not path.is_file():
                    problems.append(f"{desc.key}: missing file {desc.file_ref}")
                    continue
                try:
                    bundle = decode_bundle(path.read_bytes())
                except BundleError as exc:
                    problems.append(f"{desc.key}: undecodable file: {exc}")
                    continue
                if bundle_id(bundle) != desc.id:
                    problems.append(f"{desc.key}: file holds {bundle_id(bundle).key()}")
                if Constraint.DELETED in desc.constraints:
                    problems.append(f"{desc.key}: live descriptor marked DELETED")
            for entry in self.bundle_dir.iterdir():
                if entry.name in referenced:
                    continue
                if entry.suffix == ".tmp" and self._writing:
                    continue  # a push in progress
                problems.append(f"orphan file {entry.name}")
        return problems


def fsck_path(path: str | os.PathLike) -> list[str]:
    """Open (and thereby recover) the store at ``path`` and check it."""
    with Store(path) as store:
        return store.fsck()
