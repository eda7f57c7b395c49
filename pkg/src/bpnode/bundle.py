"""Bundle and block types with their CBOR wire encoding.

A bundle is an indefinite-length CBOR array holding the primary block
followed by canonical blocks, the payload block last::

    [_ [7, flags, crc_type, dest, src, report_to, [time, seq], lifetime, ...],
       [type, number, flags, crc_type, h'data', ...], ... ]
"""

from __future__ import annotations

import enum
import threading
import time
from dataclasses import dataclass, field, replace

from . import cbor
from .crc import CRCType, compute_crc
from .eid import EndpointId, parse_eid
from .errors import (
    BundleError,
    CRCMismatchError,
    MissingPayloadError,
    SizeLimitError,
    StructureError,
    ValidationError,
    VersionError,
)

__all__ = [
    "BlockFlags",
    "BlockType",
    "Bundle",
    "BundleFlags",
    "BundleId",
    "CanonicalBlock",
    "CreationClock",
    "CreationTimestamp",
    "HopCount",
    "PrimaryBlock",
    "build_bundle",
    "bundle_id",
    "decode_bundle",
    "encode_bundle",
]

BP_VERSION = 7
DTN_EPOCH = 946684800  # 2000-01-01T00:00:00Z as a Unix timestamp
MAX_BUNDLE_SIZE = 256 * 1024 * 1024
DEFAULT_LIFETIME = 24 * 3600 * 1_000_000  # microseconds
DEFAULT_HOP_LIMIT = 64


class BundleFlags(enum.IntFlag):
    IS_FRAGMENT = 0x000001
    ADMIN_RECORD = 0x000002
    MUST_NOT_FRAGMENT = 0x000004
    USER_ACK = 0x000020
    STATUS_TIME = 0x000040
    REPORT_RECEPTION = 0x004000
    REPORT_FORWARDING = 0x010000
    REPORT_DELIVERY = 0x020000
    REPORT_DELETION = 0x040000


REPORT_FLAGS = (
    BundleFlags.REPORT_RECEPTION
    | BundleFlags.REPORT_FORWARDING
    | BundleFlags.REPORT_DELIVERY
    | BundleFlags.REPORT_DELETION
)


class BlockFlags(enum.IntFlag):
    REPLICATE = 0x01
    REPORT_IF_UNPROCESSABLE = 0x02
    DELETE_BUNDLE_IF_UNPROCESSABLE = 0x04
    DISCARD_IF_UNPROCESSABLE = 0x10


class BlockType(enum.IntEnum):
    PAYLOAD = 1
    PREVIOUS_NODE = 7
    BUNDLE_AGE = 8
    HOP_COUNT = 9


def dtn_now() -> int:
    return max(0, int(time.time()) - DTN_EPOCH)


@dataclass(frozen=True, order=True)
class CreationTimestamp:
    dtn_time: int
    sequence: int

    def to_cbor(self) -> list:
        return [self.dtn_time, self.sequence]


class CreationClock:
    """Issues unique creation timestamps for one node.

    Without a real-time clock every timestamp has ``dtn_time == 0`` and only
    the sequence number advances. ``last`` lets a restarted node resume past
    the timestamps it issued before.
    """

    def __init__(self, has_clock: bool = True, last: CreationTimestamp | None = None):
        self.has_clock = has_clock
        self._last = last
        self._lock = threading.Lock()

    def next(self) -> CreationTimestamp:
        with self._lock:
            now = dtn_now() if self.has_clock else 0
            last = self._last
            if last is None or now > last.dtn_time:
                ts = CreationTimestamp(now, 0)
            else:
                # clock stalled or stepped back: keep counting in the last second
                ts = CreationTimestamp(last.dtn_time, last.sequence + 1)
            self._last = ts
            return ts

    @property
    def last(self) -> CreationTimestamp | None:
        return self._last


@dataclass(frozen=True)
class HopCount:
    limit: int
    count: int

    @property
    def exceeded(self) -> bool:
        return self.count > self.limit


@dataclass(frozen=True, order=True)
class BundleId:
    source: EndpointId
    creation: CreationTimestamp
    is_fragment: bool = False
    fragment_offset: int | None = None

    def key(self) -> str:
        """Deterministic text form, used as store and mailbox key."""
        base = f"{self.source}-{self.creation.dtn_time}-{self.creation.sequence}"
        if self.is_fragment:
            base += f"-{self.fragment_offset}"
        return base

    def __str__(self) -> str:
        return self.key()

    def to_json(self) -> list:
        return [str(self.source), self.creation.dtn_time, self.creation.sequence, self.fragment_offset if self.is_fragment else None]

    @classmethod
    def from_json(cls, obj: list) -> "BundleId":
        src, t, seq, frag = obj
        return cls(parse_eid(src), CreationTimestamp(t, seq), frag is not None, frag)


@dataclass(frozen=True)
class PrimaryBlock:
    destination: EndpointId
    source: EndpointId
    report_to: EndpointId
    creation: CreationTimestamp
    lifetime: int
    control_flags: int = 0
    crc_type: CRCType = CRCType.NONE
    fragment_offset: int | None = None
    total_adu_length: int | None = None
    version: int = BP_VERSION
    crc_value: bytes | None = field(default=None, compare=False, repr=False)
    # exact bytes this block was decoded from, re-emitted verbatim on forwarding
    raw: bytes | None = field(default=None, init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "crc_type", CRCType(self.crc_type))

    def has_flag(self, flag: int) -> bool:
        return bool(self.control_flags & flag)

    @property
    def is_fragment(self) -> bool:
        return self.has_flag(BundleFlags.IS_FRAGMENT)

    def validate(self) -> None:
        if self.version != BP_VERSION:
            raise VersionError(f"unsupported bundle protocol version {self.version}")
        if self.control_flags < 0 or self.lifetime < 0:
            raise ValidationError("negative flags or lifetime")
        fragment_fields = (self.fragment_offset is not None, self.total_adu_length is not None)
        if self.is_fragment and not all(fragment_fields):
            raise ValidationError("fragment flag set but fragment offset/length missing")
        if not self.is_fragment and any(fragment_fields):
            raise ValidationError("fragment fields present without the fragment flag")
        if self.has_flag(BundleFlags.ADMIN_RECORD) and not (self.source.is_null or self.source.is_node_id):
            raise ValidationError("administrative record from a non-node source EID")

    def _fields(self, crc_placeholder: bytes | None) -> list:
        items = [
            self.version,
            self.control_flags,
            int(self.crc_type),
            self.destination.to_cbor(),
            self.source.to_cbor(),
            self.report_to.to_cbor(),
            self.creation.to_cbor(),
            self.lifetime,
        ]
        if self.is_fragment:
            items += [self.fragment_offset, self.total_adu_length]
        if crc_placeholder is not None:
            items.append(crc_placeholder)
        return items

    def encode(self) -> bytes:
        if self.raw is not None:
            return self.raw
        if self.crc_type == CRCType.NONE:
            return cbor.encode(self._fields(None))
        size = self.crc_type.size
        zeroed = cbor.encode(self._fields(bytes(size)))
        return zeroed[:-size] + compute_crc(zeroed, self.crc_type)


@dataclass(frozen=True)
class CanonicalBlock:
    """``data`` is typed by ``block_type``: bytes for payload and unknown
    blocks, :class:`EndpointId` for previous node, int microseconds for
    bundle age, :class:`HopCount` for hop count."""

    block_type: int
    block_number: int
    data: bytes | EndpointId | int | HopCount
    control_flags: int = 0
    crc_type: CRCType = CRCType.NONE
    crc_value: bytes | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "crc_type", CRCType(self.crc_type))
        if isinstance(self.data, (bytearray, memoryview)):
            object.__setattr__(self, "data", bytes(self.data))

    def validate(self) -> None:
        if self.block_number < 1:
            raise ValidationError(f"block number {self.block_number} is reserved")
        if self.control_flags < 0:
            raise ValidationError("negative block flags")
        t, d = self.block_type, self.data
        if t == BlockType.PREVIOUS_NODE:
            ok = isinstance(d, EndpointId)
        elif t == BlockType.BUNDLE_AGE:
            ok = isinstance(d, int) and not isinstance(d, bool) and d >= 0
        elif t == BlockType.HOP_COUNT:
            ok = isinstance(d, HopCount) and d.limit >= 1 and d.count >= 0
        else:
            ok = isinstance(d, bytes)
        if not ok:
            raise ValidationError(f"invalid data for block type {t}: {d!r:.60}")

    def data_bytes(self) -> bytes:
        t, d = self.block_type, self.data
        if t == BlockType.PREVIOUS_NODE:
            return d.encode()
        if t == BlockType.BUNDLE_AGE:
            return cbor.encode_uint(d)
        if t == BlockType.HOP_COUNT:
            return cbor.encode([d.limit, d.count])
        return d

    def encode(self) -> bytes:
        data = self.data_bytes()
        n = 5 if self.crc_type == CRCType.NONE else 6
        head = b"".join((
            cbor.encode_head(cbor.ARRAY, n),
            cbor.encode_uint(self.block_type),
            cbor.encode_uint(self.block_number),
            cbor.encode_uint(self.control_flags),
            cbor.encode_uint(int(self.crc_type)),
            cbor.encode_head(cbor.BYTES, len(data)),
        ))
        if self.crc_type == CRCType.NONE:
            return head + data
        size = self.crc_type.size
        zeroed = head + data + cbor.encode_head(cbor.BYTES, size) + bytes(size)
        return zeroed[:-size] + compute_crc(zeroed, self.crc_type)


@dataclass(frozen=True)
class Bundle:
    primary: PrimaryBlock
    canonicals: tuple[CanonicalBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "canonicals", tuple(self.canonicals))

    def validate(self) -> None:
        self.primary.validate()
        if not self.canonicals:
            raise MissingPayloadError("bundle has no canonical blocks")
        payloads = [b for b in self.canonicals if b.block_type == BlockType.PAYLOAD]
        if not payloads:
            raise MissingPayloadError("bundle has no payload block")
        if len(payloads) > 1:
            raise ValidationError("more than one payload block")
        last = self.canonicals[-1]
        if last.block_type != BlockType.PAYLOAD:
            raise ValidationError("payload block is not the last block")
        if last.block_number != 1:
            raise ValidationError(f"payload block number is {last.block_number}, must be 1")
        numbers = [b.block_number for b in self.canonicals]
        if len(set(numbers)) != len(numbers):
            raise ValidationError(f"duplicate block numbers {sorted(numbers)}")
        for t in (BlockType.PREVIOUS_NODE, BlockType.BUNDLE_AGE, BlockType.HOP_COUNT):
            if sum(1 for b in self.canonicals if b.block_type == t) > 1:
                raise ValidationError(f"more than one {t.name} block")
        for block in self.canonicals:
            block.validate()

    @property
    def id(self) -> BundleId:
        return bundle_id(self)

    @property
    def payload_block(self) -> CanonicalBlock:
        return self.canonicals[-1]

    @property
    def payload(self) -> bytes:
        return self.canonicals[-1].data

    def block(self, block_type: int) -> CanonicalBlock | None:
        for b in self.canonicals:
            if b.block_type == block_type:
                return b
        return None

    @property
    def hop_count(self) -> HopCount | None:
        b = self.block(BlockType.HOP_COUNT)
        return None if b is None else b.data

    @property
    def previous_node(self) -> EndpointId | None:
        b = self.block(BlockType.PREVIOUS_NODE)
        return None if b is None else b.data

    @property
    def bundle_age(self) -> int | None:
        b = self.block(BlockType.BUNDLE_AGE)
        return None if b is None else b.data

    @property
    def is_admin_record(self) -> bool:
        return self.primary.has_flag(BundleFlags.ADMIN_RECORD)

    def with_block_data(self, block_type: int, data, crc_type: CRCType | None = None) -> "Bundle":
        """Return a copy with the block of ``block_type`` carrying ``data``.

        An existing block keeps its number and flags; a missing one is
        inserted before the payload with the next free number.
        """
        blocks = list(self.canonicals)
        for i, b in enumerate(blocks):
            if b.block_type == block_type:
                blocks[i] = replace(b, data=data, crc_value=None)
                return Bundle(self.primary, blocks)
        number = max(b.block_number for b in blocks) + 1
        ct = self.primary.crc_type if crc_type is None else crc_type
        blocks.insert(len(blocks) - 1, CanonicalBlock(block_type, number, data, crc_type=ct))
        return Bundle(self.primary, blocks)

    def expiry_time(self, received_at: float) -> float:
        """Absolute Unix time after which the bundle is expired.

        Bundles from clockless sources (``dtn_time == 0``) expire relative to
        ``received_at`` minus the age they already carried.
        """
        lifetime_s = self.primary.lifetime / 1e6
        if self.primary.creation.dtn_time:
            return DTN_EPOCH + self.primary.creation.dtn_time + lifetime_s
        age_s = (self.bundle_age or 0) / 1e6
        return received_at + lifetime_s - age_s

    def is_expired(self, now: float | None = None, received_at: float | None = None) -> bool:
        now = time.time() if now is None else now
        received_at = now if received_at is None else received_at
        return now >= self.expiry_time(received_at)


def bundle_id(b: Bundle) -> BundleId:
    p = b.primary
    return BundleId(p.source, p.creation, p.is_fragment, p.fragment_offset if p.is_fragment else None)


def encode_bundle(b: Bundle) -> bytes:
    b.validate()
    parts = [b"\x9f", b.primary.encode()]
    parts.extend(block.encode() for block in b.canonicals)
    parts.append(b"\xff")
    return b"".join(parts)


def _verify_crc(raw: bytes, kind: CRCType, received: bytes, block_number: int | None) -> None:
    size = kind.size
    expected = compute_crc(raw[:-size] + bytes(size), kind)
    if expected != received:
        raise CRCMismatchError(block_number, expected, received)


def _read_crc_type(dec: cbor.Decoder) -> CRCType:
    value = dec.uint()
    try:
        return CRCType(value)
    except ValueError:
        raise StructureError(f"unknown CRC type {value}") from None


def _read_primary(dec: cbor.Decoder) -> PrimaryBlock:
    start = dec.offset
    n = dec.array()
    if n is None:
        raise StructureError("primary block must be a definite-length array")
    if n < 1:
        raise StructureError("empty primary block")
    version = dec.uint()
    if version != BP_VERSION:
        raise VersionError(f"unsupported bundle protocol version {version}")
    flags = dec.uint()
    crc_type = _read_crc_type(dec)
    is_fragment = bool(flags & BundleFlags.IS_FRAGMENT)
    expected = 8 + (2 if is_fragment else 0) + (1 if crc_type else 0)
    if n != expected:
        raise StructureError(f"primary block has {n} fields, expected {expected}")
    dest = EndpointId.read(dec)
    src = EndpointId.read(dec)
    report_to = EndpointId.read(dec)
    if dec.array() != 2:
        raise StructureError("creation timestamp must be a 2-element array")
    creation = CreationTimestamp(dec.uint(), dec.uint())
    lifetime = dec.uint()
    frag_offset = total_len = None
    if is_fragment:
        frag_offset, total_len = dec.uint(), dec.uint()
    crc_value = None
    if crc_type:
        crc_value = dec.bytestring()
        if len(crc_value) != crc_type.size:
            raise StructureError(f"primary CRC has {len(crc_value)} bytes, expected {crc_type.size}")
    raw = bytes(dec.data[start:dec.offset])
    if crc_type:
        _verify_crc(raw, crc_type, crc_value, None)
    primary = PrimaryBlock(
        destination=dest,
        source=src,
        report_to=report_to,
        creation=creation,
        lifetime=lifetime,
        control_flags=flags,
        crc_type=crc_type,
        fragment_offset=frag_offset,
        total_adu_length=total_len,
        version=version,
        crc_value=crc_value,
    )
    object.__setattr__(primary, "raw", raw)
    return primary


def _parse_block_data(block_type: int, data: bytes):
    if block_type == BlockType.PREVIOUS_NODE:
        return EndpointId.decode(data)
    if block_type == BlockType.BUNDLE_AGE:
        dec = cbor.Decoder(data)
        age = dec.uint()
        if not dec.at_end():
            raise StructureError("trailing bytes in bundle age block")
        return age
    if block_type == BlockType.HOP_COUNT:
        dec = cbor.Decoder(data)
        if dec.array() != 2:
            raise StructureError("hop count data must be a 2-element array")
        hc = HopCount(dec.uint(), dec.uint())
        if not dec.at_end():
            raise StructureError("trailing bytes in hop count block")
        return hc
    return data


def _read_canonical(dec: cbor.Decoder) -> CanonicalBlock:
    start = dec.offset
    n = dec.array()
    if n not in (5, 6):
        raise StructureError(f"canonical block must be a 5 or 6 element array, got {n}")
    block_type = dec.uint()
    number = dec.uint()
    flags = dec.uint()
    crc_type = _read_crc_type(dec)
    if n != (6 if crc_type else 5):
        raise StructureError(f"block {number}: CRC type {int(crc_type)} inconsistent with {n} fields")
    raw_data = dec.bytestring()
    crc_value = None
    if crc_type:
        crc_value = dec.bytestring()
        if len(crc_value) != crc_type.size:
            raise StructureError(f"block {number}: CRC has {len(crc_value)} bytes, expected {crc_type.size}")
        _verify_crc(bytes(dec.data[start:dec.offset]), crc_type, crc_value, number)
    data = _parse_block_data(block_type, raw_data)
    return CanonicalBlock(block_type, number, data, flags, crc_type, crc_value)


def decode_bundle(data: bytes, max_size: int = MAX_BUNDLE_SIZE) -> Bundle:
    """Decode and validate a bundle, verifying every CRC present.

    Raises a :class:`~bpnode.errors.BundleError` subclass on any defect.
    """
    if len(data) > max_size:
        raise SizeLimitError(f"bundle of {len(data)} bytes exceeds limit of {max_size}")
    try:
        dec = cbor.Decoder(data, max_size=max_size)
        count = dec.array()
        if count == 0:
            raise MissingPayloadError("empty bundle array")
        primary = _read_primary(dec)
        blocks = []
        if count is None:
            while not dec.at_break():
                blocks.append(_read_canonical(dec))
            dec.end_indefinite()
        else:
            for _ in range(count - 1):
                blocks.append(_read_canonical(dec))
        if not dec.at_end():
            raise StructureError(f"{dec.remaining} trailing bytes after bundle")
        bundle = Bundle(primary, blocks)
        bundle.validate()
    except BundleError:
        raise
    except (ValueError, TypeError, IndexError, OverflowError) as exc:
        raise StructureError(f"malformed bundle: {exc}") from exc
    return bundle


def build_bundle(
    destination: EndpointId | str,
    source: EndpointId | str,
    payload: bytes,
    *,
    lifetime: int = DEFAULT_LIFETIME,
    crc_type: CRCType = CRCType.NONE,
    report_flags: int = BundleFlags.REPORT_DELIVERY,
    hop_limit: int | None = DEFAULT_HOP_LIMIT,
    report_to: EndpointId | str | None = None,
    creation: CreationTimestamp | None = None,
    clock: CreationClock | None = None,
    extra_flags: int = 0,
) -> Bundle:
    """Create a new bundle with the node defaults.

    Defaults: no CRC, delivery report requested, report-to equal to the
    source. A creation time of zero (no clock) adds a Bundle Age block.
    """
    if isinstance(destination, str):
        destination = parse_eid(destination)
    if isinstance(source, str):
        source = parse_eid(source)
    if isinstance(report_to, str):
        report_to = parse_eid(report_to)
    if creation is None:
        creation = (clock or _default_clock).next()
    primary = PrimaryBlock(
        destination=destination,
        source=source,
        report_to=source if report_to is None else report_to,
        creation=creation,
        lifetime=lifetime,
        control_flags=(report_flags & REPORT_FLAGS) | extra_flags,
        crc_type=crc_type,
    )
    blocks = []
    number = 2
    if hop_limit is not None:
        blocks.append(CanonicalBlock(BlockType.HOP_COUNT, number, HopCount(hop_limit, 0), crc_type=crc_type))
        number += 1
    if creation.dtn_time == 0:
        blocks.append(CanonicalBlock(BlockType.BUNDLE_AGE, number, 0, crc_type=crc_type))
    blocks.append(CanonicalBlock(BlockType.PAYLOAD, 1, bytes(payload), crc_type=crc_type))
    bundle = Bundle(primary, blocks)
    bundle.validate()
    return bundle


_default_clock = CreationClock()
