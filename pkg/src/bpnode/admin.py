"""Administrative records carried in the payload of flag-marked bundles.

Only bundle status reports (record type 1) are interpreted; other record
types decode to a generic :class:`AdministrativeRecord`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import cbor
from .bundle import (
    Bundle,
    BundleFlags,
    BundleId,
    CreationTimestamp,
    build_bundle,
    dtn_now,
)
from .eid import EndpointId
from .errors import BundleError, StructureError

STATUS_REPORT = 1


class ReasonCode(enum.IntEnum):
    NO_INFO = 0
    LIFETIME_EXPIRED = 1
    FORWARDED_UNIDIRECTIONAL = 2
    TRANSMISSION_CANCELED = 3
    DEPLETED_STORAGE = 4
    DEST_UNINTELLIGIBLE = 5
    NO_ROUTE = 6
    NO_CONTACT = 7
    BLOCK_UNINTELLIGIBLE = 8
    HOP_LIMIT_EXCEEDED = 9


REASON_TEXT = {
    ReasonCode.NO_INFO: "no additional information",
    ReasonCode.LIFETIME_EXPIRED: "lifetime expired",
    ReasonCode.HOP_LIMIT_EXCEEDED: "hop limit exceeded",
}


class StatusKind(enum.Enum):
    RECEIVED = "received"
    FORWARDED = "forwarded"
    DELIVERED = "delivered"
    DELETED = "deleted"


_KIND_ORDER = (StatusKind.RECEIVED, StatusKind.FORWARDED, StatusKind.DELIVERED, StatusKind.DELETED)

REPORT_FLAG_FOR = {
    StatusKind.RECEIVED: BundleFlags.REPORT_RECEPTION,
    StatusKind.FORWARDED: BundleFlags.REPORT_FORWARDING,
    StatusKind.DELIVERED: BundleFlags.REPORT_DELIVERY,
    StatusKind.DELETED: BundleFlags.REPORT_DELETION,
}


@dataclass(frozen=True)
class StatusItem:
    asserted: bool = False
    time: int | None = None

    def to_cbor(self) -> list:
        return [self.asserted] if self.time is None else [self.asserted, self.time]


@dataclass(frozen=True)
class StatusReport:
    subject: BundleId
    reason: int = ReasonCode.NO_INFO
    received: StatusItem = StatusItem()
    forwarded: StatusItem = StatusItem()
    delivered: StatusItem = StatusItem()
    deleted: StatusItem = StatusItem()

    record_type = STATUS_REPORT

    @property
    def asserted(self) -> list[StatusKind]:
        return [k for k in _KIND_ORDER if getattr(self, k.value).asserted]

    def to_cbor(self) -> list:
        content = [
            [getattr(self, k.value).to_cbor() for k in _KIND_ORDER],
            int(self.reason),
            self.subject.source.to_cbor(),
            self.subject.creation.to_cbor(),
        ]
        if self.subject.is_fragment:
            content.append(self.subject.fragment_offset)
        return [STATUS_REPORT, content]


@dataclass(frozen=True)
class AdministrativeRecord:
    record_type: int
    content: object

    def to_cbor(self) -> list:
        return [self.record_type, self.content]


def encode_admin_record(record: StatusReport | AdministrativeRecord) -> bytes:
    return cbor.encode(record.to_cbor())


def _status_item(value) -> StatusItem:
    if not isinstance(value, list) or len(value) not in (1, 2) or not isinstance(value[0], bool):
        raise StructureError(f"bad status item {value!r}")
    t = value[1] if len(value) == 2 else None
    if t is not None and (not isinstance(t, int) or isinstance(t, bool) or t < 0):
        raise StructureError(f"bad status time {t!r}")
    return StatusItem(value[0], t)


def _eid_from_obj(obj) -> EndpointId:
    return EndpointId.decode(cbor.encode(obj))


def decode_admin_record(data: bytes) -> StatusReport | AdministrativeRecord:
    try:
        obj = cbor.decode(data)
        if not isinstance(obj, list) or len(obj) != 2 or not isinstance(obj[0], int) or isinstance(obj[0], bool):
            raise StructureError("administrative record must be [record_type, content]")
        record_type, content = obj
        if record_type != STATUS_REPORT:
            return AdministrativeRecord(record_type, content)
        if not isinstance(content, list) or len(content) not in (4, 5):
            raise StructureError("status report must have 4 or 5 fields")
        info, reason, source, creation = content[:4]
        if not isinstance(info, list) or len(info) != 4:
            raise StructureError("status report needs 4 status items")
        items = [_status_item(v) for v in info]
        if not isinstance(reason, int) or isinstance(reason, bool) or reason < 0:
            raise StructureError("reason code must be an unsigned integer")
        if not (isinstance(creation, list) and len(creation) == 2 and all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in creation)):
            raise StructureError("bad creation timestamp in status report")
        frag = content[4] if len(content) == 5 else None
        if frag is not None and (not isinstance(frag, int) or isinstance(frag, bool) or frag < 0):
            raise StructureError("bad fragment offset in status report")
        subject = BundleId(_eid_from_obj(source), CreationTimestamp(*creation), frag is not None, frag)
        return StatusReport(subject, reason, *items)
    except BundleError:
        raise
    except (ValueError, TypeError) as exc:
        raise StructureError(f"malformed administrative record: {exc}") from exc


def status_report_bundle(
    subject: Bundle,
    kind: StatusKind,
    node_id: EndpointId,
    reason: int = ReasonCode.NO_INFO,
    lifetime: int | None = None,
    clock=None,
    hop_limit: int | None = 64,
) -> Bundle:
    """Build the report bundle for one status assertion about ``subject``.

    The report itself requests no reports, so reports never cascade.
    """
    with_time = subject.primary.has_flag(BundleFlags.STATUS_TIME)
    item = StatusItem(True, dtn_now() if with_time else None)
    report = StatusReport(subject.id, reason, **{kind.value: item})
    return build_bundle(
        subject.primary.report_to,
        node_id,
        encode_admin_record(report),
        lifetime=subject.primary.lifetime if lifetime is None else lifetime,
        report_flags=0,
        hop_limit=hop_limit,
        clock=clock,
        extra_flags=BundleFlags.ADMIN_RECORD,
    )
