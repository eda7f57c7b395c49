"""Endpoint identifiers for the ``dtn`` and ``ipn`` URI schemes."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from . import cbor
from .errors import EIDError, StructureError


class Scheme(enum.IntEnum):
    DTN = 1
    IPN = 2


_SCHEME_NAMES = {"dtn": Scheme.DTN, "ipn": Scheme.IPN}
_DIGITS = re.compile(r"[0-9]+\Z")


@dataclass(frozen=True, order=True)
class EndpointId:
    """``ssp`` is ``None`` for ``dtn:none``, text for other dtn EIDs and
    ``(node, service)`` for ipn EIDs."""

    scheme: Scheme
    ssp: str | tuple[int, int] | None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.scheme == Scheme.DTN:
            if self.ssp is None:
                return
            if not isinstance(self.ssp, str) or not self.ssp:
                raise EIDError("dtn SSP must be a non-empty string or None", "ssp")
            if self.ssp == "none":
                object.__setattr__(self, "ssp", None)
                return
            if any(c.isspace() for c in self.ssp):
                raise EIDError(f"whitespace in {self.ssp!r}", "ssp")
            if self.ssp.startswith("/"):
                raise EIDError(f"{self.ssp!r} starts with '/'", "ssp")
        else:
            if (
                not isinstance(self.ssp, tuple)
                or len(self.ssp) != 2
                or not all(isinstance(n, int) and not isinstance(n, bool) and 0 <= n < 2**64 for n in self.ssp)
            ):
                raise EIDError(f"ipn SSP must be (node, service), got {self.ssp!r}", "ssp")

    @classmethod
    def parse(cls, text: str) -> "EndpointId":
        return parse_eid(text)

    @classmethod
    def dtn(cls, ssp: str | None) -> "EndpointId":
        return cls(Scheme.DTN, ssp)

    @classmethod
    def ipn(cls, node: int, service: int) -> "EndpointId":
        return cls(Scheme.IPN, (node, service))

    @property
    def is_null(self) -> bool:
        return self.scheme == Scheme.DTN and self.ssp is None

    @property
    def is_node_id(self) -> bool:
        """True for a DTN-scheme EID without a service path, e.g. ``dtn:b2``."""
        return self.scheme == Scheme.DTN and self.ssp is not None and "/" not in self.ssp

    def __str__(self) -> str:
        if self.scheme == Scheme.IPN:
            return f"ipn:{self.ssp[0]}.{self.ssp[1]}"
        return "dtn:none" if self.ssp is None else f"dtn:{self.ssp}"

    def __repr__(self) -> str:
        return f"EndpointId({str(self)!r})"

    def to_cbor(self) -> list:
        if self.scheme == Scheme.IPN:
            return [2, list(self.ssp)]
        return [1, 0 if self.ssp is None else self.ssp]

    def encode(self) -> bytes:
        return cbor.encode(self.to_cbor())

    @classmethod
    def read(cls, dec: cbor.Decoder) -> "EndpointId":
        n = dec.array()
        if n != 2:
            raise StructureError(f"EID must be a 2-element array, got {n}")
        scheme = dec.uint()
        if scheme == Scheme.DTN:
            if dec.peek() >> 5 == cbor.UINT:
                if dec.uint() != 0:
                    raise StructureError("dtn SSP integer must be 0 (dtn:none)")
                return cls(Scheme.DTN, None)
            ssp = dec.text()
            try:
                return cls(Scheme.DTN, ssp)
            except EIDError as exc:
                raise StructureError(str(exc)) from None
        if scheme == Scheme.IPN:
            if dec.array() != 2:
                raise StructureError("ipn SSP must be a 2-element array")
            return cls(Scheme.IPN, (dec.uint(), dec.uint()))
        raise StructureError(f"unknown EID scheme code {scheme}")

    @classmethod
    def decode(cls, data: bytes) -> "EndpointId":
        dec = cbor.Decoder(data)
        eid = cls.read(dec)
        if not dec.at_end():
            raise StructureError("trailing bytes after EID")
        return eid


NULL_EID = EndpointId(Scheme.DTN, None)


def parse_eid(text: str) -> EndpointId:
    """Parse ``dtn:none``, ``dtn:<path>`` or ``ipn:<node>.<service>``."""
    if not isinstance(text, str) or not text:
        raise EIDError("empty endpoint identifier", "eid")
    scheme_name, sep, ssp = text.partition(":")
    if not sep:
        raise EIDError(f"missing ':' in {text!r}", "scheme")
    if not scheme_name:
        raise EIDError(f"empty scheme in {text!r}", "scheme")
    scheme = _SCHEME_NAMES.get(scheme_name)
    if scheme is None:
        raise EIDError(f"unknown scheme name {scheme_name!r}", "scheme")
    if not ssp:
        raise EIDError(f"empty SSP in {text!r}", "ssp")
    if scheme == Scheme.DTN:
        return EndpointId(Scheme.DTN, None if ssp == "none" else ssp)
    node, dot, service = ssp.partition(".")
    if not dot:
        raise EIDError(f"ipn SSP {ssp!r} lacks '.'", "ssp")
    if not _DIGITS.match(node):
        raise EIDError(f"bad node number {node!r}", "node-number")
    if not _DIGITS.match(service):
        raise EIDError(f"bad service number {service!r}", "service-number")
    return EndpointId(Scheme.IPN, (int(node), int(service)))
