"""A delay-tolerant bundle node: BPv7 codec, store, MTCP, discovery, routing and agents."""

from .bundle import Bundle, BundleId, build_bundle, decode_bundle, encode_bundle
from .eid import EndpointId, parse_eid

__all__ = ["Bundle", "BundleId", "EndpointId", "build_bundle", "decode_bundle", "encode_bundle", "parse_eid"]
__version__ = "0.1.0"
