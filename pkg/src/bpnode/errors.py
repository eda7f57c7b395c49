"""Exception types shared across the node."""


class BundleError(ValueError):
    """Base class for anything wrong with a bundle or its wire form."""


class TruncatedError(BundleError):
    """Input ended before a complete item could be read."""


class StructureError(BundleError):
    """The CBOR structure does not match the expected bundle layout."""


class VersionError(BundleError):
    pass


class MissingPayloadError(BundleError):
    pass


class ValidationError(BundleError):
    """A bundle or block violates a field-level invariant."""


class SizeLimitError(BundleError):
    pass


class CRCMismatchError(BundleError):
    def __init__(self, block_number: int | None, expected: bytes, actual: bytes):
        # block_number is None for the primary block
        where = "primary block" if block_number is None else f"block {block_number}"
        super().__init__(f"CRC mismatch in {where}: expected {expected.hex()}, got {actual.hex()}")
        self.block_number = block_number
        self.expected = expected
        self.actual = actual


class EIDError(BundleError):
    """An endpoint identifier could not be parsed."""

    def __init__(self, message: str, component: str):
        super().__init__(f"{component}: {message}")
        self.component = component


class StoreError(Exception):
    pass


class StoreClosedError(StoreError):
    pass


class StoreLockedError(StoreError):
    pass


class NotFoundError(StoreError, KeyError):
    pass


class CorruptionError(StoreError):
    """An indexed bundle's file is missing or unreadable."""


class ClaError(OSError):
    pass


class PeerUnreachableError(ClaError):
    pass


class TransmissionError(ClaError):
    """The connection failed after the first bytes were written."""
