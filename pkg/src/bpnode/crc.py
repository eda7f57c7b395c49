"""Block checksums: CRC-16/X-25 and CRC-32C (Castagnoli)."""

from __future__ import annotations

import enum


class CRCType(enum.IntEnum):
    NONE = 0
    CRC16 = 1
    CRC32C = 2

    @property
    def size(self) -> int:
        return {CRCType.NONE: 0, CRCType.CRC16: 2, CRCType.CRC32C: 4}[self]


def _reflected_table(poly: int, width: int) -> list[int]:
    table = []
    for byte in range(256):
        reg = byte
        for _ in range(8):
            reg = (reg >> 1) ^ poly if reg & 1 else reg >> 1
        table.append(reg & ((1 << width) - 1))
    return table


# 0x8408 and 0x82F63B78 are the bit-reversed forms of 0x1021 and 0x1EDC6F41
_X25_TABLE = _reflected_table(0x8408, 16)
_CRC32C_TABLE = _reflected_table(0x82F63B78, 32)


def crc16_x25(data: bytes) -> int:
    reg = 0xFFFF
    table = _X25_TABLE
    for b in data:
        reg = (reg >> 8) ^ table[(reg ^ b) & 0xFF]
    return reg ^ 0xFFFF


def crc32c(data: bytes) -> int:
    reg = 0xFFFFFFFF
    table = _CRC32C_TABLE
    for b in data:
        reg = (reg >> 8) ^ table[(reg ^ b) & 0xFF]
    return reg ^ 0xFFFFFFFF


def compute_crc(block_bytes: bytes, kind: CRCType | int) -> bytes:
    """Checksum of a block's encoding, big-endian, 2 or 4 bytes.

    ``block_bytes`` must already have its CRC field present and zero-filled.
    """
    kind = CRCType(kind)
    if kind == CRCType.CRC16:
        return crc16_x25(block_bytes).to_bytes(2, "big")
    if kind == CRCType.CRC32C:
        return crc32c(block_bytes).to_bytes(4, "big")
    raise ValueError("compute_crc called with CRC type NONE")
