"""Independent reference implementations used only by the tests."""


def crc_bitwise(data: bytes, width: int, poly: int, init: int, xorout: int) -> int:
    """Reflected-input, reflected-output CRC computed one bit at a time.

    ``poly`` is given in its normal (MSB-first) form and reflected here, so
    this shares no tables or constants with the library code.
    """
    rpoly = int(f"{poly:0{width}b}"[::-1], 2)
    reg = init
    for byte in data:
        reg ^= byte
        for _ in range(8):
            if reg & 1:
                reg = (reg >> 1) ^ rpoly
            else:
                reg >>= 1
    return reg ^ xorout


def x25(data: bytes) -> int:
    return crc_bitwise(data, 16, 0x1021, 0xFFFF, 0xFFFF)


def crc32c(data: bytes) -> int:
    return crc_bitwise(data, 32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF)


def tokenize_ipn(text: str):
    """Hand-written scanner for ``ipn:<digits>.<digits>``; None if no match."""
    if not text.startswith("ipn:"):
        return None
    numbers, current = [], ""
    for ch in text[4:]:
        if "0" <= ch <= "9":
            current += ch
        elif ch == "." and current and not numbers:
            numbers.append(int(current))
            current = ""
        else:
            return None
    if len(numbers) != 1 or not current:
        return None
    return numbers[0], int(current)


def lux_via_cbor2() -> bytes:
    """The lux-value example bundle, built with the generic cbor2 encoder."""
    import cbor2

    primary = [7, 0x004000, 0, [1, "sink/lux"], [1, "b2"], [1, "b2"], [0, 23], 3600000]
    hop = [9, 2, 0, 0, cbor2.dumps([64, 42])]
    payload = [1, 1, 0, 0, bytes([0x0E, 0xC6])]
    return b"\x9f" + cbor2.dumps(primary) + cbor2.dumps(hop) + cbor2.dumps(payload) + b"\xff"
