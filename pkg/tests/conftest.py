import pytest

from bpnode.bundle import (
    BlockType,
    Bundle,
    BundleFlags,
    CanonicalBlock,
    CreationTimestamp,
    HopCount,
    PrimaryBlock,
)
from bpnode.eid import parse_eid

# frozen output of oracles.lux_via_cbor2()
B_LUX = bytes.fromhex(
    "9f88071940000082016873696e6b2f6c7578820162623282016262328200171a0036ee80"
    "850902000045821840182a8501010000420ec6ff"
)


def make_lux() -> Bundle:
    primary = PrimaryBlock(
        destination=parse_eid("dtn:sink/lux"),
        source=parse_eid("dtn:b2"),
        report_to=parse_eid("dtn:b2"),
        creation=CreationTimestamp(0, 23),
        lifetime=3600000,
        control_flags=BundleFlags.REPORT_RECEPTION,
    )
    return Bundle(
        primary,
        [
            CanonicalBlock(BlockType.HOP_COUNT, 2, HopCount(64, 42)),
            CanonicalBlock(BlockType.PAYLOAD, 1, bytes([0x0E, 0xC6])),
        ],
    )


@pytest.fixture
def lux() -> Bundle:
    return make_lux()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
