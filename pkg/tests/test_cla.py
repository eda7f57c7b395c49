import queue
import random
import socket
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpnode.bundle import CreationTimestamp, build_bundle, decode_bundle, encode_bundle
from bpnode.cla import ClaDescriptor, MTCPListener, MTCPSender, frame
from bpnode.errors import PeerUnreachableError
from bpnode.pacing import TokenBucket, shape_bandwidth, transfer_floor

from .conftest import B_LUX, make_lux
from .strategies import random_bundle


@pytest.fixture
def listener():
    got = queue.Queue()
    lst = MTCPListener("127.0.0.1", 0, lambda b, addr: got.put((b, addr)))
    lst.start()
    lst.received = got
    yield lst
    lst.stop()


def closed_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def wait_for(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(0.01)
    return False


class TestDescriptor:
    @pytest.mark.parametrize("text", ["mtcp://127.0.0.1:4556", "mtcp://node-a:9", "mtcp://[::1]:4556"])
    def test_roundtrip(self, text):
        assert str(ClaDescriptor.parse(text)) == text

    @pytest.mark.parametrize("text", ["mtcp://host", "127.0.0.1:4556", "mtcp://host:99999", "mtcp://h:1/x"])
    def test_bad(self, text):
        with pytest.raises(ValueError):
            ClaDescriptor.parse(text)


def test_frame_header():
    assert frame(b"abc") == b"\x43abc"
    assert frame(bytes(300))[:3] == b"\x59\x01\x2c"


def test_golden_loopback(listener):
    sender = MTCPSender()
    report = sender.send(listener.descriptor, make_lux())
    bundle, addr = listener.received.get(timeout=5)
    assert bundle == make_lux()
    assert report.bytes_sent == len(frame(B_LUX))
    assert addr[0] == "127.0.0.1"
    sender.close()


def test_two_frames_in_order(listener):
    s = socket.create_connection(("127.0.0.1", listener.port))
    a = build_bundle("dtn:x", "dtn:y", b"first", creation=CreationTimestamp(1, 1))
    b = build_bundle("dtn:x", "dtn:y", b"second", creation=CreationTimestamp(1, 2))
    s.sendall(frame(encode_bundle(a)) + frame(encode_bundle(b)))
    assert listener.received.get(timeout=5)[0] == a
    assert listener.received.get(timeout=5)[0] == b
    s.close()


def test_garbage_closes_connection(listener):
    s = socket.create_connection(("127.0.0.1", listener.port))
    s.sendall(b"\x43\x01\x02\x03")
    s.settimeout(5)
    assert s.recv(10) == b""  # server closed our connection
    assert wait_for(lambda: listener.errors == 1)
    assert listener.received.empty()
    # listener keeps serving other connections
    MTCPSender().send(listener.descriptor, make_lux())
    assert listener.received.get(timeout=5)[0] == make_lux()


def test_non_bytestring_frame(listener):
    s = socket.create_connection(("127.0.0.1", listener.port))
    s.sendall(B_LUX)  # bare bundle, no byte-string wrapper
    s.settimeout(5)
    assert s.recv(10) == b""
    assert wait_for(lambda: listener.errors == 1)


def test_truncated_frame_not_delivered(listener):
    s = socket.create_connection(("127.0.0.1", listener.port))
    data = frame(B_LUX)
    s.sendall(data[:-3])
    s.close()
    assert wait_for(lambda: listener.errors == 1)
    assert listener.received.empty()


def test_unreachable():
    with pytest.raises(PeerUnreachableError):
        MTCPSender(connect_timeout=1).send(ClaDescriptor("mtcp", "127.0.0.1", closed_port()), make_lux())


def test_connection_reuse_and_reconnect():
    got = queue.Queue()
    lst = MTCPListener("127.0.0.1", 0, lambda b, a: got.put(a))
    lst.start()
    sender = MTCPSender()
    for seq in range(3):
        sender.send(lst.descriptor, build_bundle("dtn:x", "dtn:y", b"", creation=CreationTimestamp(1, seq)))
    addrs = {got.get(timeout=5) for _ in range(3)}
    assert len(addrs) == 1
    port = lst.port
    lst.stop()
    lst2 = MTCPListener("127.0.0.1", port, lambda b, a: got.put(a))
    lst2.start()
    time.sleep(0.1)
    sender.send(lst2.descriptor, make_lux())
    assert got.get(timeout=5)
    lst2.stop()
    sender.close()


def test_concurrent_senders(listener):
    bundles = [build_bundle("dtn:x", "dtn:y", bytes([i]) * 5000, creation=CreationTimestamp(2, i)) for i in range(30)]

    def push(chunk):
        s = MTCPSender()
        for b in chunk:
            s.send(listener.descriptor, b)
        s.close()

    threads = [threading.Thread(target=push, args=(bundles[i::3],)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = [listener.received.get(timeout=5)[0] for _ in bundles]
    assert sorted(b.id for b in got) == sorted(b.id for b in bundles)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(1, 700), min_size=1, max_size=30))
def test_framing_isolation_random_chunks(seed, cuts):
    rng = random.Random(seed)
    bundles = [random_bundle(rng) for _ in range(rng.randint(1, 5))]
    stream = b"".join(frame(encode_bundle(b)) for b in bundles)
    got = queue.Queue()
    lst = MTCPListener("127.0.0.1", 0, lambda b, a: got.put(b))
    lst.start()
    try:
        s = socket.create_connection(("127.0.0.1", lst.port))
        s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        pos, i = 0, 0
        while pos < len(stream):
            step = cuts[i % len(cuts)]
            s.sendall(stream[pos:pos + step])
            pos += step
            i += 1
        s.close()
        received = [got.get(timeout=5) for _ in bundles]
        assert received == bundles
    finally:
        lst.stop()


def test_sender_never_reads():
    # a server that writes junk back must not disturb the sender's frames
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen()
    port = srv.getsockname()[1]
    chunks = []

    def serve():
        conn, _ = srv.accept()
        conn.sendall(b"junk the sender must ignore")
        while True:
            try:
                d = conn.recv(65536)
            except ConnectionResetError:  # closing with unread junk resets
                break
            if not d:
                break
            chunks.append(d)
        conn.close()

    t = threading.Thread(target=serve)
    t.start()
    sender = MTCPSender()
    sender.send(ClaDescriptor("mtcp", "127.0.0.1", port), make_lux())
    time.sleep(0.05)
    # the unread junk makes the connection look dead, so the sender reconnects
    # rather than ever consuming it
    sender.close()
    t.join(5)
    srv.close()
    assert b"".join(chunks) == frame(B_LUX)


class TestPacing:
    def test_bucket_arithmetic(self):
        now = [0.0]
        slept = []
        bucket = TokenBucket(1000, clock=lambda: now[0], sleep=slept.append)
        assert bucket.reserve(500) == pytest.approx(0.5)
        assert bucket.reserve(500) == pytest.approx(1.0)
        now[0] = 10.0  # idle time earns no credit with burst 0
        assert bucket.reserve(100) == pytest.approx(0.1)

    def test_burst(self):
        now = [0.0]
        bucket = TokenBucket(1000, burst=300, clock=lambda: now[0])
        now[0] = 5.0
        assert bucket.reserve(300) == 0.0
        assert bucket.reserve(100) == pytest.approx(0.1)

    def test_shape_disabled(self):
        assert shape_bandwidth(None) is None
        assert shape_bandwidth(0) is None
        with pytest.raises(ValueError):
            shape_bandwidth(-1)

    def test_floor_values(self):
        assert transfer_floor(25 * 2**20, 54e6) == pytest.approx(3.884, abs=1e-3)
        assert transfer_floor(64 * 1024, 54e6) == pytest.approx(0.00971, abs=1e-5)
        assert transfer_floor(5 * 2**20, 54e6, hops=4) == pytest.approx(3.107, abs=1e-3)

    def test_paced_send_respects_floor(self, listener):
        payload = bytes(64 * 1024)
        sender = MTCPSender(pacing_rate=54e6)
        t0 = time.monotonic()
        sender.send(listener.descriptor, build_bundle("dtn:x", "dtn:y", payload))
        elapsed = time.monotonic() - t0
        assert elapsed >= transfer_floor(len(payload), 54e6)
        listener.received.get(timeout=5)
        sender.close()

    def test_paced_large_send(self, listener):
        payload = bytes(2 * 2**20)
        sender = MTCPSender(pacing_rate=54e6)
        t0 = time.monotonic()
        sender.send(listener.descriptor, build_bundle("dtn:x", "dtn:y", payload))
        elapsed = time.monotonic() - t0
        floor = transfer_floor(len(payload), 54e6)
        assert floor <= elapsed <= floor * 1.2
        assert listener.received.get(timeout=5)[0].payload == payload

    def test_unpaced_is_fast(self, listener):
        sender = MTCPSender()
        t0 = time.monotonic()
        sender.send(listener.descriptor, build_bundle("dtn:x", "dtn:y", bytes(2 * 2**20)))
        listener.received.get(timeout=5)
        assert time.monotonic() - t0 < transfer_floor(2 * 2**20, 54e6)
