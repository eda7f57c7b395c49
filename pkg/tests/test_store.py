import json
import os
import signal
import subprocess
import sys
import textwrap
import threading
import time

import pytest

from bpnode.bundle import CreationTimestamp, build_bundle, bundle_id, encode_bundle
from bpnode.errors import CorruptionError, NotFoundError, StoreClosedError, StoreLockedError
from bpnode.store import INDEX_MAGIC, Constraint, Store, fsck_path

C = Constraint


def mk(seq, lifetime_s=3600.0, payload=b"data", dtn_time=0, **kw):
    return build_bundle("dtn:far", "dtn:me", payload, lifetime=int(lifetime_s * 1e6),
                        creation=CreationTimestamp(dtn_time, seq), **kw)


@pytest.fixture
def store(tmp_path):
    s = Store(tmp_path / "store")
    yield s
    s.close()


def test_push_fresh(store):
    desc, known = store.push(mk(1))
    assert not known
    assert desc.constraints == {C.DISPATCH_PENDING}
    assert store.pending({C.DISPATCH_PENDING}) == [desc]


def test_push_idempotent(store):
    b = mk(1)
    first, _ = store.push(b)
    second, known = store.push(b)
    assert known and second == first
    assert len(store) == 1


def test_query(store):
    b = mk(1)
    store.push(b)
    got, desc = store.query(bundle_id(b))
    assert got == b and desc.id == bundle_id(b)
    with pytest.raises(NotFoundError):
        store.query(bundle_id(mk(2)))


def test_pending_empty(store):
    assert store.pending({C.FORWARD_PENDING}) == []


def test_pending_counting(store):
    ids = []
    for i in range(100):
        d, _ = store.push(mk(i), constraints={C.FORWARD_PENDING, C.LOCAL_DELIVERY})
        ids.append(d.id)
    for bid in ids[:40]:
        store.update(bid, remove={C.LOCAL_DELIVERY})
    assert len(store.pending({C.LOCAL_DELIVERY})) == 60
    assert [d.id for d in store.pending({C.LOCAL_DELIVERY})] == ids[40:]


def test_empty_constraints_delete(store):
    b = mk(1)
    d, _ = store.push(b, constraints={C.LOCAL_DELIVERY})
    tomb = store.update(d.id, remove={C.LOCAL_DELIVERY})
    assert tomb.constraints == {C.DELETED}
    with pytest.raises(NotFoundError):
        store.query(d.id)
    # tombstone suppresses the duplicate
    again, known = store.push(b)
    assert known and again.deleted


def test_deleted_is_terminal(store):
    d, _ = store.push(mk(1))
    store.delete(d.id)
    after = store.update(d.id, add={C.FORWARD_PENDING})
    assert after.constraints == {C.DELETED}
    assert store.pending({C.FORWARD_PENDING}) == []


def test_sent_to_monotone(store):
    from bpnode.eid import parse_eid

    d, _ = store.push(mk(1))
    store.add_sent_to(d.id, parse_eid("dtn:a"))
    store.add_sent_to(d.id, parse_eid("dtn:b"))
    store.add_sent_to(d.id, parse_eid("dtn:a"))
    assert store.descriptor(d.id).sent_to == {parse_eid("dtn:a"), parse_eid("dtn:b")}


def test_gc_lifetime(store):
    now = time.time()
    d, _ = store.push(mk(1, lifetime_s=1.0), received_at=now)
    assert store.gc(now) == []
    assert store.gc(now + 2) == [d.id]
    with pytest.raises(NotFoundError):
        store.query(d.id)
    assert not any(store.bundle_dir.iterdir())


def test_gc_staggered_matches_scan(store):
    now = 1_000_000.0
    lifetimes = [0.5, 3, 1, 7, 2, 9, 4, 6, 8, 5]
    for i, lt in enumerate(lifetimes):
        store.push(mk(i, lifetime_s=lt), received_at=now)
    t = now + 4.5
    expected = [d.id for d in store.all() if d.expiry < t]
    assert store.gc(t) == expected
    assert len(expected) == 5
    assert all(d.expiry >= t for d in store.all())


def test_expiry_uses_bundle_age(store):
    from bpnode.bundle import BlockType

    b = mk(1, lifetime_s=10).with_block_data(BlockType.BUNDLE_AGE, 4_000_000)
    d, _ = store.push(b, received_at=100.0)
    assert d.expiry == pytest.approx(106.0)


def test_expiry_with_clock(store):
    from bpnode.bundle import DTN_EPOCH

    d, _ = store.push(mk(1, lifetime_s=10, dtn_time=500), received_at=0.0)
    assert d.expiry == DTN_EPOCH + 510


def test_persistence_and_tombstones(tmp_path):
    path = tmp_path / "s"
    with Store(path) as s:
        kept, _ = s.push(mk(1))
        gone, _ = s.push(mk(2))
        s.update(kept.id, add={C.FORWARD_PENDING}, remove={C.DISPATCH_PENDING})
        s.delete(gone.id)
        s.record_creation(CreationTimestamp(0, 77))
    with Store(path) as s:
        assert s.descriptor(kept.id).constraints == {C.FORWARD_PENDING}
        assert s.query(kept.id)[0] == mk(1)
        _, known = s.push(mk(2))
        assert known
        assert s.last_creation == CreationTimestamp(0, 77)
        assert s.fsck() == []


def test_lock(tmp_path):
    with Store(tmp_path / "s"):
        with pytest.raises(StoreLockedError):
            Store(tmp_path / "s")


def test_closed(tmp_path):
    s = Store(tmp_path / "s")
    s.close()
    with pytest.raises(StoreClosedError):
        s.push(mk(1))


def test_missing_file_quarantined(store):
    d, _ = store.push(mk(1))
    (store.bundle_dir / d.file_ref).unlink()
    with pytest.raises(CorruptionError):
        store.query(d.id)
    assert store.descriptor(d.id).deleted
    assert d.key in store.quarantined


def test_recovery_cases(tmp_path):
    path = tmp_path / "s"
    with Store(path) as s:
        a, _ = s.push(mk(1))
        b, _ = s.push(mk(2))
    # orphan: file written and renamed, index record never appended
    orphan = mk(3)
    (path / "bundles" / Store.file_name(bundle_id(orphan))).write_bytes(encode_bundle(orphan))
    # interrupted temp write
    (path / "bundles" / "deadbeef.tmp").write_bytes(b"\x9f\x88")
    # indexed but file lost
    (path / "bundles" / b.file_ref).unlink()
    # torn trailing index record
    with open(path / "index.log", "a") as f:
        f.write('{"op": "put", "id": [')
    with Store(path) as s:
        assert s.fsck() == []
        assert s.query(a.id)[0] == mk(1)
        with pytest.raises(NotFoundError):
            s.query(b.id)
        with pytest.raises(NotFoundError):
            s.query(bundle_id(orphan))
        assert sorted(p.name for p in s.bundle_dir.iterdir()) == [a.file_ref]


def test_fsck_detects(store):
    d, _ = store.push(mk(1))
    (store.bundle_dir / "stray.bundle").write_bytes(b"x")
    (store.bundle_dir / d.file_ref).write_bytes(encode_bundle(mk(9)))
    problems = store.fsck()
    assert any("orphan" in p for p in problems)
    assert any("holds" in p for p in problems)


def test_index_header(store):
    assert store.index_path.read_text().splitlines()[0] == INDEX_MAGIC


def test_concurrent_push_same_and_distinct(store):
    bundles = [mk(i, payload=os.urandom(2000)) for i in range(20)]
    results = []

    def worker():
        for b in bundles:
            results.append(store.push(b)[1])

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count(False) == 20
    assert len(store) == 20
    assert store.fsck() == []


CHILD = textwrap.dedent("""
    import os, sys
    from bpnode.bundle import build_bundle, CreationTimestamp
    from bpnode.store import Store
    s = Store(sys.argv[1])
    print("ready", flush=True)
    i = 0
    while True:
        b = build_bundle("dtn:far", "dtn:me", os.urandom(200_000), creation=CreationTimestamp(0, i))
        s.push(b)
        i += 1
""")


@pytest.mark.parametrize("delay", [0.05, 0.13, 0.29, 0.41])
def test_kill_during_pushes(tmp_path, delay):
    path = tmp_path / "s"
    proc = subprocess.Popen([sys.executable, "-c", CHILD, str(path)], stdout=subprocess.PIPE)
    assert proc.stdout.readline().strip() == b"ready"
    time.sleep(delay)
    proc.send_signal(signal.SIGKILL)
    proc.wait()
    assert fsck_path(path) == []
    with Store(path) as s:
        for d in s.all():
            bundle, _ = s.query(d.id)
            assert len(bundle.payload) == 200_000
        # every record in the compacted index refers to a readable file
        lines = s.index_path.read_text().splitlines()[1:]
        puts = [json.loads(x) for x in lines if '"put"' in x]
        assert len(puts) == len(s)
