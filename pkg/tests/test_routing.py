import random
import threading
from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bpnode.bundle import CreationTimestamp, build_bundle, bundle_id
from bpnode.eid import parse_eid
from bpnode.routing import EpidemicRouting, EventKind, FloodRouting, RoutingEvent, make_routing
from bpnode.store import Store

A, B, C = (parse_eid(f"dtn:{n}") for n in "abc")
BID = bundle_id(build_bundle("dtn:z", "dtn:y", b"x", creation=CreationTimestamp(1, 1)))


def with_peers(routing, *peers):
    for p in peers:
        routing.note_event(RoutingEvent.appeared(p))
    return routing


def test_received_from_excluded():
    r = with_peers(EpidemicRouting(), A, B)
    r.note_event(RoutingEvent.received(BID, A))
    assert r.select_peers(BID) == [B]


def test_sent_twice_set_semantics():
    r = with_peers(EpidemicRouting(), A, B)
    r.note_event(RoutingEvent.sent(BID, B))
    r.note_event(RoutingEvent.sent(BID, B))
    assert r._sent[BID.key()] == {B}


def test_disappeared_peer():
    r = with_peers(EpidemicRouting(), A, B)
    r.note_event(RoutingEvent.disappeared(A))
    assert r.select_peers(BID) == [B]


def test_fresh_and_empty():
    assert with_peers(EpidemicRouting(), B, A).select_peers(BID) == [A, B]
    assert EpidemicRouting().select_peers(BID) == []


def test_received_without_sender():
    r = with_peers(EpidemicRouting(), A)
    r.note_event(RoutingEvent.received(BID))
    assert r.select_peers(BID) == [A]


@pytest.mark.parametrize("kwargs", [
    dict(kind=EventKind.BUNDLE_SENT, bundle_id=BID),
    dict(kind=EventKind.PEER_APPEARED),
    dict(kind=EventKind.PEER_APPEARED, bundle_id=BID, peer=A),
    dict(kind=EventKind.BUNDLE_RECEIVED),
])
def test_event_shape(kwargs):
    with pytest.raises(ValueError):
        RoutingEvent(**kwargs)


def test_unknown_algorithm():
    with pytest.raises(ValueError):
        make_routing("prophet")
    assert isinstance(make_routing("epidemic"), EpidemicRouting)


peer_names = st.sets(st.sampled_from("abcdefgh"), max_size=8)


@settings(max_examples=200)
@given(peer_names, peer_names, peer_names, peer_names)
def test_selection_is_set_difference(live, received, sent, gone):
    r = EpidemicRouting()
    for n in sorted(live):
        r.note_event(RoutingEvent.appeared(parse_eid(f"dtn:{n}")))
    for n in sorted(gone):
        r.note_event(RoutingEvent.disappeared(parse_eid(f"dtn:{n}")))
    for n in sorted(received):
        r.note_event(RoutingEvent.received(BID, parse_eid(f"dtn:{n}")))
    for n in sorted(sent):
        r.note_event(RoutingEvent.sent(BID, parse_eid(f"dtn:{n}")))
    expected = sorted(f"dtn:{n}" for n in (live - gone) - received - sent)
    got = r.select_peers(BID)
    assert [str(p) for p in got] == expected
    assert not set(got) & r._seen_by(BID)


def test_store_write_through_survives_restart(tmp_path):
    b = build_bundle("dtn:z", "dtn:y", b"x", creation=CreationTimestamp(1, 1))
    with Store(tmp_path / "s") as s:
        s.push(b)
        r = with_peers(EpidemicRouting(s), A, B, C)
        r.note_event(RoutingEvent.received(b.id, A))
        r.note_event(RoutingEvent.sent(b.id, B))
    with Store(tmp_path / "s") as s:
        r = with_peers(EpidemicRouting(s), A, B, C)
        assert r.select_peers(b.id) == [C]


def test_flood_ignores_history():
    r = with_peers(FloodRouting(), A, B)
    r.note_event(RoutingEvent.sent(BID, A))
    assert r.select_peers(BID) == [A, B]


def test_concurrent_events():
    r = EpidemicRouting()
    peers = [parse_eid(f"dtn:n{i}") for i in range(50)]

    def churn(chunk):
        for p in chunk:
            r.note_event(RoutingEvent.appeared(p))
            r.note_event(RoutingEvent.sent(BID, p))
            r.select_peers(BID)

    threads = [threading.Thread(target=churn, args=(peers[i::4],)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert r.select_peers(BID) == []
    assert len(r.live_peers()) == 50


def bfs_reachable(adj, start):
    seen, todo = {start}, deque([start])
    while todo:
        for nxt in adj[todo.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                todo.append(nxt)
    return seen


def simulate_epidemic(adj, origin, rounds=100):
    """Synchronous rounds of select/send over lossless links; returns holders and transmissions."""
    names = {n: parse_eid(f"dtn:n{n}") for n in adj}
    back = {v: k for k, v in names.items()}
    routers = {}
    for n in adj:
        routers[n] = with_peers(EpidemicRouting(), *(names[m] for m in adj[n]))
    holders = {origin}
    routers[origin].note_event(RoutingEvent.received(BID))
    sends = 0
    for _ in range(rounds):
        arrivals = []
        for n in sorted(holders):
            for peer in routers[n].select_peers(BID):
                routers[n].note_event(RoutingEvent.sent(BID, peer))
                arrivals.append((back[peer], n))
                sends += 1
        if not arrivals:
            break
        for dst, src in arrivals:
            routers[dst].note_event(RoutingEvent.received(BID, names[src]))
            holders.add(dst)
    return holders, sends


@pytest.mark.parametrize("seed", range(25))
def test_epidemic_completeness_random_graphs(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 12)
    adj = {i: set() for i in range(n)}
    p = rng.uniform(0.1, 0.6)
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p:
                adj[i].add(j)
                adj[j].add(i)
    origin = rng.randrange(n)
    holders, sends = simulate_epidemic(adj, origin)
    assert holders == bfs_reachable(adj, origin)
    # one transmission per directed edge at most
    assert sends <= sum(len(v) for v in adj.values())
