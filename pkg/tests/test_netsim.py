import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedtwin.netsim import (
    GLOBAL_PARAMS,
    KINDS,
    PRIORITY,
    RAW_FRAME,
    SIGNAL_PLAN,
    TRAFFIC_PROGRAM,
    EventLoop,
    JitterSpec,
    Link,
    LinkSpec,
    Message,
    Network,
    PolicyViolation,
    Topology,
    audit_privacy,
    send_once,
)

NO_JITTER = JitterSpec("none")


def net_for(*links, record_trace=True, seed=0):
    nodes = sorted({n for l in links for n in (l.src, l.dst)})
    loop = EventLoop()
    net = Network(loop, Topology("t", nodes, list(links)), rng_for=lambda n: random.Random(f"{seed}/{n}"),
                  record_trace=record_trace)
    return loop, net


def test_frame_delivery_time_hand_value():
    # 41,667 B * 8 / 200e6 + 0.010 = 0.01166668 s
    spec = LinkSpec("edge:E", "cloud", 200e6, 0.010, NO_JITTER)
    assert send_once(spec, 41667) == pytest.approx(41667 * 8 / 200e6 + 0.010)
    assert send_once(spec, 41667) == pytest.approx(0.011667, abs=1e-6)


def test_degenerate_link_is_nearly_instant():
    spec = LinkSpec("a:1", "b:1", 1e12, 0.0, NO_JITTER)
    assert send_once(spec, 41667) == pytest.approx(41667 * 8 / 1e12)
    assert send_once(spec, 41667) < 1e-6


def test_back_to_back_frames_queue_fifo():
    spec = LinkSpec("a:1", "b:1", 1e6, 0.002, NO_JITTER)
    loop, net = net_for(spec)
    got = []
    net.attach("b:1", lambda m, t: got.append((m.id, t)))
    for _ in range(2):
        net.send(Message(RAW_FRAME, 1000, 0.0, "a:1", "b:1"))
    loop.run()
    tx = 1000 * 8 / 1e6
    assert got[0] == (1, pytest.approx(tx + 0.002))
    assert got[1][0] == 2
    assert got[1][1] >= (tx) + tx + 0.002 - 1e-12  # first transmission end + own transmission


def test_single_message_position_zero():
    link = Link(LinkSpec("a:1", "b:1", 1e6, 0.0), random.Random(0))
    assert link.priority_enqueue(Message(RAW_FRAME, 10, 0.0, "a:1", "b:1"), 0.0) == 0


def test_high_priority_overtakes_waiting_frames_only():
    spec = LinkSpec("a:1", "b:1", 1e6, 0.0, NO_JITTER)
    loop, net = net_for(spec)
    order = []
    net.attach("b:1", lambda m, t: order.append(m.kind + str(m.id)))
    for _ in range(3):
        net.send(Message(RAW_FRAME, 1000, 0.0, "a:1", "b:1"))
    link = net.links[("a:1", "b:1")]
    assert link.busy and len(link.queue) == 2  # one frame in flight, two waiting
    pos = link.priority_enqueue(Message(SIGNAL_PLAN, 100, 0.0, "a:1", "b:1", id=99), 0.0, ["a:1", "b:1"], 0)
    assert pos == 0
    loop.run()
    assert order == ["RawFrame1", "SignalPlan99", "RawFrame2", "RawFrame3"]


@given(st.lists(st.sampled_from(KINDS), min_size=1, max_size=30))
def test_queue_order_matches_sort_oracle(kinds):
    link = Link(LinkSpec("a:1", "b:1", 1e6, 0.0), random.Random(0))
    msgs = [Message(k, 10, 0.0, "a:1", "b:1", id=i) for i, k in enumerate(kinds)]
    for m in msgs:
        link.priority_enqueue(m, 0.0)
    import heapq
    served = [heapq.heappop(link.queue)[2].id for _ in msgs]
    assert served == [m.id for m in sorted(msgs, key=lambda m: (PRIORITY[m.kind], m.id))]


def test_policy_violation_is_a_hard_error():
    spec = LinkSpec("edge:E", "cloud", 1e6, 0.0, allowed=frozenset({TRAFFIC_PROGRAM}))
    loop, net = net_for(spec)
    with pytest.raises(PolicyViolation):
        net.send(Message(RAW_FRAME, 100, 0.0, "edge:E", "cloud"))
    assert net.trace == []  # nothing was queued
    with pytest.raises(PolicyViolation):
        net.send(Message(TRAFFIC_PROGRAM, 100, 0.0, "cloud", "edge:E"))  # no route


def test_multi_hop_forwarding_and_trace():
    up = LinkSpec("cam:1", "edge:E", 1e9, 0.001, NO_JITTER)
    wan = LinkSpec("edge:E", "cloud", 200e6, 0.020, NO_JITTER, allowed=frozenset({TRAFFIC_PROGRAM}))
    loop, net = net_for(up, wan)
    got = []
    net.attach("cloud", lambda m, t: got.append(t))
    net.send(Message(TRAFFIC_PROGRAM, 500, 0.0, "cam:1", "cloud"))
    loop.run()
    assert got == [pytest.approx(500 * 8 / 1e9 + 0.001 + 500 * 8 / 200e6 + 0.020)]
    assert [r.event for r in net.trace] == ["send", "send", "deliver"]
    assert net.bytes_by == {("cam->edge", TRAFFIC_PROGRAM): 500, ("edge->cloud", TRAFFIC_PROGRAM): 500}
    assert audit_privacy(net.trace) == {"RawFrame": 0, "Detections": 0}


def test_loss_drops_messages():
    spec = LinkSpec("a:1", "b:1", 1e6, 0.0, NO_JITTER, loss_prob=0.5)
    loop, net = net_for(spec)
    got = []
    net.attach("b:1", lambda m, t: got.append(m.id))
    for _ in range(200):
        net.send(Message(RAW_FRAME, 10, 0.0, "a:1", "b:1"))
    loop.run()
    assert net.dropped + net.delivered == 200 and 60 < net.dropped < 140
    assert len(got) == net.delivered


def test_jitter_samples_are_non_negative():
    rng = random.Random(1)
    assert all(JitterSpec().sample(0.02, rng) >= 0 for _ in range(1000))
    assert all(0.001 <= JitterSpec("uniform", low=0.001, high=0.002).sample(0.02, rng) <= 0.002 for _ in range(100))
    assert JitterSpec("none").sample(0.02, rng) == 0.0


def test_link_spec_validation():
    assert LinkSpec("a:1", "b:1", 1e6, 0.0).validate() == []
    errors = LinkSpec("a:1", "b:1", 0.0, -1.0, JitterSpec("weird"), loss_prob=1.0).validate()
    assert len(errors) == 4


def _random_traffic(seed, sends):
    spec = LinkSpec("a:1", "b:1", 1e6, 0.003)
    loop, net = net_for(spec, seed=seed)
    for at, kind, size in sends:
        loop.schedule(at, lambda k=kind, s=size: net.send(Message(k, s, 0.0, "a:1", "b:1")))
    loop.run()
    return net


sends = st.lists(st.tuples(st.floats(0, 0.05), st.sampled_from([RAW_FRAME, TRAFFIC_PROGRAM, GLOBAL_PARAMS]),
                           st.integers(1, 5000)), min_size=1, max_size=40)


@given(st.integers(0, 100), sends)
def test_network_invariants(seed, traffic):
    net = _random_traffic(seed, traffic)
    sent = {r.msg: r.time for r in net.trace if r.event == "send"}
    delivered = [r for r in net.trace if r.event == "deliver"]
    assert len(delivered) == len(traffic)
    for r in delivered:
        assert r.time > sent[r.msg]  # causality
        assert r.delay == pytest.approx(r.time - sent[r.msg])
    # byte accounting
    assert sum(net.bytes_by.values()) == sum(r.bytes for r in net.trace if r.event == "send")
    # determinism
    assert _random_traffic(seed, traffic).trace == net.trace


@given(sends)
def test_link_is_work_conserving(traffic):
    """Replay the event log against the single-server oracle: the i-th transmission starts at
    max(end of the previous one, i-th arrival), whatever order priorities impose."""
    spec = LinkSpec("a:1", "b:1", 1e6, 0.0, NO_JITTER)
    loop, net = net_for(spec)
    starts = []
    orig = net._start

    def spy(link):
        orig(link)
        if link.busy:
            starts.append(loop.now)

    net._start = spy
    for at, kind, size in traffic:
        loop.schedule(at, lambda k=kind, s=size: net.send(Message(k, s, 0.0, "a:1", "b:1")))
    loop.run()
    arrivals = sorted(r.time for r in net.trace if r.event == "send")
    ends = sorted(r.time for r in net.trace if r.event == "deliver")  # zero latency: delivery = end
    starts = sorted(starts)
    assert len(starts) == len(arrivals) == len(ends)
    prev_end = 0.0
    for i, s in enumerate(starts):
        assert s == pytest.approx(max(prev_end, arrivals[i]), abs=1e-12)
        prev_end = ends[i]
