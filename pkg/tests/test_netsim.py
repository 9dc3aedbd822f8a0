import random

import pytest
from hypothesis import given, settings, strategies as st

from sdiiot.messages import NetPacket, Transport
from sdiiot.netsim import (EventLoop, LinkSpec, Network, PriorityQueueSet, SiteSpec, TokenBucket,
                           Topology, WanPath, hop_breakdown)
from sdiiot.qos import DscpClass, default_policy


def pkt(size=100, dscp=DscpClass.BE, selector=None, flow="f", dst="b", cls="BACKGROUND"):
    return NetPacket("a", dst, dscp, size, Transport.UDP_LIKE, flow, cls, selector)


def test_loop_orders_ties_by_insertion():
    loop = EventLoop()
    out = []
    for i in range(5):
        loop.call_at(10.0, out.append, i)
    loop.call_at(5.0, out.append, "early")
    loop.run()
    assert out == ["early", 0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        loop.schedule(-1, print)


def test_loop_until_advances_clock():
    loop = EventLoop()
    loop.call_at(50.0, lambda: None)
    loop.run(until=20.0)
    assert loop.now == 20.0 and loop.pending() == 1


def two_hosts(bw=100e6, prop=1000.0, **kw):
    net = Network(EventLoop(0), record_hops=True)
    net.host("a")
    net.host("b")
    net.connect("a", "b", bw, prop, **kw)
    net.build_routes()
    return net


def test_ack_on_idle_link():
    net = two_hosts()
    got = []
    net.nodes["b"].default_handler = got.append
    net.nodes["a"].send(pkt(46))
    net.loop.run()
    assert got[0].delivered_at == pytest.approx(1000.0 + 3.68)


def test_overflow_tail_drop():
    net = two_hosts(depth_limit=3)
    for _ in range(6):
        net.nodes["a"].send(pkt(1500))
    net.loop.run()
    c = net.counters["BACKGROUND"]
    # one packet goes straight into service, three wait, two overflow
    assert (c.injected, c.delivered, c.dropped) == (6, 4, 2)
    assert net.drops_by_reason == {"overflow": 2}


def test_loss_rate_one_drops_everything():
    net = two_hosts(loss_rate=1.0)
    net.nodes["a"].send(pkt())
    net.loop.run()
    assert net.counters["BACKGROUND"].dropped == 1


def test_strict_priority():
    qs = PriorityQueueSet()
    for i in range(100):
        qs.enqueue(pkt(flow=f"be{i}"), 3)
    qs.enqueue(pkt(flow="ef"), 0)
    p, q = qs.dequeue(0.0)
    assert (p.flow_id, q) == ("ef", 0)
    assert qs.dequeue(0.0)[1] == 3


def test_depleted_bucket_yields_to_next_queue():
    qs = PriorityQueueSet(bucket_bytes=1500)
    qs.enqueue(pkt(1500, flow="q0a"), 0)
    qs.enqueue(pkt(1500, flow="q0b"), 0)
    qs.enqueue(pkt(1500, flow="q1"), 1)
    assert qs.dequeue(0.0)[0].flow_id == "q0a"
    assert qs.dequeue(0.0)[0].flow_id == "q1"
    p, wake = qs.dequeue(0.0)
    assert p is None and wake == pytest.approx(120.0)  # 1500 B at 100 Mbps
    assert qs.dequeue(wake)[0].flow_id == "q0b"


def test_token_bucket():
    tb = TokenBucket(8e6, 1000)  # 1 byte/us
    assert tb.try_consume(1000, 0.0)
    assert not tb.try_consume(1, 0.0)
    assert tb.ready_at(500, 0.0) == 500.0
    assert tb.try_consume(500, 500.0)


def test_wan_path_bounds_and_fifo():
    w = WanPath(40_000, 40_000, random.Random(1))
    prev = 0
    for i in range(1000):
        d = w.sample()
        assert 40_000 <= d <= 80_000
        t = w.arrival(i * 10.0)
        assert t >= prev
        prev = t
    assert WanPath(5.0, 0.0, random.Random()).sample() == 5.0


def line_network():
    net = Network(EventLoop(0), record_hops=True)
    for n in ("a", "b"):
        net.host(n)
    net.switch("s")
    net.connect("a", "s", 1e9, 100.0)
    net.connect("s", "b", 100e6, 1000.0)
    net.build_routes()
    return net


def test_hop_breakdown_reconciles():
    net = line_network()
    net.nodes["s"].policy = default_policy()
    got = []
    net.nodes["b"].default_handler = got.append
    for i in range(20):
        net.nodes["a"].send(pkt(1200, flow=f"f{i}"))
    net.loop.run()
    assert len(got) == 20
    for p in got:
        parts = hop_breakdown(p)
        assert sum(parts.values()) == pytest.approx(p.delivered_at - p.created_at)
        assert parts["processing"] == 10.0
    assert hop_breakdown(got[-1])["queuing"] > 0


@settings(max_examples=40)
@given(st.lists(st.tuples(st.floats(0, 5000), st.integers(40, 1500), st.sampled_from([0, 3])),
                max_size=200), st.integers(1, 20))
def test_conservation_and_fifo(sends, depth):
    net = Network(EventLoop(0))
    for n in ("a", "b"):
        net.host(n)
    net.switch("s")
    net.connect("a", "s", 1e9, 10.0, depth_limit=depth)
    net.connect("s", "b", 10e6, 10.0, depth_limit=depth)
    net.build_routes()
    net.nodes["s"].policy = default_policy()
    got = []
    net.nodes["b"].default_handler = got.append
    for i, (t, size, q) in enumerate(sends):
        dscp, sel = (DscpClass.EF, "Class1") if q == 0 else (DscpClass.BE, None)
        net.loop.call_at(t, net.nodes["a"].send, pkt(size, dscp, sel, flow=f"{q}:{i}"))
    net.loop.run()
    c = net.counters.get("BACKGROUND")
    if c:
        assert c.injected == c.delivered + c.dropped == len(sends)
    # FIFO within a queue
    for q in ("0", "3"):
        idx = [int(p.flow_id.split(":")[1]) for p in got if p.flow_id.startswith(q)]
        order = [sends[i][0] for i in idx]
        assert order == sorted(order)


def test_topology_validate():
    topo = Topology([SiteSpec("s1", "gw", "sw", ["d"])], "core", "sc",
                    [LinkSpec("d", "sw", 1e9, 1), LinkSpec("sw", "gw", 1e9, 1),
                     LinkSpec("gw", "core", 1e9, 1), LinkSpec("core", "sc", 1e9, 1)])
    assert topo.validate() == []
    topo.links.append(LinkSpec("sc", "sc", 1e9, 1))
    topo.sites.append(SiteSpec("s2", "gw", "sw2", ["x"]))
    problems = topo.validate()
    assert any("self-link" in p for p in problems)
    assert any("shared" in p for p in problems)
    assert any("not connected" in p for p in problems)


def test_disconnected_network_rejected():
    net = Network(EventLoop(0))
    net.host("a")
    net.host("b")
    with pytest.raises(ValueError):
        net.build_routes()


def test_trace_csv(tmp_path):
    net = Network(EventLoop(0), trace=True)
    net.host("a")
    net.host("b")
    net.connect("a", "b", 1e6, 10.0, depth_limit=1)
    net.build_routes()
    for _ in range(3):
        net.nodes["a"].send(pkt())
    net.loop.run()
    path = tmp_path / "trace.csv"
    net.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_us,node,event,flow_id,queue,reason"
    assert any(",drop," in l and l.endswith("overflow") for l in lines)
