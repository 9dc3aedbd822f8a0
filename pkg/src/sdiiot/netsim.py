"""Deterministic discrete-event network model.

Time is a float count of microseconds. Every node owns one egress
:class:`Port` per neighbour; a port holds a :class:`PriorityQueueSet` and
serialises packets onto its link. Switches classify packets into four
strict-priority queues using the installed :class:`~sdiiot.qos.QoSPolicy`;
hosts and policy-less switches behave as plain FIFOs.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import networkx as nx

from .messages import NetPacket
from .qos import BEST_EFFORT_QUEUE, QoSPolicy, classify

MBPS = 1_000_000
GBPS = 1_000_000_000

DEFAULT_DEPTH_LIMIT = 256
DEFAULT_QUEUE_RATE_BPS = 100 * MBPS
DEFAULT_BUCKET_BYTES = 15_000
SWITCH_PROCESSING_US = 10.0

TRACE_COLUMNS = ("time_us", "node", "event", "flow_id", "queue", "reason")


class EventLoop:
    """Heap-ordered event loop; ties run in scheduling order."""

    def __init__(self, seed: int = 0):
        self.now = 0.0
        self.rng = random.Random(seed)
        self._heap: list = []
        self._seq = itertools.count()
        self.events_run = 0

    def schedule(self, delay: float, fn: Callable, *args) -> None:
        if delay < 0:
            raise ValueError(f"cannot schedule into the past (delay={delay})")
        heapq.heappush(self._heap, (self.now + delay, next(self._seq), fn, args))

    def call_at(self, when: float, fn: Callable, *args) -> None:
        if when < self.now:
            raise ValueError(f"cannot schedule at {when} before now={self.now}")
        heapq.heappush(self._heap, (when, next(self._seq), fn, args))

    def pending(self) -> int:
        return len(self._heap)

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> int:
        """Run events up to and including time ``until`` (or until empty).

        ``stop`` is polled after every event. Returns the number of events run.
        """
        heap = self._heap
        pop = heapq.heappop
        n = 0
        while heap:
            if until is not None and heap[0][0] > until:
                break
            when, _, fn, args = pop(heap)
            self.now = when
            fn(*args)
            n += 1
            if stop is not None and stop():
                break
        if until is not None and self.now < until and (not heap or heap[0][0] > until):
            self.now = until
        self.events_run += n
        return n


class TokenBucket:
    """Byte-denominated token bucket refilled continuously."""

    __slots__ = ("rate", "capacity", "tokens", "last")

    def __init__(self, rate_bps: float, capacity_bytes: float):
        if rate_bps <= 0:
            raise ValueError("rate must be > 0")
        if capacity_bytes <= 0:
            raise ValueError("capacity must be > 0")
        self.rate = rate_bps / 8e6  # bytes per microsecond
        self.capacity = float(capacity_bytes)
        self.tokens = float(capacity_bytes)
        self.last = 0.0

    def refill(self, now: float) -> None:
        if now > self.last:
            self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
            self.last = now

    def try_consume(self, size: int, now: float) -> bool:
        self.refill(now)
        if self.tokens >= size:
            self.tokens -= size
            return True
        return False

    def ready_at(self, size: int, now: float) -> float:
        self.refill(now)
        if self.tokens >= size:
            return now
        return now + (size - self.tokens) / self.rate


class PriorityQueueSet:
    """Four FIFO queues served in strict priority order.

    Queues 0-2 are capped by token buckets; queue 3 takes whatever link
    capacity is left and is always eligible (work conserving).
    """

    def __init__(self, depth_limit: int = DEFAULT_DEPTH_LIMIT,
                 rate_caps_bps: Iterable[Optional[float]] = (DEFAULT_QUEUE_RATE_BPS,) * 3 + (None,),
                 bucket_bytes: float = DEFAULT_BUCKET_BYTES):
        self.depth_limit = depth_limit
        self.queues = [deque() for _ in range(4)]
        caps = list(rate_caps_bps)
        if len(caps) != 4:
            raise ValueError("need exactly four rate caps")
        self.buckets = [TokenBucket(c, bucket_bytes) if c else None for c in caps]
        self.drops = [0, 0, 0, 0]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def enqueue(self, pkt: NetPacket, queue: int) -> bool:
        q = self.queues[queue]
        if len(q) >= self.depth_limit:
            self.drops[queue] += 1
            return False
        q.append(pkt)
        return True

    def dequeue(self, now: float):
        """Return ``(packet, queue)`` or ``(None, wake_time)``.

        ``wake_time`` is when a rate-capped queue regains budget, or None
        when every queue is empty.
        """
        wake = None
        queues = self.queues
        for i in (0, 1, 2):
            q = queues[i]
            if q:
                bucket = self.buckets[i]
                size = q[0].size_bytes
                if bucket is None or bucket.try_consume(size, now):
                    return q.popleft(), i
                t = bucket.ready_at(size, now)
                if wake is None or t < wake:
                    wake = t
        if queues[3]:
            bucket = self.buckets[3]
            if bucket is None or bucket.try_consume(queues[3][0].size_bytes, now):
                return queues[3].popleft(), 3
            t = bucket.ready_at(queues[3][0].size_bytes, now)
            if wake is None or t < wake:
                wake = t
        return None, wake


class WanPath:
    """Uncontrolled path: per-packet delay uniform in [base, base + spread].

    Deliveries leave in arrival order (single FIFO), so a packet never
    overtakes its predecessor on the same path.
    """

    def __init__(self, base_delay_us: float, jitter_spread_us: float, rng: random.Random):
        if base_delay_us < 0 or jitter_spread_us < 0:
            raise ValueError("delays must be non-negative")
        self.base = base_delay_us
        self.spread = jitter_spread_us
        self.rng = rng
        self._last_arrival = float("-inf")

    def sample(self) -> float:
        if self.spread == 0:
            return self.base
        return self.base + self.rng.random() * self.spread

    def arrival(self, now: float) -> float:
        t = max(now + self.sample(), self._last_arrival)
        self._last_arrival = t
        return t


def wan_path(base_delay_us: float, jitter_spread_us: float, rng: Optional[random.Random] = None) -> WanPath:
    return WanPath(base_delay_us, jitter_spread_us, rng or random.Random(0))


class Port:
    """Egress side of a link from ``owner`` to ``peer``."""

    def __init__(self, net: "Network", owner: "Node", peer: "Node", bandwidth_bps: float,
                 propagation_us: float, loss_rate: float = 0.0,
                 qset: Optional[PriorityQueueSet] = None, path: Optional[WanPath] = None):
        if bandwidth_bps <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")
        self.net = net
        self.loop = net.loop
        self.owner = owner
        self.peer = peer
        self.bandwidth_bps = bandwidth_bps
        self._bits_per_us = bandwidth_bps / 1e6
        self.propagation_us = propagation_us
        self.loss_rate = loss_rate
        self.qset = qset if qset is not None else PriorityQueueSet()
        self.path = path
        self.drop_filter: Optional[Callable[[NetPacket], bool]] = None
        self.busy = False
        self._wake_pending = False
        self.sent = 0

    def __repr__(self):
        return f"Port({self.owner.name}->{self.peer.name})"

    def enqueue(self, pkt: NetPacket) -> bool:
        policy = self.owner.policy
        queue = BEST_EFFORT_QUEUE if policy is None else classify(pkt, policy)
        now = self.loop.now
        if not self.qset.enqueue(pkt, queue):
            self.net.drop(pkt, self.owner.name, "overflow", queue)
            return False
        pkt.enqueued_at = now
        if self.net.record_hops:
            pkt.hops.append({"node": self.owner.name, "queue": queue, "enqueued_at": now})
        if self.net.trace is not None:
            self.net.trace.append((now, self.owner.name, "enqueue", pkt.flow_id, queue, ""))
        if not self.busy:
            self._serve()
        return True

    def _serve(self) -> None:
        now = self.loop.now
        pkt, q = self.qset.dequeue(now)
        if pkt is None:
            if q is not None and not self._wake_pending:
                self._wake_pending = True
                self.loop.call_at(q, self._wake)
            return
        self.busy = True
        pkt.dequeued_at = now
        tx_us = pkt.size_bytes * 8 / self._bits_per_us
        if self.net.record_hops:
            pkt.hops[-1]["dequeued_at"] = now
            pkt.hops[-1]["transmission_us"] = tx_us
        if self.net.trace is not None:
            self.net.trace.append((now, self.owner.name, "dequeue", pkt.flow_id, q, ""))
        self.loop.schedule(tx_us, self._tx_done, pkt)

    def _wake(self) -> None:
        self._wake_pending = False
        if not self.busy:
            self._serve()

    def _tx_done(self, pkt: NetPacket) -> None:
        self.busy = False
        self.sent += 1
        now = self.loop.now
        lost = (self.loss_rate > 0.0 and self.net.rng.random() < self.loss_rate) or (
            self.drop_filter is not None and self.drop_filter(pkt))
        if lost:
            self.net.drop(pkt, self.owner.name, "loss", None)
        else:
            processing = self.peer.processing_us
            arrival = self.path.arrival(now) if self.path is not None else now + self.propagation_us
            if self.net.record_hops:
                hop = pkt.hops[-1]
                hop["propagation_us"] = arrival - now
                hop["processing_us"] = processing
            self.loop.call_at(arrival + processing, self.peer.receive, pkt)
        if self.qset.queues[0] or self.qset.queues[1] or self.qset.queues[2] or self.qset.queues[3]:
            self._serve()


class Node:
    """A host or switch. Hosts dispatch delivered packets to bound handlers."""

    processing_us = 0.0

    def __init__(self, net: "Network", name: str):
        self.net = net
        self.name = name
        self.ports: dict[str, Port] = {}
        self.routes: dict[str, Port] = {}
        self.policy: Optional[QoSPolicy] = None
        self.handlers: dict[str, Callable[[NetPacket], None]] = {}
        self.default_handler: Optional[Callable[[NetPacket], None]] = None

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"

    def bind(self, key: str, handler: Callable[[NetPacket], None]) -> None:
        self.handlers[key] = handler

    def send(self, pkt: NetPacket) -> None:
        pkt.created_at = self.net.loop.now
        if self.net.record_hops:
            pkt.hops = []
        self.net.injected(pkt)
        port = self.routes.get(pkt.dst)
        if port is None:
            self.net.drop(pkt, self.name, "no_route", None)
            return
        port.enqueue(pkt)

    def receive(self, pkt: NetPacket) -> None:
        if pkt.dst == self.name:
            pkt.delivered_at = self.net.loop.now
            self.net.delivered(pkt)
            handler = self.handlers.get(pkt.flow_id) or self.handlers.get(
                type(pkt.payload).__name__) or self.default_handler
            if handler is not None:
                handler(pkt)
            return
        port = self.routes.get(pkt.dst)
        if port is None:
            self.net.drop(pkt, self.name, "no_route", None)
            return
        port.enqueue(pkt)


class Switch(Node):
    processing_us = SWITCH_PROCESSING_US


@dataclass
class ClassCounters:
    injected: int = 0
    delivered: int = 0
    dropped: int = 0


@dataclass
class DropRecord:
    time_us: float
    node: str
    flow_id: str
    flow_class: str
    reason: str
    queue: Optional[int]


class Network:
    def __init__(self, loop: EventLoop, record_hops: bool = False, trace: bool = False,
                 rng: Optional[random.Random] = None):
        self.loop = loop
        self.rng = rng or random.Random(loop.rng.random())
        self.nodes: dict[str, Node] = {}
        self.graph = nx.Graph()
        self.record_hops = record_hops
        self.trace: Optional[list] = [] if trace else None
        self.counters: dict[str, ClassCounters] = {}
        self.drops_by_reason: dict[str, int] = {}
        self.drop_log: list[DropRecord] = []
        self.keep_drop_log = False

    def add_node(self, node: Node) -> Node:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name}")
        self.nodes[node.name] = node
        self.graph.add_node(node.name)
        return node

    def host(self, name: str) -> Node:
        return self.add_node(Node(self, name))

    def switch(self, name: str) -> Switch:
        return self.add_node(Switch(self, name))

    def connect(self, a: str, b: str, bandwidth_bps: float, propagation_us: float,
                loss_rate: float = 0.0, depth_limit: int = DEFAULT_DEPTH_LIMIT,
                queue_rate_bps: float = DEFAULT_QUEUE_RATE_BPS) -> tuple[Port, Port]:
        if a == b:
            raise ValueError(f"self-link on {a}")
        na, nb = self.nodes[a], self.nodes[b]
        caps = (queue_rate_bps,) * 3 + (None,)
        pa = Port(self, na, nb, bandwidth_bps, propagation_us, loss_rate,
                  PriorityQueueSet(depth_limit, caps))
        pb = Port(self, nb, na, bandwidth_bps, propagation_us, loss_rate,
                  PriorityQueueSet(depth_limit, caps))
        na.ports[b] = pa
        nb.ports[a] = pb
        self.graph.add_edge(a, b)
        return pa, pb

    def port(self, a: str, b: str) -> Port:
        return self.nodes[a].ports[b]

    def build_routes(self) -> None:
        if self.nodes and not nx.is_connected(self.graph):
            raise ValueError("network graph is not connected")
        for src, paths in nx.all_pairs_shortest_path(self.graph):
            node = self.nodes[src]
            node.routes = {dst: node.ports[p[1]] for dst, p in paths.items() if len(p) > 1}

    def _class(self, flow_class: str) -> ClassCounters:
        c = self.counters.get(flow_class)
        if c is None:
            c = self.counters[flow_class] = ClassCounters()
        return c

    def injected(self, pkt: NetPacket) -> None:
        self._class(pkt.flow_class).injected += 1

    def delivered(self, pkt: NetPacket) -> None:
        self._class(pkt.flow_class).delivered += 1

    def drop(self, pkt: NetPacket, node: str, reason: str, queue: Optional[int]) -> None:
        self._class(pkt.flow_class).dropped += 1
        self.drops_by_reason[reason] = self.drops_by_reason.get(reason, 0) + 1
        if self.keep_drop_log:
            self.drop_log.append(DropRecord(self.loop.now, node, pkt.flow_id, pkt.flow_class,
                                            reason, queue))
        if self.trace is not None:
            self.trace.append((self.loop.now, node, "drop", pkt.flow_id,
                               "" if queue is None else queue, reason))

    def write_trace(self, path) -> None:
        if self.trace is None:
            raise RuntimeError("tracing was not enabled")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for t, node, event, flow, queue, reason in self.trace:
                writer.writerow((f"{t:.3f}", node, event, flow, queue, reason))


def hop_breakdown(pkt: NetPacket) -> dict[str, float]:
    """Split a delivered packet's latency into the four per-hop delay kinds.

    Requires ``record_hops``. Queuing is measured between enqueue and
    dequeue at each port.
    """
    totals = {"processing": 0.0, "queuing": 0.0, "transmission": 0.0, "propagation": 0.0}
    for hop in pkt.hops:
        totals["queuing"] += hop["dequeued_at"] - hop["enqueued_at"]
        totals["transmission"] += hop["transmission_us"]
        totals["propagation"] += hop["propagation_us"]
        totals["processing"] += hop["processing_us"]
    return totals


# Topology description ---------------------------------------------------------

@dataclass
class LinkSpec:
    a: str
    b: str
    bandwidth_bps: float
    propagation_us: float
    loss_rate: float = 0.0


@dataclass
class SiteSpec:
    name: str
    gateway: str
    switch: str
    devices: list[str] = field(default_factory=list)
    background_host: Optional[str] = None


@dataclass
class Topology:
    sites: list[SiteSpec]
    core_switch: str
    sc_server: str
    links: list[LinkSpec]

    def switches(self) -> list[str]:
        return [s.switch for s in self.sites] + [self.core_switch]

    def validate(self) -> list[str]:
        problems = []
        for site in self.sites:
            if not site.gateway or not site.switch:
                problems.append(f"site {site.name} needs exactly one gateway and one switch")
        gws = [s.gateway for s in self.sites]
        sws = [s.switch for s in self.sites]
        if len(set(gws)) != len(gws):
            problems.append("gateways are shared between sites")
        if len(set(sws)) != len(sws):
            problems.append("switches are shared between sites")
        g = nx.Graph()
        for link in self.links:
            if link.a == link.b:
                problems.append(f"self-link on {link.a}")
            if link.bandwidth_bps <= 0:
                problems.append(f"link {link.a}-{link.b} has non-positive bandwidth")
            g.add_edge(link.a, link.b)
        names = set(gws) | set(sws) | {self.core_switch, self.sc_server}
        for site in self.sites:
            names.update(site.devices)
            if site.background_host:
                names.add(site.background_host)
        g.add_nodes_from(names)
        if g.number_of_nodes() and not nx.is_connected(g):
            problems.append("topology graph is not connected")
        return problems
