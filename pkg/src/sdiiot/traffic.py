"""Transport models and background load generators.

``TcpLikeSender``/``TcpLikeReceiver`` give a windowed, per-packet-acknowledged
reliable stream with timeout-driven retransmission and coarse AIMD. It carries
both the WebSocket sessions and the TCP background flows. UDP background flows
are constant-rate and unreliable.
"""

from __future__ import annotations

import enum
import random
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

from .messages import TCP_IP_OVERHEAD, NetPacket, Transport
from .qos import BACKGROUND, QoSPolicy
from .wire import mark

SECOND = 1_000_000.0
ACK_SIZE = 54
DEFAULT_MSS = 1500
RTO_MIN_US = 200_000.0
RTO_INITIAL_US = 1_000_000.0
RTO_MAX_US = 60_000_000.0


@dataclass(slots=True)
class TcpSegment:
    seq: int
    data: Any = None
    is_ack: bool = False
    bundled: bool = False  # data is a tuple of application messages


@dataclass(slots=True)
class _InFlight:
    seq: int
    data: Any
    size: int
    selector: Optional[str]
    bundled: bool
    first_sent: float
    transmissions: int
    rto: float


class TcpLikeSender:
    """Windowed sender with per-packet ACKs.

    The congestion window grows by one packet per window of ACKs, is halved on
    each retransmission timeout, and never exceeds ``max_window``.
    """

    def __init__(self, node, dst: str, flow_id: str, flow_class: str,
                 policy_source: Callable[[], Optional[QoSPolicy]] = lambda: None,
                 max_window: int = 64, initial_window: float = 2.0,
                 rto_min: float = RTO_MIN_US, rto_initial: float = RTO_INITIAL_US,
                 backlog_limit: Optional[int] = None, coalesce_bytes: Optional[int] = None):
        self.node = node
        self.loop = node.net.loop
        self.dst = dst
        self.flow_id = flow_id
        self.flow_class = flow_class
        self.policy_source = policy_source
        self.max_window = max_window
        self.cwnd = float(initial_window)
        self.rto_min = rto_min
        self.rto = rto_initial
        self.srtt: Optional[float] = None
        self.rttvar = 0.0
        self.backlog: deque = deque()
        self.backlog_limit = backlog_limit
        # With coalescing, queued messages sharing a selector are packed into
        # one segment of at most ``coalesce_bytes`` (each pushed size includes
        # one TCP/IP header).
        self.coalesce_bytes = coalesce_bytes
        self.inflight: dict[int, _InFlight] = {}
        self.next_seq = 0
        self.bulk_until: Optional[float] = None
        self.bulk_size = DEFAULT_MSS
        self.bulk_selector: Optional[str] = BACKGROUND
        self.counters = {"segments": 0, "transmissions": 0, "retransmissions": 0,
                         "timeouts": 0, "acked": 0, "backlog_drops": 0}
        node.bind(flow_id, self._on_packet)

    # application side

    def push(self, data: Any, size: int, selector: Optional[str] = None) -> bool:
        """Queue one message; returns False if the oldest queued one was evicted."""
        evicted = False
        if self.backlog_limit is not None and len(self.backlog) >= self.backlog_limit:
            self.backlog.popleft()
            self.counters["backlog_drops"] += 1
            evicted = True
        self.backlog.append((data, size, selector))
        self._pump()
        return not evicted

    def start_bulk(self, until: float, size: int = DEFAULT_MSS, selector: Optional[str] = BACKGROUND) -> None:
        self.bulk_until = until
        self.bulk_size = size
        self.bulk_selector = selector
        self._pump()

    @property
    def idle(self) -> bool:
        return not self.inflight and not self.backlog

    # internals

    def _pump(self) -> None:
        while len(self.inflight) < int(self.cwnd):
            bundled = False
            if self.backlog:
                data, size, selector = self.backlog.popleft()
                if self.coalesce_bytes is not None:
                    items = [data]
                    while self.backlog:
                        nxt_data, nxt_size, nxt_sel = self.backlog[0]
                        grown = size + nxt_size - TCP_IP_OVERHEAD
                        if nxt_sel != selector or grown > self.coalesce_bytes:
                            break
                        self.backlog.popleft()
                        items.append(nxt_data)
                        size = grown
                    data, bundled = tuple(items), True
            elif self.bulk_until is not None and self.loop.now < self.bulk_until:
                data, size, selector = None, self.bulk_size, self.bulk_selector
            else:
                return
            seq = self.next_seq
            self.next_seq += 1
            self.counters["segments"] += 1
            seg = _InFlight(seq, data, size, selector, bundled, self.loop.now, 0, self.rto)
            self.inflight[seq] = seg
            self._transmit(seg)

    def _transmit(self, seg: _InFlight) -> None:
        seg.transmissions += 1
        self.counters["transmissions"] += 1
        dscp, version = mark(self.policy_source(), seg.selector)
        pkt = NetPacket(self.node.name, self.dst, dscp, seg.size, Transport.TCP_LIKE, self.flow_id,
                        self.flow_class, seg.selector,
                        TcpSegment(seg.seq, seg.data, False, seg.bundled), version)
        self.node.send(pkt)
        self.loop.schedule(seg.rto, self._on_timer, seg.seq, seg.transmissions)

    def _on_timer(self, seq: int, transmissions: int) -> None:
        seg = self.inflight.get(seq)
        if seg is None or seg.transmissions != transmissions:
            return
        self.counters["timeouts"] += 1
        self.counters["retransmissions"] += 1
        self.cwnd = max(1.0, self.cwnd / 2)
        seg.rto = min(seg.rto * 2, RTO_MAX_US)
        self._transmit(seg)

    def _on_packet(self, pkt: NetPacket) -> None:
        seg = pkt.payload
        if not seg.is_ack:
            return
        entry = self.inflight.pop(seg.seq, None)
        if entry is None:
            return
        self.counters["acked"] += 1
        if entry.transmissions == 1:
            self._rtt_sample(self.loop.now - entry.first_sent)
        self.cwnd = min(float(self.max_window), self.cwnd + 1.0 / self.cwnd)
        self._pump()

    def _rtt_sample(self, rtt: float) -> None:
        if self.srtt is None:
            self.srtt = rtt
            self.rttvar = rtt / 2
        else:
            self.rttvar = 0.75 * self.rttvar + 0.25 * abs(self.srtt - rtt)
            self.srtt = 0.875 * self.srtt + 0.125 * rtt
        self.rto = min(max(self.rto_min, self.srtt + 4 * self.rttvar), RTO_MAX_US)


class TcpLikeReceiver:
    """Acknowledges every data packet and delivers payloads in sequence order."""

    def __init__(self, node, src: str, flow_id: str, deliver: Optional[Callable[[Any, NetPacket], None]] = None):
        self.node = node
        self.loop = node.net.loop
        self.src = src
        self.flow_id = flow_id
        self.deliver = deliver
        self.expected = 0
        self.out_of_order: dict[int, tuple[Any, NetPacket]] = {}
        self.received = 0
        self.duplicates = 0
        node.bind(flow_id, self._on_packet)

    def _on_packet(self, pkt: NetPacket) -> None:
        seg = pkt.payload
        if seg.is_ack:
            return
        ack = NetPacket(self.node.name, pkt.src, pkt.dscp, ACK_SIZE, Transport.TCP_LIKE,
                        self.flow_id, pkt.flow_class + "_ACK", pkt.selector,
                        TcpSegment(seg.seq, None, True), pkt.policy_version)
        self.node.send(ack)
        if seg.seq < self.expected or seg.seq in self.out_of_order:
            self.duplicates += 1
            return
        self.received += 1
        self.out_of_order[seg.seq] = (seg, pkt)
        while self.expected in self.out_of_order:
            s, p = self.out_of_order.pop(self.expected)
            self.expected += 1
            if self.deliver is None:
                continue
            if s.bundled:
                for item in s.data:
                    self.deliver(item, p)
            else:
                self.deliver(s.data, p)


class FlowKind(enum.Enum):
    UDP_LIKE = "UDP_LIKE"
    TCP_LIKE = "TCP_LIKE"


@dataclass(frozen=True)
class BackgroundFlowSet:
    kind: FlowKind
    n_flows: int
    packet_size: int = DEFAULT_MSS
    rate_bps: float = 12_000_000.0
    max_window: int = 64

    def __post_init__(self):
        if self.n_flows < 0:
            raise ValueError("n_flows must be >= 0")
        if self.packet_size <= 0:
            raise ValueError("packet_size must be positive")
        if self.kind is FlowKind.UDP_LIKE and self.n_flows and self.rate_bps <= 0:
            raise ValueError("UDP flows need a positive rate")

    @property
    def udp_gap_us(self) -> float:
        return self.packet_size * 8 / self.rate_bps * SECOND


class UdpFlow:
    """Constant-rate unreliable source, best-effort marked."""

    def __init__(self, node, dst: str, flow_id: str, size: int, gap_us: float,
                 start: float, stop: float, policy_source: Callable[[], Optional[QoSPolicy]] = lambda: None):
        self.node = node
        self.loop = node.net.loop
        self.dst = dst
        self.flow_id = flow_id
        self.size = size
        self.gap = gap_us
        self.stop = stop
        self.policy_source = policy_source
        self.sent = 0
        self.emit_times: list[float] = []
        self.record = False
        if start < stop:
            self.loop.call_at(start, self._emit)

    def _emit(self) -> None:
        now = self.loop.now
        dscp, version = mark(self.policy_source(), BACKGROUND)
        pkt = NetPacket(self.node.name, self.dst, dscp, self.size, Transport.UDP_LIKE,
                        self.flow_id, "BACKGROUND", BACKGROUND, None, version)
        self.sent += 1
        if self.record:
            self.emit_times.append(now)
        self.node.send(pkt)
        nxt = now + self.gap
        if nxt < self.stop:
            self.loop.call_at(nxt, self._emit)


class UdpSink:
    def __init__(self, node, on_receive: Optional[Callable[[NetPacket], None]] = None):
        self.node = node
        self.received = 0
        self.on_receive = on_receive
        node.default_handler = self._on_packet

    def _on_packet(self, pkt: NetPacket) -> None:
        self.received += 1
        if self.on_receive is not None:
            self.on_receive(pkt)


def udp_background(flows: BackgroundFlowSet, src_node, dst: str, start: float, stop: float,
                   rng: random.Random, prefix: str = "udp",
                   policy_source: Callable[[], Optional[QoSPolicy]] = lambda: None) -> list[UdpFlow]:
    """Start ``flows.n_flows`` constant-rate flows with random phases."""
    if flows.kind is not FlowKind.UDP_LIKE:
        raise ValueError("udp_background needs a UDP_LIKE flow set")
    gap = flows.udp_gap_us
    return [UdpFlow(src_node, dst, f"{prefix}{i}", flows.packet_size, gap,
                    start + rng.random() * gap, stop, policy_source)
            for i in range(flows.n_flows)]


@dataclass
class TcpFlow:
    sender: TcpLikeSender
    receiver: TcpLikeReceiver


def tcp_background(flows: BackgroundFlowSet, src_node, dst_node, start: float, stop: float,
                   rng: random.Random, prefix: str = "tcp",
                   on_deliver: Optional[Callable[[Any, NetPacket], None]] = None,
                   policy_source: Callable[[], Optional[QoSPolicy]] = lambda: None) -> list[TcpFlow]:
    """Start ``flows.n_flows`` bulk windowed senders, staggered over 10 ms."""
    if flows.kind is not FlowKind.TCP_LIKE:
        raise ValueError("tcp_background needs a TCP_LIKE flow set")
    out = []
    for i in range(flows.n_flows):
        fid = f"{prefix}{i}"
        sender = TcpLikeSender(src_node, dst_node.name, fid, "BACKGROUND", policy_source,
                               max_window=flows.max_window)
        receiver = TcpLikeReceiver(dst_node, src_node.name, fid, on_deliver)
        t = start + rng.random() * 10_000.0
        if t < stop:
            src_node.net.loop.call_at(t, sender.start_bulk, stop, flows.packet_size, BACKGROUND)
        out.append(TcpFlow(sender, receiver))
    return out
