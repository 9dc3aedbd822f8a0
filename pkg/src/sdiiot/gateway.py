"""Site gateway and sensor-cloud endpoints.

The gateway observes its field devices over CoAP, republishes each reading
as a JSON WebSocket frame toward the sensor cloud, turns WebSocket control
commands into CoAP PUTs, and installs QoS policies pushed by the cloud's QoS
controller.
"""

from __future__ import annotations

import enum
import json
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .coap import (CoapEndpoint, Exchange, ExchangeState, RetransmitParams, UnknownToken,
                   DEFAULT_PARAMS, expected_time_span)
from .messages import (SECURE_OVERHEAD, TCP_IP_OVERHEAD, Code, CoapMessage, MessageKind,
                       WsFrame, WsOpcode)
from .qos import CONTROL, PolicyError, QoSPolicy, policy_from_json, validate
from .tdma import COMMAND_RESOURCE, PV_RESOURCE, ProcessValue, decode_pv
from .traffic import TcpLikeReceiver, TcpLikeSender
from .wire import CoapWire, FlowTag, tag_of

POLICY_RESOURCE = "qos/policy"
WS_BUFFER_LIMIT = 1024
WATCHDOG_PERIOD_US = 250_000.0
WS_SEGMENT_BYTES = 1500


@dataclass
class TimestampedReading:
    pv: ProcessValue
    gw_arrival: float
    sc_arrival: Optional[float] = None


@dataclass(frozen=True)
class PolicyAck:
    accepted: bool
    version: Optional[int]
    violations: tuple[str, ...] = ()


@dataclass
class DeviceEntry:
    device_id: str
    node: str
    selector: str
    update_interval: float
    token: bytes


@dataclass
class GatewayState:
    site_id: str
    observed_devices: set = field(default_factory=set)
    installed_policy: Optional[QoSPolicy] = None
    pending_exchanges: dict = field(default_factory=dict)
    ws_sessions: set = field(default_factory=set)


@dataclass
class WsSession:
    session_id: str
    sender: TcpLikeSender
    receiver: TcpLikeReceiver


def ws_packet_size(frame: WsFrame, secure: bool = False) -> int:
    return frame.encoded_size + TCP_IP_OVERHEAD + (SECURE_OVERHEAD if secure else 0)


def _json_frame(doc: dict) -> WsFrame:
    return WsFrame(WsOpcode.TEXT, json.dumps(doc, separators=(",", ":")).encode())


class Gateway:
    def __init__(self, node, site_id: str, params: RetransmitParams = DEFAULT_PARAMS,
                 seed: int = 0, secure: bool = False, ws_buffer_limit: int = WS_BUFFER_LIMIT):
        self.node = node
        self.name = node.name
        self.loop = node.net.loop
        self.secure = secure
        self.state = GatewayState(site_id)
        self.endpoint = CoapEndpoint(self.loop, node.name,
                                     CoapWire(node, lambda: self.state.installed_policy, secure),
                                     params, rng=random.Random(f"{seed}:{node.name}:coap"),
                                     responder=self._respond)
        self.state.pending_exchanges = self.endpoint.pending
        self.devices: dict[str, DeviceEntry] = {}
        self._by_token: dict[bytes, str] = {}
        self.sessions: dict[str, WsSession] = {}
        self.buffer: deque = deque()
        self.ws_buffer_limit = ws_buffer_limit
        self.readings: list[TimestampedReading] = []
        self._seen: set[tuple[str, float]] = set()
        self.coap_latencies: list[float] = []
        self.last_heard: dict[str, float] = {}
        self.registration_timeouts: list[str] = []
        self.command_exchanges: list[Exchange] = []
        self.error_frames: list[tuple[str, WsFrame]] = []
        self.policy_history: list[QoSPolicy] = []
        self.on_policy_installed: list[Callable[[QoSPolicy], None]] = []
        self.counters = {"notifications": 0, "malformed": 0, "adapter_duplicates": 0,
                         "frames": 0, "buffer_drops": 0, "reregistrations": 0,
                         "policy_rejects": 0, "command_errors": 0}
        self.stop_at = 0.0
        node.bind("CoapMessage", self._on_packet)

    @property
    def installed_policy(self) -> Optional[QoSPolicy]:
        return self.state.installed_policy

    # CoAP side ----------------------------------------------------------

    def _on_packet(self, pkt) -> None:
        self.endpoint.handle_inbound(pkt.payload, pkt.src, tag_of(pkt))

    def add_device(self, device_id: str, node: str, selector: str, update_interval: float) -> DeviceEntry:
        token = struct.pack(">I", len(self.devices) + 1)
        entry = DeviceEntry(device_id, node, selector, update_interval, token)
        self.devices[device_id] = entry
        return entry

    def observe(self, device_id: str) -> Exchange:
        entry = self.devices[device_id]
        self._by_token[entry.token] = device_id
        msg = CoapMessage(MessageKind.CON, Code.GET, self.endpoint.next_id(), token=entry.token,
                          observe=0, uri_path=PV_RESOURCE)
        self.last_heard[device_id] = self.loop.now
        tag = FlowTag("OBSERVE", entry.selector, f"obs:{device_id}")

        def acked(ex, device_id=device_id):
            self.state.observed_devices.add(device_id)

        def timed_out(ex, device_id=device_id, token=entry.token):
            self.state.observed_devices.discard(device_id)
            self._by_token.pop(token, None)
            self.registration_timeouts.append(device_id)

        return self.endpoint.send_confirmable(msg, entry.node, tag, on_ack=acked, on_timeout=timed_out)

    def _respond(self, msg: CoapMessage, src: str, tag):
        if msg.code is Code.CONTENT and msg.observe is not None:
            device_id = self._by_token.get(msg.token)
            if device_id is None:
                raise UnknownToken(msg.token)
            self.last_heard[device_id] = self.loop.now
            self.counters["notifications"] += 1
            self.coap_to_ws(msg)
            return Code.EMPTY, b""
        if msg.code is Code.PUT and msg.uri_path == POLICY_RESOURCE:
            try:
                policy = policy_from_json(msg.payload)
            except PolicyError as exc:
                self.counters["policy_rejects"] += 1
                return Code.CONTENT, json.dumps({"accepted": False, "version": None,
                                                 "violations": [str(exc)]}).encode()
            ack = self.apply_policy(policy)
            return Code.CONTENT, json.dumps({"accepted": ack.accepted, "version": ack.version,
                                             "violations": list(ack.violations)}).encode()
        return Code.EMPTY, b""

    # adapter ------------------------------------------------------------

    def coap_to_ws(self, notification: CoapMessage) -> Optional[WsFrame]:
        """Translate a PV notification into a JSON text frame and forward it.

        Returns None (and counts it) for malformed payloads and for readings
        already forwarded.
        """
        try:
            pv = decode_pv(notification.payload)
        except ValueError:
            self.counters["malformed"] += 1
            return None
        key = (pv.device_id, pv.generated_at)
        if key in self._seen:
            self.counters["adapter_duplicates"] += 1
            return None
        self._seen.add(key)
        now = self.loop.now
        self.coap_latencies.append(now - pv.generated_at)
        self.readings.append(TimestampedReading(pv, now))
        frame = _json_frame({"v": 1, "device_id": pv.device_id, "value": pv.value,
                             "generated_at": int(round(pv.generated_at)),
                             "gw_arrival": int(round(now))})
        entry = self.devices.get(pv.device_id)
        self._forward(frame, entry.selector if entry else None)
        return frame

    def _forward(self, frame: WsFrame, selector: Optional[str]) -> None:
        self.counters["frames"] += 1
        if not self.sessions:
            if len(self.buffer) >= self.ws_buffer_limit:
                self.buffer.popleft()
                self.counters["buffer_drops"] += 1
            self.buffer.append((frame, selector))
            return
        size = ws_packet_size(frame, self.secure)
        for session in self.sessions.values():
            session.sender.push(frame, size, selector)

    def open_session(self, session: WsSession) -> None:
        self.sessions[session.session_id] = session
        self.state.ws_sessions.add(session.session_id)
        while self.buffer:
            frame, selector = self.buffer.popleft()
            session.sender.push(frame, ws_packet_size(frame, self.secure), selector)

    @property
    def adapter_drops(self) -> int:
        return self.counters["buffer_drops"] + sum(
            s.sender.counters["backlog_drops"] for s in self.sessions.values())

    def ws_to_coap(self, frame: WsFrame, session_id: Optional[str] = None) -> Optional[CoapMessage]:
        """Turn a JSON control command into a CS6-marked CON PUT to the device."""
        try:
            doc = json.loads(frame.payload)
            device_id, command = doc["device_id"], doc["command"]
            args = doc.get("args")
        except (ValueError, KeyError, TypeError):
            self.counters["command_errors"] += 1
            self._error_reply(session_id, None, "malformed command")
            return None
        entry = self.devices.get(device_id)
        if entry is None:
            self.counters["command_errors"] += 1
            self._error_reply(session_id, device_id, "unknown device")
            return None
        payload = json.dumps({"command": command, "args": args}, separators=(",", ":")).encode()
        msg = CoapMessage(MessageKind.CON, Code.PUT, self.endpoint.next_id(),
                          uri_path=COMMAND_RESOURCE, payload=payload)
        tag = FlowTag("CONTROL", CONTROL, f"cmd:{device_id}")
        self.command_exchanges.append(self.endpoint.send_confirmable(msg, entry.node, tag))
        return msg

    def _error_reply(self, session_id: Optional[str], device_id: Optional[str], error: str) -> None:
        frame = _json_frame({"v": 1, "error": error, "device_id": device_id})
        self.error_frames.append((session_id, frame))
        session = self.sessions.get(session_id) if session_id else None
        if session is not None:
            session.sender.push(frame, ws_packet_size(frame, self.secure), CONTROL)

    # policy -------------------------------------------------------------

    def apply_policy(self, policy: QoSPolicy) -> PolicyAck:
        violations = validate(policy)
        if violations:
            self.counters["policy_rejects"] += 1
            current = self.state.installed_policy
            return PolicyAck(False, current.version if current else None, tuple(violations))
        if policy == self.state.installed_policy:
            return PolicyAck(True, policy.version)
        self.state.installed_policy = policy
        self.policy_history.append(policy)
        for hook in self.on_policy_installed:
            hook(policy)
        return PolicyAck(True, policy.version)

    # liveness -----------------------------------------------------------

    def start(self, stop_at: float) -> None:
        self.stop_at = stop_at
        if self.loop.now + WATCHDOG_PERIOD_US < stop_at:
            self.loop.schedule(WATCHDOG_PERIOD_US, self._watchdog)

    def _watchdog(self) -> None:
        now = self.loop.now
        slack = 2 * expected_time_span(self.endpoint.params)
        for device_id, entry in self.devices.items():
            silent = now - self.last_heard.get(device_id, 0.0)
            if silent > 3 * entry.update_interval + slack and not self._registering(device_id):
                self.counters["reregistrations"] += 1
                self.observe(device_id)
        if now + WATCHDOG_PERIOD_US < self.stop_at:
            self.loop.schedule(WATCHDOG_PERIOD_US, self._watchdog)

    def _registering(self, device_id: str) -> bool:
        token = self.devices[device_id].token
        return any(ex.request.token == token and ex.request.code is Code.GET
                   for ex in self.endpoint.pending.values())


def establish_observations(gw: Gateway, devices: list[str]) -> int:
    """Register an observation on each device and wait for the outcome.

    Returns the number of acknowledged registrations; timed-out devices are
    listed in ``gw.registration_timeouts``.
    """
    exchanges = [gw.observe(d) for d in devices]
    if exchanges:
        gw.loop.run(stop=lambda: all(ex.done for ex in exchanges))
    return sum(ex.state is ExchangeState.ACKED for ex in exchanges)


class SensorCloud:
    """Sensor-cloud server: WebSocket peer of every gateway and QoS controller."""

    def __init__(self, node, params: RetransmitParams = DEFAULT_PARAMS, seed: int = 0):
        self.node = node
        self.name = node.name
        self.loop = node.net.loop
        self.policy: Optional[QoSPolicy] = None
        self.endpoint = CoapEndpoint(self.loop, node.name, CoapWire(node, lambda: self.policy),
                                     params, rng=random.Random(f"{seed}:{node.name}:coap"))
        node.bind("CoapMessage", self._on_packet)
        self.sessions: dict[str, WsSession] = {}
        self.arrivals: dict[tuple[str, float], float] = {}
        self.ws_latencies: list[float] = []
        self.error_frames: list[dict] = []
        self.received_frames = 0

    def _on_packet(self, pkt) -> None:
        self.endpoint.handle_inbound(pkt.payload, pkt.src, tag_of(pkt))

    def _on_frame(self, frame: WsFrame, pkt) -> None:
        doc = json.loads(frame.payload)
        if "error" in doc:
            self.error_frames.append(doc)
            return
        now = self.loop.now
        self.received_frames += 1
        self.arrivals[(doc["device_id"], float(doc["generated_at"]))] = now
        self.ws_latencies.append(now - doc["gw_arrival"])

    def send_command(self, gateway: str, device_id: str, command: str, args=None) -> WsFrame:
        frame = _json_frame({"v": 1, "device_id": device_id, "command": command, "args": args})
        self.sessions[gateway].sender.push(frame, ws_packet_size(frame), CONTROL)
        return frame


def connect_ws(gw: Gateway, cloud: SensorCloud, max_window: int = 64) -> str:
    """Open a bidirectional WebSocket session between ``gw`` and ``cloud``."""
    session_id = f"{gw.name}<->{cloud.name}"
    up = f"ws:{gw.name}>{cloud.name}"
    down = f"ws:{cloud.name}>{gw.name}"
    gw_sender = TcpLikeSender(gw.node, cloud.name, up, "WS_READING",
                              lambda: gw.state.installed_policy, max_window=max_window,
                              backlog_limit=gw.ws_buffer_limit, coalesce_bytes=WS_SEGMENT_BYTES)
    gw_receiver = TcpLikeReceiver(gw.node, cloud.name, down,
                                  lambda frame, pkt: gw.ws_to_coap(frame, session_id))
    sc_receiver = TcpLikeReceiver(cloud.node, gw.name, up, cloud._on_frame)
    sc_sender = TcpLikeSender(cloud.node, gw.name, down, "CONTROL", lambda: cloud.policy,
                              max_window=max_window, coalesce_bytes=WS_SEGMENT_BYTES)
    cloud.sessions[gw.name] = WsSession(session_id, sc_sender, sc_receiver)
    gw.open_session(WsSession(session_id, gw_sender, gw_receiver))
    return session_id


def reconcile(gateways: list[Gateway], cloud: SensorCloud) -> None:
    """Copy cloud arrival times onto the gateways' reading records."""
    for gw in gateways:
        for r in gw.readings:
            t = cloud.arrivals.get((r.pv.device_id, r.pv.generated_at))
            if t is not None:
                r.sc_arrival = t


class Outcome(enum.Enum):
    APPLIED = "APPLIED"
    TIMED_OUT = "TIMED_OUT"
    REJECTED = "REJECTED"


@dataclass(frozen=True)
class DistributionOutcome:
    status: Outcome
    version: Optional[int] = None


def start_distribution(controller: SensorCloud, gateways, policy: QoSPolicy,
                       on_done: Optional[Callable[[str, DistributionOutcome], None]] = None
                       ) -> tuple[dict[str, DistributionOutcome], list[Exchange]]:
    """Send ``policy`` to every gateway as a CS6-marked CON PUT without waiting.

    The returned dict fills in as exchanges resolve.
    """
    controller.policy = policy
    body = policy.dumps().encode()
    outcomes: dict[str, DistributionOutcome] = {}
    exchanges = []
    for gw in gateways:
        name = gw if isinstance(gw, str) else gw.name

        def acked(ex, name=name):
            try:
                doc = json.loads(ex.response.payload)
                ok = bool(doc["accepted"])
                version = doc["version"]
            except (ValueError, KeyError, TypeError):
                ok, version = False, None
            outcomes[name] = DistributionOutcome(Outcome.APPLIED if ok else Outcome.REJECTED, version)
            if on_done is not None:
                on_done(name, outcomes[name])

        def timed_out(ex, name=name):
            outcomes[name] = DistributionOutcome(Outcome.TIMED_OUT)
            if on_done is not None:
                on_done(name, outcomes[name])

        msg = CoapMessage(MessageKind.CON, Code.PUT, controller.endpoint.next_id(),
                          uri_path=POLICY_RESOURCE, content_format=50, payload=body)
        tag = FlowTag("CONTROL", CONTROL, f"policy:{name}")
        exchanges.append(controller.endpoint.send_confirmable(msg, name, tag, acked, timed_out))
    return outcomes, exchanges


def distribute(controller: SensorCloud, gateways, policy: QoSPolicy) -> dict[str, DistributionOutcome]:
    """Push ``policy`` to ``gateways`` and run the loop until every exchange resolves."""
    violations = validate(policy)
    if violations:
        raise PolicyError("; ".join(violations))
    outcomes, exchanges = start_distribution(controller, gateways, policy)
    if exchanges:
        controller.loop.run(stop=lambda: all(ex.done for ex in exchanges))
    names = [gw if isinstance(gw, str) else gw.name for gw in gateways]
    return {n: outcomes[n] for n in names}
