"""Field devices: sensor classes, TDMA slot schedule and process values."""

from __future__ import annotations

import enum
import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .coap import CoapEndpoint, RetransmitParams, DEFAULT_PARAMS
from .messages import Code, CoapMessage
from .qos import IsaClass, QoSGroup, QoSPolicy, group_for_class
from .wire import CoapWire, FlowTag, tag_of

MS = 1000.0
SECOND = 1_000_000.0
DEFAULT_SLOT_US = 10 * MS
PV_RESOURCE = "pv"
COMMAND_RESOURCE = "cmd"

# Allowed update intervals per class, in microseconds.
CLASS_INTERVAL_RANGE = {
    IsaClass.Class0: (10 * MS, 250 * MS),
    IsaClass.Class1: (10 * MS, 250 * MS),
    IsaClass.Class2: (10 * MS, 500 * MS),
    IsaClass.Class3: (10 * MS, 500 * MS),
    IsaClass.Class4: (1 * SECOND, 86_400 * SECOND),
    IsaClass.Class5: (1 * SECOND, 86_400 * SECOND),
}

_GROUP_ORDER = {QoSGroup.G1: 0, QoSGroup.G2: 1, QoSGroup.G3: 2}


class SensorKind(enum.Enum):
    TEMPERATURE = "TEMPERATURE"
    PRESSURE = "PRESSURE"
    MOTOR = "MOTOR"
    VALVE = "VALVE"
    GENERIC = "GENERIC"


# (initial value, step scale) of the synthetic random walk, engineering units.
_PV_PROFILE = {
    SensorKind.TEMPERATURE: (80.0, 0.05),   # degC
    SensorKind.PRESSURE: (500.0, 0.5),      # kPa
    SensorKind.MOTOR: (1500.0, 2.0),        # rpm
    SensorKind.VALVE: (50.0, 0.2),          # % open
    SensorKind.GENERIC: (0.0, 1.0),
}


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    isa_class: IsaClass
    kind: SensorKind
    update_interval: float  # microseconds
    qos_group: QoSGroup

    def __post_init__(self):
        if group_for_class(self.isa_class) is not self.qos_group:
            raise ValueError(f"{IsaClass(self.isa_class).name} belongs to "
                             f"{group_for_class(self.isa_class).value}, not {self.qos_group.value}")
        lo, hi = CLASS_INTERVAL_RANGE[IsaClass(self.isa_class)]
        if not lo <= self.update_interval <= hi:
            raise ValueError(f"update interval {self.update_interval / MS:g} ms outside "
                             f"[{lo / MS:g}, {hi / MS:g}] ms for {IsaClass(self.isa_class).name}")

    @classmethod
    def of(cls, isa_class: IsaClass, kind: SensorKind, interval_ms: float) -> "SensorSpec":
        return cls(IsaClass(isa_class), kind, interval_ms * MS, group_for_class(isa_class))


# Experiment population: class labels follow the deployment, not the extra
# Table rows that list the same sensor kind under several classes.
MOTOR_SPEC = SensorSpec.of(IsaClass.Class1, SensorKind.MOTOR, 50)
PRESSURE_SPEC = SensorSpec.of(IsaClass.Class2, SensorKind.PRESSURE, 500)
TEMPERATURE_SPEC = SensorSpec.of(IsaClass.Class4, SensorKind.TEMPERATURE, 1000)


@dataclass
class PvState:
    rng: random.Random
    values: list[float] = field(default_factory=list)


@dataclass
class FieldDevice:
    device_id: str
    seq_number: int
    spec: SensorSpec
    slot_index: Optional[int] = None
    slot_length: float = DEFAULT_SLOT_US
    pv_state: Optional[PvState] = None
    seed: int = 0

    @property
    def slot_offset(self) -> float:
        if self.slot_index is None:
            raise ScheduleError(f"{self.device_id} has no slot yet")
        return self.slot_index * self.slot_length


@dataclass(frozen=True)
class ProcessValue:
    device_id: str
    value: float
    generated_at: float


@dataclass
class Superframe:
    slot_length: float
    devices: list[FieldDevice]

    @property
    def period(self) -> float:
        return len(self.devices) * self.slot_length

    def rows(self) -> list[dict]:
        return [{
            "device_id": d.device_id,
            "kind": d.spec.kind.value,
            "class": IsaClass(d.spec.isa_class).name,
            "group": d.spec.qos_group.value,
            "slot_index": d.slot_index,
            "slot_offset_ms": d.slot_offset / MS,
        } for d in self.devices]


def build_superframe(devices: list[FieldDevice], slot_length: float = DEFAULT_SLOT_US) -> Superframe:
    """Assign slots ordered by QoS group, then by sequence number."""
    if not devices:
        raise ScheduleError("cannot schedule an empty device list")
    seqs = [d.seq_number for d in devices]
    if len(set(seqs)) != len(seqs):
        dupes = sorted({s for s in seqs if seqs.count(s) > 1})
        raise ScheduleError(f"duplicate sequence numbers {dupes}")
    ordered = sorted(devices, key=lambda d: (_GROUP_ORDER[d.spec.qos_group], d.seq_number))
    for i, d in enumerate(ordered):
        d.slot_index = i
        d.slot_length = slot_length
    return Superframe(slot_length, ordered)


def next_publish_time(device: FieldDevice, now: float) -> float:
    """First publish instant at or after ``now``.

    Publishing runs on the device's update-interval grid, phase-shifted to
    its slot offset.
    """
    offset = device.slot_offset
    if now <= offset:
        return offset
    interval = device.spec.update_interval
    k = math.ceil((now - offset) / interval)
    t = offset + k * interval
    # guard against ceil landing one step late through rounding
    if t - interval >= now:
        t -= interval
    return t


def _pv_state(device: FieldDevice) -> PvState:
    if device.pv_state is None:
        device.pv_state = PvState(random.Random(f"{device.seed}:{device.device_id}"))
    return device.pv_state


def generate_pv(device: FieldDevice, t: float) -> ProcessValue:
    """Synthetic reading at publish time ``t`` (random walk, one step per publish)."""
    state = _pv_state(device)
    step = max(0, round((t - device.slot_offset) / device.spec.update_interval))
    start, scale = _PV_PROFILE[device.spec.kind]
    while len(state.values) <= step:
        prev = state.values[-1] if state.values else start
        state.values.append(prev + state.rng.gauss(0.0, scale))
    return ProcessValue(device.device_id, round(state.values[step], 2), t)


def encode_pv(pv: ProcessValue) -> bytes:
    return f"{pv.device_id};{pv.value:.2f};{int(round(pv.generated_at))}".encode()


def decode_pv(payload: bytes) -> ProcessValue:
    try:
        device_id, value, t = payload.decode().split(";")
        return ProcessValue(device_id, float(value), float(int(t)))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"malformed process value payload {payload!r}") from exc


class FieldDeviceApp:
    """CoAP server running on a field device node.

    Serves GET-with-observe on ``pv`` and PUT commands on ``cmd``; publishes a
    notification at every publish instant while observed.
    """

    def __init__(self, node, device: FieldDevice,
                 policy_source: Callable[[], Optional[QoSPolicy]],
                 params: RetransmitParams = DEFAULT_PARAMS, seed: int = 0, secure: bool = False):
        self.node = node
        self.device = device
        self.loop = node.net.loop
        self.selector = IsaClass(device.spec.isa_class).name
        self.endpoint = CoapEndpoint(self.loop, node.name, CoapWire(node, policy_source, secure),
                                     params, rng=random.Random(f"{seed}:{device.device_id}:coap"),
                                     responder=self._respond)
        self.pv_tag = FlowTag("COAP_PV", self.selector, f"pv:{device.device_id}")
        self.stop_at = 0.0
        self.published: list[tuple[str, float]] = []
        self.failed: set[tuple[str, float]] = set()
        self.commands: list[tuple[str, object]] = []
        self._generation = 0
        node.bind("CoapMessage", self._on_packet)

    def _on_packet(self, pkt) -> None:
        self.endpoint.handle_inbound(pkt.payload, pkt.src, tag_of(pkt))

    def _respond(self, msg: CoapMessage, src: str, tag):
        if msg.code is Code.GET and msg.uri_path == PV_RESOURCE:
            if msg.observe == 0:
                self.endpoint.register_observer(PV_RESOURCE, src, msg.token)
            elif msg.observe == 1:
                for obs in self.endpoint.observations.get(PV_RESOURCE, ()):
                    if obs.observer == src:
                        obs.active = False
            pv = generate_pv(self.device, next_publish_time(self.device, self.loop.now))
            return Code.CONTENT, encode_pv(pv)
        if msg.code is Code.PUT and msg.uri_path == COMMAND_RESOURCE:
            return Code.CONTENT, self._command(msg.payload)
        return Code.EMPTY, b""

    def _command(self, payload: bytes) -> bytes:
        try:
            cmd = json.loads(payload)
            name, args = cmd["command"], cmd.get("args")
        except (ValueError, KeyError, TypeError):
            return b'{"ok":false}'
        self.commands.append((name, args))
        if name == "set_update_interval":
            spec = self.device.spec
            try:
                self.device.spec = SensorSpec(spec.isa_class, spec.kind, float(args) * MS, spec.qos_group)
            except (TypeError, ValueError):
                return b'{"ok":false}'
            self.device.pv_state = None
            self._reschedule()
        return b'{"ok":true}'

    def start(self, stop_at: float) -> None:
        self.stop_at = stop_at
        self._reschedule()

    def _reschedule(self) -> None:
        self._generation += 1
        t = next_publish_time(self.device, self.loop.now)
        if t < self.stop_at:
            self.loop.call_at(t, self._publish, self._generation)

    def _publish(self, generation: int) -> None:
        if generation != self._generation:
            return
        now = self.loop.now
        if self.endpoint.active_observations(PV_RESOURCE):
            pv = generate_pv(self.device, now)
            key = (pv.device_id, pv.generated_at)
            self.published.append(key)

            def failed(ex, key=key):
                self.failed.add(key)

            self.endpoint.notify_observers(PV_RESOURCE, encode_pv(pv), self.pv_tag,
                                           on_timeout=failed)
        nxt = now + self.device.spec.update_interval
        if nxt < self.stop_at:
            self.loop.call_at(nxt, self._publish, generation)
