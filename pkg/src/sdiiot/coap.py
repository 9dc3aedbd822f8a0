"""Confirmable CoAP exchanges driven by the simulation clock.

Each simulated endpoint owns one :class:`CoapEndpoint`. Outbound CONs are
retransmitted with binary exponential backoff; inbound CONs are
deduplicated and acknowledged; observe-mode notifications are emitted as
CONs and an observation is dropped when one of its notifications fails.
"""

from __future__ import annotations

import enum
import math
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .messages import (Code, CoapMessage, MessageIdCounter, MessageKind, make_ack,
                       make_rst)


@dataclass(frozen=True)
class RetransmitParams:
    """ACK timeout ``ack_timeout_us`` (T), retransmit limit (C), random factor (F)."""

    ack_timeout_us: float
    max_retransmit: int
    random_factor: float

    def __post_init__(self):
        if not self.ack_timeout_us > 0:
            raise ValueError("ACK timeout must be positive")
        if self.max_retransmit < 0 or int(self.max_retransmit) != self.max_retransmit:
            raise ValueError("max_retransmit must be a non-negative integer")
        if not self.random_factor >= 1:
            raise ValueError("random factor must be >= 1")

    @classmethod
    def from_ms(cls, T_ms: float, C: int, F: float) -> "RetransmitParams":
        return cls(T_ms * 1000.0, int(C), float(F))


DEFAULT_PARAMS = RetransmitParams.from_ms(2, 4, 1.5)


def expected_time_span(params: RetransmitParams) -> float:
    """Worst-case span of a confirmable exchange, in microseconds."""
    return params.ack_timeout_us * ((2 ** params.max_retransmit) - 1) * params.random_factor


def initial_timeout(params: RetransmitParams, rng: random.Random) -> float:
    T, F = params.ack_timeout_us, params.random_factor
    if F == 1:
        return T
    t0 = rng.uniform(T, F * T)
    n = 2 ** params.max_retransmit - 1
    if n:
        # Keep the backoff sum within the closed-form span despite rounding.
        span = expected_time_span(params)
        while t0 > T and math.fsum(t0 * 2 ** i for i in range(params.max_retransmit)) > span:
            t0 = math.nextafter(t0, T)
    return t0


def backoff_schedule(t0: float, retransmits: int) -> list[float]:
    return [t0 * 2 ** i for i in range(retransmits)]


def retransmit_schedule(params: RetransmitParams, rng: random.Random) -> list[float]:
    """Timeouts preceding each of the C retransmissions."""
    return backoff_schedule(initial_timeout(params, rng), params.max_retransmit)


class ExchangeState(enum.Enum):
    WAITING = "WAITING"
    ACKED = "ACKED"
    TIMED_OUT = "TIMED_OUT"


@dataclass
class Exchange:
    request: CoapMessage
    dst: str
    state: ExchangeState
    transmissions_sent: int
    initial_timeout: float
    started_at: float
    waits: list[float]
    context: Any = None
    response: Optional[CoapMessage] = None
    resolved_at: Optional[float] = None
    reset: bool = False
    on_ack: Optional[Callable[["Exchange"], None]] = field(default=None, repr=False)
    on_timeout: Optional[Callable[["Exchange"], None]] = field(default=None, repr=False)

    @property
    def done(self) -> bool:
        return self.state is not ExchangeState.WAITING


@dataclass
class Observation:
    resource: str
    observer: str
    last_sequence: int = 0
    active: bool = True
    token: bytes = b""


@dataclass
class Action:
    """Outcome of :meth:`CoapEndpoint.handle_inbound`."""

    delivered: bool = False
    reply: Optional[CoapMessage] = None
    resolved: Optional[Exchange] = None
    duplicate: bool = False
    stray: bool = False


class UnknownToken(Exception):
    """Raised by a responder when a message references no known token."""


Responder = Callable[[CoapMessage, str, Any], Optional[tuple[Code, bytes]]]


class CoapEndpoint:
    """CoAP engine bound to one simulated node.

    ``transport(msg, dst, context)`` puts a message on the wire; ``context``
    is opaque routing/marking data the owner attaches (replies reuse the
    context of the message they answer).
    """

    def __init__(self, loop, name: str, transport: Callable[[CoapMessage, str, Any], None],
                 params: RetransmitParams = DEFAULT_PARAMS, rng: Optional[random.Random] = None,
                 responder: Optional[Responder] = None, first_message_id: int = 0):
        self.loop = loop
        self.name = name
        self.transport = transport
        self.params = params
        self.rng = rng or random.Random(name)
        self.responder = responder
        self.ids = MessageIdCounter(first_message_id)
        self.pending: dict[int, Exchange] = {}
        self.observations: dict[str, list[Observation]] = {}
        self._dedup: dict[tuple[str, int], tuple[float, Optional[CoapMessage]]] = {}
        self._dedup_window = expected_time_span(params)
        self.counters = {"sent": 0, "retransmissions": 0, "timeouts": 0, "acked": 0,
                         "stray_acks": 0, "duplicates": 0, "delivered": 0, "rst_sent": 0,
                         "rst_received": 0}

    # outbound -----------------------------------------------------------

    def next_id(self) -> int:
        return self.ids.next()

    def send_confirmable(self, msg: CoapMessage, dst: str, context: Any = None,
                         on_ack: Optional[Callable[[Exchange], None]] = None,
                         on_timeout: Optional[Callable[[Exchange], None]] = None,
                         params: Optional[RetransmitParams] = None) -> Exchange:
        if msg.kind is not MessageKind.CON:
            raise ValueError("send_confirmable needs a CON message")
        params = params or self.params
        t0 = initial_timeout(params, self.rng)
        waits = backoff_schedule(t0, params.max_retransmit + 1)
        ex = Exchange(msg, dst, ExchangeState.WAITING, 0, t0, self.loop.now, waits,
                      context=context, on_ack=on_ack, on_timeout=on_timeout)
        stale = self.pending.get(msg.message_id)
        if stale is not None and not stale.done:
            raise RuntimeError(f"message id {msg.message_id} already in flight")
        self.pending[msg.message_id] = ex
        self.counters["sent"] += 1
        self._transmit(ex)
        return ex

    def _transmit(self, ex: Exchange) -> None:
        idx = ex.transmissions_sent
        ex.transmissions_sent += 1
        if idx:
            self.counters["retransmissions"] += 1
        self.transport(ex.request, ex.dst, ex.context)
        self.loop.schedule(ex.waits[idx], self._on_timer, ex, idx)

    def _on_timer(self, ex: Exchange, idx: int) -> None:
        if ex.state is not ExchangeState.WAITING or ex.transmissions_sent != idx + 1:
            return
        if ex.transmissions_sent < len(ex.waits):
            self._transmit(ex)
            return
        self._fail(ex)

    def _fail(self, ex: Exchange, reset: bool = False) -> None:
        ex.state = ExchangeState.TIMED_OUT
        ex.reset = reset
        ex.resolved_at = self.loop.now
        self.counters["timeouts"] += 1
        self.pending.pop(ex.request.message_id, None)
        if ex.on_timeout is not None:
            ex.on_timeout(ex)

    # inbound ------------------------------------------------------------

    def handle_inbound(self, msg: CoapMessage, src: str, context: Any = None) -> Action:
        if msg.kind is MessageKind.ACK:
            return self._on_ack(msg, src)
        if msg.kind is MessageKind.RST:
            self.counters["rst_received"] += 1
            ex = self.pending.get(msg.message_id)
            if ex is not None and ex.dst == src and ex.state is ExchangeState.WAITING:
                self._fail(ex, reset=True)
                return Action(resolved=ex)
            return Action(stray=True)

        now = self.loop.now
        key = (src, msg.message_id)
        seen = self._dedup.get(key)
        if seen is not None and seen[0] >= now:
            self.counters["duplicates"] += 1
            reply = seen[1]
            self._dedup[key] = (now + self._dedup_window, reply)
            if reply is not None:
                self.transport(reply, src, context)
            return Action(reply=reply, duplicate=True)

        try:
            result = self.responder(msg, src, context) if self.responder else None
        except UnknownToken:
            rst = make_rst(msg)
            self.counters["rst_sent"] += 1
            self.transport(rst, src, context)
            return Action(reply=rst)

        reply = None
        if msg.kind is MessageKind.CON:
            code, payload = result if result is not None else (Code.EMPTY, b"")
            reply = make_ack(msg, code, payload)
        self._remember(key, now, reply)
        self.counters["delivered"] += 1
        if reply is not None:
            self.transport(reply, src, context)
        return Action(delivered=True, reply=reply)

    def _on_ack(self, ack: CoapMessage, src: str) -> Action:
        ex = self.pending.get(ack.message_id)
        if ex is None or ex.dst != src or ex.state is not ExchangeState.WAITING:
            self.counters["stray_acks"] += 1
            return Action(stray=True)
        ex.state = ExchangeState.ACKED
        ex.response = ack
        ex.resolved_at = self.loop.now
        self.counters["acked"] += 1
        del self.pending[ack.message_id]
        if ex.on_ack is not None:
            ex.on_ack(ex)
        return Action(resolved=ex)

    def _remember(self, key, now: float, reply: Optional[CoapMessage]) -> None:
        self._dedup[key] = (now + self._dedup_window, reply)
        if len(self._dedup) > 4096:
            self._dedup = {k: v for k, v in self._dedup.items() if v[0] >= now}

    # observe ------------------------------------------------------------

    def register_observer(self, resource: str, observer: str, token: bytes = b"") -> Observation:
        observations = self.observations.setdefault(resource, [])
        for obs in observations:
            if obs.observer == observer:
                obs.active = True
                obs.token = token
                return obs
        obs = Observation(resource, observer, token=token)
        observations.append(obs)
        return obs

    def active_observations(self, resource: str) -> list[Observation]:
        return [o for o in self.observations.get(resource, ()) if o.active]

    def notify_observers(self, resource: str, payload: bytes, context: Any = None,
                         on_ack: Optional[Callable[[Exchange], None]] = None,
                         on_timeout: Optional[Callable[[Exchange], None]] = None
                         ) -> list[CoapMessage]:
        """Emit one CON notification per active observer of ``resource``."""
        emitted = []
        for obs in self.active_observations(resource):
            obs.last_sequence += 1
            msg = CoapMessage(MessageKind.CON, Code.CONTENT, self.next_id(), token=obs.token,
                              observe=obs.last_sequence, content_format=0, payload=payload)

            def failed(ex, obs=obs):
                obs.active = False
                if on_timeout is not None:
                    on_timeout(ex)

            self.send_confirmable(msg, obs.observer, context, on_ack=on_ack, on_timeout=failed)
            emitted.append(msg)
        return emitted
