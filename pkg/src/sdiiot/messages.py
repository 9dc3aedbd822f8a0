"""Application messages and the simulated wire envelope.

CoAP and WebSocket messages are modelled for their semantics and byte
sizes only; nothing here produces an RFC-exact octet layout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Optional

# Ethernet (14) + IPv4 (20) + UDP (8) + CoAP fixed header (4).
COAP_BASE_SIZE = 46
COAP_OPTION_SIZE = 4
# Ethernet + IPv4 + TCP, carried under every WebSocket frame.
TCP_IP_OVERHEAD = 54
WS_HEADER_OVERHEAD = 8
# Added per packet when a flow is marked secure (DTLS/TLS record cost).
SECURE_OVERHEAD = 29


class MessageKind(enum.Enum):
    CON = "CON"
    NON = "NON"
    ACK = "ACK"
    RST = "RST"


class Code(enum.Enum):
    GET = "GET"
    PUT = "PUT"
    POST = "POST"
    CONTENT = "CONTENT"
    EMPTY = "EMPTY"


class Transport(enum.Enum):
    UDP_LIKE = "UDP_LIKE"
    TCP_LIKE = "TCP_LIKE"


class WsOpcode(enum.Enum):
    TEXT = "TEXT"
    BINARY = "BINARY"
    PING = "PING"
    PONG = "PONG"
    CLOSE = "CLOSE"


@dataclass(frozen=True)
class CoapMessage:
    kind: MessageKind
    code: Code
    message_id: int
    token: bytes = b""
    observe: Optional[int] = None
    uri_path: Optional[str] = None
    content_format: Optional[int] = None
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.message_id <= 0xFFFF:
            raise ValueError(f"message_id out of 16-bit range: {self.message_id}")
        if len(self.token) > 8:
            raise ValueError("token longer than 8 bytes")
        if self.observe is not None and self.observe < 0:
            raise ValueError("observe must be non-negative")
        if self.kind is MessageKind.ACK and self.code is Code.EMPTY and self.payload:
            raise ValueError("an empty ACK carries no payload")

    @property
    def option_count(self) -> int:
        return sum(o is not None for o in (self.observe, self.uri_path, self.content_format))

    def fields(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "code": self.code,
            "message_id": self.message_id,
            "token": self.token,
            "observe": self.observe,
            "uri_path": self.uri_path,
            "content_format": self.content_format,
            "payload": self.payload,
        }

    @classmethod
    def from_fields(cls, fields: dict[str, Any]) -> "CoapMessage":
        return cls(**fields)


def encoded_size(msg: CoapMessage) -> int:
    """Bytes on the wire for ``msg`` under the size-accounting model.

    The fixed 46-byte base covers link, network, transport and CoAP header
    (token bytes included); each option adds 4 bytes.
    """
    return COAP_BASE_SIZE + len(msg.payload) + COAP_OPTION_SIZE * msg.option_count


def match_ack(con: CoapMessage, ack: CoapMessage) -> bool:
    if con.kind is not MessageKind.CON:
        raise ValueError("match_ack expects a CON as first argument")
    return ack.kind is MessageKind.ACK and ack.message_id == con.message_id


def make_ack(request: CoapMessage, code: Code = Code.EMPTY, payload: bytes = b"") -> CoapMessage:
    return CoapMessage(MessageKind.ACK, code, request.message_id, token=request.token,
                       payload=payload)


def make_rst(request: CoapMessage) -> CoapMessage:
    return CoapMessage(MessageKind.RST, Code.EMPTY, request.message_id)


class MessageIdCounter:
    """Wrapping 16-bit message id source, one per endpoint."""

    def __init__(self, start: int = 0):
        self._next = start & 0xFFFF

    def next(self) -> int:
        mid = self._next
        self._next = (self._next + 1) & 0xFFFF
        return mid


@dataclass(frozen=True)
class WsFrame:
    opcode: WsOpcode
    payload: bytes = b""
    header_overhead_bytes: int = WS_HEADER_OVERHEAD

    @property
    def encoded_size(self) -> int:
        return len(self.payload) + self.header_overhead_bytes


@dataclass(slots=True)
class NetPacket:
    """Simulated wire envelope.

    Timestamps are simulation microseconds. ``enqueued_at``/``dequeued_at``
    are overwritten at every hop, so they describe the most recent one.
    """

    src: str
    dst: str
    dscp: Any
    size_bytes: int
    transport: Transport
    flow_id: str
    flow_class: str = "BACKGROUND"
    selector: Optional[str] = None
    payload: Any = None
    policy_version: Optional[int] = None
    created_at: float = 0.0
    enqueued_at: Optional[float] = None
    dequeued_at: Optional[float] = None
    delivered_at: Optional[float] = None
    hops: Optional[list] = None

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError("size_bytes must be positive")

