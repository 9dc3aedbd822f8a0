"""Glue between CoAP endpoints and the packet network."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .messages import SECURE_OVERHEAD, CoapMessage, NetPacket, Transport, encoded_size
from .qos import DscpClass, QoSPolicy


@dataclass(frozen=True)
class FlowTag:
    flow_class: str
    selector: Optional[str]
    flow_id: str


def mark(policy: Optional[QoSPolicy], selector: Optional[str]) -> tuple[DscpClass, Optional[int]]:
    if policy is None:
        return DscpClass.BE, None
    return policy.dscp_for(selector), policy.version


class CoapWire:
    """Transport callable for a :class:`~sdiiot.coap.CoapEndpoint`.

    Marks each outbound message from the policy currently returned by
    ``policy_source`` and hands it to ``node``.
    """

    def __init__(self, node, policy_source: Callable[[], Optional[QoSPolicy]], secure: bool = False):
        self.node = node
        self.policy_source = policy_source
        self.secure = secure

    def __call__(self, msg: CoapMessage, dst: str, tag: FlowTag) -> None:
        dscp, version = mark(self.policy_source(), tag.selector)
        size = encoded_size(msg) + (SECURE_OVERHEAD if self.secure else 0)
        pkt = NetPacket(self.node.name, dst, dscp, size, Transport.UDP_LIKE, tag.flow_id,
                        tag.flow_class, tag.selector, msg, version)
        self.node.send(pkt)


def tag_of(pkt: NetPacket) -> FlowTag:
    return FlowTag(pkt.flow_class, pkt.selector, pkt.flow_id)
