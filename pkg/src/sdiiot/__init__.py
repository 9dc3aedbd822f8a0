"""Software-defined IIoT testbed: field devices, gateways, QoS policies and a
deterministic network simulator."""

__version__ = "0.1.0"
