import dataclasses
import json

import pytest

from conftest import small_scenario
from sdiiot.coap import ExchangeState
from sdiiot.gateway import (Outcome, connect_ws, distribute, establish_observations, reconcile)
from sdiiot.harness import build_world, run_replication
from sdiiot.messages import Code, CoapMessage, MessageKind, WsFrame, WsOpcode
from sdiiot.qos import DscpClass, PolicyRule, QoSPolicy, default_policy
from sdiiot.tdma import ProcessValue, encode_pv
from sdiiot.wire import FlowTag


def world(sites=1, qos=True, **kw):
    s = small_scenario(sites=sites, **kw).with_mode("qos" if qos else "no_qos")
    w = build_world(s, s.seed)
    sent = []
    inner = w.net.injected

    def spy(pkt):
        sent.append(pkt)
        inner(pkt)

    w.net.injected = spy
    w.sent = sent
    return w


def test_observations_lossless():
    w = world()
    gw = w.gateways[0]
    assert establish_observations(gw, list(gw.devices)) == 18
    assert gw.state.observed_devices == set(gw.devices)
    gets = [p for p in w.sent if p.flow_class == "OBSERVE" and p.payload.kind is MessageKind.CON]
    assert len(gets) == 18 and all(p.payload.observe == 0 for p in gets)


def test_observations_empty():
    w = world()
    assert establish_observations(w.gateways[0], []) == 0


def test_observation_timeout_reported():
    w = world()
    gw = w.gateways[0]
    w.net.port("sw1", "s1-M1").drop_filter = lambda p: True
    assert establish_observations(gw, ["s1-M1"]) == 0
    assert gw.registration_timeouts == ["s1-M1"]


def _notification(gw, device_id, t, value=1500.0, mid=1):
    token = gw.devices[device_id].token
    return CoapMessage(MessageKind.CON, Code.CONTENT, mid, token=token, observe=1,
                       payload=encode_pv(ProcessValue(device_id, value, t)))


def test_coap_to_ws_json_and_buffering():
    w = world()
    gw = w.gateways[0]
    w.loop.run(until=103_000)
    frame = gw.coap_to_ws(_notification(gw, "s1-M1", 100_000))
    doc = json.loads(frame.payload)
    assert doc == {"v": 1, "device_id": "s1-M1", "value": 1500.0, "generated_at": 100_000,
                   "gw_arrival": 103_000}
    assert frame.opcode is WsOpcode.TEXT
    # no session yet: buffered, later flushed on connect
    assert len(gw.buffer) == 1
    connect_ws(gw, w.cloud)
    w.loop.run()
    assert not gw.buffer and w.cloud.received_frames == 1


def test_adapter_dedup_and_malformed():
    w = world()
    gw = w.gateways[0]
    n = _notification(gw, "s1-M1", 50_000)
    assert gw.coap_to_ws(n) is not None
    assert gw.coap_to_ws(n) is None
    assert len(gw.buffer) == 1 and gw.counters["adapter_duplicates"] == 1
    bad = dataclasses.replace(n, payload=b"not-a-pv")
    assert gw.coap_to_ws(bad) is None and gw.counters["malformed"] == 1


def test_buffer_limit_drops_oldest():
    w = world()
    gw = w.gateways[0]
    gw.ws_buffer_limit = 3
    for k in range(5):
        gw.coap_to_ws(_notification(gw, "s1-M1", k * 1000.0))
    assert gw.counters["buffer_drops"] == 2
    assert [json.loads(f.payload)["generated_at"] for f, _ in gw.buffer] == [2000, 3000, 4000]


def _install(w):
    out = distribute(w.cloud, w.gateways, w.policy)
    assert all(o.status is Outcome.APPLIED for o in out.values())


def test_command_marked_cs6():
    w = world()
    gw = w.gateways[0]
    _install(w)
    frame = WsFrame(WsOpcode.TEXT, json.dumps({"v": 1, "device_id": "s1-M1",
                                               "command": "set_update_interval", "args": 25}).encode())
    msg = gw.ws_to_coap(frame)
    assert msg.kind is MessageKind.CON and msg.code is Code.PUT and msg.uri_path == "cmd"
    w.loop.run()
    pkt = next(p for p in w.sent if p.payload is msg)
    assert pkt.dscp is DscpClass.CS6 and pkt.dst == "s1-M1"
    app = next(a for a in w.apps if a.device.device_id == "s1-M1")
    assert app.device.spec.update_interval == 25_000
    assert gw.command_exchanges[0].state is ExchangeState.ACKED


def test_command_unknown_device():
    w = world()
    gw = w.gateways[0]
    connect_ws(gw, w.cloud)
    before = len(w.sent)
    frame = WsFrame(WsOpcode.TEXT, b'{"v":1,"device_id":"nope","command":"x","args":null}')
    assert gw.ws_to_coap(frame, next(iter(gw.sessions))) is None
    assert not any(p.flow_class == "CONTROL" and isinstance(p.payload, CoapMessage) for p in w.sent[before:])
    w.loop.run()
    assert w.cloud.error_frames == [{"v": 1, "error": "unknown device", "device_id": "nope"}]


def test_command_end_to_end_from_cloud():
    w = world()
    gw = w.gateways[0]
    _install(w)
    connect_ws(gw, w.cloud)
    w.cloud.send_command(gw.name, "s1-P1", "set_update_interval", 100)
    w.loop.run()
    assert gw.command_exchanges and gw.command_exchanges[0].state is ExchangeState.ACKED


def test_command_to_dead_device_times_out():
    w = world()
    gw = w.gateways[0]
    w.net.port("sw1", "s1-T1").drop_filter = lambda p: True
    gw.ws_to_coap(WsFrame(WsOpcode.TEXT, b'{"v":1,"device_id":"s1-T1","command":"x","args":null}'))
    w.loop.run()
    assert gw.command_exchanges[0].state is ExchangeState.TIMED_OUT


def test_apply_policy():
    w = world()
    gw = w.gateways[0]
    p = default_policy(3)
    ack = gw.apply_policy(p)
    assert ack.accepted and ack.version == 3 and gw.installed_policy is p
    assert gw.apply_policy(default_policy(3)).version == 3
    assert len(gw.policy_history) == 1  # idempotent
    bad = QoSPolicy(4, tuple(r if r.selector != "CONTROL" else PolicyRule("CONTROL", r.group, DscpClass.EF, 0)
                             for r in p.rules))
    ack = gw.apply_policy(bad)
    assert not ack.accepted and "CONTROL must map to CS6" in ack.violations
    assert gw.installed_policy is p


def test_installed_policy_marks_motor_pv_ef():
    w = world()
    gw = w.gateways[0]
    _install(w)
    establish_observations(gw, list(gw.devices))
    for a in w.apps:
        a.start(w.loop.now + 60_000)
    w.loop.run()
    motor = [p for p in w.sent if p.flow_class == "COAP_PV" and p.src.startswith("s1-M")]
    assert motor and all(p.dscp is DscpClass.EF and p.policy_version == 1 for p in motor)


def test_policy_put_with_bad_json_rejected():
    w = world()
    gw = w.gateways[0]
    _install(w)
    msg = CoapMessage(MessageKind.CON, Code.PUT, 500, uri_path="qos/policy", payload=b"{oops")
    w.cloud.endpoint.send_confirmable(msg, gw.name, FlowTag("CONTROL", "CONTROL", "policy:bad"))
    w.loop.run()
    assert gw.installed_policy.version == 1 and gw.counters["policy_rejects"] == 1


def test_distribute_four_gateways():
    w = world(sites=4)
    out = distribute(w.cloud, w.gateways, w.policy)
    assert [o.status for o in out.values()] == [Outcome.APPLIED] * 4
    for gw in w.gateways:
        assert gw.installed_policy.version == out[gw.name].version == 1


def test_distribute_unreachable_gateway():
    w = world(sites=4)
    w.net.port("core", "gw3").drop_filter = lambda p: True
    out = distribute(w.cloud, w.gateways, w.policy)
    assert out["gw3"].status is Outcome.TIMED_OUT
    assert sum(o.status is Outcome.APPLIED for o in out.values()) == 3
    assert w.gateways[2].installed_policy is None


def test_distribute_empty():
    w = world()
    assert distribute(w.cloud, [], w.policy) == {}


def test_redistribution_mid_run_atomic():
    s = small_scenario(sites=2, duration_s=0.6)
    w = build_world(s, 0)
    marks = []
    inner = w.net.injected
    w.net.injected = lambda p: (marks.append((p.flow_class, p.policy_version)), inner(p))
    distribute(w.cloud, w.gateways, w.policy)
    for gw in w.gateways:
        connect_ws(gw, w.cloud)
        establish_observations(gw, list(gw.devices))
        gw.start(w.loop.now + 600_000)
    for a in w.apps:
        a.start(w.loop.now + 600_000)
    v2 = default_policy(2, DscpClass.CS4)
    w.loop.run(until=w.loop.now + 300_000)
    distribute(w.cloud, w.gateways, v2)
    w.loop.run()
    installed = {None, 1, 2}
    assert {v for _, v in marks} <= installed
    pv_versions = [v for c, v in marks if c == "COAP_PV"]
    assert 1 in pv_versions and 2 in pv_versions
    # once switched, a gateway never marks with the old version again
    assert all(gw.installed_policy.version == 2 for gw in w.gateways)


def test_timestamps_and_adapter_conservation():
    s = small_scenario(sites=2, duration_s=0.5)
    res = run_replication(s)
    assert res.stats["WS_READING"].success_rate == 1.0
    # replay the pieces to check every reading's ordering
    w = build_world(s, s.seed)
    distribute(w.cloud, w.gateways, w.policy)
    for gw in w.gateways:
        connect_ws(gw, w.cloud)
        establish_observations(gw, list(gw.devices))
        gw.start(w.loop.now + 500_000)
    for a in w.apps:
        a.start(w.loop.now + 500_000)
    w.loop.run()
    reconcile(w.gateways, w.cloud)
    readings = [r for gw in w.gateways for r in gw.readings]
    assert readings
    for r in readings:
        assert r.pv.generated_at <= r.gw_arrival <= r.sc_arrival
    received = sum(gw.counters["notifications"] for gw in w.gateways)
    dropped = sum(gw.counters["adapter_duplicates"] + gw.counters["malformed"] + gw.adapter_drops
                  for gw in w.gateways)
    assert w.cloud.received_frames == received - dropped
