import json

import pytest
from hypothesis import given, strategies as st

from sdiiot.messages import NetPacket, Transport
from sdiiot.qos import (ALL_SELECTORS, BACKGROUND, CONTROL, GROUP_PROFILES, DscpClass, IsaClass,
                        PolicyError, PolicyRule, QoSGroup, QoSPolicy, Tolerance, classify,
                        default_policy, dscp_for_class, group_for_class, policy_from_json, validate)
from sdiiot.wire import mark

TABLE = {  # class -> (group, dscp) with the AF21 group-3 default
    0: ("G1", "EF"), 1: ("G1", "EF"), 2: ("G2", "CS4"), 3: ("G2", "CS4"), 4: ("G3", "AF21"), 5: ("G3", "AF21"),
}


def test_code_points():
    assert {d.name: d.code_point for d in DscpClass} == {
        "EF": 46, "CS6": 48, "CS4": 32, "AF21": 18, "AF22": 20, "AF23": 22, "BE": 0}


@pytest.mark.parametrize("cls", range(6))
def test_class_table(cls):
    group, dscp = TABLE[cls]
    assert group_for_class(cls).value == group
    assert dscp_for_class(IsaClass(cls)).name == dscp


def test_group3_override():
    assert dscp_for_class(IsaClass.Class5, DscpClass.CS4) is DscpClass.CS4
    assert dscp_for_class(IsaClass.Class4, "AF23") is DscpClass.AF23
    assert dscp_for_class(IsaClass.Class1, DscpClass.CS4) is DscpClass.EF
    with pytest.raises(ValueError):
        dscp_for_class(IsaClass.Class5, DscpClass.EF)


def test_group_profiles():
    g1 = GROUP_PROFILES[QoSGroup.G1]
    assert (g1.loss_tolerance, g1.delay_tolerance, g1.jitter_tolerance) == (Tolerance.VERY_LOW,) * 3
    assert GROUP_PROFILES[QoSGroup.G3].delay_tolerance is Tolerance.LOW
    assert GROUP_PROFILES[QoSGroup.CONTROL].jitter_tolerance is Tolerance.TOLERANT


def test_default_policy_valid():
    p = default_policy()
    assert validate(p) == []
    assert {r.selector for r in p.rules} == set(ALL_SELECTORS)
    assert p.rule_for(CONTROL).dscp is DscpClass.CS6 and p.rule_for(CONTROL).queue == 0
    assert p.rule_for(BACKGROUND).queue == 3


def _replace_rule(policy, selector, **kw):
    rules = []
    for r in policy.rules:
        if r.selector == selector:
            d = dict(selector=r.selector, group=r.group, dscp=r.dscp, queue=r.queue)
            d.update(kw)
            r = PolicyRule(**d)
        rules.append(r)
    return QoSPolicy(policy.version, tuple(rules))


def test_control_must_be_cs6():
    bad = _replace_rule(default_policy(), CONTROL, dscp=DscpClass.EF)
    assert "CONTROL must map to CS6" in validate(bad)


def test_duplicate_selector_listed():
    p = default_policy()
    bad = QoSPolicy(1, p.rules + (p.rule_for("Class2"),))
    assert any("duplicate selector Class2" in v for v in validate(bad))


def test_all_violations_reported():
    p = _replace_rule(default_policy(), CONTROL, dscp=DscpClass.EF)
    p = _replace_rule(p, "Class1", queue=2)
    p = _replace_rule(p, BACKGROUND, dscp=DscpClass.CS4)
    assert len(validate(p)) >= 3


def test_json_round_trip():
    p = default_policy(4, DscpClass.CS4)
    doc = json.loads(p.dumps())
    assert doc["v"] == 1 and doc["version"] == 4
    assert doc["rules"][0] == {"selector": "Class0", "group": "G1", "dscp": "EF", "queue": 0}
    assert policy_from_json(p.dumps()) == p


@pytest.mark.parametrize("text", [
    "{", "[]", '{"v": 2, "version": 1, "rules": []}', '{"v": 1, "version": -1, "rules": []}',
    '{"v": 1, "version": 1, "rules": [{"selector": "Class1"}]}',
    '{"v": 1, "version": 1, "rules": [{"selector": "Class1", "group": "G9", "dscp": "EF", "queue": 0}]}',
])
def test_bad_json(text):
    with pytest.raises(PolicyError):
        policy_from_json(text)


def _pkt(selector, dscp):
    return NetPacket("a", "b", dscp, 100, Transport.UDP_LIKE, "f", selector=selector)


def test_classify_examples():
    p = default_policy()
    assert classify(_pkt("Class1", DscpClass.EF), p) == 0
    assert classify(_pkt(CONTROL, DscpClass.CS6), p) == 0
    assert classify(_pkt(None, DscpClass.BE), p) == 3
    assert classify(_pkt("Class3", DscpClass.CS4), p) == 1
    assert classify(_pkt("Class5", DscpClass.AF21), p) == 2
    # mark/selector mismatch falls through to best effort
    assert classify(_pkt("Class1", DscpClass.BE), p) == 3
    assert classify(_pkt("Class1", DscpClass.EF), None) == 3


@given(st.sampled_from(ALL_SELECTORS), st.sampled_from(["CS4", "AF21", "AF22", "AF23"]),
       st.permutations(range(8)))
def test_classify_order_independent(selector, g3, order):
    p = default_policy(1, DscpClass[g3])
    shuffled = QoSPolicy(1, tuple(p.rules[i] for i in order))
    dscp, _ = mark(p, selector)
    pkt = _pkt(selector, dscp)
    assert classify(pkt, p) == classify(pkt, shuffled) == p.rule_for(selector).queue


@given(st.sampled_from(list(IsaClass)), st.sampled_from(["CS4", "AF21", "AF22", "AF23"]))
def test_dscp_consistent_with_group(cls, g3):
    d = dscp_for_class(cls, g3)
    g = group_for_class(cls)
    assert (g is QoSGroup.G1) == (d is DscpClass.EF)
    if g is QoSGroup.G2:
        assert d is DscpClass.CS4
