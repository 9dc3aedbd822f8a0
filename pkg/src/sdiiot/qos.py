"""DiffServ classes, QoS groups and the sensor-class policy table.

A :class:`QoSPolicy` maps flow selectors (ISA-100.11a sensor classes plus the
CONTROL and BACKGROUND flow kinds) to a QoS group, a DSCP mark and one of four
switch queues. Policies travel as JSON, both on disk and inside CoAP PUTs.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Optional


class DscpClass(enum.Enum):
    EF = 46
    CS6 = 48
    CS4 = 32
    AF21 = 18
    AF22 = 20
    AF23 = 22
    BE = 0

    @property
    def code_point(self) -> int:
        return self.value


class IsaClass(enum.IntEnum):
    Class0 = 0
    Class1 = 1
    Class2 = 2
    Class3 = 3
    Class4 = 4
    Class5 = 5


class QoSGroup(enum.Enum):
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    CONTROL = "CONTROL"
    BEST_EFFORT = "BEST_EFFORT"


class Tolerance(enum.Enum):
    VERY_LOW = "VERY_LOW"
    LOW = "LOW"
    TOLERANT = "TOLERANT"


class TrafficPattern(enum.Enum):
    FIXED_SIZE_CONSTANT_RATE = "FIXED_SIZE_CONSTANT_RATE"
    VARIABLE_INELASTIC = "VARIABLE_INELASTIC"


@dataclass(frozen=True)
class QoSGroupProfile:
    group: QoSGroup
    loss_tolerance: Tolerance
    delay_tolerance: Tolerance
    jitter_tolerance: Tolerance
    traffic: TrafficPattern


GROUP_PROFILES = {
    QoSGroup.G1: QoSGroupProfile(QoSGroup.G1, Tolerance.VERY_LOW, Tolerance.VERY_LOW,
                                 Tolerance.VERY_LOW, TrafficPattern.FIXED_SIZE_CONSTANT_RATE),
    QoSGroup.G2: QoSGroupProfile(QoSGroup.G2, Tolerance.VERY_LOW, Tolerance.VERY_LOW,
                                 Tolerance.LOW, TrafficPattern.VARIABLE_INELASTIC),
    QoSGroup.G3: QoSGroupProfile(QoSGroup.G3, Tolerance.VERY_LOW, Tolerance.LOW,
                                 Tolerance.LOW, TrafficPattern.VARIABLE_INELASTIC),
    QoSGroup.CONTROL: QoSGroupProfile(QoSGroup.CONTROL, Tolerance.LOW, Tolerance.LOW,
                                      Tolerance.TOLERANT, TrafficPattern.VARIABLE_INELASTIC),
}

CONTROL = "CONTROL"
BACKGROUND = "BACKGROUND"
CLASS_SELECTORS = tuple(c.name for c in IsaClass)
ALL_SELECTORS = CLASS_SELECTORS + (CONTROL, BACKGROUND)

GROUP3_DSCP_CHOICES = (DscpClass.CS4, DscpClass.AF21, DscpClass.AF22, DscpClass.AF23)
QUEUE_FOR_GROUP = {
    QoSGroup.G1: 0,
    QoSGroup.G2: 1,
    QoSGroup.G3: 2,
    QoSGroup.CONTROL: 0,  # shares the strict-top queue with EF
    QoSGroup.BEST_EFFORT: 3,
}
BEST_EFFORT_QUEUE = 3


class PolicyError(ValueError):
    """Raised when a policy document cannot be parsed."""


def group_for_class(isa_class: IsaClass) -> QoSGroup:
    isa_class = IsaClass(isa_class)
    if isa_class <= IsaClass.Class1:
        return QoSGroup.G1
    if isa_class <= IsaClass.Class3:
        return QoSGroup.G2
    return QoSGroup.G3


def dscp_for_class(isa_class: IsaClass, group3_dscp: DscpClass = DscpClass.AF21) -> DscpClass:
    """DSCP mark for a sensor class.

    Group 3 monitoring traffic may use CS4 or any of AF21-23; AF21 is the
    default and ``group3_dscp`` overrides it.
    """
    if isinstance(group3_dscp, str):
        group3_dscp = DscpClass[group3_dscp]
    if group3_dscp not in GROUP3_DSCP_CHOICES:
        raise ValueError(f"group 3 DSCP must be one of CS4/AF21/AF22/AF23, got {group3_dscp.name}")
    group = group_for_class(isa_class)
    if group is QoSGroup.G1:
        return DscpClass.EF
    if group is QoSGroup.G2:
        return DscpClass.CS4
    return group3_dscp


@dataclass(frozen=True)
class PolicyRule:
    selector: str
    group: QoSGroup
    dscp: DscpClass
    queue: int

    def to_json(self) -> dict:
        return {"selector": self.selector, "group": self.group.value,
                "dscp": self.dscp.name, "queue": self.queue}


@dataclass(frozen=True)
class QoSPolicy:
    version: int
    rules: tuple[PolicyRule, ...]
    _by_selector: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        index = {}
        for rule in self.rules:
            index.setdefault(rule.selector, rule)
        object.__setattr__(self, "_by_selector", index)

    def rule_for(self, selector: str) -> Optional[PolicyRule]:
        return self._by_selector.get(selector)

    def dscp_for(self, selector: Optional[str]) -> DscpClass:
        rule = self._by_selector.get(selector) if selector is not None else None
        return rule.dscp if rule is not None else DscpClass.BE

    def to_json(self) -> dict:
        return {"v": 1, "version": self.version, "rules": [r.to_json() for r in self.rules]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


def default_policy(version: int = 1, group3_dscp: DscpClass = DscpClass.AF21) -> QoSPolicy:
    """Table-driven default: classes 0-5, control flows and background."""
    rules = []
    for c in IsaClass:
        group = group_for_class(c)
        rules.append(PolicyRule(c.name, group, dscp_for_class(c, group3_dscp), QUEUE_FOR_GROUP[group]))
    rules.append(PolicyRule(CONTROL, QoSGroup.CONTROL, DscpClass.CS6, QUEUE_FOR_GROUP[QoSGroup.CONTROL]))
    rules.append(PolicyRule(BACKGROUND, QoSGroup.BEST_EFFORT, DscpClass.BE, BEST_EFFORT_QUEUE))
    return QoSPolicy(version, tuple(rules))


def policy_from_json(doc) -> QoSPolicy:
    """Build a policy from a parsed JSON document or a JSON string/bytes."""
    if isinstance(doc, (bytes, bytearray)):
        doc = doc.decode("utf-8")
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise PolicyError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyError("policy document must be a JSON object")
    if doc.get("v") != 1:
        raise PolicyError(f"unsupported policy schema version {doc.get('v')!r}")
    version = doc.get("version")
    if not isinstance(version, int) or isinstance(version, bool) or version < 0:
        raise PolicyError("version must be a non-negative integer")
    raw_rules = doc.get("rules")
    if not isinstance(raw_rules, list):
        raise PolicyError("rules must be a list")
    rules = []
    for i, raw in enumerate(raw_rules):
        if not isinstance(raw, dict):
            raise PolicyError(f"rule {i} is not an object")
        try:
            selector = raw["selector"]
            group = QoSGroup(raw["group"])
            dscp = DscpClass[raw["dscp"]]
            queue = raw["queue"]
        except (KeyError, ValueError) as exc:
            raise PolicyError(f"rule {i}: bad or missing field {exc}") from exc
        if not isinstance(selector, str) or not isinstance(queue, int) or isinstance(queue, bool):
            raise PolicyError(f"rule {i}: selector must be a string and queue an integer")
        rules.append(PolicyRule(selector, group, dscp, queue))
    return QoSPolicy(version, tuple(rules))


def validate(policy: QoSPolicy) -> list[str]:
    """Return every invariant violation in ``policy`` (empty list means ok)."""
    violations = []
    if policy.version < 0:
        violations.append("version must be non-negative")
    seen: dict[str, int] = {}
    for rule in policy.rules:
        seen[rule.selector] = seen.get(rule.selector, 0) + 1
    for selector, n in seen.items():
        if n > 1:
            violations.append(f"duplicate selector {selector} ({n} rules)")
        if selector not in ALL_SELECTORS:
            violations.append(f"unknown selector {selector}")
    for selector in ALL_SELECTORS:
        if selector not in seen:
            violations.append(f"missing rule for selector {selector}")

    for rule in policy.rules:
        if not 0 <= rule.queue <= 3:
            violations.append(f"{rule.selector}: queue {rule.queue} outside 0..3")
        elif rule.queue != QUEUE_FOR_GROUP[rule.group]:
            violations.append(f"{rule.selector}: group {rule.group.value} must use queue "
                              f"{QUEUE_FOR_GROUP[rule.group]}, not {rule.queue}")
        if rule.selector == CONTROL:
            if rule.dscp is not DscpClass.CS6:
                violations.append("CONTROL must map to CS6")
            if rule.group is not QoSGroup.CONTROL:
                violations.append("CONTROL must use the CONTROL group")
        elif rule.selector == BACKGROUND:
            if rule.dscp is not DscpClass.BE or rule.queue != BEST_EFFORT_QUEUE:
                violations.append("BACKGROUND must map to BE on queue 3")
        elif rule.selector in CLASS_SELECTORS:
            expected_group = group_for_class(IsaClass[rule.selector])
            if rule.group is not expected_group:
                violations.append(f"{rule.selector} belongs to {expected_group.value}, "
                                  f"not {rule.group.value}")
            if expected_group is QoSGroup.G1 and rule.dscp is not DscpClass.EF:
                violations.append(f"{rule.selector} (G1) must map to EF")
            elif expected_group is QoSGroup.G2 and rule.dscp is not DscpClass.CS4:
                violations.append(f"{rule.selector} (G2) must map to CS4")
            elif expected_group is QoSGroup.G3 and rule.dscp not in GROUP3_DSCP_CHOICES:
                violations.append(f"{rule.selector} (G3) must map to CS4 or AF21-23")
    return violations


def classify(packet, policy: Optional[QoSPolicy]) -> int:
    """Queue index for ``packet`` under ``policy``.

    A rule matches when its selector equals the packet's selector and its
    DSCP equals the packet's mark; packets without a selector match on DSCP
    alone. Anything unmatched goes to the best-effort queue.
    """
    if policy is None:
        return BEST_EFFORT_QUEUE
    if packet.selector is not None:
        rule = policy.rule_for(packet.selector)
        if rule is not None and rule.dscp is packet.dscp:
            return rule.queue
        return BEST_EFFORT_QUEUE
    for rule in policy.rules:
        if rule.dscp is packet.dscp:
            return rule.queue
    return BEST_EFFORT_QUEUE

