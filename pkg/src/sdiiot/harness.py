"""Scenario configuration, experiment runs, metrics and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .coap import DEFAULT_PARAMS, ExchangeState, RetransmitParams
from .gateway import Gateway, SensorCloud, Outcome, connect_ws, establish_observations, start_distribution
from .messages import NetPacket
from .netsim import (GBPS, MBPS, ClassCounters, EventLoop, LinkSpec, Network, SiteSpec, Topology,
                     WanPath)
from .qos import BACKGROUND, DscpClass, GROUP3_DSCP_CHOICES, default_policy
from .tdma import (MOTOR_SPEC, PRESSURE_SPEC, SECOND, TEMPERATURE_SPEC, FieldDevice, FieldDeviceApp,
                   Superframe, build_superframe)
from .traffic import BackgroundFlowSet, FlowKind, UdpSink, tcp_background, udp_background

MS = 1000.0
MODES = ("qos", "no_qos", "wan")
FLOW_CLASSES = ("COAP_PV", "WS_READING", "CONTROL", "BACKGROUND")
CSV_HEADER = ("level", "mode", "flow_class", "replication", "mean_us", "p50_us", "p95_us", "p99_us",
              "sent", "delivered", "dropped", "success_rate")
DEFAULT_LEVELS = (0, 5, 10, 20, 30)

SENSOR_KINDS = {"motor": ("M", MOTOR_SPEC), "pressure": ("P", PRESSURE_SPEC),
                "temperature": ("T", TEMPERATURE_SPEC)}

# link parameters: (bandwidth bits/s, propagation us)
FIELD_LINK = (1 * GBPS, 100.0)
SWITCH_CORE_LINK = (1 * GBPS, 1000.0)
CORE_SC_PROP_US = 2000.0
SITE_UPLINK_PROP_US = 100.0


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class BackgroundConfig:
    kind: FlowKind = FlowKind.UDP_LIKE
    n_flows: int = 0
    rate_bps: float = 12 * MBPS
    size_bytes: int = 1500

    def flow_set(self) -> BackgroundFlowSet:
        return BackgroundFlowSet(self.kind, self.n_flows, self.size_bytes, self.rate_bps)


@dataclass(frozen=True)
class Scenario:
    sites: int = 4
    sensors_per_site: dict = field(default_factory=lambda: {"motor": 6, "pressure": 6, "temperature": 6})
    background: BackgroundConfig = BackgroundConfig()
    qos_enabled: bool = True
    baseline_wan: bool = False
    coap: RetransmitParams = DEFAULT_PARAMS
    duration_s: float = 60.0
    seed: int = 0
    replications: int = 5
    group3_dscp: str = "AF21"
    # beyond the core schema
    warmup_s: float = 0.5
    wan_base_ms: float = 40.0
    wan_spread_ms: float = 40.0
    uplink_bps: float = 100 * MBPS
    sc_link_bps: float = 100 * MBPS
    depth_limit: int = 256
    secure: bool = False

    @property
    def mode(self) -> str:
        if self.baseline_wan:
            return "wan"
        return "qos" if self.qos_enabled else "no_qos"

    def with_mode(self, mode: str) -> "Scenario":
        flags = {"qos": (True, False), "no_qos": (False, False), "wan": (False, True)}
        if mode not in flags:
            raise ScenarioError(f"unknown mode {mode!r}")
        qos, wan = flags[mode]
        return dataclasses.replace(self, qos_enabled=qos, baseline_wan=wan)

    def with_level(self, n_flows: int) -> "Scenario":
        return dataclasses.replace(self, background=dataclasses.replace(self.background, n_flows=n_flows))

    def problems(self) -> list[str]:
        out = []
        if self.sites < 1:
            out.append("sites must be >= 1")
        for kind, n in self.sensors_per_site.items():
            if kind not in SENSOR_KINDS:
                out.append(f"unknown sensor kind {kind!r}")
            elif not isinstance(n, int) or n < 0:
                out.append(f"sensor count for {kind} must be a non-negative integer")
        if self.qos_enabled and self.baseline_wan:
            out.append("baseline_wan implies qos_enabled = false")
        if self.duration_s < 0 or self.warmup_s < 0:
            out.append("duration and warmup must be >= 0")
        if self.replications < 1:
            out.append("replications must be >= 1")
        if self.group3_dscp not in {d.name for d in GROUP3_DSCP_CHOICES}:
            out.append(f"group3_dscp {self.group3_dscp!r} is not one of "
                       f"{sorted(d.name for d in GROUP3_DSCP_CHOICES)}")
        bg = self.background
        if bg.n_flows < 0:
            out.append("background n_flows must be >= 0")
        if bg.size_bytes <= 0:
            out.append("background size_bytes must be positive")
        if bg.kind is FlowKind.UDP_LIKE and bg.n_flows and bg.rate_bps <= 0:
            out.append("UDP background needs rate_bps > 0")
        if self.baseline_wan and self.wan_base_ms * MS <= SITE_UPLINK_PROP_US:
            out.append("WAN base delay must exceed the controlled-path propagation delay")
        if self.uplink_bps <= 0 or self.sc_link_bps <= 0:
            out.append("link bandwidths must be positive")
        if self.depth_limit < 1:
            out.append("depth_limit must be >= 1")
        return out

    def validate(self) -> "Scenario":
        problems = self.problems()
        if problems:
            raise ScenarioError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        return {
            "v": 1,
            "sites": self.sites,
            "sensors_per_site": dict(self.sensors_per_site),
            "background": {"kind": self.background.kind.value, "n_flows": self.background.n_flows,
                           "rate_bps": self.background.rate_bps, "size_bytes": self.background.size_bytes},
            "qos_enabled": self.qos_enabled,
            "baseline_wan": self.baseline_wan,
            "coap": {"T_ms": self.coap.ack_timeout_us / MS, "C": self.coap.max_retransmit,
                     "F": self.coap.random_factor},
            "duration_s": self.duration_s,
            "seed": self.seed,
            "replications": self.replications,
            "group3_dscp": self.group3_dscp,
            "warmup_s": self.warmup_s,
            "wan": {"base_ms": self.wan_base_ms, "spread_ms": self.wan_spread_ms},
            "uplink_bps": self.uplink_bps,
            "sc_link_bps": self.sc_link_bps,
            "depth_limit": self.depth_limit,
            "secure": self.secure,
        }


_REQUIRED_KEYS = ("v", "sites", "sensors_per_site", "background", "qos_enabled", "baseline_wan",
                  "coap", "duration_s", "seed", "replications")


def scenario_from_json(doc) -> Scenario:
    """Parse and validate a scenario document (dict, str or path-like JSON)."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except ValueError as exc:
            raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    missing = [k for k in _REQUIRED_KEYS if k not in doc]
    if missing:
        raise ScenarioError(f"scenario is missing keys {missing}")
    if doc["v"] != 1:
        raise ScenarioError(f"unsupported scenario version {doc['v']!r}")
    try:
        bg = doc["background"]
        background = BackgroundConfig(FlowKind(bg.get("kind", "UDP_LIKE")), int(bg.get("n_flows", 0)),
                                      float(bg.get("rate_bps", 12 * MBPS)), int(bg.get("size_bytes", 1500)))
        c = doc["coap"]
        coap = RetransmitParams.from_ms(float(c["T_ms"]), int(c["C"]), float(c["F"]))
        wan = doc.get("wan", {})
        s = Scenario(
            sites=int(doc["sites"]),
            sensors_per_site=dict(doc["sensors_per_site"]),
            background=background,
            qos_enabled=bool(doc["qos_enabled"]),
            baseline_wan=bool(doc["baseline_wan"]),
            coap=coap,
            duration_s=float(doc["duration_s"]),
            seed=int(doc["seed"]),
            replications=int(doc["replications"]),
            group3_dscp=str(doc.get("group3_dscp", "AF21")),
            warmup_s=float(doc.get("warmup_s", 0.5)),
            wan_base_ms=float(wan.get("base_ms", 40.0)),
            wan_spread_ms=float(wan.get("spread_ms", 40.0)),
            uplink_bps=float(doc.get("uplink_bps", 100 * MBPS)),
            sc_link_bps=float(doc.get("sc_link_bps", 100 * MBPS)),
            depth_limit=int(doc.get("depth_limit", 256)),
            secure=bool(doc.get("secure", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario field: {exc}") from exc
    return s.validate()


def load_scenario(path) -> Scenario:
    return scenario_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------

@dataclass
class FlowStats:
    flow_class: str
    samples: list[float] = field(default_factory=list)
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    def _pct(self, q: float) -> float:
        return float(np.percentile(self.samples, q)) if self.samples else 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples)) if self.samples else 0.0

    @property
    def p50(self) -> float:
        return self._pct(50)

    @property
    def p95(self) -> float:
        return self._pct(95)

    @property
    def p99(self) -> float:
        return self._pct(99)

    @property
    def success_rate(self) -> float:
        return self.delivered / self.sent if self.sent else 0.0


@dataclass
class ReplicationResult:
    replication: int
    seed: int
    stats: dict[str, FlowStats]
    counters: dict[str, ClassCounters]
    extras: dict = field(default_factory=dict)


def site_devices(s: Scenario, site: int) -> list[FieldDevice]:
    out = []
    seq = 1
    for kind, (prefix, spec) in SENSOR_KINDS.items():
        for j in range(s.sensors_per_site.get(kind, 0)):
            out.append(FieldDevice(f"s{site}-{prefix}{j + 1}", seq, spec))
            seq += 1
    return out


def schedules(s: Scenario) -> list[Superframe]:
    return [build_superframe(site_devices(s, i + 1)) for i in range(s.sites)
            if site_devices(s, i + 1)]


def build_topology(s: Scenario) -> Topology:
    """Sites hang off a core switch toward the sensor cloud.

    Inside a site, field devices and the background source attach to the site
    switch; the gateway sits between that switch and the core, so device
    traffic and background traffic share the switch's uplink port.
    """
    sites, links = [], []
    for i in range(1, s.sites + 1):
        sw, gw, bg = f"sw{i}", f"gw{i}", f"bg{i}"
        devices = [d.device_id for d in site_devices(s, i)]
        sites.append(SiteSpec(f"site{i}", gw, sw, devices, bg))
        for d in devices:
            links.append(LinkSpec(d, sw, *FIELD_LINK))
        links.append(LinkSpec(bg, sw, *FIELD_LINK))
        links.append(LinkSpec(sw, gw, s.uplink_bps, SITE_UPLINK_PROP_US))
        links.append(LinkSpec(gw, "core", *SWITCH_CORE_LINK))
    links.append(LinkSpec("core", "sc", s.sc_link_bps, CORE_SC_PROP_US))
    return Topology(sites, "core", "sc", links)


@dataclass
class World:
    scenario: Scenario
    loop: EventLoop
    net: Network
    topology: Topology
    gateways: list[Gateway]
    cloud: SensorCloud
    apps: list[FieldDeviceApp]
    policy: Optional[object]
    bg_latencies: list = field(default_factory=list)
    udp_flows: list = field(default_factory=list)
    tcp_flows: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)
    control_exchanges: list = field(default_factory=list)


def wan_params(s: Scenario) -> RetransmitParams:
    """CoAP timers for endpoints behind the WAN path.

    The ACK timeout is raised to cover the worst-case WAN round trip so that
    exchanges are not abandoned before their ACK can physically return.
    """
    rtt = 2 * (s.wan_base_ms + s.wan_spread_ms) * MS
    p = s.coap
    return RetransmitParams(max(p.ack_timeout_us, rtt), p.max_retransmit, p.random_factor)


def build_world(s: Scenario, seed: int, trace: bool = False, record_hops: bool = False) -> World:
    loop = EventLoop(seed)
    net = Network(loop, record_hops=record_hops, trace=trace, rng=random.Random(f"{seed}:net"))
    topo = build_topology(s)
    problems = topo.validate()
    if problems:
        raise ScenarioError("; ".join(problems))
    switches = set(topo.switches())
    names = [topo.sc_server]
    for site in topo.sites:
        names += site.devices + [site.background_host, site.gateway]
    for n in sorted(switches):
        net.switch(n)
    for n in names:
        net.host(n)
    wan_rng = random.Random(f"{seed}:wan")
    for link in topo.links:
        pa, pb = net.connect(link.a, link.b, link.bandwidth_bps, link.propagation_us, link.loss_rate,
                             depth_limit=s.depth_limit)
        if s.baseline_wan and {link.a, link.b} & {site.gateway for site in topo.sites} \
                and {link.a, link.b} & {site.switch for site in topo.sites}:
            for p in (pa, pb):
                p.path = WanPath(s.wan_base_ms * MS, s.wan_spread_ms * MS, wan_rng)
    net.build_routes()

    policy = default_policy(1, DscpClass[s.group3_dscp]) if s.qos_enabled else None
    if policy is not None:
        for n in switches:
            net.nodes[n].policy = policy

    edge_params = wan_params(s) if s.baseline_wan else s.coap
    cloud = SensorCloud(net.nodes[topo.sc_server], s.coap, seed)
    gateways, apps = [], []
    for i, site in enumerate(topo.sites, start=1):
        gw = Gateway(net.nodes[site.gateway], site.name, edge_params, seed, s.secure)
        gw.on_policy_installed.append(lambda p, node=gw.node: setattr(node, "policy", p))
        gateways.append(gw)
        devices = site_devices(s, i)
        if devices:
            build_superframe(devices)
        for dev in devices:
            dev.seed = seed
            app = FieldDeviceApp(net.nodes[dev.device_id], dev, lambda gw=gw: gw.installed_policy,
                                 edge_params, seed, s.secure)
            apps.append(app)
            gw.add_device(dev.device_id, dev.device_id, app.selector, dev.spec.update_interval)
    return World(s, loop, net, topo, gateways, cloud, apps, policy)


def _in_window(t: float, start: float, end: float) -> bool:
    return start <= t < end


def run_replication(s: Scenario, replication: int = 0, trace: bool = False) -> ReplicationResult:
    s.validate()
    seed = s.seed + replication
    w = build_world(s, seed, trace=trace)
    loop, net = w.loop, w.net
    if s.duration_s == 0:
        # nothing is simulated, not even policy set-up
        return ReplicationResult(replication, seed, {fc: FlowStats(fc) for fc in FLOW_CLASSES}, {},
                                 {"events": 0})

    if w.policy is not None:
        outcomes, exchanges = start_distribution(w.cloud, w.gateways, w.policy)
        loop.run(stop=lambda: all(ex.done for ex in exchanges))
        w.outcomes = outcomes
        w.control_exchanges += exchanges
    for gw in w.gateways:
        connect_ws(gw, w.cloud)
        establish_observations(gw, list(gw.devices))

    t0 = loop.now
    duration = s.duration_s * SECOND
    warmup = s.warmup_s * SECOND
    start, end = t0 + warmup, t0 + warmup + duration

    def bg_record(pkt: NetPacket):
        if pkt.flow_class == BACKGROUND and _in_window(pkt.created_at, start, end):
            w.bg_latencies.append(pkt.delivered_at - pkt.created_at)

    sc_node = net.nodes[w.topology.sc_server]
    rng = random.Random(f"{seed}:background")
    flows = s.background.flow_set()
    for gw in w.gateways:
        gw.start(end)
    for app in w.apps:
        app.start(end)
    if flows.n_flows:
        for site in w.topology.sites:
            src = net.nodes[site.background_host]
            if flows.kind is FlowKind.UDP_LIKE:
                w.udp_flows += udp_background(flows, src, sc_node.name, t0, end, rng,
                                              prefix=f"udp:{site.name}:")
            else:
                w.tcp_flows += tcp_background(flows, src, sc_node, t0, end, rng,
                                              prefix=f"tcp:{site.name}:",
                                              on_deliver=lambda data, pkt: bg_record(pkt))
    UdpSink(sc_node, bg_record)
    loop.run()  # drains: every source stops at ``end``

    stats = collect_stats(w, start, end)
    extras = {
        "events": loop.events_run,
        "tcp_retransmissions": sum(f.sender.counters["retransmissions"] for f in w.tcp_flows),
        "tcp_segments": sum(f.sender.counters["segments"] for f in w.tcp_flows),
        "coap_retransmissions": sum(a.endpoint.counters["retransmissions"] for a in w.apps),
        "reregistrations": sum(gw.counters["reregistrations"] for gw in w.gateways),
        "policy_outcomes": {k: v.status.value for k, v in w.outcomes.items()},
        "drops_by_reason": dict(sorted(net.drops_by_reason.items())),
    }
    result = ReplicationResult(replication, seed, stats, dict(net.counters), extras)
    if trace:
        result.extras["network"] = net
    return result


def collect_stats(w: World, start: float, end: float) -> dict[str, FlowStats]:
    net = w.net
    drops = {k: c.dropped for k, c in net.counters.items()}
    by_site = {gw.name: gw for gw in w.gateways}

    coap = FlowStats("COAP_PV", dropped=drops.get("COAP_PV", 0))
    for gw in w.gateways:
        for r in gw.readings:
            if _in_window(r.pv.generated_at, start, end):
                coap.samples.append(r.gw_arrival - r.pv.generated_at)
    delivered_keys = set()
    for gw in by_site.values():
        delivered_keys.update(gw._seen)
    for app in w.apps:
        for key in app.published:
            if _in_window(key[1], start, end):
                coap.sent += 1
                coap.delivered += key in delivered_keys

    ws = FlowStats("WS_READING",
                   dropped=drops.get("WS_READING", 0) + sum(gw.adapter_drops for gw in w.gateways))
    for gw in w.gateways:
        for r in gw.readings:
            if not _in_window(r.pv.generated_at, start, end):
                continue
            ws.sent += 1
            t = w.cloud.arrivals.get((r.pv.device_id, r.pv.generated_at))
            if t is not None:
                r.sc_arrival = t
                ws.delivered += 1
                ws.samples.append(t - r.gw_arrival)

    control = FlowStats("CONTROL", dropped=drops.get("CONTROL", 0))
    exchanges = list(w.control_exchanges)
    for gw in w.gateways:
        exchanges += gw.command_exchanges
    for ex in exchanges:
        control.sent += 1
        if ex.state is ExchangeState.ACKED:
            control.delivered += 1
            control.samples.append(ex.resolved_at - ex.started_at)

    bg_counts = net.counters.get(BACKGROUND, ClassCounters())
    background = FlowStats(BACKGROUND, list(w.bg_latencies), bg_counts.injected,
                           bg_counts.delivered, bg_counts.dropped)
    return {"COAP_PV": coap, "WS_READING": ws, "CONTROL": control, BACKGROUND: background}


def run_scenario(s: Scenario) -> list[ReplicationResult]:
    """Run every replication of ``s``; replication ``i`` uses seed ``s.seed + i``."""
    s.validate()
    return [run_replication(s, r) for r in range(s.replications)]


# ---------------------------------------------------------------------------

class SweepError(RuntimeError):
    pass


def _fmt_row(level: int, mode: str, rep: int, st: FlowStats) -> list[str]:
    return [str(level), mode, st.flow_class, str(rep), f"{st.mean:.3f}", f"{st.p50:.3f}",
            f"{st.p95:.3f}", f"{st.p99:.3f}", str(st.sent), str(st.delivered), str(st.dropped),
            f"{st.success_rate:.6f}"]


def sweep(base: Scenario, levels: Iterable[int] = DEFAULT_LEVELS, modes: Iterable[str] = MODES,
          progress=None) -> list[list[str]]:
    """Rows for every (level, mode, flow class, replication), header first."""
    levels = list(levels)
    if not levels:
        raise SweepError("levels must be nonempty")
    rows = [list(CSV_HEADER)]
    for level in levels:
        for mode in modes:
            s = base.with_level(level).with_mode(mode)
            try:
                results = run_scenario(s)
            except Exception as exc:
                raise SweepError(f"level {level}, mode {mode}: {exc}") from exc
            for res in results:
                for fc in FLOW_CLASSES:
                    rows.append(_fmt_row(level, mode, res.replication, res.stats[fc]))
            if progress is not None:
                progress(level, mode, results)
    return rows


def rows_to_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def write_csv(rows: list[list[str]], path) -> None:
    Path(path).write_text(rows_to_csv(rows))


# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def read_results(text: str) -> dict:
    """Parse sweep CSV text into {(level, mode, flow_class): [row dicts]}."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty results CSV") from None
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    table: dict = {}
    n = 0
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(CSV_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            rec = {"level": int(row[0]), "mode": row[1], "flow_class": row[2], "replication": int(row[3]),
                   "mean_us": float(row[4]), "p50_us": float(row[5]), "p95_us": float(row[6]),
                   "p99_us": float(row[7]), "sent": int(row[8]), "delivered": int(row[9]),
                   "dropped": int(row[10]), "success_rate": float(row[11])}
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        table.setdefault((rec["level"], rec["mode"], rec["flow_class"]), []).append(rec)
        n += 1
    if not n:
        raise ValueError("results CSV has no data rows")
    return table


def _mean(table, level, mode, fc, key="mean_us") -> Optional[float]:
    recs = table.get((level, mode, fc))
    if not recs:
        return None
    return sum(r[key] for r in recs) / len(recs)


def _levels(table) -> list[int]:
    return sorted({k[0] for k in table})


def reduction(no_qos: float, qos: float) -> float:
    return (no_qos - qos) / no_qos if no_qos > 0 else 0.0


def udp_checks(table) -> list[Check]:
    levels = _levels(table)
    out = []
    worst = min((r["success_rate"] for lv in levels for r in table.get((lv, "qos", "COAP_PV"), [])),
                default=None)
    out.append(Check("qos COAP_PV success = 1.0 at every level", worst == 1.0, f"min success {worst}"))
    bg = {lv: min(r["dropped"] for r in table.get((lv, "qos", BACKGROUND), [{"dropped": 0}]))
          for lv in levels if lv >= 20}
    out.append(Check("qos BACKGROUND dropped > 0 at levels >= 20", bool(bg) and all(v > 0 for v in bg.values()),
                     f"min drops per level {bg}"))
    red = {lv: reduction(_mean(table, lv, "no_qos", "COAP_PV"), _mean(table, lv, "qos", "COAP_PV"))
           for lv in levels if lv >= 10}
    out.append(Check("COAP_PV reduction >= 20% at levels >= 10", bool(red) and all(v >= 0.20 for v in red.values()),
                     " ".join(f"{lv}:{v:.1%}" for lv, v in red.items())))
    curve = [_mean(table, lv, "no_qos", "COAP_PV") for lv in levels]
    mono = all(b >= a for a, b in zip(curve, curve[1:]))
    out.append(Check("no_qos COAP_PV mean nondecreasing in level", mono,
                     " ".join(f"{v:.0f}" for v in curve)))
    if 10 in levels and 30 in levels:
        q10, q30 = _mean(table, 10, "qos", "COAP_PV"), _mean(table, 30, "qos", "COAP_PV")
        out.append(Check("qos COAP_PV mean at 30 <= 1.15 x level 10", q30 <= 1.15 * q10,
                         f"{q30:.1f} vs {q10:.1f} us ({q30 / q10:.3f}x)"))
    out += wan_checks(table, "COAP_PV")
    return out


def tcp_checks(table) -> list[Check]:
    levels = _levels(table)
    out = []
    ws = {m: {lv: _mean(table, lv, m, "WS_READING") for lv in levels} for m in ("qos", "no_qos")}
    if 0 in levels and 20 in levels:
        a, b = ws["qos"][0], ws["qos"][20]
        out.append(Check("qos WS_READING mean at 20 within 10% of level 0", abs(b - a) <= 0.10 * a,
                         f"{b:.1f} vs {a:.1f} us"))
    if 10 in levels and 30 in levels:
        a, b = ws["no_qos"][10], ws["no_qos"][30]
        out.append(Check("no_qos WS_READING mean at 30 >= 1.5 x level 10", b >= 1.5 * a,
                         f"{b:.1f} vs {a:.1f} us ({b / a:.2f}x)"))
    coap = {lv: _mean(table, lv, "no_qos", "COAP_PV") for lv in levels}
    out.append(Check("no_qos WS_READING > COAP_PV at every level",
                     all(ws["no_qos"][lv] > coap[lv] for lv in levels),
                     " ".join(f"{lv}:{ws['no_qos'][lv]:.0f}/{coap[lv]:.0f}" for lv in levels)))
    red = {lv: reduction(ws["no_qos"][lv], ws["qos"][lv]) for lv in levels if lv >= 10}
    out.append(Check("WS_READING reduction >= 15% at levels >= 10",
                     bool(red) and all(v >= 0.15 for v in red.values()),
                     " ".join(f"{lv}:{v:.1%}" for lv, v in red.items())))
    out += wan_checks(table, "COAP_PV")
    return out


def wan_checks(table, fc: str) -> list[Check]:
    levels = _levels(table)
    bad = []
    for lv in levels:
        q, n, w = (_mean(table, lv, m, fc) for m in MODES)
        if None in (w, q, n) or not (w > q and w > n):
            bad.append(lv)
    return [Check(f"wan {fc} mean > qos and no_qos at every level", not bad,
                  f"failing levels {bad}" if bad else "ok")]


def summarize(text: str, kind: str = "udp") -> tuple[str, list[Check]]:
    """Render a per-mode report of a sweep CSV and evaluate the trend checks."""
    table = read_results(text)
    levels = _levels(table)
    lines = []
    for fc in FLOW_CLASSES:
        lines.append(f"{fc} mean latency (ms) / success")
        lines.append("  level " + "".join(f"{m:>22}" for m in MODES))
        for lv in levels:
            cells = []
            for m in MODES:
                mean, succ = _mean(table, lv, m, fc), _mean(table, lv, m, fc, "success_rate")
                cells.append(f"{'-':>22}" if mean is None else f"{mean / MS:>12.3f} / {succ:7.4f}")
            lines.append(f"  {lv:>5} " + "".join(cells))
        reds = [(lv, _mean(table, lv, "no_qos", fc), _mean(table, lv, "qos", fc)) for lv in levels]
        if all(n is not None and q is not None for _, n, q in reds):
            lines.append("  reduction " + " ".join(f"{lv}:{reduction(n, q):.1%}" for lv, n, q in reds))
    checks = udp_checks(table) if kind == "udp" else tcp_checks(table)
    for c in checks:
        lines.append(f"{'PASS' if c.passed else 'FAIL'}  {c.name}  [{c.detail}]")
    return "\n".join(lines), checks
