"""Command line entry point: ``sdiiot run|sweep|summarize|policy check|schedule dump``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness
from .harness import FLOW_CLASSES, MODES, ScenarioError, SweepError
from .qos import PolicyError, policy_from_json, validate
from .traffic import FlowKind


def _levels(text: str) -> list[int]:
    try:
        levels = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not levels or any(lv < 0 for lv in levels):
        raise argparse.ArgumentTypeError("levels must be a nonempty list of non-negative integers")
    return levels


def cmd_run(args) -> int:
    s = harness.load_scenario(args.scenario)
    if args.mode:
        s = s.with_mode(args.mode)
    print(f"mode={s.mode} level={s.background.n_flows} kind={s.background.kind.value} "
          f"duration={s.duration_s:g}s replications={s.replications}")
    print(f"{'rep':>3} {'flow_class':<11} {'mean_ms':>10} {'p95_ms':>10} {'p99_ms':>10} "
          f"{'sent':>8} {'deliv':>8} {'dropped':>8} {'success':>8}")
    for res in harness.run_scenario(s):
        for fc in FLOW_CLASSES:
            st = res.stats[fc]
            print(f"{res.replication:>3} {fc:<11} {st.mean / 1e3:>10.3f} {st.p95 / 1e3:>10.3f} "
                  f"{st.p99 / 1e3:>10.3f} {st.sent:>8} {st.delivered:>8} {st.dropped:>8} "
                  f"{st.success_rate:>8.4f}")
        ex = res.extras
        print(f"    events={ex['events']} coap_retx={ex['coap_retransmissions']} "
              f"tcp_retx={ex['tcp_retransmissions']} drops={ex['drops_by_reason']}")
    return 0


def cmd_sweep(args) -> int:
    s = harness.load_scenario(args.scenario)

    def progress(level, mode, results):
        print(f"  level {level:>3} {mode:<6} done", file=sys.stderr)

    rows = harness.sweep(s, args.levels, args.modes.split(","), progress=progress)
    text = harness.rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(rows) - 1} rows to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    if args.check:
        kind = "udp" if s.background.kind is FlowKind.UDP_LIKE else "tcp"
        report, checks = harness.summarize(text, kind)
        print(report)
        return 0 if all(c.passed for c in checks) else 1
    return 0


def cmd_summarize(args) -> int:
    text = Path(args.csv).read_text()
    report, checks = harness.summarize(text, args.kind)
    print(report)
    if args.check and not all(c.passed for c in checks):
        return 1
    return 0


def cmd_policy_check(args) -> int:
    try:
        policy = policy_from_json(Path(args.file).read_text())
    except PolicyError as exc:
        print(f"invalid: {exc}")
        return 1
    problems = validate(policy)
    for p in problems:
        print(p)
    if not problems:
        print(f"ok: version {policy.version}, {len(policy.rules)} rules")
    return 0 if not problems else 1


def cmd_schedule_dump(args) -> int:
    s = harness.load_scenario(args.scenario)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["device_id", "kind", "class", "group", "slot_index", "slot_offset_ms"])
        for frame in harness.schedules(s):
            for row in frame.rows():
                writer.writerow([row["device_id"], row["kind"], row["class"], row["group"],
                                 row["slot_index"], f"{row['slot_offset_ms']:g}"])
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdiiot", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario and print per-class stats")
    r.add_argument("scenario")
    r.add_argument("--mode", choices=MODES, help="override qos_enabled/baseline_wan")
    r.set_defaults(fn=cmd_run)

    sw = sub.add_parser("sweep", help="sweep background intensity across modes")
    sw.add_argument("scenario")
    sw.add_argument("--levels", type=_levels, default=list(harness.DEFAULT_LEVELS))
    sw.add_argument("--modes", default=",".join(MODES))
    sw.add_argument("--out")
    sw.add_argument("--check", action="store_true", help="evaluate the trend checks, exit 1 on failure")
    sw.set_defaults(fn=cmd_sweep)

    sm = sub.add_parser("summarize", help="report on a sweep CSV")
    sm.add_argument("csv")
    sm.add_argument("--kind", choices=("udp", "tcp"), default="udp")
    sm.add_argument("--check", action="store_true")
    sm.set_defaults(fn=cmd_summarize)

    pol = sub.add_parser("policy", help="policy utilities")
    pol_sub = pol.add_subparsers(dest="policy_command", required=True)
    pc = pol_sub.add_parser("check", help="validate a policy JSON file")
    pc.add_argument("file")
    pc.set_defaults(fn=cmd_policy_check)

    sch = sub.add_parser("schedule", help="TDMA schedule utilities")
    sch_sub = sch.add_subparsers(dest="schedule_command", required=True)
    sd = sch_sub.add_parser("dump", help="print the slot table as CSV")
    sd.add_argument("scenario")
    sd.add_argument("--out")
    sd.set_defaults(fn=cmd_schedule_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, SweepError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
