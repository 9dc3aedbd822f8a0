"""WebSocket and CoAP latency vs. TCP background intensity for qos / no_qos / wan.

    python3 scripts/fig4_tcp_sweep.py [--out results/tcp_sweep.csv] [--levels 0,5,10,20,30]
"""

import argparse
import sys
import time
from pathlib import Path

from sdiiot import harness

ROOT = Path(__file__).resolve().parent.parent


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "tcp_sweep.json"))
    ap.add_argument("--out", default=str(ROOT / "results" / "tcp_sweep.csv"))
    ap.add_argument("--levels", default="0,5,10,20,30")
    args = ap.parse_args()

    s = harness.load_scenario(args.scenario)
    levels = [int(x) for x in args.levels.split(",")]
    t0 = time.perf_counter()
    rows = harness.sweep(s, levels, progress=lambda lv, m, _: print(f"level {lv} {m}", file=sys.stderr))
    text = harness.rows_to_csv(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    report, checks = harness.summarize(text, "tcp")
    print(report)
    print(f"{len(rows) - 1} rows -> {out} in {time.perf_counter() - t0:.1f} s")
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
