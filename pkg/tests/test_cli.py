import json

from sdiiot.cli import main
from sdiiot.qos import default_policy

SCENARIO = {
    "v": 1, "sites": 1, "sensors_per_site": {"motor": 2, "pressure": 1, "temperature": 1},
    "background": {"kind": "UDP_LIKE", "n_flows": 0, "rate_bps": 12e6, "size_bytes": 1500},
    "qos_enabled": True, "baseline_wan": False, "coap": {"T_ms": 2, "C": 4, "F": 1.5},
    "duration_s": 0.2, "warmup_s": 0.05, "seed": 1, "replications": 1,
}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(p)


def test_policy_check(tmp_path, capsys):
    good = _write(tmp_path, "p.json", default_policy().dumps())
    assert main(["policy", "check", good]) == 0
    doc = default_policy().to_json()
    doc["rules"][6]["dscp"] = "EF"
    bad = _write(tmp_path, "bad.json", doc)
    assert main(["policy", "check", bad]) == 1
    assert "CONTROL must map to CS6" in capsys.readouterr().out
    assert main(["policy", "check", _write(tmp_path, "junk.json", "{")]) == 1


def test_schedule_dump(tmp_path, capsys):
    assert main(["schedule", "dump", _write(tmp_path, "s.json", SCENARIO)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "device_id,kind,class,group,slot_index,slot_offset_ms"
    assert lines[1] == "s1-M1,MOTOR,Class1,G1,0,0"
    assert lines[-1] == "s1-T1,TEMPERATURE,Class4,G3,3,30"


def test_run_and_sweep(tmp_path, capsys):
    path = _write(tmp_path, "s.json", SCENARIO)
    assert main(["run", path]) == 0
    assert "COAP_PV" in capsys.readouterr().out
    out = tmp_path / "r.csv"
    assert main(["sweep", path, "--levels", "0", "--out", str(out)]) == 0
    assert out.read_text().startswith("level,mode,flow_class,replication,mean_us")
    assert main(["summarize", str(out)]) == 0


def test_errors_exit_nonzero(tmp_path, capsys):
    empty = _write(tmp_path, "e.csv", "")
    assert main(["summarize", empty]) != 0
    bad = dict(SCENARIO, qos_enabled=True, baseline_wan=True)
    assert main(["run", _write(tmp_path, "b.json", bad)]) != 0
