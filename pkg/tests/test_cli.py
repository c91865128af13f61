import hashlib
import json
import math

import numpy as np
import pytest
import yaml

from cavload import cli
from cavload.config import build_config, parse_quantity

BASE = {"dynamics": {"n_atoms": 20, "temperature": "30 uK"},
        "sequence": {"end_time": "10 ms"}}


def write_cfg(tmp_path, data, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("text,kind,value", [
    ("66 G/cm", "gradient", 0.66),
    ("7 ms", "time", 7e-3),
    ("30 uK", "temperature", 30e-6),
    ("30 µK", "temperature", 30e-6),
    ("127 um", "length", 127e-6),
    ("1 G", "field", 1e-4),
    ("2 mW", "power", 2e-3),
    ("-90 MHz", "angular_frequency", -2 * math.pi * 90e6),
    ("10 GHz", "frequency", 10e9),
    ("5e4 1/s", "rate", 5e4),
    (0.5, "time", 0.5),
])
def test_quantity_parsing(text, kind, value):
    assert parse_quantity(text, kind) == pytest.approx(value, rel=1e-14)


def test_quantity_errors():
    for bad, kind in (("5 parsecs", "length"), ("abc", "time"), (True, "time")):
        with pytest.raises(ValueError):
            parse_quantity(bad, kind)


def test_config_conversion_to_si():
    cfg = build_config({**BASE, "magnetics": {"gradient": "66 G/cm"},
                        "readout": {"delta_a": "-90 MHz"}})
    sim = cfg.to_sim()
    assert sim.magnets.gradient == pytest.approx(0.66)
    assert sim.detunings.delta_a == pytest.approx(-2 * math.pi * 90e6)
    assert sim.cloud.temperature == pytest.approx(30e-6)


def test_run_writes_trace_and_manifest(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE)
    code, _, err = run(["run", "--config", cfg, "--out-dir", str(tmp_path / "a"), "--seed", "4"],
                       capsys)
    assert code == 0, err
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 4
    # every defaulted value is echoed
    assert man["config"]["optics"]["finesse_over_pi"] == 1060.0
    assert man["config"]["sequence"]["probe_on_at"] == pytest.approx(7e-3)


def test_empty_cloud_all_ones(tmp_path, capsys):
    data = {**BASE, "dynamics": {"n_atoms": 0, "temperature": "30 uK"}}
    code, _, _ = run(["run", "--config", write_cfg(tmp_path, data), "--out-dir", str(tmp_path)],
                     capsys)
    assert code == 0
    rows = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)
    assert np.all(rows[:, 1] == 1.0)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_same_seed_byte_identical_and_manifest_rerun(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE)
    for d, threads in (("a", "1"), ("b", "3")):
        assert run(["run", "--config", cfg, "--out-dir", str(tmp_path / d), "--threads", threads],
                   capsys)[0] == 0
    assert digest(tmp_path / "a" / "trace.csv") == digest(tmp_path / "b" / "trace.csv")
    code, _, _ = run(["run", "--config", str(tmp_path / "a" / "manifest.json"),
                      "--out-dir", str(tmp_path / "c")], capsys)
    assert code == 0
    for f in ("trace.csv", "manifest.json", "summary.json"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "c" / f)


def test_override_applied(tmp_path, capsys):
    cfg = write_cfg(tmp_path, BASE)
    code, _, _ = run(["run", "--config", cfg, "--out-dir", str(tmp_path),
                      "--override", "sequence.end_time=8 ms"], capsys)
    assert code == 0
    rows = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)
    assert rows[-1, 0] == pytest.approx(8e-3)


def test_missing_required_field(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"dynamics": {"temperature": "30 uK"}})
    code, _, err = run(["run", "--config", cfg], capsys)
    assert code == 2
    assert json.loads(err)["field"] == "dynamics.n_atoms"


def test_unknown_and_invalid_fields(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**BASE, "magnetics": {"gradeint": 0.66}})
    code, _, err = run(["run", "--config", cfg], capsys)
    assert code == 2 and json.loads(err)["field"] == "magnetics.gradeint"
    cfg = write_cfg(tmp_path, {**BASE, "sequence": {"rampdown_duration": "3 ms",
                                                    "probe_on_at": "3 ms"}})
    assert run(["run", "--config", cfg], capsys)[0] == 2
    assert run(["run", "--config", str(tmp_path / "missing.yaml")], capsys)[0] == 2


def test_simulation_error_exit_3(tmp_path, capsys):
    data = {**BASE, "dynamics": {**BASE["dynamics"], "dt_fine": "1 us"}}
    code, _, err = run(["run", "--config", write_cfg(tmp_path, data)], capsys)
    assert code == 3
    assert json.loads(err)["type"] == "TimestepTooLargeError"


def test_fit_exact_exponential(tmp_path, capsys):
    t = np.linspace(0.04, 0.25, 6)
    p = tmp_path / "d.csv"
    p.write_text("t,n\n" + "".join(f"{float(a)!r},{5000 * math.exp(-a / 0.16)!r}\n" for a in t))
    code, out, _ = run(["fit", "--data", str(p), "--out-dir", str(tmp_path)], capsys)
    assert code == 0
    res = json.loads(out)
    assert res["parameters"]["tau"] == pytest.approx(0.16, rel=1e-6)
    assert res["converged"] is True
    assert (tmp_path / "fit.json").exists()


def test_fit_bad_inputs(tmp_path, capsys):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert run(["fit", "--data", str(empty)], capsys)[0] == 2
    bad = tmp_path / "b.csv"
    bad.write_text("t,n\n0.1,5\n0.2,oops\n")
    code, _, err = run(["fit", "--data", str(bad)], capsys)
    assert code == 2 and json.loads(err)["line"] == 3
    wide = tmp_path / "w.csv"
    wide.write_text("0.1,5,1,9\n")
    assert run(["fit", "--data", str(wide)], capsys)[0] == 2
    neg = tmp_path / "n.csv"
    neg.write_text("0.1,5\n0.2,-1\n")
    assert run(["fit", "--data", str(neg)], capsys)[0] == 3


def test_fit_linear_and_tof(tmp_path, capsys):
    p = tmp_path / "l.csv"
    p.write_text("".join(f"{x},{2 * x + 1}\n" for x in range(5)))
    code, out, _ = run(["fit", "--data", str(p), "--model", "linear"], capsys)
    assert code == 0 and json.loads(out)["extras"]["x_intercept"] == pytest.approx(-0.5)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((5000, 3)) * 0.05
    rows = [f"{t},{x},{y},{z}\n" for t in (0.0, 0.002, 0.004) for x, y, z in v * t]
    q = tmp_path / "tof.csv"
    q.write_text("".join(rows))
    code, out, _ = run(["fit", "--data", str(q), "--model", "tof"], capsys)
    assert code == 0 and len(json.loads(out)["temperature"]) == 3


def test_power_scan_single_row(tmp_path, capsys):
    data = {"dynamics": {"n_atoms": 30, "temperature": "30 uK", "injection": "dipole",
                         "gravity": False},
            "sequence": {"end_time": "60 ms", "fit_cutoff": "10 ms",
                         "scan": {"kind": "power", "powers": ["1 mW"], "runs": 1,
                                  "method": "direct"}}}
    code, _, err = run(["scan", "--config", write_cfg(tmp_path, data), "--out-dir",
                        str(tmp_path)], capsys)
    assert code == 0, err
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["rows"]) == 1
    assert summary["rows"][0]["tau"] > 0
