import csv
import io
import time
from pathlib import Path

import yaml

from voltreg.cli import main

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"
FAST = {"optimizer": {"pso": {"population": 15, "iterations": 20}}}


def scenario(tmp_path, name, load, pv, **extra):
    doc = {"network": "lotus63.net", "operating_point": {"load_scale": load, "pv_scale": pv}}
    doc.update(extra)
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_loadflow_no_load(tmp_path, capsys):
    assert main(["loadflow", scenario(tmp_path, "idle", 0.0, 0.0)]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert len(rows) == 63 * 3
    assert all(abs(float(r["v_pu"]) - 1.0) < 1e-9 for r in rows)


def test_loadflow_heavy_pv(tmp_path, capsys):
    assert main(["loadflow", str(SCENARIOS / "heavy_pv.yaml")]) == 0
    assert max(float(r["v_pu"]) for r in read_csv(capsys.readouterr().out)) > 1.05


def test_loadflow_volts_flag(tmp_path):
    assert main(["loadflow", scenario(tmp_path, "v", 0.0, 0.0), "--volts",
                 "--out-dir", str(tmp_path / "o")]) == 0
    rows = read_csv((tmp_path / "o" / "voltages.csv").read_text())
    assert abs(float(rows[0]["v_volts"]) - 415 / 3 ** 0.5) < 1e-6


def test_missing_network(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"network": "nowhere.net"}))
    assert main(["loadflow", str(path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_missing_scenario(capsys):
    assert main(["control", "/nonexistent/scenario.yaml"]) == 1
    assert capsys.readouterr().err


def test_control_night(tmp_path):
    out = tmp_path / "night"
    assert main(["control", str(SCENARIOS / "night.yaml"), "--out-dir", str(out)]) == 0
    after = read_csv((out / "voltages_after.csv").read_text())
    assert min(float(r["v_pu"]) for r in after) >= 0.95
    assert yaml.safe_load((out / "report.yaml").read_text())["label"] == "rpc_qinj"


def test_control_day(tmp_path):
    out = tmp_path / "day"
    assert main(["control", str(SCENARIOS / "day_1100.yaml"), "--out-dir", str(out)]) == 0
    after = read_csv((out / "voltages_after.csv").read_text())
    report = yaml.safe_load((out / "report.yaml").read_text())
    assert max(float(r["v_pu"]) for r in after) <= 1.05
    if report["label"] == "apc":
        assert report["curtailed_kw"] > 0


def test_control_feasible_writes_files(tmp_path):
    out = tmp_path / "ok"
    assert main(["control", scenario(tmp_path, "ok", 0.5, 0.3), "--out-dir", str(out)]) == 0
    assert yaml.safe_load((out / "report.yaml").read_text())["modes"] == []
    assert (out / "voltages_before.csv").exists() and (out / "voltages_after.csv").exists()


def test_control_residual_exit_code(tmp_path):
    # without inverters the night undervoltage cannot be corrected
    net = tmp_path / "bare.net"
    doc = yaml.safe_load((Path(__file__).resolve().parents[1] / "src" / "voltreg" / "data"
                          / "lotus63.net").read_text())
    doc["pv"] = []
    net.write_text(yaml.safe_dump(doc))
    path = tmp_path / "bare.yaml"
    path.write_text(yaml.safe_dump({"network": "bare.net",
                                    "operating_point": {"load_scale": 1.0, "pv_scale": 0.0}}))
    assert main(["control", str(path), "--out-dir", str(tmp_path / "o")]) == 3


def test_control_rerun_identical(tmp_path):
    path = scenario(tmp_path, "n", 1.0, 0.0, **FAST)
    for d in ("a", "b"):
        assert main(["--seed", "5", "control", path, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("report.yaml", "voltages_before.csv", "voltages_after.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bench_rejects_small_n(tmp_path):
    assert main(["bench", scenario(tmp_path, "b", 0.5, 0.93), "-n", "5"]) == 1


def test_bench_smoke(tmp_path, capsys):
    t0 = time.perf_counter()
    assert main(["bench", scenario(tmp_path, "b", 0.5, 0.93), "-n", "10"]) == 0
    assert time.perf_counter() - t0 < 5.0
    stats = yaml.safe_load(capsys.readouterr().out)
    assert set(stats) >= {"sensitivity", "loadflow"}
    assert set(stats["loadflow"]) == {"mean_ms", "std_ms", "min_ms", "max_ms", "n"}


def campaign(tmp_path, label, pv, load, n, seed=0):
    doc = {"label": label, "network": "lotus63.net", "pv_scale": pv, "load_scale": load,
           "n_runs": n, "seed": seed}
    doc.update(FAST)
    path = tmp_path / f"c{label.replace(':', '')}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_mc_single_run(tmp_path):
    out = tmp_path / "mc"
    assert main(["mc", campaign(tmp_path, "11:00", 0.93, 0.5, 1), "--out-dir", str(out)]) == 0
    assert len(read_csv((out / "runs.csv").read_text())) == 1
    for name in ("summary.yaml", "timing.yaml", "hist_min_qinj.csv", "hist_max_upper.csv"):
        assert (out / name).exists()


def test_mc_night_structure(tmp_path):
    out = tmp_path / "mc"
    assert main(["mc", campaign(tmp_path, "21:00", 0.0, 1.0, 8), "--out-dir", str(out),
                 "--seed", "7"]) == 0
    counts = yaml.safe_load((out / "summary.yaml").read_text())["counts"]
    assert counts["rpc_qabs"] == 0 and counts["apc"] == 0


def test_mc_rerun_identical(tmp_path):
    path = campaign(tmp_path, "10:00", 0.76, 0.3, 2)
    for d in ("a", "b"):
        assert main(["mc", path, "--out-dir", str(tmp_path / d)]) == 0
    for name in ("runs.csv", "summary.yaml"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_scenario(tmp_path, capsys):
    assert main(["compare", scenario(tmp_path, "n", 1.0, 0.0, **FAST)]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["label_sensitivity"] == doc["label_loadflow"] == "rpc_qinj"


def test_compare_campaign(tmp_path, capsys):
    assert main(["compare", campaign(tmp_path, "11:00", 0.93, 0.5, 3, seed=40)]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert set(doc["counts"]) == {"sensitivity", "loadflow"}
    if "apc" in doc["mean_shift"]:
        assert abs(doc["mean_shift"]["apc"]["shift"]) <= 1e-3


def test_sensmat_csv(tmp_path):
    assert main(["sensmat", scenario(tmp_path, "s", 0.5, 0.5), "--out-dir", str(tmp_path)]) == 0
    rows = list(csv.reader((tmp_path / "sensmat.csv").open()))
    assert rows[0][:3] == ["busbar", "phase", "dQ_1"] and len(rows) == 1 + 189


def test_fixture_command(tmp_path):
    out = tmp_path / "f.net"
    assert main(["fixture", "-o", str(out)]) == 0
    bundled = Path(__file__).resolve().parents[1] / "src" / "voltreg" / "data" / "lotus63.net"
    assert out.read_text() == bundled.read_text()


def test_unknown_command():
    assert main(["frobnicate"]) == 1
