import json
from pathlib import Path

import pytest

from statepim.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_simulate_passes_and_writes_outputs(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(CONFIGS / "simulate_state_update.yaml"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["verdict"] == "PASS" and report["hazards"] == 0 and report["golden_mismatches"] == 0
    assert report["cycles_overlap"] <= report["cycles_serial"]
    assert "generated" in report
    assert (out / "trace.csv").exists() and (out / "commands" / "pc000.txt").exists()
    assert "verdict=PASS" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["attn_score", "attn_attend"])
def test_simulate_attention_modes(tmp_path, mode):
    cfg = write(tmp_path, f"workload: {{mode: {mode}, dim_head: 40, n_columns: 20, n_units: 3}}\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--overlap", "off"]) == 0
    assert json.loads((tmp_path / "o" / "report.json").read_text())["overlap"] is False


def test_timing_violation_exit_code(tmp_path, capsys):
    rc = main(["simulate", "--config", str(CONFIGS / "simulate_violation.yaml"), "--out", str(tmp_path)])
    assert rc == 3
    err = capsys.readouterr().err.strip()
    assert "tCCD_L" in err and len(err.splitlines()) == 1


@pytest.mark.parametrize("what", ["tFAW", "tWR"])
def test_other_injected_violations(tmp_path, what):
    # 12 units put six banks of each pseudo-channel in one round: two ACT4s
    cfg = write(tmp_path, f"workload: {{dim_head: 32, n_columns: 16, n_units: 12}}\ninject_violation: {what}\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_golden_mismatch_exit_code(tmp_path):
    cfg = write(tmp_path, "workload: {dim_head: 32, n_columns: 16, n_units: 2}\ninject_fault: true\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert json.loads((tmp_path / "o" / "report.json").read_text())["verdict"] == "FAIL"


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["drift", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["drift", "--config", str(write(tmp_path, "experiment: {steps: 0}\n"))]) == 2
    assert main(["drift", "--config", str(write(tmp_path, "experimnt: {}\n"))]) == 2
    assert main(["sweep", "--config", str(write(tmp_path, "grid: {model: [retnet-2.7b], colour: [red]}\n"))]) == 2
    assert main(["simulate", "--config", str(write(tmp_path, ": : :\n"))]) == 2
    for line in capsys.readouterr().err.strip().splitlines():
        assert line.startswith("error: ")
    with pytest.raises(SystemExit) as e:
        main(["drift"])
    assert e.value.code == 2


def test_drift_outputs(tmp_path):
    cfg = write(tmp_path, "experiment: {steps: 32}\nformats: [mx8, e4m3]\nroundings: all\n")
    assert main(["drift", "--config", str(cfg), "--out", str(tmp_path / "o"), "--no-timestamp"]) == 0
    names = set(snapshot(tmp_path / "o"))
    assert names == {"drift_mx8.csv", "drift_e4m3.csv", "pareto.csv", "summary.json"}
    lines = (tmp_path / "o" / "drift_mx8.csv").read_text().splitlines()
    assert lines[0] == "step,format,rounding,frobenius_error,output_error"
    assert len(lines) == 1 + 2 * 32


def test_sweep_outputs_and_system_filter(tmp_path):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(CONFIGS / "sweep_batch.yaml"), "--out", str(out), "--system", "pimba", "--no-timestamp"]) == 0
    rows = json.loads((out / "results.json").read_text())["rows"]
    assert rows and {r["system"] for r in rows} == {"pimba"}
    assert (out / "breakdown.csv").read_text().startswith("model,system")


def test_dry_run_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["sweep", "--config", str(CONFIGS / "sweep_batch.yaml"), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()
    assert "would write" in capsys.readouterr().out


@pytest.mark.parametrize("sub,config", [
    ("drift", "drift_minimal.yaml"), ("simulate", "simulate_state_update.yaml"), ("sweep", "sweep_batch.yaml")])
def test_no_timestamp_runs_are_byte_identical(tmp_path, sub, config):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main([sub, "--config", str(CONFIGS / config), "--out", str(out), "--no-timestamp", "--seed", "5"]) == 0
    assert snapshot(a) == snapshot(b)
