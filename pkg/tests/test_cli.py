import json
import subprocess
import sys

import pytest

from ncfet_cpa import aes
from ncfet_cpa.cli import main

SMALL = {
    "preset": "desk", "key_count": 1, "text_count": 200, "step_count": 5,
    "sets_per_step": 4, "trial_count": 1, "set_stride": 20, "profiles": ["finfet", "tfe4"],
}


def write_config(tmp_path, **changes):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **changes}))
    return path


def test_series_cap(capsys):
    assert main(["device", "series-cap", "--c-ferro", "-2e-15", "--c-int", "1e-15"]) == 0
    assert capsys.readouterr().out.strip() == "C_NCFET = 2e-15 F"


def test_gain(capsys):
    assert main(["device", "gain", "--c-ferro", "-4e-15", "--c-int", "1e-15"]) == 0
    assert capsys.readouterr().out.strip() == "A_V = 1.33333333333"


def test_hysteresis_exit_code(capsys):
    assert main(["device", "series-cap", "--c-ferro", "-1e-15", "--c-int", "1e-15"]) == 2
    assert "hysteresis" in capsys.readouterr().err


def test_avg_gain(tmp_path, capsys):
    (tmp_path / "linear2x.csv").write_text("v_gate,v_internal\n0,0\n0.35,0.7\n0.7,1.4\n")
    assert main(["device", "avg-gain", "--curve", str(tmp_path / "linear2x.csv")]) == 0
    assert capsys.readouterr().out.strip() == "A_avg = 2.0"


def test_missing_curve_exit_code(tmp_path):
    assert main(["device", "avg-gain", "--curve", str(tmp_path / "nope.csv")]) == 3


def test_profiles_listing(capsys):
    assert main(["profiles"]) == 0
    out = capsys.readouterr().out
    assert "finfet,2.1900e-06,2.0400e-06" in out and "tfe4" in out


def test_simulate_then_attack_recovers_manifest_key(tmp_path, capsys):
    cfg = write_config(tmp_path, text_count=2000, profiles=["finfet-sym"], noise={"gaussian_sigma": 0.0})
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(cfg), "--out-dir", str(out)]) == 0
    trace_file = out / "traces" / "finfet-sym" / "key00.csv"
    assert main(["attack", "--traces", str(trace_file), "--indices", "all", "--out-dir", str(out)]) == 0
    assert "matches manifest key: yes" in capsys.readouterr().out
    result = json.loads((out / "cpa_result.json").read_text())
    manifest = json.loads((out / "manifest.json").read_text())
    entry = manifest["traces"]["traces/finfet-sym/key00.csv"]
    assert result["master_key"] == entry["key"]
    assert result["round10_key"] == aes.expand_key(bytes.fromhex(entry["key"]))[10].tobytes().hex()
    assert result["success"] is True


def test_attack_malformed_indices(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    main(["simulate", "--config", str(cfg), "--out-dir", str(out)])
    trace_file = out / "traces" / "finfet" / "key00.csv"
    assert main(["attack", "--traces", str(trace_file), "--indices", "1,x", "--out-dir", str(out)]) == 4
    assert main(["attack", "--traces", str(tmp_path / "none.csv"), "--out-dir", str(out)]) == 3


def run_experiment_cli(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["experiment", "--config", str(write_config(tmp_path)), "--out-dir", str(out), *extra]) == 0
    return out


def test_experiment_writes_curves_table_and_figures(tmp_path):
    out = run_experiment_cli(tmp_path, "run")
    for rel in ("curves/finfet.csv", "curves/tfe4.csv", "traces_to_success.csv", "success_counts.npy",
                "figures/success_curves.png", "figures/traces_to_success.png", "batches/batch_trial0.bin"):
        assert (out / rel).exists(), rel
    lines = (out / "curves" / "finfet.csv").read_text().splitlines()
    assert lines[0] == "step,set_size,success_rate" and len(lines) == 6
    header = (out / "traces_to_success.csv").read_text().splitlines()[0]
    assert header == "profile,threshold,trial,avg_traces,std_traces,keys_reached,not_reached"


def test_experiment_rerun_is_byte_identical(tmp_path):
    a = run_experiment_cli(tmp_path, "a")
    b = run_experiment_cli(tmp_path, "b")
    files = json.loads((a / "manifest.json").read_text())["files"]
    assert files == json.loads((b / "manifest.json").read_text())["files"]
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_experiment_reuses_batch_files(tmp_path):
    a = run_experiment_cli(tmp_path, "a")
    b = run_experiment_cli(tmp_path, "b", "--batches-dir", str(a / "batches"), "--no-plots")
    assert (a / "traces_to_success.csv").read_bytes() == (b / "traces_to_success.csv").read_bytes()
    assert main(["experiment", "--config", str(write_config(tmp_path)), "--out-dir", str(tmp_path / "c"),
                 "--batches-dir", str(tmp_path / "missing")]) == 3


def test_foreign_batch_file_is_rejected(tmp_path):
    a = run_experiment_cli(tmp_path, "a")
    assert main(["experiment", "--config", str(write_config(tmp_path)), "--seed", "7",
                 "--out-dir", str(tmp_path / "b"), "--batches-dir", str(a / "batches")]) == 5


def test_verify_detects_corruption(tmp_path, capsys):
    out = run_experiment_cli(tmp_path, "run", "--no-plots")
    assert main(["verify", "--out-dir", str(out)]) == 0
    path = out / "curves" / "tfe4.csv"
    path.write_text(path.read_text().replace("0.", "1.", 1))
    assert main(["verify", "--out-dir", str(out)]) == 5
    assert "curves/tfe4.csv" in capsys.readouterr().out


def test_report_redraws_figures(tmp_path):
    out = run_experiment_cli(tmp_path, "run", "--no-plots")
    assert main(["report", "--out-dir", str(out)]) == 0
    assert (out / "figures" / "success_curves.png").stat().st_size > 0


def test_unknown_config_field(tmp_path):
    cfg = write_config(tmp_path, colour="blue")
    assert main(["experiment", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 4


def test_unknown_profile(tmp_path):
    assert main(["simulate", "--config", str(write_config(tmp_path)), "--profiles", "tfe9",
                 "--out-dir", str(tmp_path / "o")]) == 4


def test_unachievable_calibration(tmp_path):
    code = main(["calibrate", "--config", str(write_config(tmp_path)), "--profile", "finfet",
                 "--target", "5000", "--threshold", "0.9", "--out-dir", str(tmp_path / "o")])
    assert code == 6


@pytest.mark.parametrize("argv", [["--help"], ["device", "--help"]])
def test_entry_point(argv):
    proc = subprocess.run([sys.executable, "-m", "ncfet_cpa.cli", *argv], capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout
