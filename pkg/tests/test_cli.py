import csv
import json
import subprocess
import sys

from morlora.cli import run_command


def test_no_arguments_is_usage_error(capsys):
    assert run_command([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand():
    assert run_command(["frobnicate"]) == 2


def test_count_params_default(capsys):
    assert run_command(["count-params"]) == 0
    out = capsys.readouterr().out
    assert "11,599,872" in out and "23,205,888" in out


def test_count_params_custom_csv(capsys):
    assert run_command(["count-params", "--layers", "1", "--proj", "4:3", "--method", "lora",
                        "--r", "2", "--csv"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0][:2] == ["method", "params"] and rows[1][1] == str(2 * (4 + 3))


def test_count_params_bad_proj():
    assert run_command(["count-params", "--proj", "4x3"]) == 2


def test_verify_passes(capsys):
    assert run_command(["verify"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_svd_curve_csv(tmp_path, capsys):
    m = tmp_path / "m.csv"
    m.write_text("1,0,0\n0,1,0\n0,0,1\n")
    assert run_command(["svd-curve", "--matrix", str(m), "--plot", str(tmp_path / "c.png")]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert [float(r[1]) for r in rows[1:]] == [3.0, 2.0, 1.0, 0.0]
    assert (tmp_path / "c.png").stat().st_size > 0


def test_train_then_router_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"steps": 30, "eval_every": 10, "n_eval": 32, "d_in": 12, "d_out": 8,
                               "r": 4, "n_experts": 2, "lr": 1e-3}))
    run = tmp_path / "run"
    assert run_command(["train", "--config", str(cfg), "--out", str(run)]) == 0
    for name in ("config.json", "report.json", "loss_curve.csv", "eval_curve.csv", "checkpoint.mor",
                 "loss_curve.png", "eval_curve.png", "router_mass.png"):
        assert (run / name).stat().st_size > 0, name
    assert run_command(["router-report", "--run-dir", str(run), "--n-per-task", "16"]) == 0
    mass = json.loads((run / "router_report.json").read_text())["router_mass"]
    assert len(mass) == 4 and all(abs(sum(row) - 1) < 1e-12 for row in mass)
    assert (run / "router_report.png").stat().st_size > 0


def test_train_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"r": 0}')
    assert run_command(["train", "--config", str(cfg)]) == 1
    assert "r: 0" in capsys.readouterr().err


def test_router_report_needs_inputs():
    assert run_command(["router-report"]) == 2


def test_router_report_bad_checkpoint(tmp_path):
    (tmp_path / "checkpoint.mor").write_bytes(b"nope")
    (tmp_path / "config.json").write_text("{}")
    assert run_command(["router-report", "--run-dir", str(tmp_path), "--no-plots"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "morlora", "count-params", "--csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "11599872" in proc.stdout
