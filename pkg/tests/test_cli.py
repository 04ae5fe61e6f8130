import json
import math
import subprocess
import sys

from bhp_lab import cli
from bhp_lab.reporting import CSV_HEADER, dumps17, fmt17


def write_cfg(tmp_path, name="cfg.json", **overrides):
    cfg = {
        "model": {"kind": "interval", "beta": 1.0},
        "experiment": {"name": "spine-decomposition", "x": math.pi / 2,
                       "T": 0.5, "replicas": 150},
        "seed": 13,
        "output": str(tmp_path / "out"),
        "workers": 1,
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_empty_config_names_missing_model(tmp_path, capsys):
    path = tmp_path / "empty.json"
    path.write_text("{}")
    rc = cli.main(["verify", "martingale", "--config", str(path)])
    assert rc == 1
    assert "model" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    path = write_cfg(tmp_path)
    cfg = json.loads(path.read_text())
    cfg["bogus"] = 1
    path.write_text(json.dumps(cfg))
    rc = cli.main(["verify", "martingale", "--config", str(path)])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_unknown_experiment(tmp_path, capsys):
    path = write_cfg(tmp_path)
    rc = cli.main(["verify", "nonsense", "--config", str(path)])
    assert rc == 1
    assert "unknown experiment" in capsys.readouterr().err


def test_spectral_subcommand_interval(tmp_path, capsys):
    path = write_cfg(tmp_path, spectral={"grid_n": 1200})
    rc = cli.main(["spectral", "--config", str(path)])
    assert rc == 0
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    rows = {r["statistic"]: r for r in doc["rows"]}
    assert abs(rows["lambda1_grid"]["estimate"] + 0.5) <= 2e-3
    assert rows["lambda1_grid"]["verdict"] == "pass"
    assert (tmp_path / "out" / "results.csv").read_text().splitlines()[0] == \
        ",".join(CSV_HEADER)


def test_verify_exit_zero_and_outputs(tmp_path):
    path = write_cfg(tmp_path)
    rc = cli.main(["verify", "spine-decomposition", "--config", str(path)])
    assert rc == 0
    out = tmp_path / "out"
    assert (out / "report.json").exists()
    assert (out / "results.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 13
    assert "wall_clock_seconds" in manifest and "versions" in manifest


def test_verify_hypothesis_not_met_exit_zero(tmp_path, capsys):
    path = write_cfg(tmp_path, model={"kind": "ou", "c": 2.0, "b": 1.5, "a": 0.1},
                     experiment={"name": "slln", "x": 0.0, "sigma": 0.5,
                                 "n_max": 4, "paths": 10})
    rc = cli.main(["verify", "slln", "--config", str(path)])
    assert rc == 0
    assert "hypothesis not met" in capsys.readouterr().out


def test_simulate_byte_identical(tmp_path):
    path = write_cfg(tmp_path, experiment={"x": 1.2, "T": 0.8, "replicas": 5})
    rc = cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "a")])
    assert rc == 0
    rc = cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "b")])
    assert rc == 0
    rec_a = (tmp_path / "a" / "forest.records").read_bytes()
    rec_b = (tmp_path / "b" / "forest.records").read_bytes()
    assert rec_a == rec_b
    assert rec_a.startswith(b"# replica 0")


def test_spine_records_contain_ledger_and_flag(tmp_path):
    path = write_cfg(tmp_path, experiment={"x": 1.2, "T": 0.6, "replicas": 2})
    rc = cli.main(["spine", "--config", str(path), "--out", str(tmp_path / "sp")])
    assert rc == 0
    text = (tmp_path / "sp" / "spine.records").read_text()
    assert "ledger " in text
    assert any(line.endswith(" 1") for line in text.splitlines()
               if line and not line.startswith("#"))


def test_seed_override_changes_outputs(tmp_path):
    path = write_cfg(tmp_path, experiment={"x": 1.2, "T": 0.8, "replicas": 3})
    cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "s1")])
    cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "s2"),
              "--seed", "999"])
    assert (tmp_path / "s1" / "forest.records").read_bytes() != \
        (tmp_path / "s2" / "forest.records").read_bytes()


def test_manifest_rerun_reproduces_reports(tmp_path):
    path = write_cfg(tmp_path)
    assert cli.main(["verify", "spine-decomposition", "--config", str(path)]) == 0
    out = tmp_path / "out"
    rerun = tmp_path / "rerun"
    rc = cli.main(["verify", "spine-decomposition",
                   "--config", str(out / "manifest.json"), "--out", str(rerun)])
    assert rc == 0
    assert (out / "report.json").read_bytes() == (rerun / "report.json").read_bytes()
    assert (out / "results.csv").read_bytes() == (rerun / "results.csv").read_bytes()


def test_worker_count_does_not_change_outputs(tmp_path):
    path = write_cfg(tmp_path, experiment={"name": "spine-decomposition",
                                           "x": math.pi / 2, "T": 0.5,
                                           "replicas": 64})
    cli.main(["verify", "spine-decomposition", "--config", str(path),
              "--out", str(tmp_path / "w1"), "--workers", "1"])
    cli.main(["verify", "spine-decomposition", "--config", str(path),
              "--out", str(tmp_path / "w8"), "--workers", "8"])
    assert (tmp_path / "w1" / "report.json").read_bytes() == \
        (tmp_path / "w8" / "report.json").read_bytes()
    assert (tmp_path / "w1" / "results.csv").read_bytes() == \
        (tmp_path / "w8" / "results.csv").read_bytes()


def test_report_on_empty_dir_fails(tmp_path):
    empty = tmp_path / "nothing"
    empty.mkdir()
    assert cli.main(["report", str(empty)]) == 1


def test_report_renders_summary_and_figures(tmp_path):
    path = write_cfg(tmp_path)
    cli.main(["verify", "spine-decomposition", "--config", str(path)])
    rc = cli.main(["report", str(tmp_path / "out")])
    assert rc == 0
    assert (tmp_path / "out" / "summary.txt").exists()
    pngs = list((tmp_path / "out").glob("*.png"))
    assert pngs


def test_workers_env_fallback(tmp_path, monkeypatch):
    from bhp_lab.rng import resolve_workers

    monkeypatch.setenv("BHP_LAB_WORKERS", "3")
    assert resolve_workers(None) == 3
    assert resolve_workers(5) == 5
    monkeypatch.delenv("BHP_LAB_WORKERS")
    assert resolve_workers(None) == 1


def test_fmt17_and_dumps17():
    assert fmt17(0.1) == "0.10000000000000001"
    assert fmt17(None) == ""
    text = dumps17({"a": 0.1, "b": [1.5, float("nan")], "c": "s"})
    assert "0.10000000000000001" in text
    assert '"nan"' in text
    json.loads(text)  # still valid JSON


def test_entry_point_usage():
    proc = subprocess.run([sys.executable, "-m", "bhp_lab.cli"],
                          capture_output=True, text=True)
    assert proc.returncode == 1


def test_verify_martingale_ou_target_via_cli(tmp_path):
    path = write_cfg(
        tmp_path,
        model={"kind": "ou", "c": 2.0, "b": 1.5, "a": 0.1},
        experiment={"name": "martingale", "x": 0.0, "t_list": [0.5],
                    "replicas": 800})
    rc = cli.main(["verify", "martingale", "--config", str(path)])
    assert rc in (0, 2)  # statistical verdict; the report content is the contract
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    rows = [r for r in doc["rows"] if r["statistic"] == "martingale_mean"]
    assert rows and abs(rows[0]["oracle"] - 0.840896415253715) < 1e-9


def test_report_renders_spectral_figure(tmp_path):
    path = write_cfg(tmp_path, spectral={"grid_n": 800})
    assert cli.main(["spectral", "--config", str(path)]) == 0
    assert cli.main(["report", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "spectral_0.png").exists()


def test_exit_code_two_on_failing_verdict(tmp_path, monkeypatch):
    from bhp_lab.verify import ExperimentReport, ReportRow

    failing = ExperimentReport(
        name="martingale", model_id="m", base_seed=1, sample_sizes={},
        rows=[ReportRow(statistic="martingale_mean", estimate=1.0, verdict="fail")])
    monkeypatch.setattr(cli, "_run_verify", lambda *a, **k: failing)
    path = write_cfg(tmp_path)
    assert cli.main(["verify", "martingale", "--config", str(path)]) == 2


def test_thresholds_visible_in_report(tmp_path):
    path = write_cfg(
        tmp_path,
        experiment={"name": "spine-decomposition", "x": math.pi / 2, "T": 0.5,
                    "replicas": 80, "se_multiplier": 2.5})
    assert cli.main(["verify", "spine-decomposition", "--config", str(path)]) in (0, 2)
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    assert doc["thresholds"]["se_multiplier"] == 2.5


def test_unknown_subcommand_exit_one(capsys):
    assert cli.main(["frobnicate"]) == 1
