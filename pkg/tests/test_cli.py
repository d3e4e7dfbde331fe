import json

import numpy as np
import pytest

from pneutilt import cli
from pneutilt.calibration import FFModel, PointCloud, feedforward

SMALL = """\
seed: 3
cloud:
  increment: 0.5
calibration:
  grid_step: 2.0
step:
  hold: 1.0
  phase_time: 2.0
assertions: [step_overshoot]
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generate_cloud_and_fit(small_cfg, tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["generate-cloud", "--config", str(small_cfg), "--out", str(out)]) == 0
    assert "1331 rows" in capsys.readouterr().out
    cloud = PointCloud.from_csv(out / cli.CLOUD_FILE)
    assert len(cloud) == 11 ** 3
    first = (out / cli.CLOUD_FILE).read_bytes()
    assert cli.main(["generate-cloud", "--config", str(small_cfg), "--out", str(out)]) == 0
    assert (out / cli.CLOUD_FILE).read_bytes() == first

    assert cli.main(["fit", "--config", str(small_cfg), "--out", str(out)]) == 0
    model = FFModel.load(out / cli.MODEL_FILE)
    report = json.loads((out / cli.FIT_REPORT_FILE).read_text())
    assert len(report["tracks"]) == 18
    assert len(report["levels"]) == 20
    rng = np.random.default_rng(2)
    again = FFModel.loads(model.dumps())
    for _ in range(100):
        ref, p = rng.uniform(-10, 10, 2), rng.uniform(3.6, 15.0)
        assert np.array_equal(feedforward(ref, p, model), feedforward(ref, p, again))


def test_default_cloud_size(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["generate-cloud", "--out", str(out)]) == 0
    assert "17576 rows" in capsys.readouterr().out


def test_fit_recovers_quadratic_cloud(tmp_path):
    levels = [round(4.2 + 0.6 * i, 10) for i in range(9)]
    cfg = tmp_path / "q.yaml"
    cfg.write_text(f"calibration:\n  levels: {levels}\n  extent: 4.0\n  grid_step: 1.0\n")
    rows = []
    for p in levels:
        for ax in range(-5, 6):
            for ay in range(-5, 6):
                c1 = 0.05 * ax + 0.01 * ay * ay
                c2 = -0.03 * ax + 0.04 * ay + 0.002 * ax * ay
                rows.append([ax, ay, p / 3 + c1, p / 3 + c2, p / 3 - c1 - c2])
    out = tmp_path / "q"
    out.mkdir()
    PointCloud(rows).to_csv(out / "quad.csv")
    assert cli.main(["fit", "--config", str(cfg), "--out", str(out), "--cloud", str(out / "quad.csv")]) == 0
    report = json.loads((out / cli.FIT_REPORT_FILE).read_text())
    assert max(max(r) for r in report["surface_rms"]) < 1e-6
    model = FFModel.load(out / cli.MODEL_FILE)
    got = feedforward((2.0, -1.0), 6.0, model)
    c1, c2 = 0.05 * 2 + 0.01, -0.06 - 0.04 - 0.004
    assert np.allclose(got, [2.0 + c1, 2.0 + c2, 2.0 - c1 - c2], atol=1e-6)


def test_fit_reports_row_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("alpha_x_deg,alpha_y_deg,p1_bar,p2_bar,p3_bar\n0,0,1,1,1\n0,0,1,x,1\n")
    assert cli.main(["fit", "--cloud", str(bad), "--out", str(tmp_path)]) == 2
    assert "row 3" in capsys.readouterr().err


def test_run_step_writes_artifacts_deterministically(small_cfg, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [cli.main(["run", "--scenario", "step", "--config", str(small_cfg), "--out", str(d)]) for d in (a, b)]
    report = json.loads((a / cli.REPORT_FILE).read_text())
    assert codes[0] == codes[1] == (0 if report["passed"] else 1)
    assert set(report["assertions"]) == {"step_overshoot"}
    assert sorted(report["results"]["step"]) == ["ffvi", "pid"]
    assert (a / cli.TRAJ_DIR / "step_ffvi.csv").exists() and (a / cli.TRAJ_DIR / "step_pid.csv").exists()
    assert _files(a) == _files(b)
    assert "step_overshoot" in capsys.readouterr().out


def test_run_with_model_and_failing_assertion(small_cfg, tmp_path):
    out = tmp_path / "m"
    cli.main(["generate-cloud", "--config", str(small_cfg), "--out", str(out)])
    cli.main(["fit", "--config", str(small_cfg), "--out", str(out)])
    strict = tmp_path / "strict.yaml"
    # a hugely overdriven integral overshoots far past the allowed 2 degrees
    strict.write_text(SMALL.replace("assertions: [step_overshoot]", "assertions: [step_overshoot, sine_rms]")
                      + "ffvi:\n  correction_scale: 0.2\n  response_time: 0.0\n")
    code = cli.main(["run", "--scenario", "step", "--config", str(strict), "--out", str(out),
                     "--model", str(out / cli.MODEL_FILE)])
    report = json.loads((out / cli.REPORT_FILE).read_text())
    assert report["assertions"]["sine_rms"]["passed"] is None
    assert code == (0 if report["passed"] else 1)
    assert report["assertions"]["step_overshoot"]["passed"] is False and code == 1


def test_run_errors(tmp_path, capsys):
    assert cli.main(["run", "--scenario", "flight", "--out", str(tmp_path)]) == 2
    assert "unknown scenario" in capsys.readouterr().err
    assert cli.main(["run", "--scenario", "step", "--out", str(tmp_path),
                     "--model", str(tmp_path / "missing.txt")]) == 2
    assert "missing model" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nplant:\n  mass: 3\n")
    assert cli.main(["generate-cloud", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_metrics_command(small_cfg, tmp_path, capsys):
    out = tmp_path / "r"
    cli.main(["run", "--scenario", "step", "--config", str(small_cfg), "--out", str(out)])
    capsys.readouterr()
    traj = out / cli.TRAJ_DIR / "step_ffvi.csv"
    assert cli.main(["metrics", str(traj), "--out", str(out)]) == 0
    result = json.loads((out / cli.METRICS_FILE).read_text())
    assert [s["axis"] for s in result["steps"]] == ["x", "y", "x", "y"]
    report = json.loads((out / cli.REPORT_FILE).read_text())
    first = report["results"]["step"]["ffvi"][0]["metrics"]
    assert result["steps"][0]["overshoot_pct"] == pytest.approx(first["overshoot_pct"], abs=1e-9)


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PNEUTILT_OUTPUT_DIR", str(tmp_path / "env"))
    cfg = tmp_path / "c.yaml"
    cfg.write_text("cloud:\n  increment: 1.0\n")
    assert cli.main(["generate-cloud", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / cli.CLOUD_FILE).exists()
    assert cli.main(["generate-cloud", "--config", str(cfg), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / cli.CLOUD_FILE).exists()
