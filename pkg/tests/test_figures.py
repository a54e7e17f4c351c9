import os

import numpy as np
import pytest

from splatact import figures


def _write_metrics(path, steps):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,total,flow,cot,depth,grad_norm\n")
        for s in range(steps):
            fh.write(f"{s},{1.0 / (s + 1):.12e},{0.5 / (s + 1):.12e},{0.3:.12e},{0.2:.12e},{1.0:.12e}\n")


def test_read_metrics_csv_roundtrip(tmp_path):
    path = tmp_path / "metrics_s1.csv"
    _write_metrics(path, 5)
    cols = figures.read_metrics_csv(str(path))
    assert set(cols) == {"step", "total", "flow", "cot", "depth", "grad_norm"}
    assert cols["step"].shape == (5,)
    np.testing.assert_allclose(cols["total"][0], 1.0)
    np.testing.assert_allclose(cols["flow"][4], 0.1)


def test_read_metrics_csv_empty_file(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("")
    with pytest.raises(ValueError, match="empty"):
        figures.read_metrics_csv(str(path))


def test_training_curves_writes_png(tmp_path):
    p1 = tmp_path / "metrics_s1.csv"
    p2 = tmp_path / "metrics_s2.csv"
    _write_metrics(p1, 8)
    _write_metrics(p2, 4)
    out = figures.training_curves([("S1", str(p1)), ("S2", str(p2))], str(tmp_path / "curves.png"))
    assert os.path.exists(out)
    assert os.path.getsize(out) > 1000


def test_depth_comparison_writes_png(tmp_path):
    rng = np.random.default_rng(3)
    true = 0.6 + 0.1 * rng.random((32, 32))
    pred = true + 0.01 * rng.standard_normal((32, 32))
    out = figures.depth_comparison(true, pred, str(tmp_path / "depth.png"))
    assert os.path.exists(out)
    assert os.path.getsize(out) > 1000


def test_rollout_trajectory_writes_png(tmp_path):
    t = np.linspace(0.0, 1.0, 11)[:, None]
    demo = t * np.array([[0.1, 0.2, 0.05]])
    pred = demo + 0.002
    out = figures.rollout_trajectory(demo, pred, str(tmp_path / "rollout.png"))
    assert os.path.exists(out)


def test_ablation_bars_writes_png(tmp_path):
    rows = [
        {"cell": "full", "composite": 0.12},
        {"cell": "no_cot", "composite": 0.31},
        {"cell": "no_s1", "composite": 0.55},
    ]
    out = figures.ablation_bars(rows, str(tmp_path / "ablation.png"))
    assert os.path.exists(out)


def test_eval_report_figures_writes_expected_set(tmp_path):
    rng = np.random.default_rng(4)
    data = {
        "depth_true": 0.5 + rng.random((16, 16)),
        "depth_pred": 0.5 + rng.random((16, 16)),
        "rollout_demo": rng.random((10, 3)),
        "rollout_pred": rng.random((10, 3)),
    }
    paths = figures.eval_report_figures(data, str(tmp_path), prefix="val")
    assert len(paths) == 2
    names = {os.path.basename(p) for p in paths}
    assert names == {"val_depth.png", "val_rollout.png"}
    for p in paths:
        assert os.path.exists(p)
