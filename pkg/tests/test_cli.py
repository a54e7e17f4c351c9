import json
import os

import numpy as np
import pytest

from splatact import cli, tokenizer, trainer, vocab
from test_pipeline import tiny_config

IMAGE_BYTES = 224 * 224 * 8


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    code = cli.dispatch(
        ["gen-scenes", "--count", "6", "--seed", "3", "--out", str(d), "--val-fraction", "0.34"]
    )
    assert code == 0
    return d


@pytest.fixture(scope="module")
def run_config(tmp_path_factory):
    plans = trainer.default_plans(steps=(6, 4, 3), batches=(4, 3, 2))
    payload = {
        "pipeline": tiny_config().to_dict(),
        "stages": [trainer.plan_to_dict(p) for p in plans],
        "skip_s1": False,
    }
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory, scene_dir, run_config):
    out = tmp_path_factory.mktemp("run")
    code = cli.dispatch(
        [
            "train",
            "--scenes",
            str(scene_dir),
            "--out",
            str(out),
            "--config",
            str(run_config),
            "--seed",
            "9",
        ]
    )
    assert code == 0
    return out


def _train_args(scene_dir, out, config, seed="9"):
    return [
        "train",
        "--scenes",
        str(scene_dir),
        "--out",
        str(out),
        "--config",
        str(config),
        "--seed",
        seed,
    ]


# ---------------------------------------------------------------------------
# gen-scenes
# ---------------------------------------------------------------------------


def test_gen_scenes_writes_count_and_manifest(scene_dir):
    files = sorted(p.name for p in scene_dir.glob("scene_*.json"))
    assert len(files) == 6
    manifest = json.loads((scene_dir / "manifest.json").read_text())
    assert manifest["count"] == 6
    splits = [e["split"] for e in manifest["scenes"]]
    assert splits.count("val") == 2
    assert (scene_dir / "resolved_config.json").exists()


def test_gen_scenes_rejects_bad_flags(tmp_path, capsys):
    assert cli.dispatch(["gen-scenes", "--count", "0", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error: usage:")
    assert err.count("\n") == 1
    assert (
        cli.dispatch(
            ["gen-scenes", "--count", "2", "--out", str(tmp_path), "--val-fraction", "1.5"]
        )
        == 2
    )


def test_unknown_flags_rejected(tmp_path, capsys):
    code = cli.dispatch(["gen-scenes", "--count", "2", "--out", str(tmp_path), "--bogus", "1"])
    assert code == 2
    assert capsys.readouterr().err.startswith("error: usage:")


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def test_grad_check_splat_render_passes(capsys, tmp_path):
    code = cli.dispatch(
        ["grad-check", "--module", "splat_render", "--tol", "1e-4", "--out", str(tmp_path)]
    )
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "module,param,n_elements,max_rel_err,tol,status"
    body = {ln.split(",")[1]: ln.split(",")[-1] for ln in lines[1:]}
    assert body == {"mu": "pass", "sigma": "pass", "alpha": "pass"}
    assert (tmp_path / "gradcheck.csv").exists()
    assert (tmp_path / "resolved_config.json").exists()


@pytest.mark.parametrize("module", ["tokenizer", "reasoner", "expert"])
def test_grad_check_other_modules_pass(module):
    assert cli.dispatch(["grad-check", "--module", module]) == 0


def test_grad_check_unknown_module(capsys):
    assert cli.dispatch(["grad-check", "--module", "nope"]) == 2
    assert "choose from" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# path and usage errors
# ---------------------------------------------------------------------------


def test_missing_checkpoint_names_path(scene_dir, tmp_path, capsys):
    code = cli.dispatch(
        ["eval", "--checkpoint", "/no/such.ck", "--scenes", str(scene_dir), "--out", str(tmp_path)]
    )
    assert code == 2
    err = capsys.readouterr().err
    assert err == "error: path: checkpoint not found: /no/such.ck\n"


def test_missing_scene_dir_names_path(tmp_path, capsys):
    code = cli.dispatch(["train", "--scenes", "/no/scenes", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "/no/scenes" in capsys.readouterr().err


def test_scene_index_out_of_range(trained_run, scene_dir, capsys):
    code = cli.dispatch(
        [
            "decode-chain",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--index",
            "99",
        ]
    )
    assert code == 2
    assert "out of range" in capsys.readouterr().err


def test_config_with_unknown_key_rejected(scene_dir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"pipelines": {}}))
    code = cli.dispatch(_train_args(scene_dir, tmp_path / "o", bad))
    assert code == 2
    assert "unknown keys" in capsys.readouterr().err


def test_config_with_bad_json_rejected(scene_dir, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code = cli.dispatch(_train_args(scene_dir, tmp_path / "o", bad))
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("error: usage:") and err.count("\n") == 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_expected_artifacts(trained_run):
    for name in (
        "metrics_s1.csv",
        "metrics_s2.csv",
        "metrics_s3.csv",
        "checkpoint_s1.ck",
        "checkpoint_s2.ck",
        "checkpoint_s3.ck",
        "resolved_config.json",
        "summary.json",
        "training_curves.png",
        "eval.csv",
        "eval_depth.png",
        "eval_rollout.png",
    ):
        assert (trained_run / name).exists(), name
    summary = json.loads((trained_run / "summary.json").read_text())
    assert [s["stage"] for s in summary["stages"]] == ["S1", "S2", "S3"]


def test_train_rerun_is_byte_identical(trained_run, scene_dir, run_config, tmp_path):
    out2 = tmp_path / "rerun"
    assert cli.dispatch(_train_args(scene_dir, out2, run_config)) == 0
    for name in ("metrics_s1.csv", "metrics_s2.csv", "metrics_s3.csv", "eval.csv"):
        assert (trained_run / name).read_bytes() == (out2 / name).read_bytes(), name


def test_train_reproducible_from_snapshot_alone(trained_run, scene_dir, tmp_path):
    out2 = tmp_path / "from_snap"
    snap = trained_run / "resolved_config.json"
    assert cli.dispatch(_train_args(scene_dir, out2, snap)) == 0
    assert (trained_run / "metrics_s3.csv").read_bytes() == (out2 / "metrics_s3.csv").read_bytes()


def test_verbose_env_changes_stderr_not_results(trained_run, scene_dir, run_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPLATACT_VERBOSE", "1")
    out2 = tmp_path / "verbose"
    assert cli.dispatch(_train_args(scene_dir, out2, run_config)) == 0
    err = capsys.readouterr().err
    assert "[S1] step 0:" in err
    for name in ("metrics_s1.csv", "metrics_s2.csv", "metrics_s3.csv"):
        assert (trained_run / name).read_bytes() == (out2 / name).read_bytes(), name


def test_train_different_seed_differs(scene_dir, run_config, trained_run, tmp_path):
    out2 = tmp_path / "seed10"
    assert cli.dispatch(_train_args(scene_dir, out2, run_config, seed="10")) == 0
    assert (trained_run / "metrics_s1.csv").read_bytes() != (out2 / "metrics_s1.csv").read_bytes()


# ---------------------------------------------------------------------------
# checkpoint-driven commands
# ---------------------------------------------------------------------------


def test_eval_writes_metrics_and_figures(trained_run, scene_dir, tmp_path, capsys):
    out = tmp_path / "ev"
    code = cli.dispatch(
        [
            "eval",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--out",
            str(out),
            "--seed",
            "9",
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert stdout.startswith("metric,value\n")
    assert "depth_loss," in stdout
    for name in ("eval.csv", "eval_depth.png", "eval_rollout.png", "resolved_config.json"):
        assert (out / name).exists(), name
    # the file mirrors stdout rows exactly
    assert (out / "eval.csv").read_text().strip() == stdout.strip()


def test_eval_matches_train_final_eval(trained_run, scene_dir, tmp_path):
    out = tmp_path / "ev2"
    assert (
        cli.dispatch(
            [
                "eval",
                "--checkpoint",
                str(trained_run / "checkpoint_s3.ck"),
                "--scenes",
                str(scene_dir),
                "--out",
                str(out),
                "--seed",
                "9",
            ]
        )
        == 0
    )
    assert (out / "eval.csv").read_bytes() == (trained_run / "eval.csv").read_bytes()


def test_export_gaussians_roundtrip(trained_run, scene_dir, tmp_path):
    out = tmp_path / "g" / "scene0.ply"
    code = cli.dispatch(
        [
            "export-gaussians",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--index",
            "0",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    cloud = tokenizer.read_gaussians(out)
    assert cloud.shape == (256, 7)
    assert np.isfinite(cloud).all()
    assert (cloud[:, 3:6] > 0).all()  # stored as scales, not log-scales
    assert out.with_name("scene0.ply.config.json").exists()


def test_decode_chain_prints_expected_lines(trained_run, scene_dir, tmp_path, capsys):
    out = tmp_path / "chain"
    code = cli.dispatch(
        [
            "decode-chain",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--index",
            "0",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "target centroid: (" in stdout
    assert stdout.rstrip().split("\n")[0].startswith("scene: scene_0000")
    assert "token accuracy:" in stdout
    assert (out / "chain.txt").read_text().strip() == stdout.strip()
    assert (out / "resolved_config.json").exists()


def test_rollout_writes_actions_and_figure(trained_run, scene_dir, tmp_path, capsys):
    out = tmp_path / "roll"
    code = cli.dispatch(
        [
            "rollout",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--index",
            "0",
            "--out",
            str(out),
            "--seed",
            "4",
        ]
    )
    assert code == 0
    stdout = capsys.readouterr().out
    assert "rollout_err_m," in stdout
    for ch in ("dx", "dy", "dz", "rx", "ry", "rz", "gripper"):
        assert f"ensemble_{ch}," in stdout
    lines = (out / "actions.csv").read_text().strip().splitlines()
    assert lines[0] == "step,dx,dy,dz,rx,ry,rz,gripper,pos_err_m"
    assert len(lines) == 11  # header + one row per horizon step
    assert (out / "rollout.png").exists()


def test_render_depth_writes_binary_pair(trained_run, scene_dir, tmp_path, capsys):
    out = tmp_path / "rd"
    code = cli.dispatch(
        [
            "render-depth",
            "--checkpoint",
            str(trained_run / "checkpoint_s3.ck"),
            "--scenes",
            str(scene_dir),
            "--index",
            "0",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    assert (out / "depth_pred.f64").stat().st_size == IMAGE_BYTES
    assert (out / "depth_true.f64").stat().st_size == IMAGE_BYTES
    pred = np.frombuffer((out / "depth_pred.f64").read_bytes(), dtype="<f8")
    assert np.isfinite(pred).all()
    stdout = capsys.readouterr().out
    assert "silog," in stdout and "absrel," in stdout and "mae_m," in stdout
    assert (out / "depth.png").exists()


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def test_ablate_rejects_bad_and_duplicate_cells(scene_dir, tmp_path, capsys):
    grid = tmp_path / "grid.txt"
    grid.write_text("full\nbogus\n")
    code = cli.dispatch(
        ["ablate", "--grid", str(grid), "--scenes", str(scene_dir), "--out", str(tmp_path / "o")]
    )
    assert code == 2
    assert "bogus" in capsys.readouterr().err
    grid.write_text("full\nfull\n")
    assert (
        cli.dispatch(
            ["ablate", "--grid", str(grid), "--scenes", str(scene_dir), "--out", str(tmp_path / "o")]
        )
        == 2
    )


def test_ablate_runs_tiny_grid(scene_dir, run_config, tmp_path, capsys):
    grid = tmp_path / "grid.txt"
    grid.write_text("# direction probes\nfull\nno_cot\n")
    out = tmp_path / "abl"
    code = cli.dispatch(
        [
            "ablate",
            "--grid",
            str(grid),
            "--scenes",
            str(scene_dir),
            "--out",
            str(out),
            "--config",
            str(run_config),
            "--seed",
            "9",
        ]
    )
    assert code == 0
    table = capsys.readouterr().out.strip().splitlines()
    assert table[0].startswith("cell,")
    assert [ln.split(",")[0] for ln in table[1:]] == ["full", "no_cot"]
    assert (out / "ablation.csv").exists()
    assert (out / "ablation.png").exists()
    assert (out / "full" / "metrics_s1.csv").exists()
    assert (out / "no_cot" / "metrics_s1.csv").exists()
