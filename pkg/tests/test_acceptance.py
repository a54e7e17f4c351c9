"""Acceptance gate: one test per shipping criterion, tolerances pinned.

The final two tests train at full desk scale and take on the order of an
hour apiece on one CPU core; everything before them runs in seconds.
"""

import time

import numpy as np
import pytest

import splatact.autodiff as ad
import splatact.expert as xp
import splatact.pipeline as pl
import splatact.renderer as rd
import splatact.reasoner as rs
import splatact.scenes as scenes
import splatact.tokenizer as tk
import splatact.trainer as tr
import splatact.vocab as vocab
from splatact import cli
from splatact.autodiff import ParamStore, Tape

from test_pipeline import tiny_config

SEED = 12345


# ---------------------------------------------------------------------------
# criterion 1: renderer differentiability (FD check over mu, sigma, alpha)
# ---------------------------------------------------------------------------


def test_criterion_1_renderer_gradients_match_finite_differences():
    t0 = time.monotonic()
    fn, params = cli._case_splat_render(SEED)
    report = ad.grad_check(fn, params, tol=1e-4)
    elapsed = time.monotonic() - t0
    for name in ("mu", "sigma", "alpha"):
        entry = report[name]
        assert entry["ok"], f"{name}: {entry}"
        assert entry["max_rel_err"] < 1e-4, f"{name}: max_rel_err {entry['max_rel_err']:.3e}"
    assert elapsed < 10.0, f"gradient check took {elapsed:.1f} s"


# ---------------------------------------------------------------------------
# criterion 2: renderer vs independent direct-formula oracle
# ---------------------------------------------------------------------------


def _direct_composite(mu, sig, alpha, d):
    """Fresh direct evaluation of front-to-back compositing for one ray."""
    shrink = 1.0 - 1e-12
    t = np.linalg.norm(mu, axis=1)
    proj = mu @ d
    var = np.maximum(np.exp(2.0 * sig) @ (d * d), 1e-12)
    a = shrink * alpha * np.exp(-0.5 * (t - proj) ** 2 / var)
    out, trans = 0.0, 1.0
    for g in np.argsort(t, kind="stable"):
        out += a[g] * trans * proj[g]
        trans *= 1.0 - a[g]
    return max(out, 1e-6)


def test_criterion_2_renderer_matches_independent_occlusion_oracle():
    mu = np.array([[0.02, -0.01, 0.50], [-0.03, 0.02, 0.82]])
    sig = np.array([[-2.2, -2.0, -2.4], [-1.9, -2.1, -2.0]])
    alpha = np.array([0.6, 0.9])
    rays = np.array([[0.0, 0.0, 1.0], [0.03, -0.02, 1.0], [-0.05, 0.04, 1.0]])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    got = rd.render_range(
        ad.constant(mu), ad.constant(sig), ad.constant(alpha[:, None]), rays
    ).rendered.data
    want = np.array([_direct_composite(mu, sig, alpha, d) for d in rays])
    err = np.abs(got - want).max()
    assert err < 1e-9, f"occlusion case differs from direct formula by {err:.3e} m"

    # a single opaque primitive must render its own range on the central ray
    mu1 = np.array([[0.10, -0.05, 0.70]])
    d1 = (mu1[0] / np.linalg.norm(mu1[0]))[None]
    got1 = rd.render_range(
        ad.constant(mu1),
        ad.constant(np.full((1, 3), -2.3)),
        ad.constant(np.array([[1.0]])),
        d1,
    ).rendered.data[0]
    err1 = abs(got1 - np.linalg.norm(mu1[0]))
    assert err1 < 1e-6, f"opaque primitive depth off by {err1:.3e} m"


# ---------------------------------------------------------------------------
# criterion 3: scale-invariant log loss closed forms
# ---------------------------------------------------------------------------


def test_criterion_3_silog_closed_forms():
    rng = np.random.default_rng(SEED)
    target = np.exp(rng.uniform(-0.5, 0.5, 64))
    for c in (0.3, -0.13, 1.7):
        loss = float(rd.silog_loss(ad.constant(target * np.exp(c)), target).data)
        assert abs(loss - 0.15 * c * c) <= 1e-12, f"constant residual {c}: {loss!r}"
    for c in (0.25, 0.9):
        pair = np.array([0.6, 0.8])
        pred = pair * np.exp([c, -c])
        loss = float(rd.silog_loss(ad.constant(pred), pair).data)
        assert abs(loss - c * c) <= 1e-12, f"antisymmetric residual {c}: {loss!r}"


# ---------------------------------------------------------------------------
# criterion 4: Euler flow integration exactness
# ---------------------------------------------------------------------------


def test_criterion_4_euler_flow_exactness():
    rng = np.random.default_rng(SEED)
    a0 = rng.standard_normal((4, 70))
    a1 = rng.standard_normal((4, 70))
    got = xp.integrate_euler(lambda a, t: a1 - a0, a0, n_steps=10)
    assert np.abs(got - a1).max() <= 1e-12, "constant field must land on a1"

    got = xp.integrate_euler(lambda a, t: -a, a0, n_steps=10)
    want = 0.9**10 * a0
    assert np.abs(got - want).max() <= 1e-12, "linear field must match 0.9^10 * a0"


# ---------------------------------------------------------------------------
# criterion 5: structural contracts
# ---------------------------------------------------------------------------


def test_criterion_5_structural_contracts():
    # attention pooling rows are convex weights: 128 queries over 256 keys
    sample = scenes.generate(scenes.sample_spec(SEED))
    cfg = tk.TokenizerConfig()
    assert cfg.n_tokens == 128 and cfg.n_patches == 256
    store = ParamStore(SEED)
    tk.build_params(store, cfg)
    with ad.no_grad():
        tokens = tk.tokenize(
            store, cfg, sample.depth[None], sample.features[None], sample.spec.intrinsics
        )
    row_sums = tokens.pool_rows.data.sum(axis=-1)
    assert np.abs(row_sums - 1.0).max() <= 1e-6, "pooling rows must sum to one"

    # Fourier positional code width: 6 octaves * (sin+cos) * 3 coords = 36
    assert tk.pe_width() == 36
    with ad.no_grad():
        pe = tk.fourier_pe(ad.constant(np.zeros((1, 5, 3))))
    assert pe.data.shape == (1, 5, 36)

    # raw token concat reproduces 1192 at a 1152-wide backbone feature
    assert tk.raw_token_width(tk.TokenizerConfig(feature_dim=1152)) == 1192

    # the mixture routes every token through exactly 2 of 8 experts
    ecfg = xp.ExpertConfig()
    assert ecfg.n_experts == 8 and ecfg.top_k == 2
    estore = ParamStore(SEED)
    xp.build_params(estore, ecfg)
    rng = np.random.default_rng(SEED)
    b = 2
    trace = xp.RouterTrace()
    with ad.no_grad():
        xp.velocity(
            estore,
            ecfg,
            rng.standard_normal((b, ecfg.flat_dim)),
            rng.random(b),
            rng.uniform(-0.3, 0.6, (b, 7)),
            ad.constant(rng.standard_normal((b, 5, ecfg.d_cond))),
            ad.constant(rng.standard_normal((b, 4, ecfg.d_cond))),
            trace=trace,
        )
    assert len(trace.selected) == ecfg.n_layers
    for sel in trace.selected:
        assert sel.shape[1] == 2
        assert (sel >= 0).all() and (sel < 8).all()
        assert (sel[:, 0] != sel[:, 1]).all(), "the two routed experts must differ"


# ---------------------------------------------------------------------------
# criterion 6: chain loss alone reaches the tokenizer's geometry MLP
# ---------------------------------------------------------------------------


def test_criterion_6_chain_loss_reaches_tokenizer_gradients():
    cfg = pl.PipelineConfig()
    store = ParamStore(SEED)
    pl.build_params(store, cfg)
    # move off the zero-initialized readout so the probe point is generic
    rng = np.random.default_rng(SEED)
    for name in ("gst.f_theta.w2", "gst.f_theta.b2"):
        store[name].data += 0.01 * rng.standard_normal(store[name].data.shape)

    samples = [scenes.generate(scenes.sample_spec(SEED + i)) for i in range(2)]
    batch = pl.collate(samples, cfg.chain_flags)
    with Tape() as tape:
        tokens = pl.scene_tokens(store, cfg, batch)
        loss, _, _ = pl.chain_and_conditioning(
            store, cfg, tokens, batch, cfg.chain_flags, detach=False
        )
        tape.backward(loss)

    for suffix in ("w0", "b0", "w1", "b1", "w2", "b2"):
        g = store[f"gst.f_theta.{suffix}"].grad
        assert g is not None, f"f_theta.{suffix} received no gradient"
        assert np.abs(g).max() > 0.0, f"f_theta.{suffix} gradient is identically zero"


# ---------------------------------------------------------------------------
# criterion 9: bit-identical reruns of training and evaluation commands
# ---------------------------------------------------------------------------


def test_criterion_9_command_determinism(tmp_path):
    import json

    data = tmp_path / "scenes"
    assert (
        cli.dispatch(
            ["gen-scenes", "--count", "6", "--seed", "3", "--out", str(data), "--val-fraction", "0.34"]
        )
        == 0
    )
    cfg_path = tmp_path / "cfg.json"
    plans = tr.default_plans(steps=(6, 4, 3), batches=(4, 3, 2))
    cfg_path.write_text(
        json.dumps(
            {
                "pipeline": tiny_config().to_dict(),
                "stages": [tr.plan_to_dict(p) for p in plans],
            }
        )
    )

    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"run_{tag}"
        code = cli.dispatch(
            ["train", "--scenes", str(data), "--out", str(out), "--config", str(cfg_path), "--seed", "7"]
        )
        assert code == 0
        outs.append(out)
    for name in ("metrics_s1.csv", "metrics_s2.csv", "metrics_s3.csv", "eval.csv"):
        ba = (outs[0] / name).read_bytes()
        bb = (outs[1] / name).read_bytes()
        assert ba == bb, f"training rerun changed {name}"

    evs = []
    for tag in ("a", "b"):
        out = tmp_path / f"eval_{tag}"
        code = cli.dispatch(
            [
                "eval",
                "--checkpoint",
                str(outs[0] / "checkpoint_s3.ck"),
                "--scenes",
                str(data),
                "--out",
                str(out),
                "--seed",
                "11",
            ]
        )
        assert code == 0
        evs.append((out / "eval.csv").read_bytes())
    assert evs[0] == evs[1], "evaluation rerun changed its metric log"


# ---------------------------------------------------------------------------
# criterion 7: desk-scale three-stage training gates (slow)
# ---------------------------------------------------------------------------


def test_criterion_7_three_stage_training_gates(tmp_path):
    data = tmp_path / "scenes"
    scenes.write_dataset(data, 288, SEED, val_fraction=32 / 288)
    train = scenes.load_split(data, "train")
    val = scenes.load_split(data, "val")
    assert len(train) == 256 and len(val) == 32

    cfg = pl.PipelineConfig()
    store = ParamStore(SEED)
    pl.build_params(store, cfg)
    result = tr.train_all(
        store, cfg, tr.default_plans(), train, val, tmp_path / "run", SEED
    )

    wall = result["wall_time_s"]
    ev = result["eval"]
    print(
        f"criterion 7: wall {wall:.0f} s, S1 depth {ev['S1']['depth_loss']:.5f}, "
        f"S2 acc {ev['S2']['token_acc']:.4f} centroid {ev['S2']['centroid_err_m']:.4f} m, "
        f"S3 rollout {ev['S3']['rollout_err_m']:.5f} m"
    )
    assert wall < 7200.0, f"protocol took {wall:.0f} s"
    assert ev["S1"]["depth_loss"] < 0.02, f"S1 held-out depth {ev['S1']['depth_loss']:.5f}"
    assert ev["S2"]["token_acc"] > 0.95, f"S2 token accuracy {ev['S2']['token_acc']:.4f}"
    assert (
        ev["S2"]["centroid_err_m"] <= 0.02
    ), f"S2 median centroid error {ev['S2']['centroid_err_m']:.4f} m"
    assert (
        ev["S3"]["rollout_err_m"] < 0.01
    ), f"S3 mean rollout error {ev['S3']['rollout_err_m']:.5f} m"


# ---------------------------------------------------------------------------
# criterion 8: ablation direction checks (slow)
# ---------------------------------------------------------------------------


def test_criterion_8_ablation_orderings(tmp_path):
    data = tmp_path / "scenes"
    scenes.write_dataset(data, 120, SEED, val_fraction=0.2)
    train = scenes.load_split(data, "train")
    val = scenes.load_split(data, "val")
    assert len(train) == 96 and len(val) == 24

    cells = list(tr.ABLATION_CELLS)
    rows = tr.ablation_matrix(
        cells, pl.PipelineConfig(), tr.ablation_plans(), train, val, tmp_path / "grid", SEED
    )
    comp = {r["cell"]: r["composite"] for r in rows}
    print("criterion 8 composites: " + ", ".join(f"{c} {comp[c]:.4f}" for c in cells))

    variants = [c for c in cells if c != "full"]
    for cell in variants:
        assert comp["full"] < comp[cell], (
            f"full ({comp['full']:.4f}) is not strictly better than {cell} ({comp[cell]:.4f})"
        )
    worst = max(variants, key=lambda c: comp[c])
    assert worst == "no_s1", f"worst variant is {worst}, expected no_s1 ({comp})"
