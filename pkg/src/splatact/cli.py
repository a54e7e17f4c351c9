"""Operator command line: data generation, training, evaluation, export.

Exit codes: 0 success, 1 runtime failure (including a failing gradient
check), 2 usage or path error.  Failures print exactly one machine-parsable
line to stderr of the form ``error: <kind>: <detail>`` where kind is one of
``usage``, ``path``, ``runtime``.

``--seed`` feeds every stochastic path of a command; when omitted it
defaults to DEFAULT_SEED (12345).  Setting SPLATACT_VERBOSE=1 prints
progress lines to stderr and changes nothing else.  Every command that
writes files also drops a ``resolved_config.json`` snapshot beside its
outputs; a training or ablation run can be reproduced by passing that
snapshot back in through ``--config``.
"""

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import expert as xp
from . import figures
from . import pipeline as pl
from . import reasoner as rs
from . import renderer as rd
from . import scenes
from . import tokenizer as tk
from . import trainer as tr
from . import vocab

DEFAULT_SEED = 12345


class UsageError(Exception):
    """Bad flags or bad file content supplied by the caller."""


class MissingPathError(Exception):
    """A required input path does not exist."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit(2)
        raise UsageError(message)


def _one_line(err) -> str:
    return str(err).replace("\n", "; ")


def _verbose() -> bool:
    return os.environ.get("SPLATACT_VERBOSE", "0") not in ("", "0")


def _note(msg: str) -> None:
    if _verbose():
        print(msg, file=sys.stderr, flush=True)


def _progress(stage: str, step: int, parts: dict) -> None:
    if step % 25 == 0:
        detail = " ".join(f"{k} {v:.5f}" for k, v in parts.items())
        print(f"[{stage}] step {step}: {detail}", file=sys.stderr, flush=True)


def _require(path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingPathError(f"{kind} not found: {p}")
    return p


def _sanitize(obj):
    """Replace non-finite floats with None so summaries stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_snapshot(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(_sanitize(payload), indent=1, sort_keys=True) + "\n")


def _metric_rows(metrics: dict) -> list[str]:
    rows = []
    for key in sorted(metrics):
        val = metrics[key]
        if isinstance(val, float):
            rows.append(f"{key},{val:.12e}")
        else:
            rows.append(f"{key},{val}")
    return rows


def _write_metric_csv(metrics: dict, path: Path) -> None:
    path.write_text("metric,value\n" + "\n".join(_metric_rows(metrics)) + "\n")


# ---------------------------------------------------------------------------
# shared loading helpers
# ---------------------------------------------------------------------------


def load_run_config(path, default_plan_factory):
    """Read a JSON run config (pipeline + stage plans + skip flag).

    A ``resolved_config.json`` written by train/ablate parses unchanged, so
    any run is reproducible from its snapshot alone.
    """
    if path is None:
        return pl.PipelineConfig(), list(default_plan_factory()), False
    p = _require(path, "config file")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise UsageError(f"config {p}: {err}")
    if not isinstance(raw, dict):
        raise UsageError(f"config {p}: top level must be an object")
    known = {"pipeline", "stages", "skip_s1", "run"}
    extra = sorted(set(raw) - known)
    if extra:
        raise UsageError(f"config {p}: unknown keys {extra}")
    try:
        cfg = (
            pl.PipelineConfig.from_dict(raw["pipeline"])
            if "pipeline" in raw
            else pl.PipelineConfig()
        )
        plans = (
            [tr.plan_from_dict(d) for d in raw["stages"]]
            if "stages" in raw
            else list(default_plan_factory())
        )
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"config {p}: {_one_line(err)}")
    return cfg, plans, bool(raw.get("skip_s1", False))


def _load_model(ckpt_path):
    p = _require(ckpt_path, "checkpoint")
    arrays, meta = tr.load_checkpoint(p)
    cfg = pl.PipelineConfig.from_dict(meta["config"])
    store = ad.ParamStore(seed=0)  # every value is overwritten by the restore
    pl.build_params(store, cfg)
    tr.restore_params(store, arrays)
    return store, cfg, meta


def _load_splits(scenes_dir):
    root = _require(scenes_dir, "scene directory")
    try:
        return scenes.load_split(root, "train"), scenes.load_split(root, "val")
    except FileNotFoundError as err:
        raise MissingPathError(_one_line(err))


def _load_indexed_scene(scenes_dir, index: int):
    root = _require(scenes_dir, "scene directory")
    try:
        entries = scenes.load_manifest(root)
    except FileNotFoundError as err:
        raise MissingPathError(_one_line(err))
    if not 0 <= index < len(entries):
        raise UsageError(f"scene index {index} out of range for {len(entries)} scenes")
    path, split = entries[index]
    return scenes.generate(scenes.load_scene(path)), path, split


def _single_scene_tokens(store, cfg, sample):
    batch = pl.collate([sample], cfg.chain_flags)
    with ad.no_grad():
        tokens = pl.scene_tokens(store, cfg, batch)
    return batch, tokens


# ---------------------------------------------------------------------------
# gen-scenes
# ---------------------------------------------------------------------------


def cmd_gen_scenes(a) -> int:
    if a.count <= 0:
        raise UsageError("--count must be positive")
    if not 0.0 <= a.val_fraction < 1.0:
        raise UsageError("--val-fraction must lie in [0, 1)")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = scenes.write_dataset(out, a.count, a.seed, a.val_fraction)
    _write_snapshot(
        {
            "run": {
                "command": "gen-scenes",
                "count": a.count,
                "seed": a.seed,
                "val_fraction": a.val_fraction,
                "out": str(out),
            }
        },
        out / "resolved_config.json",
    )
    n_val = sum(1 for e in manifest["scenes"] if e["split"] == "val")
    print(f"wrote {manifest['count']} scenes ({n_val} val) to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(a) -> int:
    cfg, plans, skip_cfg = load_run_config(a.config, tr.default_plans)
    skip_s1 = bool(a.skip_s1) or skip_cfg
    train, val = _load_splits(a.scenes)
    if not train:
        raise UsageError(f"no scenes in split 'train' under {a.scenes}")
    resume = str(_require(a.resume, "checkpoint")) if a.resume else None

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "stages": [tr.plan_to_dict(p) for p in plans],
            "skip_s1": skip_s1,
            "run": {
                "command": "train",
                "seed": a.seed,
                "scenes": str(a.scenes),
                "out": str(out),
                "resume": resume,
            },
        },
        out / "resolved_config.json",
    )

    store = ad.ParamStore(a.seed)
    pl.build_params(store, cfg)
    result = tr.train_all(
        store,
        cfg,
        plans,
        train,
        val,
        out,
        a.seed,
        skip_s1=skip_s1,
        resume_from=resume,
        progress=_progress if _verbose() else None,
    )
    (out / "summary.json").write_text(
        json.dumps(_sanitize(result), indent=1, sort_keys=True) + "\n"
    )

    curve_inputs = [
        (p.stage, str(out / f"metrics_{p.stage.lower()}.csv"))
        for p in plans
        if (out / f"metrics_{p.stage.lower()}.csv").exists()
    ]
    if curve_inputs:
        figures.training_curves(curve_inputs, str(out / "training_curves.png"))

    for s in result["stages"]:
        print(f"stage {s['stage']}: {s['steps']} steps in {s['wall_time_s']:.1f} s")
        util = s.get("router_utilization")
        if util is not None:
            shares = " ".join(f"{u:.3f}" for u in util)
            idle = sum(1 for u in util if u == 0.0)
            note = f" ({idle} idle)" if idle else ""
            print(f"stage {s['stage']} expert shares: {shares}{note}")

    if val:
        metrics = pl.evaluate(store, cfg, val, a.seed, collect_figures=True)
        figure_data = metrics.pop("figure_data", None)
        _write_metric_csv(metrics, out / "eval.csv")
        if figure_data is not None:
            figures.eval_report_figures(figure_data, str(out))
        print("\n".join(_metric_rows(metrics)))
    print(f"total wall time: {result['wall_time_s']:.1f} s")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(a) -> int:
    store, cfg, _ = _load_model(a.checkpoint)
    train, val = _load_splits(a.scenes)
    picked = {"train": train, "val": val, "all": train + val}[a.split]
    if not picked:
        raise UsageError(f"no scenes in split '{a.split}' under {a.scenes}")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "run": {
                "command": "eval",
                "checkpoint": str(a.checkpoint),
                "scenes": str(a.scenes),
                "split": a.split,
                "seed": a.seed,
                "out": str(out),
            },
        },
        out / "resolved_config.json",
    )
    metrics = pl.evaluate(store, cfg, picked, a.seed, collect_figures=True)
    figure_data = metrics.pop("figure_data", None)
    _write_metric_csv(metrics, out / "eval.csv")
    if figure_data is not None:
        figures.eval_report_figures(figure_data, str(out))
    print("metric,value")
    print("\n".join(_metric_rows(metrics)))
    return 0


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def _case_splat_render(seed: int):
    """Depth loss through the range renderer: 3 primitives, 16 rays."""
    rng = np.random.default_rng(seed)
    mu = ad.Tensor(
        rng.uniform(-0.25, 0.25, (3, 3)) + np.array([0.0, 0.0, 0.65]), requires_grad=True
    )
    log_scales = ad.Tensor(rng.uniform(-2.6, -1.8, (3, 3)), requires_grad=True)
    alpha = ad.Tensor(rng.uniform(0.35, 0.9, (3, 1)), requires_grad=True)
    dirs = rng.standard_normal((16, 3)) * np.array([0.22, 0.22, 0.04]) + np.array(
        [0.0, 0.0, 1.0]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = rng.uniform(0.45, 0.95, 16)

    def fn():
        return rd.silog_loss(rd.render_range(mu, log_scales, alpha, dirs).rendered, target)

    return fn, {"mu": mu, "sigma": log_scales, "alpha": alpha}


def _case_tokenizer(seed: int):
    """Rendered-depth + pooled-token loss through the full tokenizer.

    The render term uses three primitives picked at well-separated camera
    distances: the compositing order is a data-dependent sort, so a finite
    difference across a near-tie would step over a genuine kink.  Separated
    picks keep the probe inside one smooth region.
    """
    sample = scenes.generate(scenes.sample_spec(seed))
    cfg = tk.TokenizerConfig()
    store = ad.ParamStore(seed)
    tk.build_params(store, cfg)
    rng = np.random.default_rng(seed + 1)
    dirs = rng.standard_normal((16, 3)) * np.array([0.22, 0.22, 0.04]) + np.array(
        [0.0, 0.0, 1.0]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = rng.uniform(0.45, 0.95, 16)
    depths = sample.depth[None]
    feats = sample.features[None]

    with ad.no_grad():
        base = tk.tokenize(store, cfg, depths, feats, sample.spec.intrinsics)
    dist = np.linalg.norm(base.mu.data[0], axis=1)
    ranked = np.argsort(dist)
    picks = [int(ranked[len(ranked) // 10]), int(ranked[len(ranked) // 2]), int(ranked[-2])]
    gaps = np.diff(np.sort(dist[picks]))
    if gaps.min() < 1e-3:
        raise RuntimeError(f"degenerate primitive separation {gaps.min():.2e}")

    def rows(t3, idxs):
        parts = [ad.slice_axis(t3, 1, i, i + 1) for i in idxs]
        cat = ad.concat(parts, axis=1)
        return ad.reshape(cat, (len(idxs), cat.shape[2]))

    def fn():
        tokens = tk.tokenize(store, cfg, depths, feats, sample.spec.intrinsics)
        mu = rows(tokens.mu, picks)
        sig = rows(tokens.log_scales, picks)
        alp = rows(tokens.alpha, picks)
        fit = rd.silog_loss(rd.render_range(mu, sig, alp, dirs).rendered, target)
        return fit + ad.mean_(tokens.pooled * tokens.pooled)

    return fn, {
        "f_theta_out_bias": store["gst.f_theta.b2"],
        "opacity_out_bias": store["gst.f_exp.b1"],
    }


def _case_reasoner(seed: int):
    """Teacher-forced chain loss on a reduced-width decoder."""
    cfg = rs.ReasonerConfig(
        d_model=16,
        n_layers=2,
        n_heads=2,
        ffn_hidden=32,
        token_dim=8,
        n_scene=4,
        n_ctx=8,
        feature_dim=6,
        max_seq=64,
        psi_layers=1,
    )
    store = ad.ParamStore(seed)
    rs.build_params(store, cfg)
    rng = np.random.default_rng(seed + 1)
    b = 2
    tokens = tk.SceneTokens(
        mu=ad.constant(rng.uniform(-0.2, 0.2, (b, cfg.n_ctx, 3))),
        log_scales=ad.constant(np.full((b, cfg.n_ctx, 3), -2.0)),
        alpha=ad.constant(np.full((b, cfg.n_ctx, 1), 0.5)),
        patch_tokens=ad.constant(rng.standard_normal((b, cfg.n_ctx, cfg.token_dim))),
        pooled=ad.constant(rng.standard_normal((b, cfg.n_scene, cfg.token_dim))),
        pool_rows=None,
        anchors=np.zeros((b, cfg.n_ctx, 3)),
    )
    feats = rng.standard_normal((b, cfg.n_ctx, cfg.feature_dim))
    verbs = rng.integers(0, vocab.N_VERBS, b)
    classes = rng.integers(0, vocab.N_CLASSES, b)
    proprio = rng.uniform(-0.3, 0.6, (b, 7))
    flags = vocab.ChainFlags()
    streams = np.stack(
        [
            vocab.encode_chain(scenes.annotate(scenes.sample_spec(seed + i)), flags)
            for i in range(b)
        ]
    )

    def fn():
        return rs.chain_loss(
            store, cfg, tokens, feats, verbs, classes, proprio, streams, flags
        ).loss

    return fn, {"head_bias": store["vlm.head.b"]}


def _case_expert(seed: int):
    """Flow-matching regression on a reduced-width action decoder."""
    cfg = xp.ExpertConfig(
        d_model=16,
        n_layers=2,
        n_heads=2,
        n_experts=4,
        top_k=2,
        expert_hidden=32,
        d_cond=12,
        time_freqs=4,
    )
    store = ad.ParamStore(seed)
    xp.build_params(store, cfg)
    rng = np.random.default_rng(seed + 1)
    b = 3
    a1 = rng.standard_normal((b, cfg.flat_dim)) * 0.02
    a0 = rng.standard_normal((b, cfg.flat_dim))
    t = rng.random(b)
    proprio = rng.uniform(-0.3, 0.6, (b, cfg.proprio_dim))
    h_ctx = ad.constant(rng.standard_normal((b, 5, cfg.d_cond)))
    h_plan = ad.constant(rng.standard_normal((b, 4, cfg.d_cond)))

    def fn():
        return xp.flow_loss(store, cfg, a1, a0, t, proprio, h_ctx, h_plan)

    return fn, {
        "readout_w": store["exp.out.w"],
        "readout_b": store["exp.out.b"],
        "router_b": store["exp.layer0.router.b"],
    }


GRAD_CHECK_CASES = {
    "splat_render": _case_splat_render,
    "tokenizer": _case_tokenizer,
    "reasoner": _case_reasoner,
    "expert": _case_expert,
}


def cmd_grad_check(a) -> int:
    if a.module not in GRAD_CHECK_CASES:
        raise UsageError(
            f"unknown module {a.module!r}; choose from {sorted(GRAD_CHECK_CASES)}"
        )
    if a.tol <= 0:
        raise UsageError("--tol must be positive")
    fn, params = GRAD_CHECK_CASES[a.module](a.seed)
    report = ad.grad_check(fn, params, tol=a.tol)
    lines = ["module,param,n_elements,max_rel_err,tol,status"]
    failed = []
    for name, entry in report.items():
        status = "pass" if entry["ok"] else "fail"
        if not entry["ok"]:
            failed.append(name)
        lines.append(
            f"{a.module},{name},{params[name].data.size},"
            f"{entry['max_rel_err']:.3e},{a.tol:.1e},{status}"
        )
    table = "\n".join(lines)
    print(table)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.csv").write_text(table + "\n")
        _write_snapshot(
            {
                "run": {
                    "command": "grad-check",
                    "module": a.module,
                    "tol": a.tol,
                    "seed": a.seed,
                    "out": str(out),
                }
            },
            out / "resolved_config.json",
        )
    if failed:
        print(
            f"error: runtime: gradient check failed for {','.join(failed)}",
            file=sys.stderr,
        )
        return 1
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(a) -> int:
    grid_path = _require(a.grid, "grid file")
    names = [
        ln.strip()
        for ln in grid_path.read_text().splitlines()
        if ln.strip() and not ln.strip().startswith("#")
    ]
    if not names:
        raise UsageError(f"grid file {grid_path} lists no cells")
    unknown = [n for n in names if n not in tr.ABLATION_CELLS]
    if unknown:
        raise UsageError(
            f"unknown ablation cells {unknown}; choose from {sorted(tr.ABLATION_CELLS)}"
        )
    if len(set(names)) != len(names):
        raise UsageError(f"grid file {grid_path} repeats a cell")

    cfg, plans, _ = load_run_config(a.config, tr.ablation_plans)
    train, val = _load_splits(a.scenes)
    if not train or not val:
        raise UsageError(f"ablation needs both train and val scenes under {a.scenes}")

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "stages": [tr.plan_to_dict(p) for p in plans],
            "run": {
                "command": "ablate",
                "grid": names,
                "scenes": str(a.scenes),
                "seed": a.seed,
                "out": str(out),
            },
        },
        out / "resolved_config.json",
    )

    rows = tr.ablation_matrix(
        names,
        cfg,
        plans,
        train,
        val,
        out,
        a.seed,
        progress=_progress if _verbose() else None,
    )
    keys = ["cell"] + sorted(k for k in rows[0] if k != "cell")
    lines = [",".join(keys)]
    for row in rows:
        cells = []
        for k in keys:
            v = row[k]
            cells.append(f"{v:.12e}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    table = "\n".join(lines)
    (out / "ablation.csv").write_text(table + "\n")
    figures.ablation_bars(rows, str(out / "ablation.png"))
    print(table)
    return 0


# ---------------------------------------------------------------------------
# export-gaussians
# ---------------------------------------------------------------------------


def cmd_export_gaussians(a) -> int:
    store, cfg, _ = _load_model(a.checkpoint)
    sample, scene_path, _ = _load_indexed_scene(a.scenes, a.index)
    _, tokens = _single_scene_tokens(store, cfg, sample)
    out = Path(a.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    tk.export_gaussians(
        out, tokens.mu.data[0], tokens.log_scales.data[0], tokens.alpha.data[0]
    )
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "run": {
                "command": "export-gaussians",
                "checkpoint": str(a.checkpoint),
                "scenes": str(a.scenes),
                "index": a.index,
                "scene_file": scene_path.name,
                "out": str(out),
            },
        },
        out.with_name(out.name + ".config.json"),
    )
    print(f"wrote {tokens.mu.data.shape[1]} gaussians to {out}")
    return 0


# ---------------------------------------------------------------------------
# decode-chain
# ---------------------------------------------------------------------------


def _chain_lines(sample, chain, flags, metrics) -> list[str]:
    spec = sample.spec
    cid = spec.objects[spec.target_index].class_id
    lines = [
        f"verb: {vocab.VERBS[spec.verb_id]}",
        f"class: {cid} ({scenes.SHAPES[cid % len(scenes.SHAPES)]})",
    ]
    if flags.c1:
        lines.append("target centroid: ({:.3f}, {:.3f}, {:.3f}) m".format(*chain.centroid))
    if flags.c2:
        lines.append("grasp offset: ({:.3f}, {:.3f}, {:.3f}) m".format(*chain.grasp_offset))
        lines.append("grasp normal: ({:.3f}, {:.3f}, {:.3f})".format(*chain.grasp_normal))
    if flags.c3:
        lines.append(f"clearance vertical: {chain.clearances[0]:.3f} m")
        lines.append(f"clearance lateral: {chain.clearances[1]:.3f} m")
    if flags.c4:
        for k in range(chain.waypoint_deltas.shape[0]):
            dp = chain.waypoint_deltas[k, :3]
            dr = chain.waypoint_deltas[k, 3:]
            lines.append(
                f"waypoint {k + 1}: dpos ({dp[0]:.3f}, {dp[1]:.3f}, {dp[2]:.3f}) m, "
                f"drot ({dr[0]:.3f}, {dr[1]:.3f}, {dr[2]:.3f}) rad"
            )
    if not math.isnan(metrics["token_acc"]):
        lines.append(f"token accuracy: {metrics['token_acc']:.4f}")
    if flags.c1 and not math.isnan(metrics["centroid_err_m"]):
        lines.append(f"centroid error: {metrics['centroid_err_m']:.4f} m")
    return lines


def cmd_decode_chain(a) -> int:
    store, cfg, _ = _load_model(a.checkpoint)
    sample, scene_path, _ = _load_indexed_scene(a.scenes, a.index)
    flags = cfg.chain_flags
    batch, tokens = _single_scene_tokens(store, cfg, sample)
    with ad.no_grad():
        streams, _, _ = rs.decode_greedy(
            store,
            cfg.reasoner,
            tokens,
            batch.features,
            batch.verb_ids,
            batch.class_ids,
            batch.proprio,
            flags,
        )
    metrics = rs.chain_metrics(streams[0], batch.streams[0], flags)
    chain = vocab.decode_chain_tokens(streams[0], flags)
    text = "\n".join([f"scene: {scene_path.name}"] + _chain_lines(sample, chain, flags, metrics))
    print(text)
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "chain.txt").write_text(text + "\n")
        _write_snapshot(
            {
                "pipeline": cfg.to_dict(),
                "run": {
                    "command": "decode-chain",
                    "checkpoint": str(a.checkpoint),
                    "scenes": str(a.scenes),
                    "index": a.index,
                    "out": str(out),
                },
            },
            out / "resolved_config.json",
        )
    return 0


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------


def cmd_rollout(a) -> int:
    store, cfg, _ = _load_model(a.checkpoint)
    sample, scene_path, _ = _load_indexed_scene(a.scenes, a.index)
    flags = cfg.chain_flags
    batch, tokens = _single_scene_tokens(store, cfg, sample)
    rng = np.random.default_rng(a.seed)
    with ad.no_grad():
        _, h_prefix, h_act = rs.decode_greedy(
            store,
            cfg.reasoner,
            tokens,
            batch.features,
            batch.verb_ids,
            batch.class_ids,
            batch.proprio,
            flags,
        )
        chunks = [
            xp.sample_actions(store, cfg.expert, batch.proprio, h_prefix, h_act, rng)[0]
            for _ in range(3)
        ]
    chunk = chunks[0]
    # blend the overlapping predictions for the current step at staggered ages
    ensemble = xp.temporal_ensemble(np.stack(chunks), np.arange(3.0))
    pred_pos = pl.rollout_positions(chunk)
    demo_pos = pl.rollout_positions(sample.actions)
    step_err = np.linalg.norm(pred_pos - demo_pos, axis=1)
    err = float(step_err.mean())

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    header = "step,dx,dy,dz,rx,ry,rz,gripper,pos_err_m"
    rows = [header]
    for i, act in enumerate(chunk):
        vals = ",".join(f"{v:.12e}" for v in act)
        rows.append(f"{i},{vals},{step_err[i]:.12e}")
    (out / "actions.csv").write_text("\n".join(rows) + "\n")
    figures.rollout_trajectory(demo_pos, pred_pos, str(out / "rollout.png"))
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "run": {
                "command": "rollout",
                "checkpoint": str(a.checkpoint),
                "scenes": str(a.scenes),
                "index": a.index,
                "scene_file": scene_path.name,
                "seed": a.seed,
                "out": str(out),
            },
        },
        out / "resolved_config.json",
    )
    print("metric,value")
    print(f"rollout_err_m,{err:.12e}")
    for name, v in zip(("dx", "dy", "dz", "rx", "ry", "rz", "gripper"), ensemble):
        print(f"ensemble_{name},{v:.12e}")
    return 0


# ---------------------------------------------------------------------------
# render-depth
# ---------------------------------------------------------------------------


def cmd_render_depth(a) -> int:
    store, cfg, _ = _load_model(a.checkpoint)
    sample, scene_path, _ = _load_indexed_scene(a.scenes, a.index)
    _, tokens = _single_scene_tokens(store, cfg, sample)
    loss, pred_z = pl.full_depth_loss(
        store, cfg, tokens, 0, sample.depth, sample.spec.intrinsics
    )
    diff = pred_z - sample.depth
    metrics = {
        "silog": loss,
        "absrel": float(np.mean(np.abs(diff) / np.maximum(sample.depth, 1e-12))),
        "mae_m": float(np.mean(np.abs(diff))),
        "rmse_m": float(np.sqrt(np.mean(diff * diff))),
    }

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "depth_pred.f64").write_bytes(pred_z.astype("<f8").tobytes())
    (out / "depth_true.f64").write_bytes(sample.depth.astype("<f8").tobytes())
    figures.depth_comparison(sample.depth, pred_z, str(out / "depth.png"))
    _write_metric_csv(metrics, out / "depth.csv")
    _write_snapshot(
        {
            "pipeline": cfg.to_dict(),
            "run": {
                "command": "render-depth",
                "checkpoint": str(a.checkpoint),
                "scenes": str(a.scenes),
                "index": a.index,
                "scene_file": scene_path.name,
                "out": str(out),
            },
        },
        out / "resolved_config.json",
    )
    print("metric,value")
    print("\n".join(_metric_rows(metrics)))
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(
        prog="splatact",
        description=(
            "Gaussian scene tokens, chain-of-thought decoding, and a "
            "flow-matching action head over synthetic tabletop scenes."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(p):
        p.add_argument(
            "--seed",
            type=int,
            default=DEFAULT_SEED,
            help=f"base seed for all stochastic paths (default {DEFAULT_SEED})",
        )

    p = sub.add_parser("gen-scenes", help="write a synthetic scene dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, default=0.0)
    seeded(p)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="run the staged training protocol")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON run config (see resolved_config.json)")
    p.add_argument("--skip-s1", action="store_true")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    seeded(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation metrics + report figures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--module", required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None, help="also write the table to this directory")
    seeded(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("ablate", help="train and score a grid of model variants")
    p.add_argument("--grid", required=True, help="text file, one cell name per line")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    seeded(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-gaussians", help="write one scene's primitives as PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_gaussians)

    p = sub.add_parser("decode-chain", help="greedy-decode the reasoning chain for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", default=None, help="also write chain.txt to this directory")
    p.set_defaults(func=cmd_decode_chain)

    p = sub.add_parser("rollout", help="sample an action chunk and compare to the demo")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    seeded(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("render-depth", help="full-resolution depth render for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenes", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_depth)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except MissingPathError as err:
        print(f"error: path: {_one_line(err)}", file=sys.stderr)
        return 2
    except UsageError as err:
        print(f"error: usage: {_one_line(err)}", file=sys.stderr)
        return 2
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as err:  # noqa: BLE001  (operator surface: report, don't crash)
        print(f"error: runtime: {_one_line(err)}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
