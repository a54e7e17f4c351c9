"""End-to-end assembly: scenes -> Gaussian tokens -> plan tokens -> actions.

This module owns everything between raw scene samples and scalar loss terms:
batch collation, the per-stage conditioning pathway (detached or coupled),
and the validation metrics the trainer and CLI report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import expert as xp
from . import reasoner as rs
from . import renderer as rd
from . import tokenizer as tk
from . import vocab
from .autodiff import ParamStore, ShapeError, Tensor
from .camera import IMAGE_SIZE, Intrinsics
from .scenes import SceneSample

PARAM_GROUPS = ("gst", "reasoner", "expert")


@dataclass(frozen=True)
class PipelineConfig:
    """Cross-module configuration plus the loss mixing weights."""

    tokenizer: tk.TokenizerConfig = field(default_factory=tk.TokenizerConfig)
    reasoner: rs.ReasonerConfig = field(default_factory=rs.ReasonerConfig)
    expert: xp.ExpertConfig = field(default_factory=xp.ExpertConfig)
    chain_c1: bool = True
    chain_c2: bool = True
    chain_c3: bool = True
    chain_c4: bool = True
    train_rays: int = 256
    lambda_cot: float = 0.5
    lambda_depth: float = 0.1

    def __post_init__(self):
        t, r, e = self.tokenizer, self.reasoner, self.expert
        if r.token_dim != t.token_dim:
            raise ValueError("reasoner token_dim must match tokenizer token_dim")
        if r.feature_dim != t.feature_dim:
            raise ValueError("reasoner feature_dim must match tokenizer feature_dim")
        if r.n_scene != t.n_tokens or r.n_ctx != t.n_patches:
            raise ValueError("reasoner token counts must match tokenizer outputs")
        if e.d_cond != r.d_model:
            raise ValueError("expert conditioning width must match reasoner d_model")
        if self.lambda_cot < 0 or self.lambda_depth < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.train_rays < 1:
            raise ValueError("train_rays must be positive")

    @property
    def chain_flags(self) -> vocab.ChainFlags:
        return vocab.ChainFlags(self.chain_c1, self.chain_c2, self.chain_c3, self.chain_c4)

    def to_dict(self) -> dict:
        return {
            "tokenizer": self.tokenizer.to_dict(),
            "reasoner": self.reasoner.to_dict(),
            "expert": self.expert.to_dict(),
            "chain_c1": self.chain_c1,
            "chain_c2": self.chain_c2,
            "chain_c3": self.chain_c3,
            "chain_c4": self.chain_c4,
            "train_rays": self.train_rays,
            "lambda_cot": self.lambda_cot,
            "lambda_depth": self.lambda_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        return cls(
            tokenizer=tk.TokenizerConfig.from_dict(d.pop("tokenizer", {})),
            reasoner=rs.ReasonerConfig.from_dict(d.pop("reasoner", {})),
            expert=xp.ExpertConfig.from_dict(d.pop("expert", {})),
            **d,
        )


def build_params(store: ParamStore, cfg: PipelineConfig) -> None:
    tk.build_params(store, cfg.tokenizer)
    rs.build_params(store, cfg.reasoner)
    xp.build_params(store, cfg.expert)


def param_group(name: str) -> str:
    """Map a parameter name to its named trainable group."""
    if name.startswith("gst."):
        return "gst"
    if name.startswith(("vlm.", "psi.")):
        return "reasoner"
    if name.startswith("exp."):
        return "expert"
    raise KeyError(f"parameter {name!r} belongs to no known group")


def group_names(store: ParamStore, group: str) -> list[str]:
    if group not in PARAM_GROUPS:
        raise KeyError(f"unknown parameter group {group!r}")
    return sorted(n for n in store.names() if param_group(n) == group)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    depths: np.ndarray     # (B, 224, 224)
    features: np.ndarray   # (B, 256, feature_dim)
    verb_ids: np.ndarray   # (B,)
    class_ids: np.ndarray  # (B,)
    proprio: np.ndarray    # (B, 7)
    streams: np.ndarray    # (B, T) chain token ids for the collation flags
    actions: np.ndarray    # (B, horizon * action_dim)
    intr: Intrinsics

    @property
    def size(self) -> int:
        return self.depths.shape[0]


def collate(samples: list[SceneSample], flags: vocab.ChainFlags) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    intr = samples[0].spec.intrinsics
    for s in samples[1:]:
        if s.spec.intrinsics != intr:
            raise ValueError("all scenes in a batch must share camera intrinsics")
    return Batch(
        depths=np.stack([s.depth for s in samples]),
        features=np.stack([s.features for s in samples]),
        verb_ids=np.array([s.spec.verb_id for s in samples], dtype=np.int64),
        class_ids=np.array(
            [s.spec.objects[s.spec.target_index].class_id for s in samples], dtype=np.int64
        ),
        proprio=np.stack([s.proprio for s in samples]),
        streams=np.stack([vocab.encode_chain(s.chain, flags) for s in samples]),
        actions=np.stack([s.actions.reshape(-1) for s in samples]),
        intr=intr,
    )


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def scene_tokens(store: ParamStore, cfg: PipelineConfig, batch: Batch) -> tk.SceneTokens:
    return tk.tokenize(store, cfg.tokenizer, batch.depths, batch.features, batch.intr)


def depth_term(
    store: ParamStore,
    cfg: PipelineConfig,
    tokens: tk.SceneTokens,
    batch: Batch,
    rng: np.random.Generator,
) -> Tensor:
    """Mean per-scene depth loss on a random pixel subset (one draw per scene)."""
    n_p = tokens.mu.data.shape[1]
    total = None
    for i in range(batch.size):
        idx = rd.sample_pixel_indices(rng, cfg.train_rays)
        dirs, target = rd.ray_bundle(batch.depths[i], batch.intr, idx)
        mu = ad.reshape(ad.slice_axis(tokens.mu, 0, i, i + 1), (n_p, 3))
        sig = ad.reshape(ad.slice_axis(tokens.log_scales, 0, i, i + 1), (n_p, 3))
        alp = ad.reshape(ad.slice_axis(tokens.alpha, 0, i, i + 1), (n_p, 1))
        res = rd.render_range(mu, sig, alp, dirs)
        loss = rd.silog_loss(res.rendered, target)
        total = loss if total is None else total + loss
    return ad.scale(total, 1.0 / batch.size)


def chain_and_conditioning(
    store: ParamStore,
    cfg: PipelineConfig,
    tokens: tk.SceneTokens,
    batch: Batch,
    flags: vocab.ChainFlags,
    detach: bool,
) -> tuple[Tensor | None, Tensor, Tensor]:
    """Teacher-forced reasoner pass.

    Returns (chain loss or None, prefix hiddens, act hiddens).  With
    ``detach`` the pass runs off-tape: the conditioning carries no gradients
    and the chain loss is dropped, which is how the first stage keeps the
    reasoner frozen while grounding tokens and pretraining the action head.
    """
    if detach:
        with ad.no_grad():
            out = rs.chain_loss(
                store, cfg.reasoner, tokens, batch.features,
                batch.verb_ids, batch.class_ids, batch.proprio, batch.streams, flags,
            )
        return None, out.h_prefix, out.h_act
    out = rs.chain_loss(
        store, cfg.reasoner, tokens, batch.features,
        batch.verb_ids, batch.class_ids, batch.proprio, batch.streams, flags,
    )
    return out.loss, out.h_prefix, out.h_act


def flow_term(
    store: ParamStore,
    cfg: PipelineConfig,
    batch: Batch,
    h_ctx: Tensor,
    h_plan: Tensor,
    rng: np.random.Generator,
) -> Tensor:
    """Straight-path velocity regression on the demo chunks (noise, then times)."""
    b = batch.size
    a0 = rng.standard_normal((b, cfg.expert.flat_dim))
    t = rng.random(b)
    return xp.flow_loss(
        store, cfg.expert, batch.actions, a0, t, batch.proprio, h_ctx, h_plan
    )


def router_utilization(
    store: ParamStore, cfg: PipelineConfig, samples: list, seed: int
) -> np.ndarray:
    """Fraction of routing slots each expert receives on one probe batch.

    Soft diagnostic: a healthy mixture uses every expert at least once, but
    nothing here enforces that — callers log the vector and move on.
    """
    rng = np.random.default_rng([int(seed), 977])
    batch = collate(samples, cfg.chain_flags)
    trace = xp.RouterTrace()
    with ad.no_grad():
        tokens = scene_tokens(store, cfg, batch)
        _, h_ctx, h_plan = chain_and_conditioning(
            store, cfg, tokens, batch, cfg.chain_flags, detach=True
        )
        xp.velocity(
            store,
            cfg.expert,
            rng.standard_normal((batch.size, cfg.expert.flat_dim)),
            rng.random(batch.size),
            batch.proprio,
            h_ctx,
            h_plan,
            trace=trace,
        )
    counts = np.zeros(cfg.expert.n_experts)
    for sel in trace.selected:
        ids, n = np.unique(sel, return_counts=True)
        counts[ids] += n
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def full_depth_loss(
    store: ParamStore,
    cfg: PipelineConfig,
    tokens: tk.SceneTokens,
    scene_idx: int,
    depth_map: np.ndarray,
    intr: Intrinsics,
    chunk: int = 8192,
) -> tuple[float, np.ndarray]:
    """Full-resolution depth loss for one scene; also returns the predicted map.

    The prediction is rendered range converted back to z-depth so it is
    directly comparable with (and plotted against) the ground-truth map.
    """
    with ad.no_grad():
        mu = ad.constant(tokens.mu.data[scene_idx])
        sig = ad.constant(tokens.log_scales.data[scene_idx])
        alp = ad.constant(tokens.alpha.data[scene_idx])
        dirs, target = rd.ray_bundle(depth_map, intr)
        pred = np.empty(dirs.shape[0])
        for lo in range(0, dirs.shape[0], chunk):
            hi = min(lo + chunk, dirs.shape[0])
            pred[lo:hi] = rd.render_range(mu, sig, alp, dirs[lo:hi]).rendered.data
        loss = float(rd.silog_loss(ad.constant(pred), target).data)
    pred_z = (pred * dirs[:, 2]).reshape(IMAGE_SIZE, IMAGE_SIZE)
    return loss, pred_z


def rollout_positions(actions: np.ndarray) -> np.ndarray:
    """Cumulative gripper positions (relative to start) from per-step deltas."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] < 3:
        raise ShapeError(f"need (steps, >=3) actions, got {actions.shape}")
    return np.cumsum(actions[:, :3], axis=0)


def evaluate(
    store: ParamStore,
    cfg: PipelineConfig,
    samples: list[SceneSample],
    seed: int,
    *,
    with_depth: bool = True,
    with_chain: bool = True,
    collect_figures: bool = False,
) -> dict:
    """Validation metrics: depth fit, decoded-chain quality, rollout error.

    Everything is deterministic in (parameters, samples, seed).  Chain
    decoding and rollout can be skipped (``with_chain=False``) when only the
    geometric fit is of interest, e.g. right after the grounding stage.
    """
    if not samples:
        raise ValueError("cannot evaluate on an empty sample list")
    flags = cfg.chain_flags
    batch = collate(samples, flags)
    with ad.no_grad():
        tokens = scene_tokens(store, cfg, batch)
        if with_chain:
            streams, h_prefix, h_act = rs.decode_greedy(
                store, cfg.reasoner, tokens, batch.features,
                batch.verb_ids, batch.class_ids, batch.proprio, flags,
            )
            rng = np.random.default_rng([seed, 211])
            chunks = xp.sample_actions(
                store, cfg.expert, batch.proprio, h_prefix, h_act, rng
            )

    per_scene = []
    fig_data = {}
    depth_losses = []
    for i, s in enumerate(samples):
        if with_chain:
            m = rs.chain_metrics(streams[i], batch.streams[i], flags)
            demo = s.actions
            pred = chunks[i]
            pos_err = np.linalg.norm(
                rollout_positions(pred) - rollout_positions(demo), axis=1
            )
            m["rollout_err_m"] = float(pos_err.mean())
            if collect_figures and i == 0:
                fig_data["rollout_demo"] = rollout_positions(demo)
                fig_data["rollout_pred"] = rollout_positions(pred)
        else:
            m = {
                "token_acc": float("nan"),
                "centroid_err_m": float("nan"),
                "contact_err_m": float("nan"),
                "waypoint_err_m": float("nan"),
                "rollout_err_m": float("nan"),
            }
        if with_depth:
            loss, pred_z = full_depth_loss(
                store, cfg, tokens, i, s.depth, batch.intr
            )
            depth_losses.append(loss)
            if collect_figures and i == 0:
                fig_data["depth_true"] = s.depth.copy()
                fig_data["depth_pred"] = pred_z
        per_scene.append(m)

    def _agg(key, fn):
        vals = np.array([m[key] for m in per_scene])
        return float(fn(vals)) if np.isfinite(vals).all() else float("nan")

    out = {
        "n_scenes": len(samples),
        "token_acc": _agg("token_acc", np.mean),
        "centroid_err_m": _agg("centroid_err_m", np.median),
        "contact_err_m": _agg("contact_err_m", np.median),
        "waypoint_err_m": _agg("waypoint_err_m", np.median),
        "rollout_err_m": _agg("rollout_err_m", np.mean),
        "depth_loss": float(np.mean(depth_losses)) if depth_losses else float("nan"),
    }
    if collect_figures:
        out["figure_data"] = fig_data
    return out


def composite_metric(metrics: dict) -> float:
    """Single ablation-comparison number; lower is better.

    Depth and rollout errors are scaled so each active term has comparable
    weight near the trained operating point; a chain-free model scores zero
    accuracy rather than dropping the term, since it answers no plan queries.
    """
    acc = metrics["token_acc"]
    if not np.isfinite(acc):
        acc = 0.0
    return float(
        10.0 * metrics["depth_loss"] + (1.0 - acc) + 10.0 * metrics["rollout_err_m"]
    )
