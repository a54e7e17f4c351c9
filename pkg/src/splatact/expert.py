"""Flow-matching action expert: denoises a 10-step action chunk.

The expert is a small non-causal transformer over 12 tokens: one proprio
token, ten action tokens (one per chunk step), and one flow-time token.
Each block runs self-attention, then two cross-attentions added in a single
residual -- one into the reasoner's conditioning prefix, one into its
action-slot hidden states (the motor handoff) -- then a mixture-of-experts
feed-forward where every token picks its top-2 of 8 experts and the two gate
weights are renormalized to sum to one.

Training regresses the straight-path velocity: with a clean chunk a1, noise
a0 ~ N(0, I), and t ~ U(0,1), the input a_t = (1-t) a0 + t a1 and the target
velocity is a1 - a0 (mean-squared error over all 70 dims).  Sampling
integrates the learned field with 10 fixed Euler steps from pure noise; the
gripper channel is clamped to [0, 1] only at decode time.

The flow runs in per-channel units (``ACTION_SCALE``): scripted translation
deltas are millimetres-to-centimetres per step while the gripper command is
binary, so chunks are divided by the channel scales before matching against
unit noise and multiplied back after integration.  Without this the O(1)
channels dominate the regression and the position channels inherit an error
floor far above their own magnitude.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor

EULER_STEPS = 10

# Per-channel units for the 7-dim layout (dx dy dz, rotation-vector delta,
# gripper).  Chosen near the per-channel spread of the scripted demos, rounded
# so they stay stable across dataset regenerations.
ACTION_SCALE = np.array([0.01, 0.01, 0.03, 0.05, 0.05, 0.05, 1.0])


def action_scale(cfg: "ExpertConfig") -> np.ndarray:
    """Per-channel units used by the flow; ones for non-standard layouts."""
    if cfg.action_dim == ACTION_SCALE.size:
        return ACTION_SCALE
    return np.ones(cfg.action_dim)


@dataclass(frozen=True)
class ExpertConfig:
    d_model: int = 128
    n_layers: int = 6
    n_heads: int = 4
    n_experts: int = 8
    top_k: int = 2
    expert_hidden: int = 512
    action_dim: int = 7
    horizon: int = 10
    proprio_dim: int = 7
    d_cond: int = 192
    time_freqs: int = 8
    dense_ffn: bool = False
    condition_on_plan: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("head count must divide the model width")
        if not (0 < self.top_k <= self.n_experts):
            raise ValueError("top_k must lie in [1, n_experts]")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_tokens(self) -> int:
        return self.horizon + 2

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.action_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertConfig":
        return cls(**d)


def build_params(store: ParamStore, cfg: ExpertConfig) -> None:
    d = cfg.d_model
    store.param("exp.prop_in.w", (cfg.proprio_dim, d))
    store.param("exp.prop_in.b", (d,), init="zeros")
    store.param("exp.act_in.w", (cfg.action_dim, d))
    store.param("exp.act_in.b", (d,), init="zeros")
    store.param("exp.step_emb", (cfg.horizon, d), init="normal")
    store.param("exp.time.w", (2 * cfg.time_freqs, d))
    store.param("exp.time.b", (d,), init="zeros")
    for i in range(cfg.n_layers):
        p = f"exp.layer{i}."
        for ln in ("ln1", "ln_ca", "ln2"):
            store.param(p + ln + ".g", (d,), init="ones")
            store.param(p + ln + ".b", (d,), init="zeros")
        for w in ("wq", "wk", "wv", "wo"):
            store.param(p + "attn." + w, (d, d))
        store.param(p + "attn.bo", (d,), init="zeros")
        for stream in ("ca_ctx", "ca_plan"):
            store.param(p + stream + ".wq", (d, d))
            store.param(p + stream + ".wk", (cfg.d_cond, d))
            store.param(p + stream + ".wv", (cfg.d_cond, d))
            store.param(p + stream + ".wo", (d, d))
            store.param(p + stream + ".bo", (d,), init="zeros")
        if cfg.dense_ffn:
            store.param(p + "ffn.w1", (d, cfg.expert_hidden))
            store.param(p + "ffn.b1", (cfg.expert_hidden,), init="zeros")
            store.param(p + "ffn.w2", (cfg.expert_hidden, d))
            store.param(p + "ffn.b2", (d,), init="zeros")
        else:
            store.param(p + "router.w", (d, cfg.n_experts))
            store.param(p + "router.b", (cfg.n_experts,), init="zeros")
            for e in range(cfg.n_experts):
                store.param(p + f"expert{e}.w1", (d, cfg.expert_hidden))
                store.param(p + f"expert{e}.b1", (cfg.expert_hidden,), init="zeros")
                store.param(p + f"expert{e}.w2", (cfg.expert_hidden, d))
                store.param(p + f"expert{e}.b2", (d,), init="zeros")
    store.param("exp.ln_f.g", (d,), init="ones")
    store.param("exp.ln_f.b", (d,), init="zeros")
    store.param("exp.out.w", (d, cfg.action_dim))
    store.param("exp.out.b", (cfg.action_dim,), init="zeros")


@dataclass
class RouterTrace:
    """Per-layer routing decisions for inspection and structural tests."""

    selected: list = field(default_factory=list)  # (N, top_k) expert ids
    gates: list = field(default_factory=list)     # (N, top_k) renormalized weights


def _ln(store, prefix, x):
    return ad.layernorm_lastdim(x, store[prefix + ".g"], store[prefix + ".b"])


def _split(x, b, s, h, hd):
    return ad.transpose(ad.reshape(x, (b, s, h, hd)), (0, 2, 1, 3))


def _merge(x, b, s, d):
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, d))


def _mha(store, p, x, kv, b, s, cfg):
    h, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    n_kv = kv.data.shape[1]
    q = _split(x @ store[p + ".wq"], b, s, h, hd)
    k = _split(kv @ store[p + ".wk"], b, n_kv, h, hd)
    v = _split(kv @ store[p + ".wv"], b, n_kv, h, hd)
    att = ad.softmax_lastdim(ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1 / np.sqrt(hd))) @ v
    return _merge(att, b, s, d) @ store[p + ".wo"] + store[p + ".bo"]


def moe_ffn(
    store: ParamStore, prefix: str, x: Tensor, cfg: ExpertConfig, trace: RouterTrace | None = None
) -> Tensor:
    """Top-k mixture of expert MLPs with renormalized gates (flat rows)."""
    n = x.data.shape[0]
    logits = x @ store[prefix + "router.w"] + store[prefix + "router.b"]
    probs = ad.softmax_lastdim(logits)
    top = np.argsort(-probs.data, axis=1, kind="stable")[:, : cfg.top_k]
    raw = ad.take_index_lastdim(probs, top)                      # (N, k)
    gates = raw / ad.broadcast_to(ad.sum_(raw, axis=(1,), keepdims=True), raw.data.shape)
    if trace is not None:
        trace.selected.append(top.copy())
        trace.gates.append(gates.data.copy())
    out = ad.constant(np.zeros_like(x.data))
    for e in range(cfg.n_experts):
        rows, slots = np.nonzero(top == e)
        if rows.size == 0:
            continue
        xe = ad.gather_rows(x, rows)
        h = ad.silu(xe @ store[prefix + f"expert{e}.w1"] + store[prefix + f"expert{e}.b1"])
        h = h @ store[prefix + f"expert{e}.w2"] + store[prefix + f"expert{e}.b2"]
        ge = ad.reshape(ad.take_index_lastdim(ad.gather_rows(gates, rows), slots), (rows.size, 1))
        out = out + ad.scatter_rows_add(h * ge, rows, n)
    return out


def time_features(t: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal flow-time features at octave frequencies."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    w = 2.0 ** np.arange(n_freqs)
    ang = t * w[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def velocity(
    store: ParamStore,
    cfg: ExpertConfig,
    a_t: np.ndarray,
    t: np.ndarray,
    proprio: np.ndarray,
    h_ctx: Tensor,
    h_plan: Tensor,
    trace: RouterTrace | None = None,
) -> Tensor:
    """Predicted flow velocity for noisy chunks ``a_t`` at times ``t``."""
    a_t = np.asarray(a_t, dtype=np.float64)
    b = a_t.shape[0]
    if a_t.shape != (b, cfg.flat_dim):
        raise ShapeError(f"chunks must be (B, {cfg.flat_dim}), got {a_t.shape}")
    if h_ctx.data.shape[0] != b or h_plan.data.shape[0] != b:
        raise ShapeError("conditioning batch does not match the chunk batch")
    d = cfg.d_model

    prop = ad.constant(np.asarray(proprio, dtype=np.float64)) @ store["exp.prop_in.w"]
    prop = ad.reshape(prop + store["exp.prop_in.b"], (b, 1, d))
    steps = ad.constant(a_t.reshape(b, cfg.horizon, cfg.action_dim))
    acts = steps @ store["exp.act_in.w"] + store["exp.act_in.b"]
    acts = acts + ad.reshape(store["exp.step_emb"], (1, cfg.horizon, d))
    tf = ad.constant(time_features(t, cfg.time_freqs)) @ store["exp.time.w"]
    tf = ad.reshape(tf + store["exp.time.b"], (b, 1, d))
    x = ad.concat([prop, acts, tf], axis=1)
    s = cfg.n_tokens

    for i in range(cfg.n_layers):
        p = f"exp.layer{i}."
        u = _ln(store, p + "ln1", x)
        x = x + _mha(store, p + "attn", u, u, b, s, cfg)
        u = _ln(store, p + "ln_ca", x)
        add = _mha(store, p + "ca_ctx", u, h_ctx, b, s, cfg)
        if cfg.condition_on_plan:
            add = add + _mha(store, p + "ca_plan", u, h_plan, b, s, cfg)
        x = x + add
        u = _ln(store, p + "ln2", x)
        if cfg.dense_ffn:
            f = ad.silu(u @ store[p + "ffn.w1"] + store[p + "ffn.b1"])
            x = x + f @ store[p + "ffn.w2"] + store[p + "ffn.b2"]
        else:
            flat = ad.reshape(u, (b * s, d))
            x = x + ad.reshape(moe_ffn(store, p, flat, cfg, trace), (b, s, d))

    h = _ln(store, "exp.ln_f", x)
    acts_h = ad.slice_axis(h, 1, 1, 1 + cfg.horizon)
    v = acts_h @ store["exp.out.w"] + store["exp.out.b"]
    return ad.reshape(v, (b, cfg.flat_dim))


def flow_loss(
    store: ParamStore,
    cfg: ExpertConfig,
    a1: np.ndarray,
    a0: np.ndarray,
    t: np.ndarray,
    proprio: np.ndarray,
    h_ctx: Tensor,
    h_plan: Tensor,
) -> Tensor:
    """Mean-squared straight-path velocity regression.

    ``a1`` arrives in real units and is divided by the channel scales before
    interpolation; ``a0`` is already unit noise in normalized space.
    """
    a1 = np.asarray(a1, dtype=np.float64)
    a0 = np.asarray(a0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if a1.shape != a0.shape or a1.shape[1] != cfg.flat_dim:
        raise ShapeError(f"flow endpoints must be (B, {cfg.flat_dim})")
    a1 = a1 / np.tile(action_scale(cfg), cfg.horizon)
    a_t = (1.0 - t)[:, None] * a0 + t[:, None] * a1
    v = velocity(store, cfg, a_t, t, proprio, h_ctx, h_plan)
    diff = v - ad.constant(a1 - a0)
    return ad.mean_(diff * diff)


def integrate_euler(v_fn, a0: np.ndarray, n_steps: int = EULER_STEPS) -> np.ndarray:
    """Fixed-step Euler integration of da/dt = v(a, t) from t=0 to 1."""
    a = np.array(a0, dtype=np.float64, copy=True)
    dt = 1.0 / n_steps
    for k in range(n_steps):
        a = a + dt * np.asarray(v_fn(a, k * dt))
        if not np.isfinite(a).all():
            raise RuntimeError(f"flow integration produced non-finite values at step {k}")
    return a


def sample_actions(
    store: ParamStore,
    cfg: ExpertConfig,
    proprio: np.ndarray,
    h_ctx: Tensor,
    h_plan: Tensor,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw an action chunk (B, horizon, action_dim) by integrating the flow."""
    b = np.asarray(proprio).shape[0]
    a0 = rng.standard_normal((b, cfg.flat_dim))

    def v_fn(a, t):
        with ad.no_grad():
            return velocity(store, cfg, a, np.full(b, t), proprio, h_ctx, h_plan).data

    flat = integrate_euler(v_fn, a0)
    chunk = flat.reshape(b, cfg.horizon, cfg.action_dim)
    chunk[:, :, 6] = np.clip(chunk[:, :, 6], 0.0, 1.0)  # gripper decode clamp
    return chunk


def temporal_ensemble(
    chunks: np.ndarray, ages: np.ndarray, control_rate: float = 10.0
) -> np.ndarray:
    """Blend overlapping chunk predictions into one current-step action.

    A chunk issued ``age`` control steps ago covers the current step at row
    ``age``. Those rows are averaged with weights proportional to
    ``exp(-0.01 * control_rate * age)``, normalized over the chunks that
    still cover the step; stale chunks (age beyond the horizon) are ignored.
    """
    chunks = np.asarray(chunks, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    if chunks.ndim != 3 or chunks.shape[0] == 0:
        raise ShapeError("at least one chunk of shape (horizon, action_dim) required")
    if chunks.shape[0] != ages.shape[0]:
        raise ShapeError("one age per chunk required")
    rows = np.rint(ages).astype(int)
    live = (rows >= 0) & (rows < chunks.shape[1])
    if not live.any():
        raise ShapeError("no chunk covers the current step")
    w = np.exp(-0.01 * control_rate * ages[live])
    picked = chunks[np.flatnonzero(live), rows[live]]
    return (w / w.sum()) @ picked
