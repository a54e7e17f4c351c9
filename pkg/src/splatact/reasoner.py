"""Reasoning decoder: scene tokens + instruction -> quantized grasp plan.

A small pre-norm transformer decodes the thought chain autoregressively.
Its input sequence is a conditioning prefix followed by the chain tokens:

    [ projected scene tokens | verb | object class | proprio ] [ BOS c1 ... ]

Every block applies causal self-attention, cross-attention into the
tokenizer's per-patch tokens (or the pooled set, as an ablation), and a GELU
feed-forward.  A separate two-layer cross-attention projector refines the
pooled scene tokens against the raw semantic patch features before they
enter the prefix; its output projections start at zero so the refinement
begins as the identity.

Training supervises only the value-carrying chain positions with mean cross
entropy.  Inference decodes greedily under per-slot vocabulary masks, so the
structural grammar of the chain can never be violated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import vocab
from .autodiff import ParamStore, ShapeError, Tensor
from .tokenizer import SceneTokens
from .vocab import ChainFlags

NEG_INF = -1e30


@dataclass(frozen=True)
class ReasonerConfig:
    d_model: int = 192
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 384
    token_dim: int = 128
    n_scene: int = 128       # pooled scene tokens entering the prefix
    n_ctx: int = 256         # per-patch tokens offered to cross-attention
    feature_dim: int = 64
    proprio_dim: int = 7
    max_seq: int = 176
    psi_layers: int = 2
    attend_patch_tokens: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("head count must divide the model width")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def prefix_len(self) -> int:
        return self.n_scene + 3  # scene tokens + verb + class + proprio

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReasonerConfig":
        return cls(**d)


def build_params(store: ParamStore, cfg: ReasonerConfig) -> None:
    d = cfg.d_model
    store.param("vlm.tok_emb", (vocab.VOCAB_SIZE, d), init="normal")
    store.param("vlm.pos_emb", (cfg.max_seq, d), init="normal")
    store.param("vlm.verb_emb", (vocab.N_VERBS, d), init="normal")
    store.param("vlm.class_emb", (vocab.N_CLASSES, d), init="normal")
    store.param("vlm.proprio.w", (cfg.proprio_dim, d))
    store.param("vlm.proprio.b", (d,), init="zeros")
    for i in range(cfg.n_layers):
        p = f"vlm.layer{i}."
        for ln in ("ln1", "ln_ca", "ln2"):
            store.param(p + ln + ".g", (d,), init="ones")
            store.param(p + ln + ".b", (d,), init="zeros")
        for w in ("wq", "wk", "wv", "wo"):
            store.param(p + "attn." + w, (d, d))
        store.param(p + "attn.bo", (d,), init="zeros")
        store.param(p + "ca.wq", (d, d))
        store.param(p + "ca.wk", (cfg.token_dim, d))
        store.param(p + "ca.wv", (cfg.token_dim, d))
        store.param(p + "ca.wo", (d, d))
        store.param(p + "ca.bo", (d,), init="zeros")
        store.param(p + "ffn.w1", (d, cfg.ffn_hidden))
        store.param(p + "ffn.b1", (cfg.ffn_hidden,), init="zeros")
        store.param(p + "ffn.w2", (cfg.ffn_hidden, d))
        store.param(p + "ffn.b2", (d,), init="zeros")
    store.param("vlm.ln_f.g", (d,), init="ones")
    store.param("vlm.ln_f.b", (d,), init="zeros")
    store.param("vlm.head.w", (d, vocab.VOCAB_SIZE))
    store.param("vlm.head.b", (vocab.VOCAB_SIZE,), init="zeros")
    # pooled-token projector, refined against the raw semantic features
    for i in range(cfg.psi_layers):
        p = f"psi.layer{i}."
        store.param(p + "ln.g", (cfg.token_dim,), init="ones")
        store.param(p + "ln.b", (cfg.token_dim,), init="zeros")
        store.param(p + "wq", (cfg.token_dim, cfg.token_dim))
        store.param(p + "wk", (cfg.feature_dim, cfg.token_dim))
        store.param(p + "wv", (cfg.feature_dim, cfg.token_dim))
        store.param(p + "wo", (cfg.token_dim, cfg.token_dim), init="zeros")
    store.param("psi.proj.w", (cfg.token_dim, cfg.d_model))
    store.param("psi.proj.b", (cfg.d_model,), init="zeros")


def _split_heads(x: Tensor, b: int, s: int, h: int, hd: int) -> Tensor:
    return ad.transpose(ad.reshape(x, (b, s, h, hd)), (0, 2, 1, 3))


def _merge_heads(x: Tensor, b: int, s: int, d: int) -> Tensor:
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, d))


def _ln(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layernorm_lastdim(x, store[prefix + ".g"], store[prefix + ".b"])


def _attention(q: Tensor, k: Tensor, v: Tensor, hd: int, mask: np.ndarray | None) -> Tensor:
    scores = ad.scale(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(hd))
    if mask is not None:
        scores = scores + ad.constant(mask)
    return ad.softmax_lastdim(scores) @ v


def _causal_mask(s: int) -> np.ndarray:
    m = np.triu(np.full((s, s), NEG_INF), k=1)
    return m[None, None]


def psi_project(store: ParamStore, cfg: ReasonerConfig, pooled: Tensor, feats: Tensor) -> Tensor:
    """Refine pooled scene tokens against semantic features, lift to d_model."""
    b, n, dt = pooled.data.shape
    z = pooled
    for i in range(cfg.psi_layers):
        p = f"psi.layer{i}."
        u = _ln(store, p + "ln", z)
        q = u @ store[p + "wq"]
        k = feats @ store[p + "wk"]
        v = feats @ store[p + "wv"]
        scores = ad.scale(q @ ad.transpose(k, (0, 2, 1)), 1.0 / np.sqrt(dt))
        ctx = ad.softmax_lastdim(scores) @ v
        z = z + ctx @ store[p + "wo"]
    return z @ store["psi.proj.w"] + store["psi.proj.b"]


def encode_prefix(
    store: ParamStore,
    cfg: ReasonerConfig,
    scene: SceneTokens,
    feats: np.ndarray,
    verb_ids: np.ndarray,
    class_ids: np.ndarray,
    proprio: np.ndarray,
) -> Tensor:
    b = scene.pooled.data.shape[0]
    feats_t = ad.constant(np.asarray(feats, dtype=np.float64))
    z = psi_project(store, cfg, scene.pooled, feats_t)
    verb = ad.reshape(ad.gather_rows(store["vlm.verb_emb"], verb_ids), (b, 1, cfg.d_model))
    klass = ad.reshape(ad.gather_rows(store["vlm.class_emb"], class_ids), (b, 1, cfg.d_model))
    prop = ad.constant(np.asarray(proprio, dtype=np.float64)) @ store["vlm.proprio.w"]
    prop = ad.reshape(prop + store["vlm.proprio.b"], (b, 1, cfg.d_model))
    return ad.concat([z, verb, klass, prop], axis=1)


def forward_hidden(
    store: ParamStore, cfg: ReasonerConfig, prefix: Tensor, kv: Tensor, streams: np.ndarray
) -> Tensor:
    """Full-sequence hidden states (final layer norm applied)."""
    b, p_len, d = prefix.data.shape
    streams = np.asarray(streams, dtype=np.int64)
    if streams.ndim != 2 or streams.shape[0] != b:
        raise ShapeError(f"token streams {streams.shape} do not match batch {b}")
    t = streams.shape[1]
    s = p_len + t
    if s > cfg.max_seq:
        raise ShapeError(f"sequence {s} exceeds the position table {cfg.max_seq}")
    emb = ad.gather_rows(store["vlm.tok_emb"], streams.reshape(-1))
    emb = ad.reshape(emb, (b, t, d))
    x = ad.concat([prefix, emb], axis=1)
    pos = ad.reshape(ad.slice_axis(store["vlm.pos_emb"], 0, 0, s), (1, s, d))
    x = x + pos

    h, hd = cfg.n_heads, cfg.head_dim
    mask = _causal_mask(s)
    kv_k = {}
    for i in range(cfg.n_layers):
        p = f"vlm.layer{i}."
        u = _ln(store, p + "ln1", x)
        q = _split_heads(u @ store[p + "attn.wq"], b, s, h, hd)
        k = _split_heads(u @ store[p + "attn.wk"], b, s, h, hd)
        v = _split_heads(u @ store[p + "attn.wv"], b, s, h, hd)
        att = _merge_heads(_attention(q, k, v, hd, mask), b, s, d)
        x = x + att @ store[p + "attn.wo"] + store[p + "attn.bo"]

        u = _ln(store, p + "ln_ca", x)
        n_kv = kv.data.shape[1]
        q = _split_heads(u @ store[p + "ca.wq"], b, s, h, hd)
        ck = _split_heads(kv @ store[p + "ca.wk"], b, n_kv, h, hd)
        cv = _split_heads(kv @ store[p + "ca.wv"], b, n_kv, h, hd)
        ca = _merge_heads(_attention(q, ck, cv, hd, None), b, s, d)
        x = x + ca @ store[p + "ca.wo"] + store[p + "ca.bo"]

        u = _ln(store, p + "ln2", x)
        f = ad.gelu(u @ store[p + "ffn.w1"] + store[p + "ffn.b1"])
        x = x + f @ store[p + "ffn.w2"] + store[p + "ffn.b2"]
    return _ln(store, "vlm.ln_f", x)


@dataclass
class ReasonerOutput:
    loss: Tensor            # scalar mean cross entropy over supervised slots
    hidden: Tensor          # (B, S, d) final hidden states
    h_prefix: Tensor        # (B, prefix_len, d) conditioning summary
    h_act: Tensor           # (B, n_act, d) hidden states at action slots
    logits: Tensor | None   # (B, n_supervised, V) at supervised slots
    supervised_pos: np.ndarray
    targets: np.ndarray


def _kv_tokens(cfg: ReasonerConfig, scene: SceneTokens) -> Tensor:
    return scene.patch_tokens if cfg.attend_patch_tokens else scene.pooled


def chain_loss(
    store: ParamStore,
    cfg: ReasonerConfig,
    scene: SceneTokens,
    feats: np.ndarray,
    verb_ids: np.ndarray,
    class_ids: np.ndarray,
    proprio: np.ndarray,
    streams: np.ndarray,
    flags: ChainFlags,
) -> ReasonerOutput:
    """Teacher-forced pass: mean cross entropy over value-carrying slots."""
    layout = vocab.chain_layout(flags)
    streams = np.asarray(streams, dtype=np.int64)
    b = streams.shape[0]
    if streams.shape[1] != len(layout):
        raise ShapeError(f"streams have {streams.shape[1]} slots, layout {len(layout)}")
    prefix = encode_prefix(store, cfg, scene, feats, verb_ids, class_ids, proprio)
    hidden = forward_hidden(store, cfg, prefix, _kv_tokens(cfg, scene), streams)
    p_len = cfg.prefix_len

    sup = np.array([i for i, sl in enumerate(layout) if sl.kind != "struct"], dtype=np.int64)
    h_prefix = ad.slice_axis(hidden, 1, 0, p_len)
    h_act = ad.slice_axis(hidden, 1, p_len + len(layout) - vocab.N_ACT, p_len + len(layout))
    if sup.size == 0:
        return ReasonerOutput(
            loss=ad.constant(np.zeros(())),
            hidden=hidden,
            h_prefix=h_prefix,
            h_act=h_act,
            logits=None,
            supervised_pos=sup,
            targets=np.zeros((b, 0), dtype=np.int64),
        )

    # hidden at absolute position p predicts the token at stream slot p+1
    pieces = [ad.slice_axis(hidden, 1, p_len + i - 1, p_len + i) for i in sup]
    h_sup = ad.concat(pieces, axis=1)  # (B, n_sup, d)
    logits = h_sup @ store["vlm.head.w"] + store["vlm.head.b"]
    logp = ad.log_softmax_lastdim(logits)
    targets = streams[:, sup]
    picked = ad.take_index_lastdim(logp, targets)
    loss = ad.neg(ad.mean_(picked))
    return ReasonerOutput(
        loss=loss,
        hidden=hidden,
        h_prefix=h_prefix,
        h_act=h_act,
        logits=logits,
        supervised_pos=sup,
        targets=targets,
    )


def decode_greedy(
    store: ParamStore,
    cfg: ReasonerConfig,
    scene: SceneTokens,
    feats: np.ndarray,
    verb_ids: np.ndarray,
    class_ids: np.ndarray,
    proprio: np.ndarray,
    flags: ChainFlags,
) -> tuple[np.ndarray, Tensor, Tensor]:
    """Constrained greedy decoding (single scene or batch of one layout).

    Returns the decoded streams (B, T), plus the conditioning hidden states
    from a final pass over the completed streams.
    """
    layout = vocab.chain_layout(flags)
    b = scene.pooled.data.shape[0]
    streams = np.full((b, len(layout)), vocab.BOS, dtype=np.int64)
    with ad.no_grad():
        prefix = encode_prefix(store, cfg, scene, feats, verb_ids, class_ids, proprio)
        kv = _kv_tokens(cfg, scene)
        for i, slot in enumerate(layout[1:], start=1):
            allowed = vocab.allowed_ids(slot)
            if allowed.size == 1:
                streams[:, i] = allowed[0]
                continue
            hidden = forward_hidden(store, cfg, prefix, kv, streams[:, :i])
            pos = cfg.prefix_len + i - 1
            h = hidden.data[:, pos]  # (B, d)
            logits = h @ store["vlm.head.w"].data + store["vlm.head.b"].data
            streams[:, i] = allowed[np.argmax(logits[:, allowed], axis=1)]
        hidden = forward_hidden(store, cfg, prefix, kv, streams)
        p_len = cfg.prefix_len
        h_prefix = ad.slice_axis(hidden, 1, 0, p_len)
        h_act = ad.slice_axis(
            hidden, 1, p_len + len(layout) - vocab.N_ACT, p_len + len(layout)
        )
    return streams, h_prefix, h_act


def chain_metrics(pred: np.ndarray, true: np.ndarray, flags: ChainFlags) -> dict:
    """Dequantized errors between predicted and reference chains."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    layout = vocab.chain_layout(flags)
    sup = [i for i, sl in enumerate(layout) if sl.kind != "struct"]
    out = {"token_acc": float("nan")}
    if sup:
        out["token_acc"] = float(np.mean(pred[sup] == true[sup]))
    dp = vocab.decode_chain_tokens(pred, flags)
    dt = vocab.decode_chain_tokens(true, flags)
    out["centroid_err_m"] = (
        float(np.linalg.norm(dp.centroid - dt.centroid)) if flags.c1 else float("nan")
    )
    out["contact_err_m"] = (
        float(np.linalg.norm(dp.grasp_offset - dt.grasp_offset)) if flags.c2 else float("nan")
    )
    out["waypoint_err_m"] = (
        float(
            np.mean(
                np.linalg.norm(dp.waypoint_deltas[:, :3] - dt.waypoint_deltas[:, :3], axis=1)
            )
        )
        if flags.c4
        else float("nan")
    )
    return out
