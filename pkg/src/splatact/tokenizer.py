"""Gaussian scene tokenizer: patch features -> per-patch Gaussians -> tokens.

Each of the 256 image patches becomes one axis-aligned 3-D Gaussian:

* the mean starts at the patch's back-projected anchor point and moves by a
  bounded learned residual (0.1 * tanh, so at most 10 cm);
* per-axis log-scales are squashed into [-5, 1];
* opacity combines a per-patch head with a multi-resolution context head
  that sees the patch feature next to its 2x2- and 4x4-block means, so both
  start at exactly 0.5 when the zero-initialized final layers are fresh.

Tokens concatenate [feature, Fourier position code, log-scales, opacity],
project to the token width, and are pooled 256 -> 128 by a learned-query
single-head attention (rows of the pooling matrix sum to one).  Severable
design choices (position code, pooling, opacity, residual, scales, content)
are switchable for ablations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .camera import GRID, Intrinsics, backproject, patch_anchors

PE_OCTAVES = 6
RESIDUAL_RANGE = 0.1
LOG_SCALE_CENTER = -2.0
LOG_SCALE_SPAN = 3.0

PE_MODES = ("fourier3d", "learned2d")
POOL_MODES = ("attention", "average")
OPACITY_MODES = ("learned", "fixed_one")
RESIDUAL_MODES = ("learned", "zero")
SCALE_MODES = ("anisotropic", "isotropic")
TOKEN_CONTENT_MODES = ("full", "position_only", "depth_scalar")


@dataclass(frozen=True)
class TokenizerConfig:
    feature_dim: int = 64
    token_dim: int = 128
    n_patches: int = 256
    n_tokens: int = 128
    pe_mode: str = "fourier3d"
    pool_mode: str = "attention"
    opacity_mode: str = "learned"
    residual_mode: str = "learned"
    scale_mode: str = "anisotropic"
    token_content: str = "full"

    def __post_init__(self):
        for val, opts in (
            (self.pe_mode, PE_MODES),
            (self.pool_mode, POOL_MODES),
            (self.opacity_mode, OPACITY_MODES),
            (self.residual_mode, RESIDUAL_MODES),
            (self.scale_mode, SCALE_MODES),
            (self.token_content, TOKEN_CONTENT_MODES),
        ):
            if val not in opts:
                raise ValueError(f"{val!r} is not one of {opts}")
        if self.n_patches % self.n_tokens:
            raise ValueError("n_tokens must divide n_patches for average pooling")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(**d)


def pe_width() -> int:
    return PE_OCTAVES * 2 * 3


def raw_token_width(cfg: TokenizerConfig) -> int:
    """Pre-projection token width: feature + position code + scales + opacity."""
    return cfg.feature_dim + pe_width() + 3 + 1


def mlp_widths(cfg: TokenizerConfig) -> tuple[int, int]:
    d = cfg.feature_dim
    return round(2 * d / 3), round(d / 2)


def build_params(store: ParamStore, cfg: TokenizerConfig) -> None:
    d = cfg.feature_dim
    h1, h2 = mlp_widths(cfg)
    store.param("gst.f_theta.w0", (d, h1))
    store.param("gst.f_theta.b0", (h1,), init="zeros")
    store.param("gst.f_theta.w1", (h1, h2))
    store.param("gst.f_theta.b1", (h2,), init="zeros")
    store.param("gst.f_theta.w2", (h2, 7), init="zeros")
    store.param("gst.f_theta.b2", (7,), init="zeros")
    if cfg.opacity_mode == "learned":
        store.param("gst.f_exp.w0", (3 * d, d))
        store.param("gst.f_exp.b0", (d,), init="zeros")
        store.param("gst.f_exp.w1", (d, 1), init="zeros")
        store.param("gst.f_exp.b1", (1,), init="zeros")
    store.param("gst.w_tok", (raw_token_width(cfg), cfg.token_dim))
    store.param("gst.b_tok", (cfg.token_dim,), init="zeros")
    if cfg.pool_mode == "attention":
        store.param("gst.q_pool", (cfg.n_tokens, cfg.token_dim), init="normal")
    if cfg.pe_mode == "learned2d":
        store.param("gst.pe_table", (cfg.n_patches, pe_width()), init="normal")


@dataclass
class SceneTokens:
    """Per-batch tokenizer outputs (Tensors stay on the active tape)."""

    mu: Tensor         # (B, N_p, 3)
    log_scales: Tensor  # (B, N_p, 3)
    alpha: Tensor      # (B, N_p, 1)
    patch_tokens: Tensor  # (B, N_p, token_dim)
    pooled: Tensor     # (B, n_tokens, token_dim)
    pool_rows: Tensor | None  # (B, n_tokens, N_p) attention pooling only
    anchors: np.ndarray  # (B, N_p, 3) constant geometry


def _f_theta(store: ParamStore, x: Tensor) -> Tensor:
    h = ad.gelu(x @ store["gst.f_theta.w0"] + store["gst.f_theta.b0"])
    h = ad.gelu(h @ store["gst.f_theta.w1"] + store["gst.f_theta.b1"])
    return h @ store["gst.f_theta.w2"] + store["gst.f_theta.b2"]


def _block_mean_broadcast(feat: Tensor, block: int, b: int, d: int) -> Tensor:
    """Mean over block x block patch neighborhoods, upsampled back to the grid."""
    g = GRID // block
    x = ad.reshape(feat, (b, g, block, g, block, d))
    m = ad.mean_(x, axis=(2, 4), keepdims=True)
    m = ad.broadcast_to(m, (b, g, block, g, block, d))
    return ad.reshape(m, (b, GRID * GRID, d))


def _mip_opacity_logit(store: ParamStore, feat: Tensor, b: int, d: int) -> Tensor:
    ctx = ad.concat(
        [feat, _block_mean_broadcast(feat, 2, b, d), _block_mean_broadcast(feat, 4, b, d)],
        axis=2,
    )
    h = ad.gelu(ctx @ store["gst.f_exp.w0"] + store["gst.f_exp.b0"])
    return h @ store["gst.f_exp.w1"] + store["gst.f_exp.b1"]


def fourier_pe(mu: Tensor) -> Tensor:
    """Octave-major sine/cosine code of the Gaussian means."""
    parts = []
    for level in range(PE_OCTAVES):
        scaled = ad.scale(mu, (2.0**level) * np.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat(parts, axis=2)


def tokenize(
    store: ParamStore,
    cfg: TokenizerConfig,
    depths: np.ndarray,
    features: np.ndarray,
    intr: Intrinsics,
) -> SceneTokens:
    """Run the tokenizer on a batch of (depth map, patch features) pairs."""
    depths = np.asarray(depths, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if depths.ndim == 2:
        depths = depths[None]
    if features.ndim == 2:
        features = features[None]
    b = depths.shape[0]
    d = cfg.feature_dim
    if features.shape != (b, cfg.n_patches, d):
        raise ad.ShapeError(
            f"features {features.shape} do not match ({b}, {cfg.n_patches}, {d})"
        )

    anchors = np.stack([patch_anchors(backproject(dep, intr)) for dep in depths])
    anchors_t = ad.constant(anchors)
    feat = ad.constant(features)

    head = _f_theta(store, feat)  # (B, N_p, 7)
    res_raw = ad.slice_axis(head, 2, 0, 3)
    scale_raw = ad.slice_axis(head, 2, 3, 6)
    logit7 = ad.slice_axis(head, 2, 6, 7)

    if cfg.residual_mode == "learned":
        mu = anchors_t + ad.scale(ad.tanh(res_raw), RESIDUAL_RANGE)
    else:
        mu = anchors_t

    log_scales = ad.scale(ad.tanh(scale_raw), LOG_SCALE_SPAN) + ad.constant(
        np.full((1, 1, 3), LOG_SCALE_CENTER)
    )
    if cfg.scale_mode == "isotropic":
        iso = ad.mean_(log_scales, axis=(2,), keepdims=True)
        log_scales = ad.broadcast_to(iso, (b, cfg.n_patches, 3))

    if cfg.opacity_mode == "learned":
        alpha = ad.sigmoid(_mip_opacity_logit(store, feat, b, d) + logit7)
    else:
        alpha = ad.constant(np.full((b, cfg.n_patches, 1), 1.0 - 1e-9))

    if cfg.pe_mode == "fourier3d":
        pe = fourier_pe(mu)
    else:
        table = ad.reshape(store["gst.pe_table"], (1, cfg.n_patches, pe_width()))
        pe = ad.broadcast_to(table, (b, cfg.n_patches, pe_width()))

    if cfg.token_content == "full":
        content, scales_in, alpha_in = feat, log_scales, alpha
    elif cfg.token_content == "position_only":
        content = ad.constant(np.zeros((b, cfg.n_patches, d)))
        scales_in = ad.constant(np.zeros((b, cfg.n_patches, 3)))
        alpha_in = ad.constant(np.zeros((b, cfg.n_patches, 1)))
    else:  # depth_scalar: anchor depth broadcast across the content block
        content = ad.constant(np.broadcast_to(anchors[..., 2:3], (b, cfg.n_patches, d)).copy())
        scales_in, alpha_in = log_scales, alpha

    raw = ad.concat([content, pe, scales_in, alpha_in], axis=2)
    tokens = raw @ store["gst.w_tok"] + store["gst.b_tok"]

    if cfg.pool_mode == "attention":
        scores = tokens @ ad.transpose(store["gst.q_pool"], (1, 0))  # (B, N_p, n_tokens)
        scores = ad.scale(ad.transpose(scores, (0, 2, 1)), 1.0 / np.sqrt(cfg.token_dim))
        rows = ad.softmax_lastdim(scores)  # (B, n_tokens, N_p)
        pooled = rows @ tokens
    else:
        per = cfg.n_patches // cfg.n_tokens
        rows = None
        pooled = ad.mean_(
            ad.reshape(tokens, (b, cfg.n_tokens, per, cfg.token_dim)), axis=(2,)
        )

    return SceneTokens(
        mu=mu,
        log_scales=log_scales,
        alpha=alpha,
        patch_tokens=tokens,
        pooled=pooled,
        pool_rows=rows,
        anchors=anchors,
    )


# ---------------------------------------------------------------------------
# point-cloud export
# ---------------------------------------------------------------------------

_PLY_FIELDS = ("x", "y", "z", "sx", "sy", "sz", "opacity")


def export_gaussians(path, mu: np.ndarray, log_scales: np.ndarray, alpha: np.ndarray) -> None:
    """Write one scene's Gaussians as a binary little-endian PLY point cloud."""
    mu = np.asarray(mu, dtype="<f8").reshape(-1, 3)
    scales = np.exp(np.asarray(log_scales, dtype="<f8").reshape(-1, 3))
    alpha = np.asarray(alpha, dtype="<f8").reshape(-1, 1)
    if not (mu.shape[0] == scales.shape[0] == alpha.shape[0]):
        raise ad.ShapeError(
            f"mismatched gaussian counts: {mu.shape[0]}, {scales.shape[0]}, {alpha.shape[0]}"
        )
    body = np.concatenate([mu, scales, alpha], axis=1).astype("<f8")
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {body.shape[0]}"]
        + [f"property double {f}" for f in _PLY_FIELDS]
        + ["end_header", ""]
    )
    with open(Path(path), "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body.tobytes())


def read_gaussians(path) -> np.ndarray:
    """Read back an exported point cloud as an (N, 7) array."""
    blob = Path(path).read_bytes()
    marker = b"end_header\n"
    at = blob.index(marker) + len(marker)
    head = blob[:at].decode("ascii").splitlines()
    n = next(int(l.split()[-1]) for l in head if l.startswith("element vertex"))
    return np.frombuffer(blob[at:], dtype="<f8").reshape(n, len(_PLY_FIELDS))
