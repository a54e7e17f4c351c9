"""Differentiable depth compositing of axis-aligned 3-D Gaussians.

Every Gaussian contributes to a ray according to how close the ray passes to
its mean, measured against the ray-direction variance of its diagonal
covariance.  Contributions are composited front to back in one global
distance order (camera at the origin), exactly like alpha blending:

    weight_k = a_k * prod_{j nearer} (1 - a_j)

with the product computed as ``exp(cumsum(log1p(-a)))`` for stability.  The
rendered quantity is along-ray range (the sum of weights times each
Gaussian's projected range), floored at 1e-6 so logarithms stay finite.

The loss is the scale-invariant log-depth objective with variance focus 0.85.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .camera import IMAGE_SIZE, Intrinsics, pixel_rays

VAR_FLOOR = 1e-12
RANGE_FLOOR = 1e-6
OPACITY_SHRINK = 1.0 - 1e-12  # keeps per-ray opacities strictly below one
SILOG_LAMBDA = 0.85


@dataclass
class RenderResult:
    rendered: Tensor   # (R,) composited along-ray range
    weights: Tensor    # (R, G) per-Gaussian weights, input order
    proj: Tensor       # (R, G) projected range of each Gaussian on each ray
    order: np.ndarray  # (G,) global near-to-far ordering used


def render_range(
    mu: Tensor,
    log_scales: Tensor,
    alpha: Tensor,
    dirs: np.ndarray,
    cutoff_sigmas: float | None = None,
) -> RenderResult:
    """Composite one scene's Gaussians along unit ray directions.

    ``cutoff_sigmas`` optionally zeroes contributions whose closest-approach
    offset exceeds that many standard deviations. The mask is constant in
    the graph (gradient of the kept branch), so leave it off — the default —
    anywhere gradients get finite-difference checked.
    """
    g = mu.data.shape[0]
    if mu.data.shape != (g, 3):
        raise ShapeError(f"means must be (G, 3), got {mu.data.shape}")
    if log_scales.data.shape != (g, 3):
        raise ShapeError(f"log-scales must be ({g}, 3), got {log_scales.data.shape}")
    if alpha.data.shape != (g, 1):
        raise ShapeError(f"opacities must be ({g}, 1), got {alpha.data.shape}")
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ShapeError(f"ray directions must be (R, 3), got {dirs.shape}")

    d = ad.constant(dirs)
    d2 = ad.constant(dirs * dirs)

    # global front-to-back order by distance from the camera (stable on ties)
    t = ad.sqrt(ad.sum_(mu * mu, axis=(1,)))  # (G,)
    order = np.argsort(t.data, kind="stable")
    inverse = np.argsort(order, kind="stable")

    proj = d @ ad.transpose(mu, (1, 0))  # (R, G) range of the closest approach
    var = d2 @ ad.transpose(ad.exp(ad.scale(log_scales, 2.0)), (1, 0))
    var = ad.max_floor(var, VAR_FLOOR)
    delta = ad.reshape(t, (1, g)) - proj
    falloff = ad.exp(ad.scale(delta * delta / var, -0.5))
    a = ad.scale(ad.reshape(alpha, (1, g)) * falloff, OPACITY_SHRINK)
    if cutoff_sigmas is not None:
        keep = np.abs(delta.data) <= cutoff_sigmas * np.sqrt(var.data)
        a = a * ad.constant(keep.astype(np.float64))

    a_sorted = ad.permute_lastdim(a, order[None], inverse[None])
    proj_sorted = ad.permute_lastdim(proj, order[None], inverse[None])
    trans = ad.exp(ad.cumsum_exclusive_lastdim(ad.log1p(ad.neg(a_sorted))))
    w_sorted = a_sorted * trans
    rendered = ad.max_floor(ad.sum_(w_sorted * proj_sorted, axis=(1,)), RANGE_FLOOR)
    weights = ad.permute_lastdim(w_sorted, inverse[None], order[None])
    return RenderResult(rendered=rendered, weights=weights, proj=proj, order=order)


def silog_loss(pred: Tensor, target: np.ndarray, lam: float = SILOG_LAMBDA) -> Tensor:
    """Scale-invariant log error: mean(d^2) - lam * mean(d)^2, d = log ratio."""
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeError(f"prediction {pred.data.shape} vs target {target.shape}")
    if (target <= 0).any():
        raise ValueError("depth targets must be strictly positive")
    d = ad.log(pred) - ad.constant(np.log(target))
    return ad.mean_(d * d) - ad.scale(ad.mean_(d) * ad.mean_(d), lam)


def ray_bundle(
    depth_map: np.ndarray, intr: Intrinsics, pixel_idx: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions and target along-ray ranges for chosen pixels.

    The scene maps store z-depth; multiplying by the direction norm converts
    to range so targets live in the same coordinate as the renderer output.
    """
    depth_map = np.asarray(depth_map, dtype=np.float64)
    if depth_map.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"depth map must be {(IMAGE_SIZE, IMAGE_SIZE)}, got {depth_map.shape}")
    dirs = pixel_rays(intr, IMAGE_SIZE, IMAGE_SIZE)
    z = depth_map.reshape(-1)
    if pixel_idx is not None:
        pixel_idx = np.asarray(pixel_idx, dtype=np.int64)
        dirs = dirs[pixel_idx]
        z = z[pixel_idx]
    return dirs, z / dirs[:, 2]


def sample_pixel_indices(rng: np.random.Generator, count: int) -> np.ndarray:
    """Uniform pixel subset used for stochastic rendering during training."""
    return rng.choice(IMAGE_SIZE * IMAGE_SIZE, size=count, replace=False)
