"""Pinhole geometry: back-projection, projection, patch anchors, pixel rays.

Pixel coordinates are the integer array indices themselves (column ``u``,
row ``v``); no half-pixel center offset is applied anywhere, so a depth map
cell (v, u) lifts to ``depth * Kinv @ [u, v, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IMAGE_SIZE = 224
PATCH = 14
GRID = IMAGE_SIZE // PATCH  # 16 x 16 anchors


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics for a square image."""

    fx: float = 220.0
    fy: float = 220.0
    cx: float = 112.0
    cy: float = 112.0

    def as_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(**d)


def backproject(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Lift a depth map [H, W] to camera-frame points [H, W, 3].

    Every pixel must carry strictly positive depth; the first offending pixel
    is named in the error otherwise.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError(f"depth must be 2-D, got shape {depth.shape}")
    bad = ~(depth > 0)
    if bad.any():
        v, u = np.argwhere(bad)[0]
        raise ValueError(
            f"non-positive depth {depth[v, u]!r} at pixel (u={u}, v={v})"
        )
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    x = (u[None, :] - intr.cx) * depth / intr.fx
    y = (v[:, None] - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth], axis=-1)


def project(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Map camera-frame points [..., 3] back to pixel coordinates [..., 2]."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    if not (z > 0).all():
        raise ValueError("cannot project points at or behind the camera plane")
    u = intr.fx * p[..., 0] / z + intr.cx
    v = intr.fy * p[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def patch_anchors(points: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """Mean 3-D point of each patch x patch pixel block, row-major.

    For a 224-pixel image and 14-pixel patches this yields the 256 anchors of
    the 16 x 16 grid.
    """
    p = np.asarray(points, dtype=np.float64)
    h, w, _ = p.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible into {patch}-pixel patches")
    gh, gw = h // patch, w // patch
    blocks = p.reshape(gh, patch, gw, patch, 3)
    return blocks.mean(axis=(1, 3)).reshape(gh * gw, 3)


def pixel_rays(intr: Intrinsics, h: int = IMAGE_SIZE, w: int = IMAGE_SIZE) -> np.ndarray:
    """Unit view directions through every pixel, flattened row-major [H*W, 3]."""
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    x = (u[None, :] - intr.cx) / intr.fx
    y = (v[:, None] - intr.cy) / intr.fy
    d = np.stack([np.broadcast_to(x, (h, w)), np.broadcast_to(y, (h, w)), np.ones((h, w))], axis=-1)
    d = d.reshape(-1, 3)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
