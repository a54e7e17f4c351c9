"""Back-projection and patch-anchor oracles."""

import numpy as np
import pytest

from splatact import camera


def test_backproject_center_pixel_sits_on_axis():
    intr = camera.Intrinsics()
    depth = np.full((224, 224), 0.7)
    pts = camera.backproject(depth, intr)
    # pixel (u=112, v=112) is the principal point: ray is the optical axis
    np.testing.assert_allclose(pts[112, 112], [0.0, 0.0, 0.7], atol=1e-15)
    # integer-pixel convention: pixel (0, 0) maps through (0-cx)/fx exactly
    np.testing.assert_allclose(
        pts[0, 0], [(-112.0 / 220.0) * 0.7, (-112.0 / 220.0) * 0.7, 0.7]
    )


def test_project_backproject_round_trip_subpixel():
    rng = np.random.default_rng(5)
    intr = camera.Intrinsics()
    depth = 0.3 + rng.uniform(0, 1.5, size=(224, 224))
    pts = camera.backproject(depth, intr)
    uv = camera.project(pts, intr)
    uu, vv = np.meshgrid(np.arange(224.0), np.arange(224.0))
    err = np.hypot(uv[..., 0] - uu, uv[..., 1] - vv)
    assert err.max() < 1e-9


def test_backproject_scales_linearly_with_depth():
    intr = camera.Intrinsics()
    rng = np.random.default_rng(11)
    depth = 0.2 + rng.uniform(0, 1, size=(28, 28))
    a = camera.backproject(depth, intr)
    b = camera.backproject(3.0 * depth, intr)
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12)


def test_backproject_rejects_nonpositive_depth_naming_pixel():
    intr = camera.Intrinsics()
    depth = np.ones((8, 8))
    depth[3, 5] = 0.0
    with pytest.raises(ValueError) as ei:
        camera.backproject(depth, intr)
    assert "u=5" in str(ei.value) and "v=3" in str(ei.value)
    depth[3, 5] = -0.2
    with pytest.raises(ValueError):
        camera.backproject(depth, intr)


def test_patch_anchors_match_brute_force_means():
    rng = np.random.default_rng(2)
    intr = camera.Intrinsics()
    depth = 0.3 + rng.uniform(0, 1, size=(224, 224))
    pts = camera.backproject(depth, intr)
    anchors = camera.patch_anchors(pts)
    assert anchors.shape == (256, 3)
    # brute force: explicit python loops over the 16x16 grid
    for gi in [0, 3, 15]:
        for gj in [0, 7, 15]:
            block = pts[gi * 14 : (gi + 1) * 14, gj * 14 : (gj + 1) * 14]
            want = block.reshape(-1, 3).mean(axis=0)
            got = anchors[gi * 16 + gj]
            np.testing.assert_allclose(got, want, atol=1e-12)


def test_patch_anchors_fronto_parallel_plane_depth_exact():
    intr = camera.Intrinsics()
    depth = np.full((224, 224), 0.55)
    anchors = camera.patch_anchors(camera.backproject(depth, intr))
    np.testing.assert_allclose(anchors[:, 2], 0.55, atol=1e-12)


def test_patch_anchors_translate_with_the_points():
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((28, 28, 3))
    t = np.array([0.1, -0.2, 0.3])
    a = camera.patch_anchors(pts)
    b = camera.patch_anchors(pts + t)
    np.testing.assert_allclose(b, a + t, atol=1e-12)


def test_patch_anchors_reject_indivisible_image():
    with pytest.raises(ValueError):
        camera.patch_anchors(np.zeros((225, 224, 3)))


def test_pixel_rays_are_unit_and_hit_pixels():
    intr = camera.Intrinsics()
    d = camera.pixel_rays(intr)
    assert d.shape == (224 * 224, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
    # scaling each ray so z = depth reproduces backproject
    depth = np.full((224, 224), 0.9)
    pts = camera.backproject(depth, intr)
    scaled = d / d[:, 2:3] * 0.9
    np.testing.assert_allclose(scaled.reshape(224, 224, 3), pts, atol=1e-12)
