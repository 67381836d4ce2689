import numpy as np
import pytest

from depthpose.core import DepthFrame, skeleton_preset
from depthpose.preproc import (PreprocConfig, morph_close, preprocess_frame,
                               resize_and_scale, resize_bilinear,
                               segment_foreground)
from depthpose.synth import (PoseSamplerConfig, default_body_shape,
                             render_depth, ring_cameras, sample_pose)


def frame(arr):
    return DepthFrame("c", np.asarray(arr, dtype=np.float32))


class TestSegmentForeground:
    def test_constant_frame_unchanged(self):
        f = frame(np.full((20, 20), 2.0))
        out = segment_foreground(f, PreprocConfig())
        assert np.array_equal(out.depth, f.depth)

    def test_wall_removed(self):
        depth = np.full((40, 40), 4.0, np.float32)
        depth[15:25, 15:25] = 2.0  # person block in the center
        out = segment_foreground(frame(depth), PreprocConfig(depth_halfwidth=0.5))
        assert np.all(out.depth[0:5, 0:5] == 0)
        assert np.all(out.depth[15:25, 15:25] == 2.0)

    def test_all_zero_warns(self):
        f = frame(np.zeros((10, 10)))
        with pytest.warns(RuntimeWarning):
            out = segment_foreground(f, PreprocConfig())
        assert np.array_equal(out.depth, f.depth)

    def test_never_adds_pixels_before_closing(self):
        # with kernel 1 (no closing) the zeroing can only shrink support
        rng = np.random.default_rng(0)
        depth = rng.uniform(1.0, 5.0, (30, 30)).astype(np.float32)
        depth[rng.random((30, 30)) < 0.3] = 0.0
        cfg = PreprocConfig(morph_kernel=1)
        out = segment_foreground(frame(depth), cfg)
        assert np.count_nonzero(out.depth) <= np.count_nonzero(depth)

    def test_synthetic_render_separation(self):
        # against the renderer's own body mask, averaged over 50 scenes;
        # person approximately centered and filling the frame, as the
        # estimator assumes
        sk = skeleton_preset("itop15")
        shape = default_body_shape(sk)
        cam = ring_cameras(1, radius=2.2, image_h=48, image_w=48, focal=60.0,
                           look_at=(0, 0, 1.0), rng=np.random.default_rng(0))[0]
        sampler = PoseSamplerConfig(root_box=((-0.1, -0.1, 0.95), (0.1, 0.1, 1.05)))
        rng = np.random.default_rng(5)
        cfg = PreprocConfig(depth_halfwidth=0.9, center_window_frac=0.1)
        bg_zeroed = []
        body_kept = []
        for i in range(50):
            pose = sample_pose(sampler, shape, sk, rng=rng)
            clean = render_depth(pose, shape, cam, 48, 48)
            body = clean.depth > 0
            with_bg = np.where(body, clean.depth, 4.5).astype(np.float32)
            out = segment_foreground(DepthFrame("c", with_bg), cfg).depth
            bg_zeroed.append((out[~body] == 0).mean())
            body_kept.append((out[body] > 0).mean())
        assert np.mean(bg_zeroed) >= 0.99
        assert np.mean(body_kept) >= 0.90


class TestMorphClose:
    def test_solid_square_unchanged(self):
        depth = np.zeros((12, 12), np.float32)
        depth[3:9, 3:9] = 2.0
        out = morph_close(frame(depth), 3)
        assert np.array_equal(out.depth, depth)

    def test_hole_filled(self):
        depth = np.zeros((12, 12), np.float32)
        depth[3:9, 3:9] = 2.0
        depth[5, 5] = 0.0
        out = morph_close(frame(depth), 3)
        assert out.depth[5, 5] == 2.0

    def test_idempotent_on_speckle(self):
        rng = np.random.default_rng(11)
        depth = np.where(rng.random((40, 40)) < 0.4,
                         rng.uniform(1, 3, (40, 40)), 0.0).astype(np.float32)
        once = morph_close(frame(depth), 3)
        twice = morph_close(once, 3)
        assert np.array_equal(once.depth, twice.depth)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            morph_close(frame(np.ones((4, 4))), 2)


class TestResizeAndScale:
    def test_constant_scales_to_one(self):
        out = resize_and_scale(frame(np.full((50, 40), 3.0)),
                               PreprocConfig(target_h=10, target_w=10))
        assert out.shape == (10, 10)
        assert np.allclose(out, 1.0)

    def test_identity_at_target_size(self):
        rng = np.random.default_rng(2)
        depth = rng.uniform(0.5, 2.0, (16, 16))
        out = resize_bilinear(depth, 16, 16)
        assert np.allclose(out, depth, atol=1e-6)

    def test_checkerboard_decimation(self):
        # 2:1 decimation of a {1,3} checkerboard averages to 2 everywhere
        # interior, by the half-pixel-centered sampling grid
        idx = np.arange(200)
        board = np.where((idx[:, None] + idx[None, :]) % 2 == 0, 1.0, 3.0)
        out = resize_bilinear(board, 100, 100)
        assert np.allclose(out[1:-1, 1:-1], 2.0, atol=1e-12)

    def test_output_range_and_shape(self):
        rng = np.random.default_rng(3)
        depth = np.where(rng.random((37, 53)) < 0.5, rng.uniform(0.5, 4, (37, 53)), 0)
        cfg = PreprocConfig(target_h=12, target_w=9)
        out = resize_and_scale(frame(depth), cfg)
        assert out.shape == (12, 9)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zeros_stay_zero(self):
        depth = np.zeros((20, 20), np.float32)
        depth[:10] = 2.0
        out = resize_and_scale(frame(depth), PreprocConfig(target_h=10, target_w=10))
        assert np.all(out[-3:] == 0.0)

    def test_all_zero_raises(self):
        with pytest.raises(ValueError):
            resize_and_scale(frame(np.zeros((10, 10))), PreprocConfig())

    def test_global_scale_max(self):
        out = resize_and_scale(frame(np.full((10, 10), 2.0)),
                               PreprocConfig(target_h=8, target_w=8), scale_max=4.0)
        assert np.allclose(out, 0.5)


def test_pipeline_deterministic():
    rng = np.random.default_rng(4)
    depth = rng.uniform(1, 3, (30, 30)).astype(np.float32)
    cfg = PreprocConfig(target_h=16, target_w=16)
    a = preprocess_frame(frame(depth), cfg, segment=True)
    b = preprocess_frame(frame(depth), cfg, segment=True)
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocConfig(morph_kernel=4)
    with pytest.raises(ValueError):
        PreprocConfig(depth_halfwidth=0.0)
    with pytest.raises(ValueError):
        PreprocConfig(target_h=4)
