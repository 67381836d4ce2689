import numpy as np
import pytest

from depthpose import net
from depthpose.container import ChecksumError
from depthpose.core import (Normalizer, Pose, denormalize, skeleton_preset,
                            fit_normalizer)
from depthpose.ddp import (FusionWeights, TrainConfig, TrainedModel,
                           camera_to_world, ddp_loss, fuse_multiview, infer,
                           load_model, reconstruct_pose, residual_loss,
                           save_model, smooth_l1, smooth_l1_grad, train)
from depthpose.preproc import PreprocConfig
from depthpose.prototypes import PrototypeSet
from depthpose.synth import (PoseSamplerConfig, default_body_shape,
                             generate_dataset, ring_cameras)

SK = skeleton_preset("itop15")


def desk_dataset(n_scenes=6, n_cameras=2, seed=0, splits=(1.0, 0.0, 0.0)):
    return generate_dataset(n_scenes, n_cameras, PoseSamplerConfig(seed=seed),
                            default_body_shape(SK), SK, seed=seed,
                            height=40, width=40, split_fracs=splits)


def desk_config(**kw):
    kw.setdefault("k", 4)
    kw.setdefault("epochs", 2)
    kw.setdefault("batch", 8)
    return TrainConfig(**kw)


class TestSmoothL1:
    def test_unit_values(self):
        assert smooth_l1(0.5, 1.0) == pytest.approx(0.125, abs=1e-15)
        assert smooth_l1(2.0, 1.0) == pytest.approx(1.5, abs=1e-15)

    def test_branch_continuity(self):
        for sigma2 in (0.5, 0.8, 1.0, 1.7):
            r = 1.0 / sigma2
            inner = 0.5 * sigma2 * r * r
            outer = r - 0.5 / sigma2
            assert inner == pytest.approx(outer, abs=1e-12)
            eps = 1e-9
            assert smooth_l1(r + eps, sigma2) == pytest.approx(
                smooth_l1(r - eps, sigma2), abs=1e-6)
        assert smooth_l1(1.25, 0.8) == pytest.approx(0.625, abs=1e-12)

    def test_derivative(self):
        for sigma2 in (0.5, 1.0, 2.0):
            for r in (-2.0, -0.3, 0.0, 0.4, 3.0):
                h = 1e-7
                num = (smooth_l1(r + h, sigma2) - smooth_l1(r - h, sigma2)) / (2 * h)
                assert smooth_l1_grad(r, sigma2) == pytest.approx(num, abs=1e-6)

    def test_vectorized(self):
        out = smooth_l1(np.array([0.5, 2.0]), 1.0)
        assert np.allclose(out, [0.125, 1.5])

    def test_invalid_sigma2(self):
        with pytest.raises(ValueError):
            smooth_l1(1.0, 0.0)


class TestResidualLoss:
    def test_zero_residual(self):
        p = np.arange(6, dtype=float)
        assert residual_loss(p, p, 1.0) == 0.0

    def test_sum_of_unit_cases(self):
        p_hat = np.zeros(3)
        p = np.array([0.5, 0.0, 2.0])
        assert residual_loss(p_hat, p, 1.0) == pytest.approx(1.625, abs=1e-15)

    def test_matches_scalar_oracle(self):
        # independent scalar implementation as the oracle
        def scalar(r, s2):
            return 0.5 * s2 * r * r if abs(r) < 1.0 / s2 else abs(r) - 0.5 / s2

        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = rng.normal(0, 2, (2, 45))
            s2 = rng.uniform(0.3, 2.0)
            expected = sum(scalar(x, s2) for x in (b - a))
            assert residual_loss(a, b, s2) == pytest.approx(expected, rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            residual_loss(np.zeros(3), np.zeros(4), 1.0)


class TestReconstructPose:
    def make_set(self, m):
        m = np.asarray(m, dtype=float)
        dim = m.shape[0]
        sk = skeleton_preset("itop15") if dim == 45 else None
        norm = Normalizer(np.zeros(dim), np.ones(dim))
        return m, norm

    def test_basis_vector_selects_column(self):
        rng = np.random.default_rng(1)
        c = rng.standard_normal((45, 5))
        protos = PrototypeSet(c, SK, Normalizer(np.zeros(45), np.ones(45)))
        for i in range(5):
            e = np.zeros(5)
            e[i] = 1.0
            assert np.array_equal(reconstruct_pose(protos, e), c[:, i])

    def test_zero_weights(self):
        c = np.random.default_rng(2).standard_normal((45, 3))
        assert not reconstruct_pose(c, np.zeros(3)).any()

    def test_arithmetic(self):
        c = np.array([[1.0, 0.0], [0.0, 2.0]])
        out = reconstruct_pose(c, np.array([0.5, 0.5]))
        assert out.tolist() == [0.5, 1.0]

    def test_linearity(self):
        rng = np.random.default_rng(3)
        c = rng.standard_normal((45, 7))
        w1, w2 = rng.standard_normal((2, 7))
        a, b = 1.7, -0.4
        lhs = reconstruct_pose(c, a * w1 + b * w2)
        rhs = a * reconstruct_pose(c, w1) + b * reconstruct_pose(c, w2)
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_dimension_mismatch(self):
        c = np.zeros((6, 4))
        with pytest.raises(ValueError):
            reconstruct_pose(c, np.zeros(5))


class TestDdpLoss:
    def test_alpha_one_is_l1(self):
        rng = np.random.default_rng(4)
        c = rng.standard_normal((12, 5))
        w = rng.standard_normal(5)
        p = rng.standard_normal(12)
        loss, grad = ddp_loss(w, c, p, alpha=1.0, sigma2=1.0)
        assert loss == pytest.approx(np.abs(w).sum(), abs=1e-12)
        assert np.array_equal(grad, np.sign(w))

    def test_alpha_zero_exact_reconstruction(self):
        rng = np.random.default_rng(5)
        c = rng.standard_normal((12, 12))
        p = rng.standard_normal(12)
        w = np.linalg.solve(c, p)
        loss, _ = ddp_loss(w, c, p, alpha=0.0, sigma2=1.0)
        assert loss == pytest.approx(0.0, abs=1e-18)

    def test_alpha_zero_equals_residual_loss(self):
        rng = np.random.default_rng(6)
        c = rng.standard_normal((9, 4))
        w = rng.standard_normal(4)
        p = rng.standard_normal(9)
        loss, _ = ddp_loss(w, c, p, alpha=0.0, sigma2=0.7)
        assert loss == pytest.approx(residual_loss(c @ w, p, 0.7), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        checked = 0
        while checked < 20:
            k, d = 6, 15
            c = rng.standard_normal((d, k))
            w = rng.standard_normal(k)
            p = rng.standard_normal(d)
            s2 = rng.uniform(0.5, 1.5)
            alpha = rng.uniform(0.01, 0.3)
            r = p - c @ w
            # stay away from the |r| = 1/sigma2 and w = 0 kinks
            if np.any(np.abs(np.abs(r) - 1.0 / s2) < 1e-3) or np.any(np.abs(w) < 1e-3):
                continue
            _, grad = ddp_loss(w, c, p, alpha, s2)
            for i in range(k):
                wp, wm = w.copy(), w.copy()
                wp[i] += h
                wm[i] -= h
                num = (ddp_loss(wp, c, p, alpha, s2)[0]
                       - ddp_loss(wm, c, p, alpha, s2)[0]) / (2 * h)
                assert grad[i] == pytest.approx(num, rel=1e-5, abs=1e-8)
            checked += 1

    def test_sign_zero_subgradient(self):
        c = np.eye(3)
        w = np.array([0.0, 1.0, -1.0])
        p = np.zeros(3)
        _, grad = ddp_loss(w, c, p, alpha=1.0, sigma2=1.0)
        assert grad[0] == 0.0


class TestTrain:
    def test_overfit_one_sample(self):
        splits = desk_dataset(n_scenes=1, n_cameras=1, seed=3)
        cfg = desk_config(k=1, epochs=50, batch=1, lr0=1e-3)
        model = train(splits.train, cfg)
        hist = model.history["train_loss"]
        assert hist[-1] < hist[0]

    def test_baseline_head_width(self):
        splits = desk_dataset(n_scenes=2, n_cameras=1, seed=4)
        cfg = desk_config(head="baseline", epochs=1)
        model = train(splits.train, cfg)
        assert model.spec.output_units == 45
        assert model.prototypes is None

    def test_empty_dataset_rejected(self):
        splits = desk_dataset(n_scenes=2, n_cameras=1, seed=4, splits=(0.0, 1.0, 0.0))
        with pytest.raises(ValueError, match="no samples"):
            train(splits.train, desk_config())

    def test_deterministic_across_threads(self, tmp_path):
        splits = desk_dataset(n_scenes=4, n_cameras=2, seed=5)
        cfg = desk_config(epochs=2)
        files = []
        for threads in (1, 3):
            model = train(splits.train, cfg, threads=threads)
            path = tmp_path / f"m{threads}.dpm"
            save_model(model, str(path))
            files.append(path.read_bytes())
        assert files[0] == files[1]

    def test_validation_history(self):
        splits = desk_dataset(n_scenes=8, n_cameras=1, seed=6, splits=(0.5, 0.5, 0.0))
        cfg = desk_config(epochs=3)
        model = train(splits.train, cfg, val_dataset=splits.val)
        assert len(model.history["val_loss"]) == 3
        assert len(model.history["val_mse"]) == 3

    def test_lr_schedule_decays(self):
        splits = desk_dataset(n_scenes=4, n_cameras=1, seed=7)
        cfg = desk_config(epochs=10, lr0=1e-3)
        model = train(splits.train, cfg)
        lrs = model.history["lr"]
        assert lrs[0] == pytest.approx(1e-3)
        assert lrs[6] == pytest.approx(1e-4)   # past 60% of 10 epochs
        assert lrs[9] == pytest.approx(1e-5)   # past 85%


def stub_model(basis_index, k=3, seed=0):
    """Model whose network always outputs the basis vector e_i."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((45, k))
    mean = rng.normal(0, 0.1, 45)
    std = rng.uniform(0.5, 2.0, 45)
    normalizer = Normalizer(mean, std)
    protos = PrototypeSet(c, SK, normalizer)
    spec = net.NetworkSpec((8, 8, 1), (net.FullyConnected(k),))
    state = net.init_network(spec, seed=0)
    state.params[0]["w"][:] = 0.0
    state.params[0]["b"][:] = 0.0
    state.params[0]["b"][basis_index] = 1.0
    cfg = TrainConfig(k=k, preproc=PreprocConfig(target_h=8, target_w=8))
    return TrainedModel(spec, state, "ddp", SK, normalizer, protos, cfg, {}), c


class TestInfer:
    def frame(self):
        from depthpose.core import DepthFrame
        rng = np.random.default_rng(0)
        return DepthFrame("cam0", rng.uniform(1.0, 2.0, (16, 16)).astype(np.float32))

    def test_stub_returns_denormalized_prototype(self):
        model, c = stub_model(1)
        pose = infer(model, self.frame())
        expected = denormalize(c[:, 1], model.normalizer).reshape(15, 3)
        assert np.allclose(pose.coords, expected, atol=1e-6)
        assert pose.frame == "camera:cam0"

    def test_inference_deterministic(self):
        model, _ = stub_model(0)
        f = self.frame()
        p1, p2 = infer(model, f), infer(model, f)
        assert np.array_equal(p1.coords, p2.coords)

    def test_all_zero_frame_rejected(self):
        from depthpose.core import DepthFrame
        model, _ = stub_model(0)
        with pytest.raises(ValueError):
            infer(model, DepthFrame("cam0", np.zeros((16, 16), np.float32)))


class TestCameraToWorld:
    def test_identity(self):
        cam = ring_cameras(1, rng=np.random.default_rng(0))[0]
        identity = cam.__class__("id", np.hstack([np.eye(3), np.zeros((3, 1))]),
                                 fx=1, fy=1, cx=0, cy=0)
        pose = Pose(SK, np.random.default_rng(1).standard_normal((15, 3)),
                    frame="camera:id")
        out = camera_to_world(pose, identity)
        assert np.allclose(out.coords, pose.coords)
        assert out.frame == "world"

    def test_round_trip_and_isometry(self):
        cam = ring_cameras(3, rng=np.random.default_rng(5))[2]
        rng = np.random.default_rng(2)
        world = Pose(SK, rng.standard_normal((15, 3)))
        cam_pose = Pose(SK, cam.world_to_camera(world.coords), frame="camera:c")
        back = camera_to_world(cam_pose, cam)
        assert np.allclose(back.coords, world.coords, atol=1e-9)
        d_before = np.linalg.norm(world.coords[:, None] - world.coords[None], axis=2)
        d_after = np.linalg.norm(cam_pose.coords[:, None] - cam_pose.coords[None], axis=2)
        assert np.allclose(d_before, d_after, atol=1e-9)


class TestFusion:
    def poses(self, n, seed=0):
        rng = np.random.default_rng(seed)
        base = rng.standard_normal((15, 3))
        return [Pose(SK, base + rng.normal(0, 0.01, (15, 3))) for _ in range(n)]

    def test_identical_poses_unchanged(self):
        p = Pose(SK, np.random.default_rng(1).standard_normal((15, 3)))
        out = fuse_multiview([p, p, p], FusionWeights(np.array([0.2, 0.5, 0.3])))
        assert np.allclose(out.coords, p.coords, atol=1e-12)

    def test_equal_weights_mean(self):
        ps = self.poses(3)
        out = fuse_multiview(ps, FusionWeights.equal(3))
        expected = np.mean([p.coords for p in ps], axis=0)
        assert np.allclose(out.coords, expected, atol=1e-12)

    def test_unequal_weights(self):
        ps = self.poses(2)
        out = fuse_multiview(ps, FusionWeights(np.array([0.6, 0.4])))
        expected = 0.6 * ps[0].coords + 0.4 * ps[1].coords
        assert np.allclose(out.coords, expected, atol=1e-12)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ValueError, match="sum to 1"):
            FusionWeights(np.array([0.5, 0.6]))

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            FusionWeights(np.array([1.5, -0.5]))

    def test_weight_count_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            fuse_multiview(self.poses(3), FusionWeights.equal(2))

    def test_camera_frame_pose_rejected(self):
        ps = self.poses(2)
        bad = Pose(SK, ps[0].coords, frame="camera:a")
        with pytest.raises(ValueError, match="world"):
            fuse_multiview([bad, ps[1]], FusionWeights.equal(2))


class TestModelFile:
    def trained(self):
        splits = desk_dataset(n_scenes=2, n_cameras=2, seed=8)
        return train(splits.train, desk_config(epochs=1)), splits.train

    def test_save_load_round_trip(self, tmp_path):
        model, ds = self.trained()
        path = tmp_path / "m.dpm"
        save_model(model, str(path))
        loaded = load_model(str(path))
        assert loaded.head == model.head
        assert loaded.prototypes.k == model.prototypes.k
        frame = ds.samples[0].frames[0]
        assert np.array_equal(infer(loaded, frame).coords, infer(loaded, frame).coords)
        # second generation is byte-identical
        path2 = tmp_path / "m2.dpm"
        save_model(loaded, str(path2))
        assert path.read_bytes() == path2.read_bytes()

    def test_checksum_detected(self, tmp_path):
        model, _ = self.trained()
        path = tmp_path / "m.dpm"
        save_model(model, str(path))
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_model(str(path))

    def test_loaded_model_infers_like_original(self, tmp_path):
        model, ds = self.trained()
        path = tmp_path / "m.dpm"
        save_model(model, str(path))
        loaded = load_model(str(path))
        frame = ds.samples[1].frames[0]
        a = infer(model, frame)
        b = infer(loaded, frame)
        # prototypes go through f32 in the file; predictions agree to f32
        assert np.allclose(a.coords, b.coords, rtol=1e-5, atol=1e-5)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(sigma2=0.0)
        with pytest.raises(ValueError):
            TrainConfig(alpha=1.5)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(head="nope")

    def test_round_trip_dict(self):
        cfg = TrainConfig(k=7, sigma2=0.8, alpha=0.05,
                          preproc=PreprocConfig(target_h=32, target_w=32))
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
