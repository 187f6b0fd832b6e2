"""simulator 測試：決定性、presets、drift schedule、ground truth pairing"""

import numpy as np
import pytest

from emtrack.geometry import essential_from_rt, rotation_error_axes
from emtrack.matching import MIN_POINTS, normalize
from emtrack.simulator import (
    PRESETS, DriftMode, DriftSchedule, SceneConfig, apply_drift, generate_frame, generate_sequence,
    ground_truth_table, pose_from_drift, random_decalibration, stream_rng, with_seed,
)


class TestSceneConfig:
    """presets 與驗證"""

    @pytest.mark.parametrize('name', PRESETS)
    def test_presets(self, name):
        cfg = SceneConfig.preset(name, n_points=50)
        assert cfg.preset_name == name and cfg.n_points == 50
        R, t = cfg.reference_pose()
        assert np.linalg.norm(t) == pytest.approx(cfg.baseline)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)

    def test_man_like_vergence(self):
        cfg = SceneConfig.preset('man-like')
        R, _ = cfg.reference_pose()
        assert rotation_error_axes(R, np.eye(3))[1] == pytest.approx(14.0)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            SceneConfig.preset('tesla')

    @pytest.mark.parametrize('kw', [
        dict(n_points=0), dict(depth_range=(5.0, 5.0)), dict(outlier_rate=1.5),
        dict(pixel_noise=-1.0), dict(descriptor_dim=0), dict(baseline=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SceneConfig(**kw)


class TestDriftSchedule:
    """drift 模式"""

    def test_none(self):
        assert not DriftSchedule(mode='none').cumulative(50).any()

    def test_first_frame_is_reference(self):
        for mode in ('random-walk', 'ramp', 'sinusoid'):
            assert not DriftSchedule(mode=mode).cumulative(10)[0].any()

    def test_ramp(self):
        cum = DriftSchedule(mode='ramp', amplitude=0.02, axes=('y',)).cumulative(11)
        np.testing.assert_allclose(cum[10], [0.0, 0.2, 0.0])

    def test_random_walk_steps(self):
        inc = DriftSchedule(mode=DriftMode.RANDOM_WALK, amplitude=0.01, seed=4).increments(500)
        np.testing.assert_allclose(np.abs(inc[1:]), 0.01)
        # 三軸獨立
        assert not np.array_equal(inc[:, 0], inc[:, 1])

    def test_random_walk_spread_grows_with_sqrt_frames(self):
        # 400 條獨立 random walk × 3 軸：cumulative[s] 的標準差 ≈ amplitude·√s
        amp, n = 0.01, 401
        walks = np.stack([DriftSchedule(seed=seed, amplitude=amp).cumulative(n) for seed in range(400)])
        for s in (100, 400):
            spread = np.sqrt(np.mean(walks[:, s, :] ** 2))
            assert spread == pytest.approx(amp * np.sqrt(s), rel=0.1)

    def test_stream_rng_streams(self):
        a = stream_rng(3, 7).random(5)
        np.testing.assert_array_equal(a, stream_rng(3, 7).random(5))
        assert not np.array_equal(a, stream_rng(3, 8).random(5))
        assert not np.array_equal(a, stream_rng(4, 7).random(5))

    def test_random_walk_deterministic(self):
        a = DriftSchedule(seed=9).cumulative(300)
        b = DriftSchedule(seed=9).cumulative(300)
        c = DriftSchedule(seed=10).cumulative(300)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_prefix_stable(self):
        s = DriftSchedule(seed=2)
        np.testing.assert_array_equal(s.cumulative(100), s.cumulative(300)[:100])

    def test_sinusoid(self):
        inc = DriftSchedule(mode='sinusoid', amplitude=0.01, period=40, axes=('Rz',)).increments(41)
        assert inc[10, 2] == pytest.approx(0.01)
        assert not inc[:, :2].any()

    def test_repeat(self):
        cum = DriftSchedule(seed=1, repeat=20).cumulative(60)
        np.testing.assert_array_equal(cum[:20], cum[20:40])

    @pytest.mark.parametrize('kw', [
        dict(axes=('w',)), dict(amplitude=-0.1), dict(period=0), dict(repeat=-1), dict(mode='spiral'),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            DriftSchedule(**kw)

    def test_drift_recovered_exactly(self, small_scene):
        sched = DriftSchedule(seed=5, amplitude=0.05)
        R_ref, _ = small_scene.reference_pose()
        cum = sched.cumulative(200)
        for s in (1, 57, 199):
            R = apply_drift(R_ref, sched, s)
            np.testing.assert_allclose(rotation_error_axes(R, R_ref), cum[s], atol=1e-9)

    def test_ground_truth_table(self, small_scene):
        sched = DriftSchedule(seed=5)
        Rs, ts, cum = ground_truth_table(small_scene, sched, 30)
        assert len(Rs) == len(ts) == 30 and cum.shape == (30, 3)
        R, t = pose_from_drift(small_scene, cum[12])
        np.testing.assert_array_equal(Rs[12], R)
        np.testing.assert_allclose(ts[12], -R @ small_scene.center_right)


class TestGenerateFrame:
    """單幀合成"""

    def test_deterministic(self, small_scene):
        a = generate_frame(small_scene, 7, [0.1, 0.0, -0.2])
        b = generate_frame(small_scene, 7, [0.1, 0.0, -0.2])
        assert a.same_content(b)
        np.testing.assert_array_equal(a.kps_left, b.kps_left)

    def test_frames_differ(self, small_scene):
        assert not np.array_equal(generate_frame(small_scene, 0).kps_left, generate_frame(small_scene, 1).kps_left)

    def test_seed_changes_scene(self, small_scene):
        a = generate_frame(small_scene, 0)
        b = generate_frame(with_seed(small_scene, 99), 0)
        assert not np.array_equal(a.kps_left, b.kps_left)

    def test_keypoints_inside_image(self, small_scene):
        fr = generate_frame(small_scene, 0)
        W, H = small_scene.image_size
        for kps in (fr.kps_left, fr.kps_right):
            assert np.all((kps[:, 0] >= 0) & (kps[:, 0] < W) & (kps[:, 1] >= 0) & (kps[:, 1] < H))
        assert fr.desc_left.shape == (fr.n_left, small_scene.descriptor_dim)
        np.testing.assert_allclose(np.linalg.norm(fr.desc_right, axis=1), 1.0)

    def test_outlier_fraction(self, small_scene):
        fr = generate_frame(small_scene, 0)
        n_out = fr.n_left - len(fr.pairing)
        assert n_out == int(np.floor(small_scene.outlier_rate * fr.n_left))

    def test_pairing_satisfies_epipolar_constraint(self, noiseless_scene):
        fr = generate_frame(noiseless_scene, 3, [0.3, -0.2, 0.1])
        E = essential_from_rt(*fr.pose)
        x = normalize(fr.kps_left, noiseless_scene.K0)
        y = normalize(fr.kps_right, noiseless_scene.K1)
        li, ri = fr.pairing[:, 0], fr.pairing[:, 1]
        r = np.einsum('ni,ij,nj->n', y[ri], E, x[li])
        assert np.max(np.abs(r)) < 1e-10
        assert len(fr.pairing) == fr.n_left

    def test_degenerate_frame_warns(self, caplog):
        cfg = SceneConfig.preset('carla-drift', n_points=3, seed=1)
        with caplog.at_level('WARNING', logger='emtrack.simulator'):
            fr = generate_frame(cfg, 0)
        assert fr.n_left < MIN_POINTS
        assert fr.is_degenerate
        assert 'degenerate' in caplog.text


class TestSequence:
    """generate_sequence"""

    def test_parallel_matches_serial(self, small_scene):
        sched = DriftSchedule(seed=3)
        serial = list(generate_sequence(small_scene, sched, 8))
        parallel = list(generate_sequence(small_scene, sched, 8, workers=4))
        assert [f.frame_index for f in parallel] == list(range(8))
        assert all(a.same_content(b) for a, b in zip(serial, parallel))

    def test_negative_frames(self, small_scene):
        with pytest.raises(ValueError):
            list(generate_sequence(small_scene, DriftSchedule(), -1))

    def test_random_decalibration_range(self, rng):
        d = np.array([random_decalibration(rng, 1.0) for _ in range(500)])
        assert d.shape == (500, 3)
        assert np.all(np.abs(d) <= 1.0)
