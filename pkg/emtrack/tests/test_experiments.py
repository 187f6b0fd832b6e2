"""
experiments 測試：小規模 smoke run（表格 / 彙總欄位、決定性）
acceptance 規模（20 × 1000 幀）標為 slow，需 --runslow
"""

import numpy as np
import pytest

from emtrack.experiments import (
    STUDIES, bias_study, de_recovery, latency_study, robustness_ablation, run_tracked, sigma_sweep,
    timing_profile, tracking_efficacy,
)
from emtrack.globalopt import DeConfig
from emtrack.losses import KernelConfig
from emtrack.simulator import DriftSchedule, SceneConfig
from emtrack.tracker import TrackerOptions

FAST_DE = DeConfig(population=16, generations_per_stage=6, stages=3)


@pytest.fixture
def drift():
    return DriftSchedule(seed=7, amplitude=0.01)


class TestSmoke:
    """小規模執行"""

    def test_run_tracked_deterministic(self, small_scene, drift):
        a = run_tracked(small_scene, drift, 25, KernelConfig(), TrackerOptions())
        b = run_tracked(small_scene, drift, 25, KernelConfig(), TrackerOptions())
        np.testing.assert_array_equal(a.tracker.state.U, b.tracker.state.U)
        assert a.precision == b.precision
        assert a.drift.shape == (25, 3)

    def test_tracking_efficacy(self, small_scene, drift):
        res = tracking_efficacy(small_scene, drift, n_sequences=2, n_frames=30)
        assert res.name == 'tracking_efficacy'
        assert list(res.table['seed']) == [small_scene.seed, small_scene.seed + 1]
        assert {'tracked_ry_deg', 'baseline_ry_deg', 'ratio_y'} <= set(res.summary)
        assert res.passed in (True, False)

    def test_parallel_matches_serial(self, small_scene, drift):
        a = tracking_efficacy(small_scene, drift, n_sequences=2, n_frames=20)
        b = tracking_efficacy(small_scene, drift, n_sequences=2, n_frames=20, workers=2)
        assert a.table.equals(b.table)

    def test_bias_study(self, small_scene):
        res = bias_study(small_scene, n_sequences=3, n_frames=25)
        assert len(res.table) == 3
        assert {'mean_ry_deg', 'std_ry_deg', 'flagged_ry'} <= set(res.summary)

    def test_latency_study(self, small_scene, drift):
        res = latency_study(small_scene, drift, n_sequences=2, n_frames=60, max_lag=5)
        assert res.summary['n_sequences'] == 2
        assert res.table[['lag_x', 'lag_y', 'lag_z']].abs().to_numpy().max() <= 5

    def test_de_recovery(self, small_scene):
        res = de_recovery(small_scene, FAST_DE, n_seeds=2, max_decal_deg=0.5, k=3)
        assert len(res.table) == 2
        assert np.all(np.abs(res.table[['decal_x_deg', 'decal_y_deg', 'decal_z_deg']].to_numpy()) <= 0.5)
        assert 'median_err_ry_deg' in res.summary

    def test_robustness_ablation(self, small_scene, drift):
        res = robustness_ablation(small_scene, drift, n_sequences=1, n_frames=25)
        assert {'kernel_rot_mae_deg', 'squared_rot_mae_deg', 'kernel_wins'} <= set(res.summary)

    def test_sigma_sweep(self, small_scene, drift):
        res = sigma_sweep(small_scene, drift, sigmas=(0.0005, 0.002), n_sequences=1, n_frames=20)
        assert len(res.table) == 4
        assert set(res.table['condition']) == {'calibrated', 'drifted'}

    def test_timing_profile(self, small_scene):
        res = timing_profile(small_scene, n_frames=3)
        assert len(res.table) == 3
        assert (res.table['total_ms'] > 0).all()

    def test_studies_registry(self):
        assert 'tracking_efficacy' in STUDIES and len(STUDIES) == 7


@pytest.mark.slow
class TestAcceptance:
    """acceptance 規模"""

    def test_tracking_efficacy_carla(self):
        scene = SceneConfig.preset('carla-drift', seed=7)
        res = tracking_efficacy(scene, DriftSchedule(seed=7, amplitude=0.01), n_sequences=20, n_frames=1000,
                                workers=4)
        assert res.passed, res.summary

    def test_no_bias(self):
        res = bias_study(SceneConfig.preset('carla-drift', seed=11), n_sequences=20, n_frames=1000, workers=4)
        assert res.passed, res.summary

    def test_zero_latency(self):
        res = latency_study(SceneConfig.preset('carla-drift', seed=13), DriftSchedule(seed=13), n_sequences=20,
                            n_frames=1000, workers=4)
        assert res.passed, res.summary

    def test_de_recovery_within_005_deg(self):
        res = de_recovery(SceneConfig.preset('flowguided-like', seed=3), DeConfig(), n_seeds=20, workers=4)
        assert res.passed, res.summary

    def test_frame_budget_at_1000_keypoints(self):
        res = timing_profile(SceneConfig.preset('carla-drift', n_points=1000, seed=19), n_frames=20)
        assert res.table['n_left'].median() > 900
        assert res.passed, res.summary

    def test_kernel_beats_squared_with_outliers(self):
        res = robustness_ablation(SceneConfig.preset('carla-drift', seed=17), DriftSchedule(seed=17),
                                  n_sequences=10, n_frames=1000, workers=4)
        assert res.passed, res.summary
