"""
loss 測試：residual、三種 loss mode、解析偏導 vs finite differences
"""

from dataclasses import replace

import numpy as np
import pytest

from emtrack.geometry import chart_batch, essential_from_rt, essential_state_from_matrix, update
from emtrack.losses import (
    KernelConfig, KernelKnnLoss, LossEval, LossFactory, LossMode, SquaredPairsLoss, evaluate,
    gaussian_kernel, residual,
)
from emtrack.matching import FrameObservation, attach_correspondences, knn
from emtrack.simulator import SceneConfig, generate_frame, pose_from_drift

E_X = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)


def _fd_check(state, frame, cfg, h_scale=1e-3):
    """analytic (grad, hess_diag) vs central differences（值 → grad；re-centred grad → hess）"""
    loss = LossFactory.create(cfg.loss_mode)
    ev = loss.evaluate(state, frame, cfg)
    h = h_scale * cfg.sigma
    thetas = np.concatenate([np.eye(5) * h, -np.eye(5) * h])
    vals = loss.value_batch(chart_batch(state, thetas), frame, cfg)
    grad_fd = (vals[:5] - vals[5:]) / (2 * h)
    hess_fd = np.array([
        (loss.evaluate(update(state, h * e), frame, cfg).grad[i]
         - loss.evaluate(update(state, -h * e), frame, cfg).grad[i]) / (2 * h)
        for i, e in enumerate(np.eye(5))
    ])
    return ev, grad_fd, hess_fd


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


class TestResidual:
    """epipolar residual"""

    def test_zero_residual(self):
        assert residual(E_X, [0, 0, 1], [0, 0, 1]) == 0.0

    def test_unit_residual(self):
        assert residual(E_X, [0, 0, 1], [0, 1, 1]) == -1.0

    def test_noiseless_pairs(self, noiseless_scene):
        fr = attach_correspondences(generate_frame(noiseless_scene, 0), noiseless_scene.K0,
                                    noiseless_scene.K1, k=1)
        E = essential_from_rt(*fr.pose)
        for li, ri in fr.pairing[:50]:
            assert abs(residual(E, fr.x[li], fr.y[ri])) <= 1e-12


class TestKernel:
    """gaussian kernel 與 term 集合"""

    def test_kernel_derivatives(self):
        r = np.linspace(-0.004, 0.004, 41)
        s = 0.001
        f, f1, f2 = gaussian_kernel(r, s)
        h = 1e-8
        fp, _, _ = gaussian_kernel(r + h, s)
        fm, _, _ = gaussian_kernel(r - h, s)
        np.testing.assert_allclose(f1, (fp - fm) / (2 * h), rtol=1e-5, atol=1e-3)
        assert f[20] == -1.0

    def test_single_mutual_pair_two_terms(self):
        fr = FrameObservation(
            frame_index=0, kps_left=np.zeros((1, 2)), kps_right=np.zeros((1, 2)),
            desc_left=np.array([[1.0, 0.0]]), desc_right=np.array([[1.0, 0.0]]),
            x=np.array([[0.0, 0.0, 1.0]]), y=np.array([[0.0, 0.0, 1.0]]),
        )
        fr = replace(fr, corr=knn(fr.desc_left, fr.desc_right, 1))
        loss = KernelKnnLoss()
        li, ri = loss.terms(fr, KernelConfig())
        r = np.array([residual(E_X, fr.x[i], fr.y[j]) for i, j in zip(li, ri)])
        assert len(li) == 2
        assert float(np.sum(loss.value_kernel(r, 0.001))) == -2.0

    def test_kernel_knn_counts_both_directions(self, prepared_frame, reference_state):
        ev = evaluate(reference_state, prepared_frame, KernelConfig(sigma=0.001))
        assert ev.n_terms == prepared_frame.corr.n_terms

    def test_flat_kernel_limit(self, prepared_frame, reference_state):
        ev = evaluate(reference_state, prepared_frame, KernelConfig(sigma=1e6))
        assert ev.value == pytest.approx(-ev.n_terms, rel=1e-9)
        assert np.max(np.abs(ev.grad)) < 1e-6


class TestLossModes:
    """kernel-pairs / squared-pairs / factory"""

    def test_factory(self):
        assert isinstance(LossFactory.create('squared-pairs'), SquaredPairsLoss)
        assert isinstance(LossFactory.create(LossMode.KERNEL_KNN), KernelKnnLoss)
        with pytest.raises(ValueError):
            LossFactory.create('huber')

    def test_kernel_config_validation(self):
        with pytest.raises(ValueError):
            KernelConfig(sigma=0.0)
        with pytest.raises(ValueError):
            KernelConfig(loss_mode='nope')
        assert KernelConfig(loss_mode='kernel-pairs').loss_mode is LossMode.KERNEL_PAIRS

    def test_squared_pairs_value(self, prepared_frame, reference_state):
        ev = evaluate(reference_state, prepared_frame, KernelConfig(loss_mode='squared-pairs'))
        m = prepared_frame.matches
        E = reference_state.matrix()
        expected = sum(residual(E, prepared_frame.x[i], prepared_frame.y[j]) ** 2 for i, j in m)
        assert ev.value == pytest.approx(expected, rel=1e-10)
        assert ev.n_terms == len(m)

    def test_min_confidence_drops_pairs(self, prepared_frame, reference_state):
        all_pairs = evaluate(reference_state, prepared_frame, KernelConfig(loss_mode='kernel-pairs'))
        strict = evaluate(reference_state, prepared_frame,
                          KernelConfig(loss_mode='kernel-pairs', min_confidence=0.99))
        assert strict.n_terms < all_pairs.n_terms or strict.low_information

    def test_low_information_frame(self, small_scene, reference_state):
        fr = generate_frame(small_scene, 0)
        tiny = FrameObservation(frame_index=0, kps_left=fr.kps_left[:5], kps_right=fr.kps_right[:5],
                                desc_left=fr.desc_left[:5], desc_right=fr.desc_right[:5])
        tiny = attach_correspondences(tiny, small_scene.K0, small_scene.K1, k=5)
        ev = evaluate(reference_state, tiny, KernelConfig())
        assert ev.low_information and ev.n_terms == 0
        assert LossEval.skip().low_information

    def test_missing_correspondences(self, small_scene, reference_state):
        with pytest.raises(ValueError):
            evaluate(reference_state, generate_frame(small_scene, 0), KernelConfig())


class TestDerivatives:
    """解析 grad / Hessian 對角 vs finite differences"""

    def test_noiseless_optimum(self, noiseless_scene):
        fr = attach_correspondences(generate_frame(noiseless_scene, 0), noiseless_scene.K0,
                                    noiseless_scene.K1, k=1)
        state = essential_state_from_matrix(essential_from_rt(*fr.pose))
        ev = evaluate(state, fr, KernelConfig(sigma=0.001))
        assert np.linalg.norm(ev.grad) <= 1e-8 * ev.n_terms
        assert ev.hess_diag[0] > 0

    @pytest.mark.parametrize('mode', ['kernel-knn', 'kernel-pairs', 'squared-pairs'])
    def test_random_configurations(self, mode):
        rng = np.random.default_rng(99)
        n_configs = 100 if mode == 'kernel-knn' else 20
        for i in range(n_configs):
            sigma = float(np.exp(rng.uniform(np.log(2.5e-4), np.log(4e-3))))
            scene = SceneConfig.preset('carla-drift', n_points=200, descriptor_dim=16, seed=i)
            fr = attach_correspondences(generate_frame(scene, 0, rng.uniform(-0.5, 0.5, 3)),
                                        scene.K0, scene.K1, k=3)
            truth = essential_state_from_matrix(essential_from_rt(*fr.pose))
            state = update(truth, rng.normal(0.0, sigma, 5))
            cfg = KernelConfig(sigma=sigma, loss_mode=mode)
            ev, grad_fd, hess_fd = _fd_check(state, fr, cfg)
            if np.linalg.norm(ev.grad) > 1e-8:
                assert _rel_err(ev.grad, grad_fd) <= 1e-4, f"config {i}: grad"
            if np.linalg.norm(ev.hess_diag) > 1e-8:
                assert _rel_err(ev.hess_diag, hess_fd) <= 1e-4, f"config {i}: hess"


class _ReorderedKnnLoss(KernelKnnLoss):
    """同一組 term，換一個累加順序"""

    def __init__(self, order):
        self.order = order

    def terms(self, frame, cfg):
        li, ri = super().terms(frame, cfg)
        idx = self.order(len(li))
        return li[idx], ri[idx]


class TestTermOrder:
    """value / grad / hess 與 term 順序無關"""

    def test_reversed_terms_bit_identical(self, prepared_frame, reference_state):
        cfg = KernelConfig(sigma=0.001)
        state = update(reference_state, np.full(5, 2e-4))
        ev = KernelKnnLoss().evaluate(state, prepared_frame, cfg)
        rev = _ReorderedKnnLoss(lambda n: np.arange(n)[::-1]).evaluate(state, prepared_frame, cfg)
        assert rev.value == ev.value
        np.testing.assert_array_equal(rev.grad, ev.grad)
        np.testing.assert_array_equal(rev.hess_diag, ev.hess_diag)

    def test_permuted_terms_same_value(self, prepared_frame, reference_state):
        cfg = KernelConfig(sigma=0.001)
        perm = np.random.default_rng(5).permutation
        ev = KernelKnnLoss().evaluate(reference_state, prepared_frame, cfg)
        shuffled = _ReorderedKnnLoss(perm).evaluate(reference_state, prepared_frame, cfg)
        assert shuffled.value == ev.value
        np.testing.assert_array_equal(shuffled.grad, ev.grad)

    def test_batch_values_order_free(self, prepared_frame, reference_state):
        cfg = KernelConfig(sigma=0.001)
        thetas = np.random.default_rng(6).normal(0.0, 1e-3, (8, 5))
        Es = chart_batch(reference_state, thetas)
        a = KernelKnnLoss().value_batch(Es, prepared_frame, cfg)
        b = _ReorderedKnnLoss(lambda n: np.arange(n)[::-1]).value_batch(Es, prepared_frame, cfg)
        np.testing.assert_array_equal(a, b)


class TestRobustness:
    """50% outliers：kernel-knn 的最小值仍在真值上，squared-pairs 被拉偏"""

    GRID = np.linspace(-0.5, 0.5, 9)

    def _argmin_per_axis(self, scene, frame, mode):
        loss = LossFactory.create(mode)
        cfg = KernelConfig(sigma=0.001, loss_mode=mode)
        out = []
        for axis in range(3):
            Es = []
            for d in self.GRID:
                delta = np.zeros(3)
                delta[axis] = d
                Es.append(essential_from_rt(*pose_from_drift(scene, delta)))
            out.append(self.GRID[int(np.argmin(loss.value_batch(np.array(Es), frame, cfg)))])
        return np.array(out)

    def test_kernel_argmin_at_truth(self):
        scene = SceneConfig.preset('carla-drift', outlier_rate=0.5, seed=8)
        fr = attach_correspondences(generate_frame(scene, 0), scene.K0, scene.K1, k=5)
        kernel = self._argmin_per_axis(scene, fr, 'kernel-knn')
        squared = self._argmin_per_axis(scene, fr, 'squared-pairs')
        assert np.all(np.abs(kernel) <= 0.05), kernel
        assert np.any(np.abs(squared) > 0.05), squared
