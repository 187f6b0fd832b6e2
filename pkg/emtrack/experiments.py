"""
Experiments — 以合成場景跑的可重現研究

每個 study 回傳 StudyResult（逐 sequence 表格 + 彙總 + pass/fail），
CLI `experiment <name>` 直接呼叫。序列之間彼此獨立，可用 thread pool 平行，
輸出依 seed 排序。
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from emtrack.filter import FilterState, tick
from emtrack.geometry import (
    essential_from_rt, essential_state_from_matrix, recover_rt, rotation_error_axes,
)
from emtrack.globalopt import DeConfig, solve_detailed
from emtrack.losses import KernelConfig, LossFactory, LossMode
from emtrack.matching import attach_correspondences, knn
from emtrack.metrics import (
    PrecisionSummary, aggregate, bias_stats, improvement_ratio, latency_xcorr,
)
from emtrack.simulator import (
    DriftSchedule, SceneConfig, generate_frame, generate_sequence, random_decalibration,
    stream_rng, with_seed,
)
from emtrack.tracker import (
    EssentialTracker, TrackerOptions, ground_truth_of, inlier_matches, precision_against,
)

logger = logging.getLogger(__name__)

DECAL_STREAM = 0x4445   # "DE"


@dataclass
class StudyResult:
    name: str
    table: pd.DataFrame
    summary: Dict[str, float] = field(default_factory=dict)
    passed: Optional[bool] = None

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'metric': list(self.summary), 'value': list(self.summary.values())})


@dataclass
class SequenceRun:
    seed: int
    tracker: EssentialTracker
    precision: PrecisionSummary
    drift: np.ndarray              # (n, 3) 累積 ground-truth drift（度）


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_tracked(scene: SceneConfig, drift: DriftSchedule, n_frames: int, kernel: KernelConfig,
                options: TrackerOptions, track: bool = True) -> SequenceRun:
    """合成一條序列並追蹤（track=False 為不追蹤 baseline）"""
    frames = list(generate_sequence(scene, drift, n_frames))
    options = replace(options, log_frames=False)
    tracker = EssentialTracker(scene.reference_pose(), scene.K0, scene.K1, kernel, options, track=track)
    for fr in frames:
        tracker.process(fr)
    precision = precision_against(tracker, ground_truth_of(frames))
    return SequenceRun(seed=scene.seed, tracker=tracker, precision=precision, drift=drift.cumulative(n_frames))


def _deviation(run: SequenceRun) -> np.ndarray:
    return np.array([r.rot_dev_deg for r in run.tracker.records])


# ==================== Tracking efficacy ====================

def tracking_efficacy(scene: SceneConfig, drift: DriftSchedule, n_sequences: int = 20, n_frames: int = 1000,
                      kernel: Optional[KernelConfig] = None, options: Optional[TrackerOptions] = None,
                      workers: int = 1, min_ratio: float = 3.0,
                      max_rot_deg: Tuple[float, float, float] = (0.05, 0.2, 0.05)) -> StudyResult:
    """tracked vs 不追蹤：每軸 MAE 與改善倍數"""
    kernel = kernel or KernelConfig()
    options = options or TrackerOptions()

    def one(i: int) -> dict:
        sc = with_seed(scene, scene.seed + i)
        dr = replace(drift, seed=drift.seed + i)
        tracked = run_tracked(sc, dr, n_frames, kernel, options).precision
        base = run_tracked(sc, dr, n_frames, kernel, options, track=False).precision
        row = {'seed': sc.seed, 'n_frames': tracked.n_frames}
        row.update({f'tracked_{k}': v for k, v in tracked.to_dict().items() if k != 'n_frames'})
        row.update({f'baseline_{k}': v for k, v in base.to_dict().items() if k != 'n_frames'})
        logger.info(f"ℹ️ efficacy seed={sc.seed}: tracked R={np.round(tracked.rotation, 4).tolist()} "
                    f"baseline R={np.round(base.rotation, 4).tolist()}")
        return row

    table = pd.DataFrame(_map(one, range(n_sequences), workers))
    tracked = aggregate(_rows_to_summaries(table, 'tracked_'))
    base = aggregate(_rows_to_summaries(table, 'baseline_'))
    ratio = improvement_ratio(base, tracked)
    summary = {f'tracked_{k}': v for k, v in tracked.to_dict().items()}
    summary.update({f'baseline_{k}': v for k, v in base.to_dict().items()})
    summary.update({f'ratio_{a}': float(r) for a, r in zip('xyz', ratio)})
    passed = bool(np.all(ratio >= min_ratio) and np.all(tracked.rotation <= np.asarray(max_rot_deg)))
    return StudyResult('tracking_efficacy', table, summary, passed)


def _rows_to_summaries(table: pd.DataFrame, prefix: str) -> List[PrecisionSummary]:
    keys = ['rx_deg', 'ry_deg', 'rz_deg', 'tx_mm', 'ty_mm', 'tz_mm', 't_angle_deg']
    return [
        PrecisionSummary(**{k: float(row[prefix + k]) for k in keys}, n_frames=int(row['n_frames']))
        for _, row in table.iterrows()
    ]


# ==================== Bias / latency ====================

def bias_study(scene: SceneConfig, n_sequences: int = 20, n_frames: int = 1000,
               kernel: Optional[KernelConfig] = None, options: Optional[TrackerOptions] = None,
               workers: int = 1) -> StudyResult:
    """零 drift 序列：每序列 burn-in 後的平均追蹤旋轉偏差，跨序列檢定是否有 bias"""
    kernel = kernel or KernelConfig()
    options = options or TrackerOptions()
    still = DriftSchedule(mode='none')

    def one(i: int) -> dict:
        run = run_tracked(with_seed(scene, scene.seed + i), still, n_frames, kernel, options)
        mean = _deviation(run)[options.burn_in:].mean(axis=0)
        return {'seed': run.seed, 'mean_rx_deg': mean[0], 'mean_ry_deg': mean[1], 'mean_rz_deg': mean[2]}

    table = pd.DataFrame(_map(one, range(n_sequences), workers))
    res = bias_stats(table[['mean_rx_deg', 'mean_ry_deg', 'mean_rz_deg']].to_numpy())
    summary = {}
    for a, m, s, f in zip('xyz', res.mean, res.std, res.flagged):
        summary.update({f'mean_r{a}_deg': float(m), f'std_r{a}_deg': float(s), f'flagged_r{a}': float(f)})
    return StudyResult('bias_study', table, summary, passed=not res.any_flagged)


def latency_study(scene: SceneConfig, drift: DriftSchedule, n_sequences: int = 20, n_frames: int = 1000,
                  max_lag: int = 10, kernel: Optional[KernelConfig] = None,
                  options: Optional[TrackerOptions] = None, workers: int = 1,
                  min_zero_lag: int = 18) -> StudyResult:
    """tracked 偏差 vs ground-truth 累積 drift 的 cross-correlation lag"""
    kernel = kernel or KernelConfig()
    options = options or TrackerOptions()

    def one(i: int) -> dict:
        run = run_tracked(with_seed(scene, scene.seed + i), replace(drift, seed=drift.seed + i),
                          n_frames, kernel, options)
        b = options.burn_in
        lags = latency_xcorr(_deviation(run)[b:], run.drift[b:], max_lag)
        return {'seed': run.seed, 'lag_x': int(lags[0]), 'lag_y': int(lags[1]), 'lag_z': int(lags[2])}

    table = pd.DataFrame(_map(one, range(n_sequences), workers))
    zero = (table[['lag_x', 'lag_y', 'lag_z']] == 0).all(axis=1)
    summary = {'zero_lag_sequences': float(zero.sum()), 'n_sequences': float(len(table))}
    summary.update({f'median_lag_{a}': float(table[f'lag_{a}'].median()) for a in 'xyz'})
    return StudyResult('latency_study', table, summary, passed=bool(zero.sum() >= min(min_zero_lag, len(table))))


# ==================== DE recovery ====================

def de_recovery(scene: SceneConfig, de: DeConfig, n_seeds: int = 20, max_decal_deg: float = 1.0,
                k: int = 5, loss_mode: str = LossMode.KERNEL_KNN.value, workers: int = 1,
                max_median_deg: float = 0.05) -> StudyResult:
    """單幀 decalibration（每軸 ±max_decal_deg）→ annealed DE 由 reference 出發求解"""
    R_ref, t_ref = scene.reference_pose()
    initial = essential_state_from_matrix(essential_from_rt(R_ref, t_ref))

    def one(i: int) -> dict:
        sc = with_seed(scene, scene.seed + i)
        decal = random_decalibration(stream_rng(sc.seed, DECAL_STREAM), max_decal_deg)
        frame = attach_correspondences(generate_frame(sc, 0, decal), sc.K0, sc.K1, k)
        R_gt, _ = frame.pose
        res = solve_detailed(initial, frame, replace(de, seed=de.seed + i),
                             KernelConfig(sigma=de.sigma0, loss_mode=loss_mode))
        inliers = inlier_matches(res.state, frame, 3.0 * res.sigmas[-1])
        R, _t = recover_rt(res.state, inliers, (R_ref, t_ref))
        err = rotation_error_axes(R, R_gt)
        return {
            'seed': sc.seed,
            'decal_x_deg': decal[0], 'decal_y_deg': decal[1], 'decal_z_deg': decal[2],
            'err_rx_deg': abs(err[0]), 'err_ry_deg': abs(err[1]), 'err_rz_deg': abs(err[2]),
            'final_loss': res.stage_losses[-1],
        }

    table = pd.DataFrame(_map(one, range(n_seeds), workers))
    med = table[['err_rx_deg', 'err_ry_deg', 'err_rz_deg']].median()
    summary = {f'median_{c}': float(v) for c, v in med.items()}
    return StudyResult('de_recovery', table, summary, passed=bool((med <= max_median_deg).all()))


# ==================== Robust vs non-robust / σ ====================

def robustness_ablation(scene: SceneConfig, drift: DriftSchedule, n_sequences: int = 10, n_frames: int = 1000,
                        outlier_rate: float = 0.5, sigma: float = 0.001,
                        options: Optional[TrackerOptions] = None, workers: int = 1) -> StudyResult:
    """kernel-knn vs squared-pairs，高 outlier 比例下的旋轉 MAE"""
    options = options or TrackerOptions()
    scene = replace(scene, outlier_rate=outlier_rate)
    robust = KernelConfig(sigma=sigma, loss_mode=LossMode.KERNEL_KNN)
    squared = KernelConfig(sigma=sigma, loss_mode=LossMode.SQUARED_PAIRS)

    def one(i: int) -> dict:
        sc = with_seed(scene, scene.seed + i)
        dr = replace(drift, seed=drift.seed + i)
        a = run_tracked(sc, dr, n_frames, robust, options).precision
        b = run_tracked(sc, dr, n_frames, squared, options).precision
        return {'seed': sc.seed, 'kernel_rot_mae_deg': float(a.rotation.mean()),
                'squared_rot_mae_deg': float(b.rotation.mean())}

    table = pd.DataFrame(_map(one, range(n_sequences), workers))
    wins = table['kernel_rot_mae_deg'] < table['squared_rot_mae_deg']
    summary = {
        'kernel_wins': float(wins.sum()),
        'kernel_rot_mae_deg': float(table['kernel_rot_mae_deg'].mean()),
        'squared_rot_mae_deg': float(table['squared_rot_mae_deg'].mean()),
    }
    return StudyResult('robustness_ablation', table, summary, passed=bool(wins.all()))


def sigma_sweep(scene: SceneConfig, drift: DriftSchedule, sigmas: Sequence[float] = (0.00025, 0.0005, 0.001,
                0.002, 0.004), n_sequences: int = 3, n_frames: int = 500,
                options: Optional[TrackerOptions] = None, workers: int = 1) -> StudyResult:
    """
    σ 取捨：小 σ 在已校正序列上變異小，大 σ 對 drift 的 basin 較寬。
    每個 σ 各跑一組 calibrated（無 drift）與 drifted 序列。
    """
    options = options or TrackerOptions()
    still = DriftSchedule(mode='none')
    jobs = [(s, cond, i) for s in sigmas for cond in ('calibrated', 'drifted') for i in range(n_sequences)]

    def one(job) -> dict:
        sigma, cond, i = job
        dr = still if cond == 'calibrated' else replace(drift, seed=drift.seed + i)
        p = run_tracked(with_seed(scene, scene.seed + i), dr, n_frames, KernelConfig(sigma=sigma), options).precision
        return {'sigma': sigma, 'condition': cond, 'seed': scene.seed + i, 'n_frames': p.n_frames,
                'rx_deg': p.rx_deg, 'ry_deg': p.ry_deg, 'rz_deg': p.rz_deg}

    rows = pd.DataFrame(_map(one, jobs, workers))
    cols = ['rx_deg', 'ry_deg', 'rz_deg']
    weighted = rows[cols].mul(rows['n_frames'], axis=0).assign(
        sigma=rows['sigma'], condition=rows['condition'], n_frames=rows['n_frames'])
    sums = weighted.groupby(['sigma', 'condition'], sort=True).sum()
    table = sums[cols].div(sums['n_frames'].clip(lower=1), axis=0).reset_index()
    return StudyResult('sigma_sweep', table, {'n_runs': float(len(rows))})


# ==================== Timing ====================

def timing_profile(scene: SceneConfig, n_frames: int = 50, k: int = 5, sigma: float = 0.001,
                   max_frame_ms: float = 20.0) -> StudyResult:
    """逐幀分段耗時（ms）：kNN、loss 偏導、filter + manifold update"""
    loss = LossFactory.create(LossMode.KERNEL_KNN)
    kernel = KernelConfig(sigma=sigma)
    R_ref, t_ref = scene.reference_pose()
    state = essential_state_from_matrix(essential_from_rt(R_ref, t_ref))
    filt = FilterState(burn_in=0)
    rows = []
    for s in range(n_frames):
        fr = generate_frame(scene, s)
        t0 = time.perf_counter()
        knn(fr.desc_left, fr.desc_right, k)
        t1 = time.perf_counter()
        prepared = attach_correspondences(fr, scene.K0, scene.K1, k)
        t2 = time.perf_counter()
        ev = loss.evaluate(state, prepared, kernel)
        t3 = time.perf_counter()
        filt, state, _ = tick(filt, state, ev)
        t4 = time.perf_counter()
        rows.append({'frame': s, 'n_left': fr.n_left, 'knn_ms': (t1 - t0) * 1e3,
                     'loss_ms': (t3 - t2) * 1e3, 'filter_ms': (t4 - t3) * 1e3})
    table = pd.DataFrame(rows)
    table['total_ms'] = table['knn_ms'] + table['loss_ms'] + table['filter_ms']
    summary = {f'median_{c}': float(table[c].median()) for c in ('knn_ms', 'loss_ms', 'filter_ms', 'total_ms')}
    return StudyResult('timing_profile', table, summary, passed=summary['median_total_ms'] <= max_frame_ms)


STUDIES = ('tracking_efficacy', 'bias_study', 'latency_study', 'de_recovery',
           'robustness_ablation', 'sigma_sweep', 'timing_profile')
