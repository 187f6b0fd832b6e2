"""
序列層級評估

- sequence_precision：per-axis 旋轉 MAE（度）、baseline 尺度的平移 MAE（mm）、平移方向角 MAE（度）
- aggregate：多序列依幀數加權平均
- bias_stats：跨序列平均追蹤旋轉的 2σ/√N 偏差檢定
- latency_xcorr：tracked 與 drift 的 normalized cross-correlation 最大 lag
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from emtrack.geometry import rotation_error_axes, translation_metrics

logger = logging.getLogger(__name__)


@dataclass
class PrecisionSummary:
    rx_deg: float
    ry_deg: float
    rz_deg: float
    tx_mm: float
    ty_mm: float
    tz_mm: float
    t_angle_deg: float
    n_frames: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @property
    def rotation(self) -> np.ndarray:
        return np.array([self.rx_deg, self.ry_deg, self.rz_deg])


def frame_errors(trace: Sequence[Tuple[np.ndarray, np.ndarray]],
                 gt: Sequence[Tuple[np.ndarray, np.ndarray]], convention: str = 'XYZ') -> pd.DataFrame:
    """逐幀誤差表：rx, ry, rz（度，帶正負號）, tx, ty, tz（mm）, t_angle（度）"""
    if len(trace) != len(gt):
        raise ValueError(f"trace/ground-truth length mismatch ({len(trace)} vs {len(gt)})")
    rows = []
    for (R_est, t_est), (R_gt, t_gt) in zip(trace, gt):
        rot = rotation_error_axes(R_est, R_gt, convention)
        t_mm, ang = translation_metrics(t_est, t_gt)
        rows.append((*rot, *t_mm, ang))
    return pd.DataFrame(rows, columns=['rx', 'ry', 'rz', 'tx', 'ty', 'tz', 't_angle'])


def sequence_precision(trace, gt, burn_in: int = 0, convention: str = 'XYZ') -> PrecisionSummary:
    """
    MAE over frames（burn-in 期間的幀不計入）

    Raises:
        ValueError: 長度不一致或 burn-in 後沒有任何幀
    """
    err = frame_errors(trace, gt, convention).iloc[burn_in:]
    if len(err) == 0:
        raise ValueError(f"sequence_precision: no frames left after burn-in ({burn_in})")
    mae = err.abs().mean()
    return PrecisionSummary(
        rx_deg=float(mae['rx']), ry_deg=float(mae['ry']), rz_deg=float(mae['rz']),
        tx_mm=float(mae['tx']), ty_mm=float(mae['ty']), tz_mm=float(mae['tz']),
        t_angle_deg=float(mae['t_angle']), n_frames=int(len(err)),
    )


def aggregate(summaries: Iterable[PrecisionSummary]) -> PrecisionSummary:
    """依 n_frames 加權平均"""
    df = pd.DataFrame([s.to_dict() for s in summaries])
    if df.empty:
        raise ValueError("aggregate: no summaries")
    w = df['n_frames'].to_numpy(dtype=float)
    cols = ['rx_deg', 'ry_deg', 'rz_deg', 'tx_mm', 'ty_mm', 'tz_mm', 't_angle_deg']
    avg = {c: float(np.average(df[c].to_numpy(), weights=w)) for c in cols}
    return PrecisionSummary(**avg, n_frames=int(w.sum()))


@dataclass
class BiasResult:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray    # per-axis

    @property
    def any_flagged(self) -> bool:
        return bool(np.any(self.flagged))


def bias_stats(traces) -> BiasResult:
    """
    traces: (N, 3) 每序列的平均追蹤旋轉（度）
    |mean| > 2·std/√N 時 flag
    """
    a = np.asarray(traces, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if len(a) < 2:
        raise ValueError(f"bias_stats needs >= 2 sequences, got {len(a)}")
    mean = a.mean(axis=0)
    std = a.std(axis=0, ddof=1)
    flagged = np.abs(mean) > 2.0 * std / np.sqrt(len(a))
    # std = 0 且 mean = 0 → 不 flag；std = 0 且 mean ≠ 0 → flag
    return BiasResult(mean=mean, std=std, flagged=flagged)


def latency_xcorr(tracked, drift, max_lag: int) -> np.ndarray:
    """
    per-axis 使 normalized cross-correlation 最大的 lag L
    （tracked[t] 對齊 drift[t − L]；L > 0 表示 tracked 落後）。同分取 |L| 最小者。

    Raises:
        ValueError: 長度不一致、長度 < 2·max_lag + 1、或任一序列變異數為 0
    """
    x = np.asarray(tracked, dtype=float)
    y = np.asarray(drift, dtype=float)
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if x.shape != y.shape:
        raise ValueError(f"latency_xcorr: shape mismatch {x.shape} vs {y.shape}")
    n = len(x)
    if max_lag < 0 or n < 2 * max_lag + 1:
        raise ValueError(f"latency_xcorr: need length >= 2·max_lag + 1 (len={n}, max_lag={max_lag})")

    lags = sorted(range(-max_lag, max_lag + 1), key=lambda L: (abs(L), L))
    out = np.zeros(x.shape[1], dtype=np.int64)
    for axis in range(x.shape[1]):
        a, b = x[:, axis], y[:, axis]
        if np.std(a) == 0 or np.std(b) == 0:
            raise ValueError(f"latency_xcorr: axis {axis} has zero variance")
        best_lag, best_c = 0, -np.inf
        for L in lags:
            if L >= 0:
                aa, bb = a[L:], b[:n - L]
            else:
                aa, bb = a[:n + L], b[-L:]
            aa = aa - aa.mean()
            bb = bb - bb.mean()
            denom = np.sqrt(np.dot(aa, aa) * np.dot(bb, bb))
            c = np.dot(aa, bb) / denom if denom > 0 else -np.inf
            if c > best_c + 1e-12:
                best_lag, best_c = L, c
        out[axis] = best_lag
    return out


def improvement_ratio(baseline: PrecisionSummary, tracked: PrecisionSummary) -> np.ndarray:
    """per-axis 旋轉 MAE 改善倍數（baseline / tracked）"""
    return baseline.rotation / np.maximum(tracked.rotation, 1e-12)


def summary_rows(summary: PrecisionSummary, prefix: str = '') -> List[Tuple[str, float]]:
    return [(f"{prefix}{k}", v) for k, v in summary.to_dict().items()]
