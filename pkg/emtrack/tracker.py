"""
EssentialTracker — 單一立體相機對的線上 essential matrix 追蹤

管理一條序列的完整生命週期：
- 以 reference 外參初始化 manifold
- 每幀：kNN correspondences → loss 解析偏導 → filter tick → (R, t) 還原
- checkpoint 存取（38 純量 + 計數器 + config hash）

一個 tracker instance 只給一條序列、一個 thread 使用。
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from emtrack.filter import FilterState, StepResult, tick
from emtrack.geometry import (
    CameraIntrinsics, EssentialState, essential_from_rt, essential_state_from_matrix,
    recover_rt, rotation_error_axes,
)
from emtrack.infrastructure.trace_io import TRACE_COLUMNS
from emtrack.losses import KernelConfig, LossEval, LossFactory
from emtrack.matching import FrameObservation, attach_correspondences
from emtrack.metrics import PrecisionSummary, sequence_precision
from emtrack.persistence import CheckpointStore

logger = logging.getLogger(__name__)


def _track_log(fields: dict):
    """Emit structured [TRACK] log line（CLI 分流到 .log/track_frames.log）"""
    parts = ' | '.join(f'{k}={v}' for k, v in fields.items())
    logger.info(f"[TRACK] {parts}")


def inlier_matches(state: EssentialState, frame: FrameObservation,
                   threshold: float) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """mutual 1-NN matches 中 |yᵀEx| < threshold 者；沒有任何 inlier 回傳 None"""
    if frame.matches is None or len(frame.matches) == 0:
        return None
    x = frame.x[frame.matches[:, 0]]
    y = frame.y[frame.matches[:, 1]]
    r = np.einsum('ij,ij->i', y, x @ state.matrix().T)
    keep = np.abs(r) < threshold
    return (x[keep], y[keep]) if np.any(keep) else None


@dataclass(frozen=True)
class TrackerOptions:
    k: int = 5
    burn_in: int = 10
    eps: float = 1e-7
    h_floor: float = 1e-6
    theta_max: float = 0.01
    reortho_every: int = 100
    unit_normalize: bool = False
    inlier_sigmas: float = 3.0       # recover_rt 的 inlier 門檻：|r| < inlier_sigmas·σ
    checkpoint_every: int = 0        # 0 = 只在序列結束時存
    log_frames: bool = True
    euler_convention: str = 'XYZ'

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"TrackerOptions.k must be >= 1, got {self.k}")
        if self.burn_in < 0:
            raise ValueError(f"TrackerOptions.burn_in must be >= 0, got {self.burn_in}")

    def filter_options(self) -> dict:
        return dict(burn_in=self.burn_in, eps=self.eps, h_floor=self.h_floor,
                    theta_max=self.theta_max, reortho_every=self.reortho_every)


@dataclass
class TrackRecord:
    """單幀追蹤結果"""
    frame: int
    dtheta: np.ndarray
    nu: np.ndarray
    m: np.ndarray
    loss: float
    applied: bool
    skipped: bool
    R: np.ndarray
    t: np.ndarray                    # 單位向量
    rot_dev_deg: np.ndarray          # 相對 reference 的 XYZ 偏差
    t_mm: np.ndarray                 # t·baseline（mm）
    n_terms: int = 0

    def to_row(self) -> dict:
        row = {
            'frame': self.frame,
            'rx_deg': self.rot_dev_deg[0], 'ry_deg': self.rot_dev_deg[1], 'rz_deg': self.rot_dev_deg[2],
            'tx_mm': self.t_mm[0], 'ty_mm': self.t_mm[1], 'tz_mm': self.t_mm[2],
            'loss': self.loss,
        }
        row.update({f'nu{i + 1}': float(v) for i, v in enumerate(self.nu)})
        row.update({f'm{i + 1}': float(v) for i, v in enumerate(self.m)})
        row['applied'] = bool(self.applied)
        row.update({f'dtheta{i + 1}': float(v) for i, v in enumerate(self.dtheta)})
        row['skipped'] = bool(self.skipped)
        return row


class EssentialTracker:
    """
    單一立體相機對的 tracker

    track=False 時為「不追蹤」基準：manifold 永遠停在 reference。
    """

    def __init__(
        self,
        reference: Tuple[np.ndarray, np.ndarray],
        K0: CameraIntrinsics,
        K1: CameraIntrinsics,
        kernel: Optional[KernelConfig] = None,
        options: Optional[TrackerOptions] = None,
        track: bool = True,
        config_hash: int = 0,
        initial_state: Optional[EssentialState] = None,
    ):
        self.R_ref = np.asarray(reference[0], dtype=float)
        self.t_ref = np.asarray(reference[1], dtype=float).reshape(3)
        self.baseline = float(np.linalg.norm(self.t_ref))
        if not self.baseline > 0:
            raise ValueError("EssentialTracker: reference translation must be non-zero")
        self.K0, self.K1 = K0, K1
        self.kernel = kernel or KernelConfig()
        self.options = options or TrackerOptions()
        self.track = track
        self.config_hash = int(config_hash)
        self.loss = LossFactory.create(self.kernel.loss_mode)

        self.state = initial_state or essential_state_from_matrix(essential_from_rt(self.R_ref, self.t_ref))
        self.filter = FilterState(**self.options.filter_options())
        self.records: List[TrackRecord] = []

    # ==================== 每幀 ====================

    def prepare(self, frame: FrameObservation) -> FrameObservation:
        if frame.is_prepared:
            return frame
        return attach_correspondences(frame, self.K0, self.K1, self.options.k, self.options.unit_normalize)

    def process(self, frame: FrameObservation) -> TrackRecord:
        frame = self.prepare(frame)

        if self.track:
            ev = self.loss.evaluate(self.state, frame, self.kernel)
            self.filter, self.state, step = tick(self.filter, self.state, ev)
        else:
            ev = LossEval.skip()
            step = StepResult(dtheta=np.zeros(5), nu=np.zeros(5), applied=False, skipped=False)
            self.filter = replace(self.filter, frame_count=self.filter.frame_count + 1)

        inliers = inlier_matches(self.state, frame, self.options.inlier_sigmas * self.kernel.sigma)
        R, t = recover_rt(self.state, inliers, (self.R_ref, self.t_ref))
        if np.dot(t, self.t_ref) < 0:
            t = -t
        record = TrackRecord(
            frame=int(frame.frame_index),
            dtheta=step.dtheta,
            nu=step.nu,
            m=self.filter.m.copy(),
            loss=float(ev.value) if self.track and not ev.low_information else float('nan'),
            applied=step.applied,
            skipped=step.skipped,
            R=R,
            t=t,
            rot_dev_deg=rotation_error_axes(R, self.R_ref, self.options.euler_convention),
            t_mm=t * self.baseline * 1000.0,
            n_terms=ev.n_terms,
        )
        self.records.append(record)

        if self.options.log_frames:
            _track_log({
                'frame': record.frame,
                'applied': int(record.applied),
                'skipped': int(record.skipped),
                'loss': f"{record.loss:.6g}",
                'rx': f"{record.rot_dev_deg[0]:.5f}",
                'ry': f"{record.rot_dev_deg[1]:.5f}",
                'rz': f"{record.rot_dev_deg[2]:.5f}",
                'terms': record.n_terms,
            })
        return record

    # ==================== Checkpoint ====================

    def save_checkpoint(self, path: str) -> bool:
        return CheckpointStore(path).save(self.filter, self.state, self.config_hash)

    def load_checkpoint(self, path: str) -> bool:
        """
        Returns:
            True 表示已從 checkpoint 還原；檔案不存在回傳 False

        Raises:
            CheckpointError: 檔案損壞
        """
        ckpt = CheckpointStore(path).load(**self.options.filter_options())
        if ckpt is None:
            return False
        if self.config_hash and ckpt.config_hash != self.config_hash:
            logger.warning(
                f"⚠️ checkpoint config_hash={ckpt.config_hash:016x} 與目前設定 {self.config_hash:016x} 不同，仍繼續載入"
            )
        self.filter = ckpt.filter
        self.state = ckpt.manifold
        return True

    # ==================== 輸出 ====================

    def trace(self) -> pd.DataFrame:
        return records_to_frame(self.records)

    def estimates(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(r.R, r.t) for r in self.records]


def records_to_frame(records: Sequence[TrackRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=TRACE_COLUMNS)


def run_sequence(
    frames: Iterable[FrameObservation],
    tracker: EssentialTracker,
    checkpoint: Optional[str] = None,
    start_frame: int = 0,
) -> pd.DataFrame:
    """
    逐幀追蹤整條序列，回傳 trace DataFrame

    checkpoint 有值時每 checkpoint_every 幀（與序列結束時）存檔；
    start_frame > 0 時略過 frame_index < start_frame 的幀（續跑）。
    """
    every = tracker.options.checkpoint_every
    n = 0
    for frame in frames:
        if frame.frame_index < start_frame:
            continue
        tracker.process(frame)
        n += 1
        if checkpoint and every and n % every == 0:
            tracker.save_checkpoint(checkpoint)
    if checkpoint:
        tracker.save_checkpoint(checkpoint)
    logger.info(f"✅ 追蹤完成：{n} frames（applied={sum(r.applied for r in tracker.records)}, "
                f"skipped={sum(r.skipped for r in tracker.records)}）")
    return tracker.trace()


def precision_against(tracker: EssentialTracker, gt: Sequence[Tuple[np.ndarray, np.ndarray]],
                      burn_in: Optional[int] = None) -> PrecisionSummary:
    """tracker.records 對 ground truth 的 MAE（預設排除 burn-in 幀）"""
    b = tracker.options.burn_in if burn_in is None else burn_in
    return sequence_precision(tracker.estimates(), gt, burn_in=b, convention=tracker.options.euler_convention)


def ground_truth_of(frames: Sequence[FrameObservation]) -> List[Tuple[np.ndarray, np.ndarray]]:
    missing = [f.frame_index for f in frames if f.pose is None]
    if missing:
        raise ValueError(f"frames without ground-truth pose: {missing[:5]}")
    return [f.pose for f in frames]
