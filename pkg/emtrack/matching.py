"""
Matching 層 — 關鍵點正規化與雙向 kNN tentative correspondences

包含：
- FrameObservation：單幀輸入（pixel keypoints、descriptors、可選 ground truth）
- CorrespondenceSet：NN¹（left → right）與 NN⁰（right → left）鄰居表
- normalize：K⁻¹ 投影到 normalized image plane
- knn：brute-force 精確 maximum-inner-product 搜尋（同分時取較小 index）
- attach_correspondences：把 normalized points + kNN + mutual 1-NN 掛到 frame 上
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from emtrack.geometry import CameraIntrinsics

logger = logging.getLogger(__name__)

MIN_POINTS = 8   # 少於此數 → low-information frame


# ==================== 資料型別 ====================

@dataclass(frozen=True)
class CorrespondenceSet:
    """
    nn1[i] = 左圖第 i 點的 k 個右圖鄰居（依相似度遞減）
    nn0[j] = 右圖第 j 點的 k 個左圖鄰居
    """
    nn1: np.ndarray
    nn0: np.ndarray
    k: int

    @property
    def n_terms(self) -> int:
        return int(self.nn1.size + self.nn0.size)

    def swapped(self) -> 'CorrespondenceSet':
        return CorrespondenceSet(nn1=self.nn0, nn0=self.nn1, k=self.k)


@dataclass(frozen=True, eq=False)
class FrameObservation:
    """
    單幀立體觀測

    kps_*: (n, 2) pixel (u, v)；desc_*: (n, d)
    pose: 右相機相對左相機的 ground truth (R, t)，X_r = R·X_l + t
    pairing: (p, 2) ground-truth inlier 對應 (left_idx, right_idx)
    x / y / corr / matches：由 attach_correspondences 填入
    """
    frame_index: int
    kps_left: np.ndarray
    kps_right: np.ndarray
    desc_left: np.ndarray
    desc_right: np.ndarray
    pose: Optional[Tuple[np.ndarray, np.ndarray]] = None
    pairing: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = field(default=None, repr=False)
    y: Optional[np.ndarray] = field(default=None, repr=False)
    corr: Optional[CorrespondenceSet] = field(default=None, repr=False)
    matches: Optional[np.ndarray] = field(default=None, repr=False)
    match_scores: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_left(self) -> int:
        return int(len(self.kps_left))

    @property
    def n_right(self) -> int:
        return int(len(self.kps_right))

    @property
    def descriptor_dim(self) -> int:
        if self.desc_left.ndim == 2 and self.desc_left.shape[1]:
            return int(self.desc_left.shape[1])
        return int(self.desc_right.shape[1]) if self.desc_right.ndim == 2 else 0

    @property
    def is_degenerate(self) -> bool:
        return self.n_left < MIN_POINTS or self.n_right < MIN_POINTS

    @property
    def is_prepared(self) -> bool:
        return self.x is not None and self.y is not None and self.corr is not None

    def quantized(self) -> 'FrameObservation':
        """keypoints/descriptors 量化到 float32（feature file 的儲存精度），去掉衍生欄位"""
        def _q(a):
            return np.asarray(a, dtype=np.float32).astype(np.float64)
        return FrameObservation(
            frame_index=self.frame_index,
            kps_left=_q(self.kps_left),
            kps_right=_q(self.kps_right),
            desc_left=_q(self.desc_left),
            desc_right=_q(self.desc_right),
            pose=self.pose,
            pairing=self.pairing,
        )

    def same_content(self, other: 'FrameObservation') -> bool:
        """逐欄位比較原始內容（不含衍生欄位）"""
        if self.frame_index != other.frame_index:
            return False
        for a, b in ((self.kps_left, other.kps_left), (self.kps_right, other.kps_right),
                     (self.desc_left, other.desc_left), (self.desc_right, other.desc_right)):
            if a.shape != b.shape or not np.array_equal(a, b):
                return False
        if (self.pose is None) != (other.pose is None):
            return False
        if self.pose is not None:
            if not (np.array_equal(self.pose[0], other.pose[0]) and np.array_equal(self.pose[1], other.pose[1])):
                return False
        pa = np.zeros((0, 2), dtype=np.int64) if self.pairing is None else np.asarray(self.pairing)
        pb = np.zeros((0, 2), dtype=np.int64) if other.pairing is None else np.asarray(other.pairing)
        return pa.shape == pb.shape and np.array_equal(pa, pb)


# ==================== 正規化 ====================

def normalize(points: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """(n, 2) pixel → (n, 3) normalized homogeneous，第三座標 = 1"""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    homog = np.column_stack([pts, np.ones(len(pts))])
    out = homog @ K.inverse.T
    return out / out[:, 2:3]


# ==================== kNN ====================

ARGMAX_TOPK_MAX = 16   # k 不超過此值時以逐次 argmax 取 top-k


def _topk(S: np.ndarray, k: int) -> np.ndarray:
    """每列取前 k 大的欄 index；同分依 index 遞增（精確、deterministic）"""
    n, m = S.shape
    kk = min(k, m)
    if kk <= ARGMAX_TOPK_MAX:
        # argmax 回傳第一個最大值，同分自然以 index 遞增
        W = np.array(S, dtype=float, order='C')
        rows = np.arange(n)
        out = np.empty((n, kk), dtype=np.int64)
        for j in range(kk):
            best = W.argmax(axis=1)
            out[:, j] = best
            W[rows, best] = -np.inf
        return out

    part = np.argpartition(-S, kk - 1, axis=1)[:, :kk]
    vals = np.take_along_axis(S, part, axis=1)
    out = np.take_along_axis(part, np.lexsort((part, -vals), axis=-1), axis=1).astype(np.int64)
    # partition 邊界上的同分：區塊外可能有 index 更小的同值欄，這些列改用 stable 全排序
    kth = vals.min(axis=1)
    for i in np.flatnonzero((S >= kth[:, None]).sum(axis=1) > kk):
        out[i] = np.argsort(-S[i], kind='stable')[:kk]
    return out


def knn(left_desc: np.ndarray, right_desc: np.ndarray, k: int,
        unit_normalize: bool = False) -> CorrespondenceSet:
    """
    雙向精確 kNN（inner-product similarity）

    Raises:
        ValueError: k < 1、任一側為空、descriptor 維度不一致
    """
    if k < 1:
        raise ValueError(f"knn: k must be >= 1, got {k}")
    L = np.asarray(left_desc, dtype=float)
    R = np.asarray(right_desc, dtype=float)
    if L.ndim != 2 or R.ndim != 2 or len(L) == 0 or len(R) == 0:
        raise ValueError(f"knn: both descriptor sets must be non-empty 2-D arrays (got {L.shape} and {R.shape})")
    if L.shape[1] != R.shape[1]:
        raise ValueError(f"knn: descriptor dimension mismatch ({L.shape[1]} vs {R.shape[1]})")
    if unit_normalize:
        L = L / np.maximum(np.linalg.norm(L, axis=1, keepdims=True), 1e-12)
        R = R / np.maximum(np.linalg.norm(R, axis=1, keepdims=True), 1e-12)

    S = L @ R.T
    return CorrespondenceSet(nn1=_topk(S, k), nn0=_topk(S.T, k), k=int(k))


def mutual_matches(corr: CorrespondenceSet) -> np.ndarray:
    """互為 1-NN 的一對一配對，(m, 2) int，依 left index 排序"""
    left = np.arange(len(corr.nn1))
    right = corr.nn1[:, 0]
    mutual = corr.nn0[right, 0] == left
    return np.column_stack([left[mutual], right[mutual]]).astype(np.int64)


def attach_correspondences(
    frame: FrameObservation,
    K0: CameraIntrinsics,
    K1: CameraIntrinsics,
    k: int,
    unit_normalize: bool = False,
) -> FrameObservation:
    """
    回傳附帶 normalized points、CorrespondenceSet 與 mutual 1-NN matches 的新 frame

    match_scores 為每組 match 的 descriptor inner product（pair loss 的 confidence 門檻用）。
    任一側沒有 keypoint 時只正規化，不做 kNN。
    """
    x = normalize(frame.kps_left, K0)
    y = normalize(frame.kps_right, K1)
    if frame.n_left == 0 or frame.n_right == 0:
        logger.debug(f"frame {frame.frame_index}: 空的 keypoint 集合，略過 kNN")
        return replace(frame, x=x, y=y, corr=None,
                       matches=np.zeros((0, 2), dtype=np.int64), match_scores=np.zeros(0))
    corr = knn(frame.desc_left, frame.desc_right, k, unit_normalize=unit_normalize)
    matches = mutual_matches(corr)
    scores = np.einsum('ij,ij->i', frame.desc_left[matches[:, 0]], frame.desc_right[matches[:, 1]])
    return replace(frame, x=x, y=y, corr=corr, matches=matches, match_scores=scores)
