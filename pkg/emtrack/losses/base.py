"""
Loss 基礎模組

包含：
- LossMode enum（kernel-knn / kernel-pairs / squared-pairs）
- KernelConfig / LossEval value objects
- residual()：epipolar residual yᵀEx
- LossFunction 抽象基類：term 選取交給子類，value / 解析 grad / Hessian 對角共用
- LossFactory（Registry 模式）
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Tuple, Type

import numpy as np

from emtrack.geometry import EssentialState, chart_derivatives
from emtrack.matching import MIN_POINTS, FrameObservation

logger = logging.getLogger(__name__)


class LossMode(str, Enum):
    """Loss 型式"""
    KERNEL_KNN    = "kernel-knn"     # 雙向 kNN + Gaussian kernel（標準）
    KERNEL_PAIRS  = "kernel-pairs"   # 一對一 matches + Gaussian kernel
    SQUARED_PAIRS = "squared-pairs"  # 一對一 matches + 平方誤差（non-robust 對照組）


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 0.001
    loss_mode: LossMode = LossMode.KERNEL_KNN
    min_confidence: Optional[float] = None   # pair modes：match descriptor 相似度門檻

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"KernelConfig.sigma must be a positive finite number, got {self.sigma}")
        object.__setattr__(self, 'loss_mode', LossMode(self.loss_mode))


@dataclass(frozen=True)
class LossEval:
    value: float
    grad: np.ndarray
    hess_diag: np.ndarray
    n_terms: int = 0
    low_information: bool = False

    @classmethod
    def skip(cls, n_terms: int = 0) -> 'LossEval':
        """low-information 標記：tracker 視為 skip-frame"""
        return cls(value=0.0, grad=np.zeros(5), hess_diag=np.zeros(5), n_terms=n_terms, low_information=True)

    @property
    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value) and np.all(np.isfinite(self.grad)) and np.all(np.isfinite(self.hess_diag)))


def residual(E: np.ndarray, x, y) -> float:
    """epipolar residual yᵀ E x"""
    return float(np.asarray(y, dtype=float) @ np.asarray(E, dtype=float) @ np.asarray(x, dtype=float))


def _outer_rows(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """每個 term 的 vec(y xᵀ)，(N, 9)；yᵀMx = vec(y xᵀ)·vec(M)"""
    return (Y[:, :, None] * X[:, None, :]).reshape(len(X), 9)


def _project(P: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """(N, 9) × (K, 9) → (N, K)，逐欄固定順序 elementwise 累加（不經 BLAS，每列結果與其位置無關）"""
    M = np.asarray(mats, dtype=float).reshape(-1, 9)
    out = P[:, 0:1] * M[None, :, 0]
    for c in range(1, 9):
        out = out + P[:, c:c + 1] * M[None, :, c]
    return out


def _fsum_columns(A: np.ndarray) -> np.ndarray:
    """逐欄 math.fsum（正確捨入，與 term 順序無關）"""
    return np.array([math.fsum(col) for col in np.asarray(A, dtype=float).T.tolist()])


class LossFunction(ABC):
    """
    Loss = Σ f(rⱼ)，rⱼ = yⱼᵀ E(θ) xⱼ

    子類決定 term 集合（terms）與逐項純量函數 f 及其一、二階導數（kernel）。
    θ = 0 處：∂L/∂θᵢ = Σ f′ aᵢ，∂²L/∂θᵢ² = Σ (f″ aᵢ² + f′ bᵢ)，
    其中 aᵢ = yᵀ D1ᵢ x，bᵢ = yᵀ D2ᵢ x。
    """

    name: str = ""

    @abstractmethod
    def terms(self, frame: FrameObservation, cfg: KernelConfig) -> Tuple[np.ndarray, np.ndarray]:
        """回傳 (left_idx, right_idx) term 列表"""

    @abstractmethod
    def kernel(self, r: np.ndarray, sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """回傳 (f, f′, f″)"""

    def value_kernel(self, r: np.ndarray, sigma: float) -> np.ndarray:
        return self.kernel(r, sigma)[0]

    # ==================== 共用 ====================

    def _check(self, frame: FrameObservation):
        if frame.x is None or frame.y is None:
            raise ValueError(f"frame {frame.frame_index}: normalized points missing (attach correspondences first)")

    def prepare(self, frame: FrameObservation, cfg: KernelConfig) -> Optional[np.ndarray]:
        """term 的 (N, 9) outer-product 矩陣；low-information 時回傳 None"""
        if frame.is_degenerate:
            return None
        self._check(frame)
        li, ri = self.terms(frame, cfg)
        if len(li) < MIN_POINTS:
            return None
        return _outer_rows(frame.x[li], frame.y[ri])

    def evaluate(self, state: EssentialState, frame: FrameObservation, cfg: KernelConfig) -> LossEval:
        P = self.prepare(frame, cfg)
        if P is None:
            logger.debug(f"frame {frame.frame_index}: low-information（n_left={frame.n_left}, n_right={frame.n_right}）")
            return LossEval.skip()

        D1, D2 = chart_derivatives(state)
        mats = np.concatenate([state.matrix()[None], D1, D2]).reshape(11, 9)
        proj = _project(P, mats)           # (N, 11)：r | a₁..a₅ | b₁..b₅
        r, a, b = proj[:, 0], proj[:, 1:6], proj[:, 6:11]
        f, f1, f2 = self.kernel(r, cfg.sigma)

        # 逐項累加一律 fsum：結果與 term 順序、BLAS thread 數無關
        return LossEval(
            value=math.fsum(f.tolist()),
            grad=_fsum_columns(f1[:, None] * a),
            hess_diag=_fsum_columns(np.concatenate([f2[:, None] * a * a, f1[:, None] * b])),
            n_terms=int(len(r)),
        )

    def value_batch(self, Es: np.ndarray, frame: FrameObservation, cfg: KernelConfig,
                    P: Optional[np.ndarray] = None) -> np.ndarray:
        """多個候選 E 的 loss 值，Es (K, 3, 3) → (K,)"""
        if P is None:
            P = self.prepare(frame, cfg)
        if P is None:
            raise ValueError(f"frame {frame.frame_index}: low-information frame has no loss")
        R = _project(P, Es)
        return _fsum_columns(self.value_kernel(R, cfg.sigma))


class LossFactory:
    """Loss 工廠（Registry 模式）：依 LossMode 建立 LossFunction"""

    _registry: Dict[str, Type[LossFunction]] = {}

    @classmethod
    def register(cls, mode: str, loss_cls: Type[LossFunction]):
        cls._registry[LossMode(mode).value] = loss_cls

    @classmethod
    def create(cls, mode) -> LossFunction:
        try:
            key = LossMode(mode).value
        except ValueError:
            key = str(mode)
        if key not in cls._registry:
            raise ValueError(f"Unknown loss mode: {mode!r}. Available: {sorted(cls._registry.keys())}")
        return cls._registry[key]()


def evaluate(state: EssentialState, frame: FrameObservation, cfg: KernelConfig) -> LossEval:
    """依 cfg.loss_mode 評估 loss 及其 θ = 0 處的解析 grad / Hessian 對角"""
    return LossFactory.create(cfg.loss_mode).evaluate(state, frame, cfg)
