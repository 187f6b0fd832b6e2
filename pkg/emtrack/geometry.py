"""
幾何層 — 3×3 代數與 essential manifold

包含：
- skew / expm_skew：叉積矩陣與 Rodrigues 指數映射（so(3) → SO(3)）
- omega1 / omega2：五參數 chart 的兩個 skew 生成元
- essential_from_rt / essential_state_from_matrix：E 的建構與 SVD 正規化
- chart / update：manifold 局部參數化與 re-centering 更新
- recover_rt：四組 (R, t) 候選 + cheirality 投票
- rotation_error_axes / translation_metrics：精度評估用的誤差量

所有函數皆為 pure function（value in → value out），可多執行緒同時呼叫。
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

logger = logging.getLogger(__name__)

# Σ₀ = diag(1, 1, 0)，永遠隱含、不存進 state
SIGMA0 = np.diag([1.0, 1.0, 0.0])

ORTHO_TOL = 1e-9
SKEW_TOL = 1e-9
RANK_TOL = 1e-6
SERIES_THRESHOLD = 1e-8     # angle 低於此值改用級數展開（避開 sin(x)/x 的 0/0）
REORTHO_EVERY = 100         # 每 100 次 manifold update 做一次 polar projection
GIMBAL_LIMIT_DEG = 89.0

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2 = 1.0 / _SQRT2

# (R, t) 分解用的 π/2 z-axis 旋轉
_W = np.array([
    [0.0, -1.0, 0.0],
    [1.0,  0.0, 0.0],
    [0.0,  0.0, 1.0],
])


# ==================== 相機內參 ====================

@dataclass(frozen=True)
class CameraIntrinsics:
    """針孔相機內參（單位：pixel；輸入假設已去畸變）"""
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal length must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, self.skew, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @property
    def inverse(self) -> np.ndarray:
        # 上三角 K 的解析反矩陣
        fx, fy, cx, cy, s = self.fx, self.fy, self.cx, self.cy, self.skew
        return np.array([
            [1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy)],
            [0.0, 1.0 / fy, -cy / fy],
            [0.0, 0.0, 1.0],
        ])

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.fx, self.fy, self.cx, self.cy, self.skew)

    @classmethod
    def from_fov(cls, width: int, height: int, vfov_deg: float,
                 hfov_deg: Optional[float] = None) -> 'CameraIntrinsics':
        """由視角建立內參；hfov 省略時假設方形像素（fx = fy）"""
        fy = (height / 2.0) / math.tan(math.radians(vfov_deg) / 2.0)
        fx = fy if hfov_deg is None else (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0)


# ==================== so(3) / SO(3) ====================

def skew(v) -> np.ndarray:
    """叉積矩陣 [v]×，滿足 skew(v) @ w == np.cross(v, w)"""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def vee(omega: np.ndarray) -> np.ndarray:
    return np.array([omega[2, 1], omega[0, 2], omega[1, 0]])


def _rodrigues_batch(w: np.ndarray) -> np.ndarray:
    """批次 Rodrigues：w (P, 3) → (P, 3, 3)"""
    w = np.atleast_2d(w)
    angle = np.linalg.norm(w, axis=1)
    K = np.zeros((w.shape[0], 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    KK = K @ K

    small = angle < SERIES_THRESHOLD
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle ** 2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    return np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * KK


def expm_skew(omega: np.ndarray) -> np.ndarray:
    """
    skew-symmetric 矩陣的指數映射（Rodrigues closed form）

    Raises:
        ValueError: 輸入不是 skew-symmetric
    """
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (3, 3):
        raise ValueError(f"expm_skew expects a 3x3 matrix, got shape {omega.shape}")
    asym = np.linalg.norm(omega + omega.T)
    if asym > SKEW_TOL:
        raise ValueError(f"expm_skew input is not skew-symmetric (|Ω + Ωᵀ|_F = {asym:.3e})")
    return _rodrigues_batch(vee(omega)[None])[0]


# ==================== Manifold chart ====================

def _omega1_vec(theta: np.ndarray) -> np.ndarray:
    # Ω₁ = skew(θ₁, θ₂, θ₃/√2) / √2
    theta = np.asarray(theta, dtype=float)
    return np.stack([theta[..., 0], theta[..., 1], theta[..., 2] * _INV_SQRT2], axis=-1) * _INV_SQRT2


def _omega2_vec(theta: np.ndarray) -> np.ndarray:
    # Ω₂ = skew(θ₄, θ₅, −θ₃/√2) / √2
    theta = np.asarray(theta, dtype=float)
    return np.stack([theta[..., 3], theta[..., 4], -theta[..., 2] * _INV_SQRT2], axis=-1) * _INV_SQRT2


def omega1(theta) -> np.ndarray:
    """Ω₁(θ)：只依賴 (θ₁, θ₂, θ₃)"""
    return skew(_omega1_vec(np.asarray(theta, dtype=float).reshape(5)))


def omega2(theta) -> np.ndarray:
    """Ω₂(θ)：只依賴 (θ₃, θ₄, θ₅)"""
    return skew(_omega2_vec(np.asarray(theta, dtype=float).reshape(5)))


# Ω₁, Ω₂ 對 θ 線性：Ω(θ) = Σ θᵢ Gᵢ
_GEN1 = np.stack([omega1(e) for e in np.eye(5)])
_GEN2 = np.stack([omega2(e) for e in np.eye(5)])


@dataclass(frozen=True, eq=False)
class EssentialState:
    """
    Manifold 上的追蹤點 (U, V)，E = U Σ₀ Vᵀ

    建構時強制 det(U) = det(V) = +1（翻轉第三欄不影響 E，因 Σ₀ 第三個奇異值為 0）。
    陣列設為 read-only，確保 value semantics。
    """
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        fixed = []
        for name in ('U', 'V'):
            M = np.array(getattr(self, name), dtype=float)
            if M.shape != (3, 3) or not np.all(np.isfinite(M)):
                raise ValueError(f"EssentialState.{name} must be a finite 3x3 matrix")
            err = np.linalg.norm(M.T @ M - np.eye(3))
            if err > ORTHO_TOL:
                raise ValueError(f"EssentialState.{name} is not orthogonal (|MᵀM − I|_F = {err:.3e})")
            if np.linalg.det(M) < 0:
                M[:, 2] *= -1.0
            M.setflags(write=False)
            fixed.append(M)
        object.__setattr__(self, 'U', fixed[0])
        object.__setattr__(self, 'V', fixed[1])

    def matrix(self) -> np.ndarray:
        return self.U @ SIGMA0 @ self.V.T

    def orthogonality_error(self) -> float:
        return max(
            float(np.linalg.norm(self.U.T @ self.U - np.eye(3))),
            float(np.linalg.norm(self.V.T @ self.V - np.eye(3))),
        )

    def to_list(self) -> list:
        """38-parameter 序列化的 manifold 部分（U, V row-major，共 18 個純量）"""
        return list(self.U.reshape(-1)) + list(self.V.reshape(-1))

    @classmethod
    def from_list(cls, values: Sequence[float]) -> 'EssentialState':
        arr = np.asarray(values, dtype=float)
        if arr.size != 18:
            raise ValueError(f"EssentialState needs 18 scalars, got {arr.size}")
        return cls(arr[:9].reshape(3, 3), arr[9:].reshape(3, 3))


def essential_from_rt(R: np.ndarray, t) -> np.ndarray:
    """E = [t]× R"""
    t = np.asarray(t, dtype=float).reshape(3)
    if not np.linalg.norm(t) > 0:
        raise ValueError("essential_from_rt: zero baseline (‖t‖ = 0) has no epipolar geometry")
    return skew(t) @ np.asarray(R, dtype=float)


def essential_state_from_matrix(E: np.ndarray) -> EssentialState:
    """
    SVD 分解並正規化到 Σ₀ = diag(1, 1, 0)

    Raises:
        ValueError: rank-3 或 rank ≤ 1 的輸入
    """
    E = np.asarray(E, dtype=float)
    if E.shape != (3, 3) or not np.all(np.isfinite(E)):
        raise ValueError("essential_state_from_matrix expects a finite 3x3 matrix")
    U, S, Vt = np.linalg.svd(E)
    if not S[0] > 0 or S[1] <= RANK_TOL * S[0]:
        raise ValueError(f"essential matrix is rank-deficient (singular values {S})")
    if S[2] > RANK_TOL * S[0]:
        raise ValueError(f"essential matrix must have rank 2, got singular values {S}")
    if abs(S[0] - S[1]) > 1e-3 * S[0]:
        logger.debug(f"E 的兩個非零奇異值不相等 {S[:2]}，投影到最近的 essential matrix")
    if np.linalg.det(U) < 0:
        U[:, 2] *= -1.0
    if np.linalg.det(Vt) < 0:
        Vt[2, :] *= -1.0
    return EssentialState(U, Vt.T)


def chart(state: EssentialState, theta) -> np.ndarray:
    """E(θ) = U expm[Ω₁(θ)] Σ₀ expm[−Ω₂(θ)] Vᵀ"""
    return chart_batch(state, np.asarray(theta, dtype=float).reshape(1, 5))[0]


def chart_batch(state: EssentialState, thetas: np.ndarray) -> np.ndarray:
    """批次版 chart：thetas (P, 5) → (P, 3, 3)，供 DE population 評估"""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    R1 = _rodrigues_batch(_omega1_vec(thetas))
    R2 = _rodrigues_batch(-_omega2_vec(thetas))
    return state.U[None] @ R1 @ SIGMA0[None] @ R2 @ state.V.T[None]


def update(state: EssentialState, dtheta) -> EssentialState:
    """U ← U expm[Ω₁(Δθ)]，V ← V expm[Ω₂(Δθ)]（chart 隨之 re-center）"""
    dtheta = np.asarray(dtheta, dtype=float).reshape(1, 5)
    R1 = _rodrigues_batch(_omega1_vec(dtheta))[0]
    R2 = _rodrigues_batch(_omega2_vec(dtheta))[0]
    return EssentialState(state.U @ R1, state.V @ R2)


def reorthonormalize(state: EssentialState) -> EssentialState:
    """SVD polar projection 回正交群，抑制長序列的浮點漂移"""
    def _polar(M):
        A, _, Bt = np.linalg.svd(M)
        return A @ Bt
    return EssentialState(_polar(state.U), _polar(state.V))


def chart_derivatives(state: EssentialState) -> Tuple[np.ndarray, np.ndarray]:
    """
    θ = 0 處的一階與（對角）二階導數

    Returns:
        (D1, D2)，各為 (5, 3, 3)：
        D1ᵢ = U (Aᵢ Σ₀ − Σ₀ Bᵢ) Vᵀ
        D2ᵢ = U (Aᵢ² Σ₀ − 2 Aᵢ Σ₀ Bᵢ + Σ₀ Bᵢ²) Vᵀ
    """
    A, B, S = _GEN1, _GEN2, SIGMA0[None]
    inner1 = A @ S - S @ B
    inner2 = A @ A @ S - 2.0 * (A @ S @ B) + S @ B @ B
    U, Vt = state.U[None], state.V.T[None]
    return U @ inner1 @ Vt, U @ inner2 @ Vt


# ==================== (R, t) 還原 ====================

def rotation_angle(R: np.ndarray) -> float:
    """旋轉角（rad）"""
    c = (np.trace(R) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def decompose_candidates(state: EssentialState) -> list:
    """E = U Σ₀ Vᵀ 的四組代數解 [(R1, t), (R1, −t), (R2, t), (R2, −t)]"""
    U, Vt = state.U, state.V.T
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2].copy()
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def cheirality_count(R: np.ndarray, t: np.ndarray, x: np.ndarray, y: np.ndarray) -> int:
    """三角化後在兩台相機前方（深度皆 > 0）的點數"""
    if len(x) == 0:
        return 0
    a = x @ R.T                     # R x
    b = y
    aa = np.einsum('ij,ij->i', a, a)
    bb = np.einsum('ij,ij->i', b, b)
    ab = np.einsum('ij,ij->i', a, b)
    at = a @ t
    bt = b @ t
    det = aa * bb - ab * ab
    valid = det > 1e-12
    det = np.where(valid, det, 1.0)
    # z_r y = z_l R x + t 的最小平方解
    z_l = (-at * bb + ab * bt) / det
    z_r = (aa * bt - ab * at) / det
    return int(np.count_nonzero(valid & (z_l > 0) & (z_r > 0)))


def recover_rt(
    state: EssentialState,
    inliers: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    reference: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    從 tracked E 還原 (R, 單位 t)

    選擇規則：cheirality 票數最多者；同票時取與 reference 旋轉角最小、
    且 t 與 reference t 同向者；皆無法區分時依候選順序（deterministic）。

    Args:
        inliers: (x, y)，各為 (n, 3) normalized homogeneous points
        reference: (R_ref, t_ref)，可選

    Raises:
        ValueError: 沒有 inliers 也沒有 reference
    """
    n_inliers = 0 if inliers is None else len(inliers[0])
    if n_inliers == 0 and reference is None:
        raise ValueError("recover_rt needs at least one correspondence or a reference pose")

    best_key, best = None, None
    for idx, (R, t) in enumerate(decompose_candidates(state)):
        votes = cheirality_count(R, t, inliers[0], inliers[1]) if n_inliers else 0
        if reference is not None:
            R_ref, t_ref = reference
            angle = rotation_angle(R @ np.asarray(R_ref).T)
            align = -float(np.dot(t, np.asarray(t_ref, dtype=float).reshape(3)))
        else:
            angle, align = 0.0, 0.0
        key = (-votes, round(angle, 12), align, idx)
        if best_key is None or key < best_key:
            best_key, best = key, (R, t)
    return best


# ==================== 精度評估 ====================

def euler_to_matrix(angles_deg, convention: str = 'XYZ') -> np.ndarray:
    return ScipyRotation.from_euler(convention, np.asarray(angles_deg, dtype=float), degrees=True).as_matrix()


def rotation_error_axes(R_est: np.ndarray, R_gt: np.ndarray, convention: str = 'XYZ') -> np.ndarray:
    """
    R_err = R_est · R_gtᵀ 的 per-axis 誤差（度）

    預設 intrinsic X-Y-Z Euler；sub-degree 誤差下與 axis-angle 分量一致到二階。
    gimbal lock（中間角接近 ±90°）會記 warning。
    """
    R_err = np.asarray(R_est, dtype=float) @ np.asarray(R_gt, dtype=float).T
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', UserWarning)
        angles = ScipyRotation.from_matrix(R_err).as_euler(convention, degrees=True)
    if abs(angles[1]) > GIMBAL_LIMIT_DEG:
        logger.warning(f"⚠️ rotation_error_axes: gimbal lock 附近（middle angle={angles[1]:.3f}°），per-axis 分量不可靠")
    return angles


def translation_metrics(t_est, t_gt) -> Tuple[np.ndarray, float]:
    """
    Returns:
        (|t_est·‖t_gt‖ − t_gt| per-axis [mm], 方向夾角 [deg])
        t_est 先依與 t_gt 的內積翻正（E 的正負號不可觀測）
    """
    t_gt = np.asarray(t_gt, dtype=float).reshape(3)
    t_est = np.asarray(t_est, dtype=float).reshape(3)
    baseline = float(np.linalg.norm(t_gt))
    if not baseline > 0:
        raise ValueError("translation_metrics: ground-truth baseline must be non-zero")
    t_est = t_est / np.linalg.norm(t_est)
    if np.dot(t_est, t_gt) < 0:
        t_est = -t_est
    mae_mm = np.abs(t_est * baseline - t_gt) * 1000.0
    cosang = float(np.clip(np.dot(t_est, t_gt / baseline), -1.0, 1.0))
    return mae_mm, math.degrees(math.acos(cosang))
