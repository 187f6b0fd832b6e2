"""
合成立體序列產生器

座標約定：X_r = R·X_l + t，右相機中心在左相機座標系 C = (baseline, 0, 0)，
因此 t = −R·C。drift 只作用在右相機的姿態（中心不動）：
    R_gt(s) = D(s)·R_ref，D(s) = intrinsic X-Y-Z Euler(c(s))
c(s) 為每軸累積 drift（度），rotation_error_axes(R_gt, R_ref) 恰好還原 c(s)。

亂數：numpy PCG64，以 SeedSequence(seed, spawn_key=...) 分流
- 每幀場景：spawn_key = (frame,)
- drift 符號：spawn_key = (DRIFT_STREAM, axis)
- 隨機 decalibration：spawn_key = (DECAL_STREAM,)（見 experiments）
同 seed 跨平台可重現；每幀為 (config, frame index) 的純函數。
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from emtrack.geometry import CameraIntrinsics, euler_to_matrix
from emtrack.matching import MIN_POINTS, FrameObservation

logger = logging.getLogger(__name__)

DRIFT_STREAM = 0x44524654
AXIS_NAMES = ('x', 'y', 'z')


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """(seed, spawn_key) 決定的獨立亂數流；不同 key 互不相關"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


# ==================== 場景設定 ====================

def _square_pixel(width: int, height: int, hfov_deg: float) -> CameraIntrinsics:
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)


def _preset_table():
    return {
        # 1024×512、70° vFoV、1 m baseline、無 vergence
        'carla-drift': dict(image_size=(1024, 512), K=CameraIntrinsics.from_fov(1024, 512, 70.0),
                            baseline=1.0, vergence_deg=0.0),
        # 120°×73° FoV、2 m baseline、約 14° vergence
        'man-like': dict(image_size=(1928, 1208), K=CameraIntrinsics.from_fov(1928, 1208, 73.0, hfov_deg=120.0),
                         baseline=2.0, vergence_deg=14.0),
        'kitti-like': dict(image_size=(1392, 512), K=_square_pixel(1392, 512, 70.0),
                           baseline=0.54, vergence_deg=0.0),
        # 單幀 DE 重新校正用
        'flowguided-like': dict(image_size=(2560, 1440), K=_square_pixel(2560, 1440, 45.0),
                                baseline=0.8, vergence_deg=0.0),
    }


PRESETS = tuple(_preset_table().keys())


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 600
    depth_range: Tuple[float, float] = (4.0, 60.0)
    image_size: Tuple[int, int] = (1024, 512)
    K0: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics.from_fov(1024, 512, 70.0))
    K1: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics.from_fov(1024, 512, 70.0))
    baseline: float = 1.0
    vergence_deg: float = 0.0
    pixel_noise: float = 1.0
    outlier_rate: float = 0.2
    descriptor_dim: int = 128
    descriptor_noise: float = 0.05
    seed: int = 0
    preset_name: str = 'carla-drift'

    def __post_init__(self):
        if self.n_points <= 0:
            raise ValueError(f"SceneConfig.n_points must be > 0, got {self.n_points}")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise ValueError(f"SceneConfig.depth_range must satisfy 0 < near < far, got {self.depth_range}")
        if not (0.0 <= self.outlier_rate <= 1.0):
            raise ValueError(f"SceneConfig.outlier_rate must be in [0, 1], got {self.outlier_rate}")
        if self.pixel_noise < 0 or self.descriptor_noise < 0:
            raise ValueError("SceneConfig noise levels must be >= 0")
        if self.descriptor_dim < 1:
            raise ValueError(f"SceneConfig.descriptor_dim must be >= 1, got {self.descriptor_dim}")
        if not self.baseline > 0:
            raise ValueError(f"SceneConfig.baseline must be > 0, got {self.baseline}")

    @classmethod
    def preset(cls, name: str, **overrides) -> 'SceneConfig':
        table = _preset_table()
        if name not in table:
            raise ValueError(f"Unknown preset: {name!r}. Available: {list(table.keys())}")
        p = table[name]
        kwargs = dict(image_size=p['image_size'], K0=p['K'], K1=p['K'],
                      baseline=p['baseline'], vergence_deg=p['vergence_deg'], preset_name=name)
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def center_right(self) -> np.ndarray:
        return np.array([self.baseline, 0.0, 0.0])

    def reference_pose(self) -> Tuple[np.ndarray, np.ndarray]:
        """未 drift 的 (R_ref, t_ref)"""
        return pose_from_drift(self, np.zeros(3))


def pose_from_drift(cfg: SceneConfig, drift_deg) -> Tuple[np.ndarray, np.ndarray]:
    """R = Euler_XYZ(drift)·R_y(vergence)，t = −R·C"""
    R_ref = euler_to_matrix([0.0, cfg.vergence_deg, 0.0])
    R = euler_to_matrix(drift_deg) @ R_ref
    return R, -R @ cfg.center_right


# ==================== Drift schedule ====================

class DriftMode(str, Enum):
    NONE        = "none"
    RANDOM_WALK = "random-walk"
    RAMP        = "ramp"
    SINUSOID    = "sinusoid"


@dataclass(frozen=True)
class DriftSchedule:
    """
    右相機姿態的逐幀 drift

    amplitude: 每幀每軸增量（度）；axes: 子集合 {'x','y','z'}
    sinusoid：第 s 幀增量 = amplitude·sin(2πs/period)
    repeat：> 0 時累積軌跡以此長度週期性重複
    """
    mode: DriftMode = DriftMode.RANDOM_WALK
    amplitude: float = 0.01
    axes: Tuple[str, ...] = AXIS_NAMES
    seed: int = 0
    period: int = 200
    repeat: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'mode', DriftMode(self.mode))
        axes = tuple(a.lower().lstrip('r') for a in self.axes)
        bad = [a for a in axes if a not in AXIS_NAMES]
        if bad:
            raise ValueError(f"DriftSchedule.axes must be a subset of Rx/Ry/Rz, got {self.axes}")
        object.__setattr__(self, 'axes', axes)
        if self.amplitude < 0:
            raise ValueError(f"DriftSchedule.amplitude must be >= 0, got {self.amplitude}")
        if self.period <= 0:
            raise ValueError(f"DriftSchedule.period must be > 0, got {self.period}")
        if self.repeat < 0:
            raise ValueError(f"DriftSchedule.repeat must be >= 0, got {self.repeat}")

    def increments(self, n_frames: int) -> np.ndarray:
        """(n, 3) 逐幀增量（度）；frame 0 恆為 0"""
        inc = np.zeros((n_frames, 3))
        if n_frames <= 1 or self.mode == DriftMode.NONE or self.amplitude == 0:
            return inc
        s = np.arange(n_frames)
        for axis, name in enumerate(AXIS_NAMES):
            if name not in self.axes:
                continue
            if self.mode == DriftMode.RANDOM_WALK:
                u = stream_rng(self.seed, DRIFT_STREAM, axis).random(n_frames)
                col = np.where(u < 0.5, -self.amplitude, self.amplitude)
            elif self.mode == DriftMode.RAMP:
                col = np.full(n_frames, self.amplitude)
            else:
                col = self.amplitude * np.sin(2.0 * np.pi * s / self.period)
            col[0] = 0.0
            inc[:, axis] = col
        return inc

    def cumulative(self, n_frames: int) -> np.ndarray:
        """(n, 3) 累積 drift（度）"""
        if self.repeat:
            base = np.cumsum(self.increments(min(self.repeat, n_frames)), axis=0)
            return base[np.arange(n_frames) % len(base)] if n_frames else base
        return np.cumsum(self.increments(n_frames), axis=0)


def apply_drift(R_ref: np.ndarray, schedule: DriftSchedule, frame: int) -> np.ndarray:
    """R_ref 左乘第 frame 幀的累積 drift 旋轉"""
    if schedule.mode == DriftMode.NONE:
        return np.asarray(R_ref, dtype=float).copy()
    c = schedule.cumulative(frame + 1)[frame]
    return euler_to_matrix(c) @ np.asarray(R_ref, dtype=float)


def random_decalibration(rng: np.random.Generator, max_deg: float = 1.0) -> np.ndarray:
    """每軸 U(−max_deg, +max_deg) 的單次 decalibration（度）"""
    return rng.uniform(-max_deg, max_deg, size=3)


# ==================== 場景合成 ====================

def _unit_rows(a: np.ndarray) -> np.ndarray:
    return a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)


def generate_frame(cfg: SceneConfig, frame_index: int, drift_deg=None) -> FrameObservation:
    """
    單幀：frustum 內均勻取點 → 兩相機投影 → pixel noise → 出界剔除
    → 共用 descriptor + 各相機 noise → outlier 重抽 → 右圖打亂順序
    """
    rng = stream_rng(cfg.seed, frame_index)
    W, H = cfg.image_size
    n = cfg.n_points
    R, t = pose_from_drift(cfg, np.zeros(3) if drift_deg is None else drift_deg)

    # 左相機 frustum：均勻 pixel + 均勻深度
    uv = rng.uniform([0.0, 0.0], [W, H], size=(n, 2))
    depth = rng.uniform(cfg.depth_range[0], cfg.depth_range[1], size=n)
    rays = np.column_stack([uv, np.ones(n)]) @ cfg.K0.inverse.T
    X_l = rays * (depth / rays[:, 2])[:, None]
    X_r = X_l @ R.T + t

    proj = X_r @ cfg.K1.matrix.T
    with np.errstate(divide='ignore', invalid='ignore'):
        uv_r = proj[:, :2] / proj[:, 2:3]

    noise_l = rng.standard_normal((n, 2)) * cfg.pixel_noise
    noise_r = rng.standard_normal((n, 2)) * cfg.pixel_noise
    kps_l = uv + noise_l if cfg.pixel_noise > 0 else uv
    kps_r = uv_r + noise_r if cfg.pixel_noise > 0 else uv_r

    def _inside(p):
        return (p[:, 0] >= 0) & (p[:, 0] < W) & (p[:, 1] >= 0) & (p[:, 1] < H)

    visible = (X_r[:, 2] > 0) & np.all(np.isfinite(kps_r), axis=1) & _inside(kps_l) & _inside(kps_r)
    kps_l, kps_r = kps_l[visible], kps_r[visible]
    n_vis = int(len(kps_l))

    d = cfg.descriptor_dim
    base = _unit_rows(rng.standard_normal((n, d)))[visible]
    desc_l = _unit_rows(base + cfg.descriptor_noise * rng.standard_normal((n, d))[visible])
    desc_r = _unit_rows(base + cfg.descriptor_noise * rng.standard_normal((n, d))[visible])

    n_out = int(math.floor(cfg.outlier_rate * n_vis))
    outliers = np.sort(rng.choice(n_vis, size=n_out, replace=False)) if n_out else np.zeros(0, dtype=np.int64)
    if n_out:
        desc_r[outliers] = _unit_rows(rng.standard_normal((n_out, d)))

    perm = rng.permutation(n_vis)              # 新位置 j 放原本的 perm[j]
    inv = np.empty(n_vis, dtype=np.int64)
    inv[perm] = np.arange(n_vis)
    kps_r, desc_r = kps_r[perm], desc_r[perm]

    inlier = np.ones(n_vis, dtype=bool)
    inlier[outliers] = False
    left_idx = np.flatnonzero(inlier)
    pairing = np.column_stack([left_idx, inv[left_idx]]).astype(np.int64)

    if n_vis < MIN_POINTS:
        logger.warning(f"⚠️ frame {frame_index}: 只有 {n_vis} 個可見點（< {MIN_POINTS}），輸出 degenerate frame")

    return FrameObservation(
        frame_index=int(frame_index),
        kps_left=kps_l,
        kps_right=kps_r,
        desc_left=desc_l,
        desc_right=desc_r,
        pose=(R, t),
        pairing=pairing,
    )


def generate_sequence(cfg: SceneConfig, drift: DriftSchedule, n_frames: int,
                      workers: int = 1) -> Iterator[FrameObservation]:
    """依 frame index 順序產生；workers > 1 時平行合成、依序輸出"""
    if n_frames < 0:
        raise ValueError(f"n_frames must be >= 0, got {n_frames}")
    cum = drift.cumulative(n_frames)
    if workers <= 1:
        for s in range(n_frames):
            yield generate_frame(cfg, s, cum[s])
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda s: generate_frame(cfg, s, cum[s]), range(n_frames))


def ground_truth_table(cfg: SceneConfig, drift: DriftSchedule, n_frames: int):
    """逐幀 ground truth：(R_gt 列表, t_gt 列表, 累積 drift (n, 3))"""
    cum = drift.cumulative(n_frames)
    poses = [pose_from_drift(cfg, c) for c in cum]
    return [p[0] for p in poses], [p[1] for p in poses], cum


def with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    return replace(cfg, seed=int(seed))
