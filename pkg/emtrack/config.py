"""
emtrack Config — 獨立配置類

合併場景模擬、drift schedule、tracker、DE solver 與輸出設定。
core 模組只吃由 Config 建出的 immutable value objects（kernel_config() 等），
不直接讀全域 class 屬性，因此多個 worker thread 可以安全並行。
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

logger = logging.getLogger(__name__)

# JSON section → 屬性前綴（"drift": {"mode": ...} → DRIFT_MODE）
SECTION_PREFIX = {
    'scene': '',
    'drift': 'DRIFT_',
    'tracker': '',
    'de': 'DE_',
    'output': '',
}


class Config:
    """
    emtrack 配置類

    JSON key（不分大小寫）對應同名 UPPER_CASE 屬性；可依 section 分組。
    """

    # ==================== 場景 ====================

    PRESET = 'carla-drift'
    N_FRAMES = 1000
    N_POINTS = 600
    DEPTH_NEAR = 4.0
    DEPTH_FAR = 60.0
    PIXEL_NOISE = 1.0
    OUTLIER_RATE = 0.2
    DESCRIPTOR_DIM = 128
    DESCRIPTOR_NOISE = 0.05
    BASELINE = None          # None → preset 預設
    VERGENCE_DEG = None      # None → preset 預設
    SEED = 7

    # ==================== Drift ====================

    DRIFT_MODE = 'random-walk'
    DRIFT_AMP = 0.01         # 度 / frame / DoF
    DRIFT_AXES = ['x', 'y', 'z']
    DRIFT_PERIOD = 200
    DRIFT_REPEAT = 0
    DRIFT_SEED = None        # None → SEED

    # ==================== Tracker ====================

    SIGMA = 0.001            # ≈ pixel angular resolution（vertical FoV / width）
    K = 5
    BURN_IN = 10
    EPSILON = 1e-7
    H_FLOOR = 1e-6
    THETA_MAX = 0.01
    REORTHO_EVERY = 100
    LOSS_MODE = 'kernel-knn'
    MIN_CONFIDENCE = None
    UNIT_NORMALIZE = False
    INLIER_SIGMAS = 3.0
    EULER_CONVENTION = 'XYZ'
    CHECKPOINT_EVERY = 0

    # ==================== Differential evolution ====================

    DE_POPULATION = 64
    DE_F = 0.8
    DE_CR = 0.9
    DE_GENERATIONS = 40
    DE_STAGES = 7
    DE_SIGMA0 = 0.02
    DE_BOUNDS = 0.1
    DE_INIT_SPREAD = 5.0
    DE_SEED = None           # None → SEED
    DE_MAX_DECAL_DEG = 1.0

    # ==================== 輸出 / Persistence ====================

    _PROJECT_ROOT = str(Path(__file__).resolve().parent.parent)
    LOG_DIR = str(Path(__file__).resolve().parent.parent / '.log')
    RESULTS_DB_PATH = 'emtrack_results.db'
    RECORD_RESULTS = True
    WORKERS = 1

    # ==================== Config Validation ====================

    @classmethod
    def validate(cls):
        """驗證 config 參數合理性"""
        from emtrack.losses import LossMode
        from emtrack.simulator import PRESETS, DriftMode

        if not (isinstance(cls.SIGMA, (int, float)) and cls.SIGMA > 0):
            raise ValueError(f"SIGMA must be > 0, got {cls.SIGMA}")
        if int(cls.K) < 1:
            raise ValueError(f"K must be >= 1, got {cls.K}")
        if int(cls.BURN_IN) < 0:
            raise ValueError(f"BURN_IN must be >= 0, got {cls.BURN_IN}")
        if int(cls.N_POINTS) <= 0:
            raise ValueError(f"N_POINTS must be > 0, got {cls.N_POINTS}")
        if int(cls.N_FRAMES) < 0:
            raise ValueError(f"N_FRAMES must be >= 0, got {cls.N_FRAMES}")
        if not (0.0 <= cls.OUTLIER_RATE <= 1.0):
            raise ValueError(f"OUTLIER_RATE must be in [0, 1], got {cls.OUTLIER_RATE}")
        if cls.PIXEL_NOISE < 0:
            raise ValueError(f"PIXEL_NOISE must be >= 0, got {cls.PIXEL_NOISE}")
        if not (0 < cls.DEPTH_NEAR < cls.DEPTH_FAR):
            raise ValueError(f"Depth range must satisfy 0 < DEPTH_NEAR < DEPTH_FAR, got ({cls.DEPTH_NEAR}, {cls.DEPTH_FAR})")
        if cls.DRIFT_AMP < 0:
            raise ValueError(f"DRIFT_AMP must be >= 0, got {cls.DRIFT_AMP}")
        if int(cls.DE_POPULATION) < 4:
            raise ValueError(f"DE_POPULATION must be >= 4, got {cls.DE_POPULATION}")
        if not (0.0 < cls.DE_F <= 2.0):
            raise ValueError(f"DE_F must be in (0, 2], got {cls.DE_F}")
        if not (0.0 <= cls.DE_CR <= 1.0):
            raise ValueError(f"DE_CR must be in [0, 1], got {cls.DE_CR}")
        if int(cls.DE_STAGES) < 1:
            raise ValueError(f"DE_STAGES must be >= 1, got {cls.DE_STAGES}")
        if cls.PRESET not in PRESETS:
            raise ValueError(f"Unknown PRESET {cls.PRESET!r}. Available: {list(PRESETS)}")
        if cls.DRIFT_MODE not in [m.value for m in DriftMode]:
            raise ValueError(f"Unknown DRIFT_MODE {cls.DRIFT_MODE!r}. Available: {[m.value for m in DriftMode]}")
        if cls.LOSS_MODE not in [m.value for m in LossMode]:
            raise ValueError(f"Unknown LOSS_MODE {cls.LOSS_MODE!r}. Available: {[m.value for m in LossMode]}")
        if int(cls.WORKERS) < 1:
            raise ValueError(f"WORKERS must be >= 1, got {cls.WORKERS}")
        return True

    # ==================== 載入 / 覆寫 ====================

    @classmethod
    def _set(cls, json_key: str, value: Any, prefix: str = '') -> bool:
        attr_name = json_key.upper()
        if prefix and not attr_name.startswith(prefix):
            attr_name = prefix + attr_name
        if attr_name.startswith('_') or not hasattr(cls, attr_name) or callable(getattr(cls, attr_name)):
            return False
        setattr(cls, attr_name, value)
        return True

    @classmethod
    def load_from_json(cls, config_file: str = "emtrack_config.json"):
        """從 JSON 配置文件加載設置（支援 section 分組）"""
        if not os.path.exists(config_file):
            logger.warning(f"⚠️ 配置文件 {config_file} 不存在，使用默認配置")
            return

        try:
            with open(config_file, 'r', encoding='utf-8') as f:
                config_data = json.load(f)
        except Exception as e:
            logger.error(f"❌ 加載配置文件失敗: {e}")
            raise ValueError(f"cannot parse config file {config_file}: {e}") from e

        loaded_count = 0
        unknown_keys = []
        for json_key, value in config_data.items():
            if json_key.lower() in SECTION_PREFIX and isinstance(value, dict):
                prefix = SECTION_PREFIX[json_key.lower()]
                for sub_key, sub_value in value.items():
                    if cls._set(sub_key, sub_value, prefix):
                        loaded_count += 1
                    else:
                        unknown_keys.append(f"{json_key}.{sub_key}")
            elif cls._set(json_key, value):
                loaded_count += 1
            else:
                unknown_keys.append(json_key)

        logger.info(f"✅ 已從 {config_file} 加載 {loaded_count} 項配置")
        if unknown_keys:
            logger.debug(f"⚠️ 以下 JSON key 無對應的 Config 屬性（已忽略）: {unknown_keys}")

        # 載入後自動驗證
        try:
            cls.validate()
        except ValueError as e:
            logger.error(f"❌ Config validation failed: {e}")
            raise

    @classmethod
    def apply_overrides(cls, overrides: Mapping[str, Any]):
        """CLI flag 覆寫（None 值略過），覆寫後驗證"""
        applied = []
        for key, value in overrides.items():
            if value is None:
                continue
            if not cls._set(key.replace('-', '_'), value):
                raise ValueError(f"Unknown config override: {key}")
            applied.append(key)
        if applied:
            logger.debug(f"Config overrides: {applied}")
        cls.validate()

    # ==================== Snapshot ====================

    @classmethod
    def effective(cls) -> Dict[str, Any]:
        """所有公開設定（key 排序），寫進每個輸出檔的 header"""
        out = {}
        for name in sorted(vars(cls)):
            if name.isupper() and not name.startswith('_') and name != 'LOG_DIR':
                value = getattr(cls, name)
                if not callable(value):
                    out[name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def digest(cls) -> str:
        canonical = json.dumps(cls.effective(), sort_keys=True, separators=(',', ':'), default=str)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @classmethod
    def config_hash64(cls) -> int:
        return int(cls.digest()[:16], 16)

    @classmethod
    def snapshot(cls) -> Dict[str, Any]:
        return {k: (list(v) if isinstance(v, list) else v) for k, v in cls.effective().items()} | {'LOG_DIR': cls.LOG_DIR}

    @classmethod
    def restore(cls, snap: Dict[str, Any]):
        for k, v in snap.items():
            setattr(cls, k, v)

    # ==================== Value objects ====================

    @classmethod
    def kernel_config(cls):
        from emtrack.losses import KernelConfig
        return KernelConfig(sigma=float(cls.SIGMA), loss_mode=cls.LOSS_MODE, min_confidence=cls.MIN_CONFIDENCE)

    @classmethod
    def tracker_options(cls):
        from emtrack.tracker import TrackerOptions
        return TrackerOptions(
            k=int(cls.K), burn_in=int(cls.BURN_IN), eps=float(cls.EPSILON), h_floor=float(cls.H_FLOOR),
            theta_max=float(cls.THETA_MAX), reortho_every=int(cls.REORTHO_EVERY),
            unit_normalize=bool(cls.UNIT_NORMALIZE), inlier_sigmas=float(cls.INLIER_SIGMAS),
            checkpoint_every=int(cls.CHECKPOINT_EVERY), euler_convention=str(cls.EULER_CONVENTION),
        )

    @classmethod
    def scene_config(cls, seed: Optional[int] = None):
        from emtrack.simulator import SceneConfig
        overrides = dict(
            n_points=int(cls.N_POINTS),
            depth_range=(float(cls.DEPTH_NEAR), float(cls.DEPTH_FAR)),
            pixel_noise=float(cls.PIXEL_NOISE),
            outlier_rate=float(cls.OUTLIER_RATE),
            descriptor_dim=int(cls.DESCRIPTOR_DIM),
            descriptor_noise=float(cls.DESCRIPTOR_NOISE),
            seed=int(cls.SEED if seed is None else seed),
        )
        if cls.BASELINE is not None:
            overrides['baseline'] = float(cls.BASELINE)
        if cls.VERGENCE_DEG is not None:
            overrides['vergence_deg'] = float(cls.VERGENCE_DEG)
        return SceneConfig.preset(cls.PRESET, **overrides)

    @classmethod
    def drift_schedule(cls, seed: Optional[int] = None):
        from emtrack.simulator import DriftSchedule
        base = cls.DRIFT_SEED if cls.DRIFT_SEED is not None else cls.SEED
        return DriftSchedule(
            mode=cls.DRIFT_MODE, amplitude=float(cls.DRIFT_AMP), axes=tuple(cls.DRIFT_AXES),
            seed=int(base if seed is None else seed), period=int(cls.DRIFT_PERIOD), repeat=int(cls.DRIFT_REPEAT),
        )

    @classmethod
    def de_config(cls, seed: Optional[int] = None):
        from emtrack.globalopt import DeConfig
        base = cls.DE_SEED if cls.DE_SEED is not None else cls.SEED
        return DeConfig(
            population=int(cls.DE_POPULATION), F=float(cls.DE_F), CR=float(cls.DE_CR),
            generations_per_stage=int(cls.DE_GENERATIONS), stages=int(cls.DE_STAGES),
            sigma0=float(cls.DE_SIGMA0), bounds=float(cls.DE_BOUNDS), init_spread=float(cls.DE_INIT_SPREAD),
            seed=int(base if seed is None else seed),
        )
