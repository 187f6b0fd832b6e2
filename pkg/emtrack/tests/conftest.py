"""共用 fixtures：小型合成場景、已準備好 correspondences 的 frame、Config 還原"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from emtrack.config import Config
from emtrack.geometry import EssentialState, essential_from_rt, essential_state_from_matrix, euler_to_matrix
from emtrack.matching import attach_correspondences
from emtrack.simulator import SceneConfig, generate_frame


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='執行 acceptance 規模的 slow tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance 規模測試（需 --runslow）')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def random_rotation(rng: np.random.Generator, max_deg: float = 30.0) -> np.ndarray:
    return euler_to_matrix(rng.uniform(-max_deg, max_deg, size=3))


def random_state(rng: np.random.Generator) -> EssentialState:
    """隨機 (R, t) 的 essential state"""
    t = rng.standard_normal(3)
    return essential_state_from_matrix(essential_from_rt(random_rotation(rng), t / np.linalg.norm(t)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene() -> SceneConfig:
    """carla-drift 幾何、少量點（測試速度用）"""
    return SceneConfig.preset('carla-drift', n_points=300, descriptor_dim=32, seed=3)


@pytest.fixture
def noiseless_scene() -> SceneConfig:
    return SceneConfig.preset('carla-drift', n_points=300, descriptor_dim=32, pixel_noise=0.0,
                              outlier_rate=0.0, descriptor_noise=0.01, seed=5)


@pytest.fixture
def prepared_frame(small_scene):
    """frame 0（無 drift）+ k = 5 correspondences"""
    fr = generate_frame(small_scene, 0)
    return attach_correspondences(fr, small_scene.K0, small_scene.K1, k=5)


@pytest.fixture
def reference_state(small_scene) -> EssentialState:
    R, t = small_scene.reference_pose()
    return essential_state_from_matrix(essential_from_rt(R, t))


@pytest.fixture
def restore_config(tmp_path):
    """
    測試可任意改 Config；teardown 還原所有屬性。
    results DB 與 log 目錄導到 tmp_path。
    """
    snap = Config.snapshot()
    Config.RESULTS_DB_PATH = str(tmp_path / 'results.db')
    Config.LOG_DIR = str(tmp_path / '.log')
    yield Config
    Config.restore(snap)
