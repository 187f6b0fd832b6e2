"""
emtrack — 立體相機外參的線上 essential matrix 追蹤

逐幀以 kernel-correlation loss 的解析一、二階偏導驅動 adaptive filter，
在 essential manifold 上追蹤 drift；另含 annealed DE 單幀重新校正、合成序列產生器與評估工具。
"""

__version__ = "1.0.0"

from emtrack.config import Config
from emtrack.filter import FilterState, tick
from emtrack.geometry import (
    CameraIntrinsics,
    EssentialState,
    chart,
    essential_from_rt,
    essential_state_from_matrix,
    recover_rt,
    rotation_error_axes,
    update,
)
from emtrack.globalopt import DeConfig, solve
from emtrack.losses import KernelConfig, LossMode, evaluate
from emtrack.matching import FrameObservation, attach_correspondences, knn
from emtrack.metrics import bias_stats, latency_xcorr, sequence_precision
from emtrack.simulator import DriftSchedule, SceneConfig, generate_frame, generate_sequence
from emtrack.tracker import EssentialTracker, TrackerOptions, run_sequence
