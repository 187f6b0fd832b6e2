"""Gaussian kernel-correlation losses（kernel-knn 與 kernel-pairs）"""

from __future__ import annotations

import logging
from typing import Tuple

import numpy as np

from emtrack.losses.base import KernelConfig, LossFunction, LossMode
from emtrack.matching import FrameObservation

logger = logging.getLogger(__name__)


def gaussian_kernel(r: np.ndarray, sigma: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """f = −exp(−r²/2σ²)；f′ = w r/σ²；f″ = (w/σ²)(1 − r²/σ²)"""
    s2 = sigma * sigma
    q = r * r / s2
    w = np.exp(-0.5 * q)
    return -w, w * r / s2, (w / s2) * (1.0 - q)


def pair_terms(frame: FrameObservation, cfg: KernelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """一對一 matches（可依 descriptor 相似度門檻過濾）"""
    if frame.matches is None:
        raise ValueError(f"frame {frame.frame_index}: pair loss needs a match list")
    m = np.asarray(frame.matches, dtype=np.int64).reshape(-1, 2)
    if cfg.min_confidence is not None and frame.match_scores is not None:
        m = m[np.asarray(frame.match_scores) >= cfg.min_confidence]
    return m[:, 0], m[:, 1]


class KernelKnnLoss(LossFunction):
    """
    標準模式：Σ_x Σ_{y∈NN¹(x)} + Σ_y Σ_{x∈NN⁰(y)}
    互為鄰居的 pair 在兩個方向各計一次
    """
    name = LossMode.KERNEL_KNN.value

    def terms(self, frame, cfg):
        if frame.corr is None:
            raise ValueError(f"frame {frame.frame_index}: kernel-knn needs correspondence sets")
        nn1, nn0 = frame.corr.nn1, frame.corr.nn0
        k1, k0 = nn1.shape[1], nn0.shape[1]
        li = np.concatenate([np.repeat(np.arange(len(nn1)), k1), nn0.reshape(-1)])
        ri = np.concatenate([nn1.reshape(-1), np.repeat(np.arange(len(nn0)), k0)])
        return li, ri

    def kernel(self, r, sigma):
        return gaussian_kernel(r, sigma)

    def value_kernel(self, r, sigma):
        return -np.exp(-0.5 * r * r / (sigma * sigma))


class KernelPairsLoss(LossFunction):
    name = LossMode.KERNEL_PAIRS.value

    def terms(self, frame, cfg):
        return pair_terms(frame, cfg)

    def kernel(self, r, sigma):
        return gaussian_kernel(r, sigma)

    def value_kernel(self, r, sigma):
        return -np.exp(-0.5 * r * r / (sigma * sigma))


# 自動註冊至 LossFactory
from emtrack.losses.base import LossFactory
LossFactory.register(LossMode.KERNEL_KNN, KernelKnnLoss)
LossFactory.register(LossMode.KERNEL_PAIRS, KernelPairsLoss)
