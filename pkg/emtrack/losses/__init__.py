"""Epipolar losses — Strategy Pattern 模組"""

from emtrack.losses.base import (
    KernelConfig, LossEval, LossFactory, LossFunction, LossMode, evaluate, residual,
)
from emtrack.losses.kernel import KernelKnnLoss, KernelPairsLoss, gaussian_kernel   # triggers registration
from emtrack.losses.squared import SquaredPairsLoss                                  # triggers registration

__all__ = [
    'KernelConfig', 'LossEval', 'LossFactory', 'LossFunction', 'LossMode', 'evaluate', 'residual',
    'KernelKnnLoss', 'KernelPairsLoss', 'SquaredPairsLoss', 'gaussian_kernel',
]
