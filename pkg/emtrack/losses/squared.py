"""Non-robust 平方 epipolar loss（一對一 matches，對照組）"""

from __future__ import annotations

import numpy as np

from emtrack.losses.base import LossFunction, LossMode
from emtrack.losses.kernel import pair_terms


class SquaredPairsLoss(LossFunction):
    """
    L = Σ (yᵀEx)²，最小化；σ 不參與
    """
    name = LossMode.SQUARED_PAIRS.value

    def terms(self, frame, cfg):
        return pair_terms(frame, cfg)

    def kernel(self, r, sigma):
        return r * r, 2.0 * r, np.full_like(r, 2.0)

    def value_kernel(self, r, sigma):
        return r * r


# 自動註冊至 LossFactory
from emtrack.losses.base import LossFactory
LossFactory.register(LossMode.SQUARED_PAIRS, SquaredPairsLoss)
