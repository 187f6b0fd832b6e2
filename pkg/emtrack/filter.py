"""
Adaptive online stochastic filter

每幀流程（tick）：
1. burn-in：EMA 累積 g / v / h，memory m += 1，不更新 manifold
2. 之後：EMA → adaptive memory → adaptive step → manifold update
3. low-information frame（skip）：只累加 frame_count

持久狀態 = g, v, h, m（各 5）+ U, V（各 9）= 38 個純量。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from emtrack.geometry import REORTHO_EVERY, EssentialState, reorthonormalize, update
from emtrack.losses.base import LossEval

logger = logging.getLogger(__name__)

N_PARAMS = 5
STATE_VECTORS = ('g', 'v', 'h', 'm')


def _zeros() -> np.ndarray:
    return np.zeros(N_PARAMS)


@dataclass(frozen=True, eq=False)
class FilterState:
    """
    g: EMA gradient；v: EMA squared gradient；h: EMA Hessian 對角；m: memory size
    samples: 已累積的非 skip 幀數（burn-in 以此計數）
    updates: 已套用的 manifold update 次數（re-orthonormalize 週期）
    """
    g: np.ndarray = field(default_factory=_zeros)
    v: np.ndarray = field(default_factory=_zeros)
    h: np.ndarray = field(default_factory=_zeros)
    m: np.ndarray = field(default_factory=lambda: np.ones(N_PARAMS))
    frame_count: int = 0
    samples: int = 0
    updates: int = 0
    burn_in: int = 10
    eps: float = 1e-7
    h_floor: float = 1e-6
    theta_max: float = 0.01
    reortho_every: int = REORTHO_EVERY

    def __post_init__(self):
        for name in STATE_VECTORS:
            arr = np.array(getattr(self, name), dtype=float).reshape(N_PARAMS)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.burn_in < 0:
            raise ValueError(f"FilterState.burn_in must be >= 0, got {self.burn_in}")
        if not self.eps > 0:
            raise ValueError(f"FilterState.eps must be > 0, got {self.eps}")

    @property
    def in_burn_in(self) -> bool:
        return self.samples < self.burn_in

    def invariant_ok(self) -> bool:
        """g² ≤ v + ε 且 m ≥ 1"""
        slack = self.v + self.eps + 1e-12 * np.abs(self.v)
        return bool(np.all(self.g * self.g <= slack) and np.all(self.m >= 1.0 - 1e-12))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.g, self.v, self.h, self.m])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'g': self.g.tolist(), 'v': self.v.tolist(), 'h': self.h.tolist(), 'm': self.m.tolist(),
            'frame_count': self.frame_count, 'samples': self.samples, 'updates': self.updates,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], **options) -> 'FilterState':
        return cls(
            g=data['g'], v=data['v'], h=data['h'], m=data['m'],
            frame_count=int(data.get('frame_count', 0)),
            samples=int(data.get('samples', 0)),
            updates=int(data.get('updates', 0)),
            **options,
        )


@dataclass(frozen=True)
class StepResult:
    dtheta: np.ndarray
    nu: np.ndarray
    applied: bool
    skipped: bool = False


def persistent_scalar_count(state: Optional[FilterState] = None,
                            manifold: Optional[EssentialState] = None) -> int:
    state = state or FilterState()
    n = int(state.to_vector().size)
    n += 18 if manifold is None else len(manifold.to_list())
    return n


# ==================== 單步運算 ====================

def ema_update(state: FilterState, grad, hess_diag) -> FilterState:
    """
    g ← (1 − γ)g + γ·grad，v 與 h 同理（grad²、hess_diag），γ = 1/m

    burn-in 期間 m += 1。
    """
    grad = np.asarray(grad, dtype=float)
    hess_diag = np.asarray(hess_diag, dtype=float)
    gamma = 1.0 / state.m
    keep = 1.0 - gamma
    m = state.m + 1.0 if state.in_burn_in else state.m
    return replace(
        state,
        g=keep * state.g + gamma * grad,
        v=keep * state.v + gamma * grad * grad,
        h=keep * state.h + gamma * hess_diag,
        m=m,
        samples=state.samples + 1,
    )


def _nu(state: FilterState) -> np.ndarray:
    return np.clip(state.g * state.g / (state.v + state.eps), 0.0, 1.0)


def memory_update(state: FilterState) -> FilterState:
    """m ← (1 − g²/(v + ε))·m + 1"""
    coeff = 1.0 - state.g * state.g / (state.v + state.eps)
    if np.any(coeff < 0.0) and not state.invariant_ok():
        logger.warning(f"⚠️ memory_update: g² > v + ε（g={state.g}, v={state.v}），係數截到 0")
    coeff = np.clip(coeff, 0.0, 1.0)
    return replace(state, m=coeff * state.m + 1.0)


def step(state: FilterState, grad) -> StepResult:
    """
    Δθ = −ν · grad / h̃，ν = g²/(v + ε)，h̃ = max(|h|, h_floor)，|Δθ| ≤ θ_max
    grad 為當幀的瞬時偏導
    """
    grad = np.asarray(grad, dtype=float)
    nu = _nu(state)
    h_safe = np.maximum(np.abs(state.h), state.h_floor)
    dtheta = np.clip(-nu * grad / h_safe, -state.theta_max, state.theta_max)
    return StepResult(dtheta=dtheta, nu=nu, applied=True)


def tick(state: FilterState, manifold: EssentialState,
         ev: Optional[LossEval]) -> Tuple[FilterState, EssentialState, StepResult]:
    """單幀：burn-in 累積 / EMA → memory → step → manifold update / skip"""
    if ev is None or ev.low_information or not ev.is_finite:
        if ev is not None and not ev.low_information:
            logger.warning(f"⚠️ frame {state.frame_count}: loss 非有限值，視為 skip-frame")
        skipped = replace(state, frame_count=state.frame_count + 1)
        return skipped, manifold, StepResult(dtheta=_zeros(), nu=_zeros(), applied=False, skipped=True)

    burn = state.in_burn_in
    state = ema_update(state, ev.grad, ev.hess_diag)
    if not state.invariant_ok():
        # 僅在外部注入 / checkpoint 損壞的狀態下觸發
        logger.error(f"❌ frame {state.frame_count}: filter 狀態違反 g² ≤ v + ε"
                     f"（g={state.g}, v={state.v}, m={state.m}）")
    state = replace(state, frame_count=state.frame_count + 1)
    if burn:
        return state, manifold, StepResult(dtheta=_zeros(), nu=_zeros(), applied=False)

    state = memory_update(state)
    result = step(state, ev.grad)
    if np.any(result.dtheta != 0.0):
        manifold = update(manifold, result.dtheta)
        state = replace(state, updates=state.updates + 1)
        if state.reortho_every and state.updates % state.reortho_every == 0:
            manifold = reorthonormalize(manifold)
    return state, manifold, result
