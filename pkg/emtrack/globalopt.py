"""
Single-shot 重新校正：5-D chart 上的 differential evolution + σ annealing

每個 stage：
- σ = σ₀ / 2^stage
- rand/1/bin DE，整代同步評估（value_batch），依 index 順序做 selection
- 越界以 bounce-back 修正：x = target + U(0,1)·(bound − target)
- stage 結束時把 manifold re-center 到最佳 θ，population 在 0 附近重建
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from emtrack.geometry import EssentialState, chart_batch, update
from emtrack.losses import KernelConfig, LossFactory
from emtrack.matching import FrameObservation

logger = logging.getLogger(__name__)

N_PARAMS = 5


class DegenerateFrameError(ValueError):
    """frame 資料不足或 loss 非有限值，無法求解"""


@dataclass(frozen=True)
class DeConfig:
    population: int = 64
    F: float = 0.8
    CR: float = 0.9
    generations_per_stage: int = 40
    stages: int = 7
    sigma0: float = 0.02
    bounds: float = 0.1
    init_spread: float = 5.0     # 初始 population 半寬 = min(bounds, init_spread·σ_stage)
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise ValueError(f"DeConfig.population must be >= 4, got {self.population}")
        if not (0.0 < self.F <= 2.0):
            raise ValueError(f"DeConfig.F must be in (0, 2], got {self.F}")
        if not (0.0 <= self.CR <= 1.0):
            raise ValueError(f"DeConfig.CR must be in [0, 1], got {self.CR}")
        if self.stages < 1:
            raise ValueError(f"DeConfig.stages must be >= 1, got {self.stages}")
        if self.generations_per_stage < 0:
            raise ValueError(f"DeConfig.generations_per_stage must be >= 0, got {self.generations_per_stage}")
        if not (self.sigma0 > 0 and self.bounds > 0 and self.init_spread > 0):
            raise ValueError("DeConfig.sigma0, bounds and init_spread must be > 0")


@dataclass
class DeResult:
    state: EssentialState
    sigmas: List[float]
    stage_thetas: List[np.ndarray] = field(default_factory=list)
    stage_losses: List[float] = field(default_factory=list)
    best_history: List[List[float]] = field(default_factory=list)   # 每 stage 每代的 best-so-far


def sigma_schedule(cfg: DeConfig) -> List[float]:
    """σᵢ = σ₀ / 2ⁱ，i = 0 … stages−1"""
    return [cfg.sigma0 / (2.0 ** i) for i in range(cfg.stages)]


def _parents(rng: np.random.Generator, n: int) -> np.ndarray:
    """每個 target i 取三個互異且 ≠ i 的 index"""
    out = np.empty((n, 3), dtype=np.int64)
    for i in range(n):
        r = rng.choice(n - 1, size=3, replace=False)
        r[r >= i] += 1
        out[i] = r
    return out


def _bounce_back(trial: np.ndarray, target: np.ndarray, b: float, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(trial.shape)
    hi = trial > b
    lo = trial < -b
    trial = np.where(hi, target + u * (b - target), trial)
    trial = np.where(lo, target + u * (-b - target), trial)
    return trial


def solve_detailed(
    initial: EssentialState,
    frame: FrameObservation,
    cfg: DeConfig,
    kernel: Optional[KernelConfig] = None,
) -> DeResult:
    """
    Raises:
        DegenerateFrameError: 每側 < 8 點、缺 correspondences、或 loss 非有限值
    """
    kernel = kernel or KernelConfig(sigma=cfg.sigma0)
    if frame.is_degenerate:
        raise DegenerateFrameError(
            f"frame {frame.frame_index}: needs >= 8 keypoints per side (got {frame.n_left}/{frame.n_right})")
    loss = LossFactory.create(kernel.loss_mode)
    try:
        P = loss.prepare(frame, kernel)
    except ValueError as e:
        raise DegenerateFrameError(str(e)) from e
    if P is None:
        raise DegenerateFrameError(f"frame {frame.frame_index}: too few loss terms for DE")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(cfg.seed))))
    NP, b = cfg.population, cfg.bounds
    center = initial
    result = DeResult(state=initial, sigmas=sigma_schedule(cfg))

    for stage, sigma in enumerate(result.sigmas):
        kcfg = replace(kernel, sigma=sigma)

        def fitness(thetas: np.ndarray) -> np.ndarray:
            vals = loss.value_batch(chart_batch(center, thetas), frame, kcfg, P)
            if not np.all(np.isfinite(vals)):
                raise DegenerateFrameError(f"frame {frame.frame_index}: non-finite loss at stage {stage}")
            return vals

        spread = min(b, cfg.init_spread * sigma)
        pop = rng.uniform(-spread, spread, size=(NP, N_PARAMS))
        pop[0] = 0.0
        fit = fitness(pop)
        history = [float(fit.min())]

        for _gen in range(cfg.generations_per_stage):
            r = _parents(rng, NP)
            mutant = pop[r[:, 0]] + cfg.F * (pop[r[:, 1]] - pop[r[:, 2]])
            mask = rng.random((NP, N_PARAMS)) <= cfg.CR
            mask[np.arange(NP), rng.integers(0, N_PARAMS, size=NP)] = True
            trial = np.where(mask, mutant, pop)
            trial = _bounce_back(trial, pop, b, rng)

            trial_fit = fitness(trial)
            better = trial_fit <= fit
            pop[better] = trial[better]
            fit[better] = trial_fit[better]
            history.append(float(fit.min()))

        best = int(np.argmin(fit))
        theta = pop[best].copy()
        center = update(center, theta)
        result.stage_thetas.append(theta)
        result.stage_losses.append(float(fit[best]))
        result.best_history.append(history)
        logger.debug(f"DE stage {stage}: σ={sigma:.3g} loss={fit[best]:.6g} θ={np.round(theta, 6).tolist()}")

    result.state = center
    logger.info(f"✅ DE 完成：{cfg.stages} stages × {cfg.generations_per_stage} generations，"
                f"final loss={result.stage_losses[-1]:.6g}")
    return result


def solve(initial: EssentialState, frame: FrameObservation, cfg: DeConfig,
          kernel: Optional[KernelConfig] = None) -> EssentialState:
    """annealed DE，回傳最終 re-centered state（同 seed 結果相同）"""
    return solve_detailed(initial, frame, cfg, kernel).state


__all__ = ['DeConfig', 'DeResult', 'DegenerateFrameError', 'sigma_schedule', 'solve', 'solve_detailed']
