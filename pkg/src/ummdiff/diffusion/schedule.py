from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule. Arrays are indexed by timestep with a t=0 entry:
    ``alpha_bars[0] == 1`` and ``betas[0] == 0``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def check_t(self, t, allow_zero=False) -> np.ndarray:
        t = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[1]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, np.float64)
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def q_step(schedule: NoiseSchedule, x_prev: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """One forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    t = schedule.check_t(t)
    beta = _bcast(schedule.betas[t], x_prev)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Closed-form marginal: sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps."""
    t = schedule.check_t(t)
    ab = _bcast(schedule.alpha_bars[t], x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.result_type(x0, eps))
