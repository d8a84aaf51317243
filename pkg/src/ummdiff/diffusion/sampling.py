"""Training loss, guidance fusion and the DDIM sampler."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .. import numerics as nx
from .schedule import NoiseSchedule, q_sample


@dataclass
class SamplerConfig:
    alpha: float = 0.5      # fuse ratio between multi-modal and pure-text predictions
    guidance: float = 7.5   # classifier-free guidance weight
    steps: int = 50
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.guidance < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.guidance}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    def to_dict(self):
        return asdict(self)


def check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"fuse ratio alpha must lie in [0, 1], got {alpha}")


def training_loss(eps_model: Callable, x0: np.ndarray, schedule: NoiseSchedule,
                  rng: np.random.Generator, t=None, eps=None) -> nx.Tensor:
    """Batch mean of ||eps - eps_model(x_t, t)||^2 (summed over pixels).

    ``eps_model(x_t, t)`` closes over the conditioning of each row.
    """
    b = x0.shape[0]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    eps = np.asarray(eps, x0.dtype)
    x_t = q_sample(schedule, x0, t, eps)
    pred = eps_model(nx.Tensor(x_t), t)
    diff = pred - eps
    return (diff * diff).sum() * (1.0 / b)


def fuse_predictions(eps_u, eps_y, eps_null, alpha: float, w: float):
    """alpha*w*eps_u + (1-alpha)*w*eps_y + (1-w)*eps_null.

    ``eps_null`` may be None when ``w == 1`` and ``eps_u`` may be None when
    ``alpha == 0`` (their coefficients vanish). The terms are always summed
    in this order.
    """
    check_alpha(alpha)
    out = 0.0
    if alpha != 0.0:
        out = out + (alpha * w) * eps_u
    if alpha != 1.0:
        out = out + ((1.0 - alpha) * w) * eps_y
    if w != 1.0:
        if eps_null is None:
            raise ValueError("the unconditional prediction is needed when w != 1")
        out = out + (1.0 - w) * eps_null
    return out


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced, strictly decreasing timesteps in [1, T] starting at T."""
    steps = min(steps, T)
    ts = np.unique(np.rint(np.linspace(T, 1, steps)).astype(int))
    return ts[::-1]


def ddim_step(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t: int, t_prev: int,
              eta: float = 0.0, noise: np.ndarray | None = None) -> np.ndarray:
    if not t_prev < t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    schedule.check_t(t)
    schedule.check_t(t_prev, allow_zero=True)
    ab_t, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    if ab_t <= 0:
        raise ValueError("alpha_bar_t is zero")
    x0_hat = (x_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    out = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 needs a noise draw")
        out = out + sigma * noise
    return out.astype(x_t.dtype)


def ddim_sample(eps_fn: Callable, schedule: NoiseSchedule, x_T: np.ndarray, steps: int,
                eta: float = 0.0, rng: np.random.Generator | None = None,
                trajectory: list | None = None) -> np.ndarray:
    """Run DDIM from ``x_T``; ``eps_fn(x_t, t)`` returns the guided noise estimate.

    When ``trajectory`` is a list, per-step ``(t, x_t, eps)`` tuples are appended.
    """
    ts = ddim_timesteps(schedule.T, steps)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps = np.asarray(eps_fn(x, int(t)), x.dtype)
        if trajectory is not None:
            trajectory.append((int(t), x.copy(), eps.copy()))
        noise = rng.standard_normal(x.shape).astype(x.dtype) if eta > 0 else None
        x = ddim_step(schedule, x, eps, int(t), t_prev, eta, noise)
    return x
