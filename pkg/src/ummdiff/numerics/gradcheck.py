"""Central finite differences, used as an independent oracle for the tape."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. the array ``x`` (mutated in place).

    ``indices`` optionally restricts the probe to a subset of flat positions;
    entries outside it are left as NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), over the probed entries."""
    ok = ~np.isnan(numeric)
    a, n = analytic[ok], numeric[ok]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def global_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||) over the probed entries."""
    ok = ~np.isnan(numeric)
    a, n = analytic[ok], numeric[ok]
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)
