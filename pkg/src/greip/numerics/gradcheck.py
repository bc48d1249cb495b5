"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .ops import record_kinks
from .tensor import Tensor, backward

ScalarFn = Callable[[Tensor], Tensor]


def grad_check(f: ScalarFn, x: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    analytic = backward(f(leaf), wrt=[leaf])[leaf]

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(Tensor(x0)).item()
        flat[i] = orig - step
        down = f(Tensor(x0)).item()
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max())


def kink_distance(f: ScalarFn, x: np.ndarray) -> float:
    """Smallest distance of any relu/abs/floor input to its kink during ``f(x)``."""
    with record_kinks() as distances:
        f(Tensor(x))
    return min(distances) if distances else float("inf")


def sample_smooth_point(
    f: ScalarFn,
    sampler: Callable[[np.random.Generator], np.ndarray],
    rng: np.random.Generator,
    margin: float = 1e-3,
    max_tries: int = 1000,
) -> np.ndarray:
    """Draw from ``sampler`` until no piecewise op sits within ``margin`` of a kink."""
    for _ in range(max_tries):
        x = sampler(rng)
        if kink_distance(f, x) >= margin:
            return x
    raise RuntimeError(f"no sample at least {margin} away from kinks in {max_tries} tries")


def grad_check_random(
    f: ScalarFn,
    sampler: Callable[[np.random.Generator], np.ndarray],
    rng: np.random.Generator,
    n_points: int = 10,
    step: float = 1e-5,
    margin: float = 1e-3,
) -> float:
    """Worst grad_check error over ``n_points`` kink-free random points."""
    worst = 0.0
    for _ in range(n_points):
        x = sample_smooth_point(f, sampler, rng, margin)
        worst = max(worst, grad_check(f, x, step))
    return worst
