"""Discretized variance-preserving diffusion schedule.

Step ``i = 0`` is clean data (``alpha_bar = 1``, ``sigma = 0``); steps
``1..n`` are the noised states.  ``beta[k]`` (0-based, ``k = 0..n-1``) is
the step size that carries step ``k`` to step ``k + 1``, so
``alpha_bar_i = prod_{j<i} (1 - beta_j)`` and ``t_i = sum_{j<i} beta_j``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NoiseSchedule", "build_linear_schedule", "sigma_of_time"]

_LARGE_BETA = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    """Read-only schedule.  Arrays are indexed by ``step - 1``."""

    n: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    t: np.ndarray
    _ab_full: np.ndarray = field(repr=False, compare=False)
    _t_full: np.ndarray = field(repr=False, compare=False)
    _sigma_full: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D sequence")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every step size must lie in (0, 1)")
        if np.any(beta > _LARGE_BETA):
            warnings.warn(
                f"step sizes up to {beta.max():.3g} exceed {_LARGE_BETA}; "
                "beta**2 is no longer negligible",
                stacklevel=2,
            )
        alpha_bar = np.cumprod(1.0 - beta)
        t = np.cumsum(beta)
        sigma = np.sqrt(1.0 - alpha_bar)
        ab_full = np.concatenate([[1.0], alpha_bar])
        t_full = np.concatenate([[0.0], t])
        sigma_full = np.concatenate([[0.0], sigma])
        for arr in (beta, alpha_bar, t, sigma, ab_full, t_full, sigma_full):
            arr.setflags(write=False)
        return cls(beta.size, beta, alpha_bar, sigma, t, ab_full, t_full, sigma_full)

    def _check(self, i: int) -> int:
        i = int(i)
        if not 0 <= i <= self.n:
            raise IndexError(f"step {i} outside 0..{self.n}")
        return i

    def alpha_bar_at(self, i: int) -> float:
        return float(self._ab_full[self._check(i)])

    def sigma_at(self, i: int) -> float:
        return float(self._sigma_full[self._check(i)])

    def time_at(self, i: int) -> float:
        return float(self._t_full[self._check(i)])

    def beta_into(self, i: int) -> float:
        """Step size of the forward move ``i - 1 -> i`` (``i >= 1``)."""
        i = self._check(i)
        if i == 0:
            raise IndexError("step 0 has no incoming step size")
        return float(self.beta[i - 1])

    def strided(self, steps: int) -> list[int]:
        """Decreasing step indices ``round(k n / steps)`` for ``k = steps..0``."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps > self.n:
            raise ValueError(f"cannot stride {steps} steps out of {self.n}")
        idx = [int(round(k * self.n / steps)) for k in range(steps, -1, -1)]
        return idx


def build_linear_schedule(n: int, b1: float = 1e-4, b2: float = 0.02) -> NoiseSchedule:
    """``beta[k] = k (b2 - b1) / (n - 1) + b1`` for ``k = 0..n-1``."""
    if int(n) != n or n < 2:
        raise ValueError(f"n must be an integer >= 2, got {n!r}")
    if not (0 < b1 <= b2 < 1):
        raise ValueError(f"need 0 < b1 <= b2 < 1, got b1={b1}, b2={b2}")
    k = np.arange(int(n), dtype=np.float64)
    return NoiseSchedule.from_betas(k * (b2 - b1) / (n - 1) + b1)


def sigma_of_time(t):
    """Continuous-time noise scale ``sqrt(1 - exp(-t))``."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("diffusion time must be non-negative")
    out = np.sqrt(-np.expm1(-t_arr))
    return float(out) if out.ndim == 0 else out
