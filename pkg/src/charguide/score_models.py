"""Closed-form denoising predictions for the three experiment families.

Every model maps ``(x, cond, step)`` to ``eps = -sigma_i * score_i(x)``
where ``score_i`` is the exact score of the data distribution pushed
through the forward process to step ``i``.  ``x`` carries a leading batch
axis; a single unbatched state is accepted as well.

Analytic models also expose ``eps_t`` (continuous time, signal weight
``exp(-t)``), used by the Fokker-Planck diagnostics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .schedule import NoiseSchedule

__all__ = [
    "ScoreModel",
    "GaussianModel",
    "MixtureModel",
    "KernelModel",
    "KernelDataset",
    "MIXTURE_MEANS",
    "gaussian_score",
    "mixture_score",
    "kernel_eps",
    "one_hot",
]

_SQ3 = math.sqrt(3.0)
MIXTURE_MEANS = np.array(
    [[-1.0, -1.0 / _SQ3], [1.0, -1.0 / _SQ3], [0.0, _SQ3 - 1.0 / _SQ3]]
)
MIXTURE_MEANS.setflags(write=False)

# rows of x times kernel points per block; bounds the logits buffer at ~32 MB
_KERNEL_BLOCK = 1 << 22


def one_hot(k: int, size: int = 3) -> np.ndarray:
    v = np.zeros(size)
    v[k] = 1.0
    return v


class ScoreModel:
    """Base contract: ``eps(x, cond, step)`` on a shared schedule."""

    shape: tuple[int, ...]
    schedule: NoiseSchedule

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        nd = len(self.shape)
        if x.shape[x.ndim - nd:] != self.shape or x.ndim not in (nd, nd + 1):
            raise ValueError(f"expected state shape {self.shape} (optionally batched), got {x.shape}")
        single = x.ndim == nd
        return (x[None] if single else x), single

    def eps(self, x, cond, step: int) -> np.ndarray:
        xb, single = self._as_batch(x)
        ab = self.schedule.alpha_bar_at(step)
        sigma = self.schedule.sigma_at(step)
        if sigma == 0.0:
            # clean data carries no noise; checked so conditions are still validated
            self._check_label(cond)
            out = np.zeros_like(xb)
            return out[0] if single else out
        out = self._eps_level(xb, cond, ab, sigma)
        return out[0] if single else out

    def eps_t(self, x, cond, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("diffusion time must be non-negative")
        xb, single = self._as_batch(x)
        ab = math.exp(-t)
        sigma = math.sqrt(-math.expm1(-t))
        out = self._eps_level(xb, cond, ab, sigma)
        return out[0] if single else out

    def _eps_level(self, x, cond, ab: float, sigma: float) -> np.ndarray:
        raise NotImplementedError

    def _check_label(self, cond):
        return cond


# --- conditional / unconditional 2-D Gaussian --------------------------------


def gaussian_score(x, c, ab: float) -> np.ndarray:
    """Score of ``N(c, I)`` (or ``N(0, 5I)`` when ``c is None``) diffused to weight ``ab``."""
    x = np.asarray(x, dtype=np.float64)
    if c is None:
        return -x / (1.0 + 4.0 * ab)
    return math.sqrt(ab) * np.asarray(c, dtype=np.float64) - x


class GaussianModel(ScoreModel):
    """``p(x|c) = N(c, I)``, ``p(x) = N(0, 5 I)`` in two dimensions."""

    shape = (2,)

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    @staticmethod
    def _check_cond(cond):
        if cond is None:
            return None
        c = np.asarray(cond, dtype=np.float64)
        if c.shape != (2,):
            raise ValueError(f"Gaussian condition must be a 2-vector, got shape {c.shape}")
        return c

    def _check_label(self, cond):
        return self._check_cond(cond)

    def _eps_level(self, x, cond, ab, sigma):
        c = self._check_cond(cond)
        return -sigma * gaussian_score(x, c, ab)

    def log_prob_level(self, x, cond, ab: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self._check_cond(cond)
        if c is None:
            var = 1.0 + 4.0 * ab
            return -0.5 * np.sum(x * x, axis=-1) / var - np.log(2 * np.pi * var)
        d = x - math.sqrt(ab) * c
        return -0.5 * np.sum(d * d, axis=-1) - np.log(2 * np.pi)

    @staticmethod
    def guided_target(c, omega: float) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of ``p(x|c)^(1+w) p(x)^(-w)``."""
        c = np.asarray(c, dtype=np.float64)
        denom = 4.0 * omega + 5.0
        if denom <= 0:
            raise ValueError("guided Gaussian is improper for omega <= -5/4")
        return 5.0 * (omega + 1.0) * c / denom, (5.0 / denom) * np.eye(2)


# --- three-component mixture -------------------------------------------------


def _mixture_log_weights(x, ab: float, means) -> np.ndarray:
    d = x[..., None, :] - math.sqrt(ab) * means
    return -0.5 * np.sum(d * d, axis=-1)


def mixture_score(x, c, ab: float, means=MIXTURE_MEANS) -> np.ndarray:
    """Score of the diffused mixture; each component stays unit-covariance."""
    x = np.asarray(x, dtype=np.float64)
    a = math.sqrt(ab)
    if c is not None:
        return a * means[int(np.argmax(c))] - x
    w = softmax(_mixture_log_weights(x, ab, means), axis=-1)
    return a * (w @ means) - x


class MixtureModel(ScoreModel):
    """Equal-weight mixture of ``N(mu_j, I)``; condition is a one-hot 3-vector."""

    shape = (2,)

    def __init__(self, schedule: NoiseSchedule, means=MIXTURE_MEANS):
        self.schedule = schedule
        self.means = np.asarray(means, dtype=np.float64)

    def _check_cond(self, cond):
        if cond is None:
            return None
        c = np.asarray(cond, dtype=np.float64)
        k = self.means.shape[0]
        if c.shape != (k,) or not np.all((c == 0) | (c == 1)) or c.sum() != 1:
            raise ValueError(f"mixture condition must be a one-hot {k}-vector, got {cond!r}")
        return c

    def _check_label(self, cond):
        return self._check_cond(cond)

    def _eps_level(self, x, cond, ab, sigma):
        c = self._check_cond(cond)
        return -sigma * mixture_score(x, c, ab, self.means)

    def log_prob_level(self, x, cond, ab: float) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self._check_cond(cond)
        lw = _mixture_log_weights(x, ab, self.means) - np.log(2 * np.pi)
        if c is not None:
            return lw[..., int(np.argmax(c))]
        return logsumexp(lw, axis=-1) - np.log(self.means.shape[0])


# --- empirical kernel model --------------------------------------------------


@dataclass(frozen=True)
class KernelDataset:
    """Empirical clean-data samples, uniformly weighted."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("kernel dataset needs at least one point as an (N, dim) array")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    def save(self, path) -> Path:
        """Write ``dim,N`` then rows; ``.bin`` suffix stores raw float64 after the header."""
        path = Path(path)
        n, d = self.points.shape
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(f"{d},{n}\n".encode())
            if path.suffix == ".bin":
                fh.write(self.points.astype("<f8").tobytes(order="C"))
            else:
                np.savetxt(fh, self.points, delimiter=",", fmt="%.17g")
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "KernelDataset":
        path = Path(path)
        with open(path, "rb") as fh:
            header = fh.readline().decode().strip()
            try:
                d, n = (int(v) for v in header.split(","))
            except ValueError:
                raise ValueError(f"{path}: bad header {header!r}, expected 'dim,N'") from None
            if path.suffix == ".bin":
                pts = np.frombuffer(fh.read(), dtype="<f8")
            else:
                pts = np.loadtxt(fh, delimiter=",", ndmin=2)
        if pts.size != n * d:
            raise ValueError(f"{path}: header says {n}x{d} values, found {pts.size}")
        return cls(pts.reshape(n, d))


def kernel_eps(x, points, ab: float, sigma: float, sq_norms=None) -> np.ndarray:
    """Exact ``eps`` of the diffused empirical mixture over ``points``.

    ``x`` is ``(B, dim)``.  Equivalent to ``(x - sqrt(ab) * E[x0 | x]) / sigma``
    with posterior weights from a log-sum-exp stabilized softmax.
    """
    if sigma <= 0:
        raise ValueError("kernel eps is singular at sigma = 0")
    x = np.asarray(x, dtype=np.float64)
    a = math.sqrt(ab)
    if sq_norms is None:
        sq_norms = np.einsum("ij,ij->i", points, points)
    out = np.empty_like(x)
    block = max(1, _KERNEL_BLOCK // points.shape[0])
    inv_var = 1.0 / (sigma * sigma)
    for lo in range(0, x.shape[0], block):
        xs = x[lo:lo + block]
        # -|x - a p|^2 / (2 s^2) up to a per-row constant
        logits = (xs @ points.T) * (a * inv_var) - (0.5 * ab * inv_var) * sq_norms
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[lo:lo + block] = (xs - a * (logits @ points)) / sigma
    return out


class KernelModel(ScoreModel):
    """Empirical-mixture model with one dataset per condition label."""

    def __init__(self, schedule: NoiseSchedule, datasets: dict, shape=None):
        if not datasets:
            raise ValueError("at least one dataset is required")
        dims = {ds.dim for ds in datasets.values()}
        if len(dims) != 1:
            raise ValueError(f"datasets disagree on dimension: {sorted(dims)}")
        dim = dims.pop()
        self.shape = tuple(shape) if shape is not None else (dim,)
        if int(np.prod(self.shape)) != dim:
            raise ValueError(f"shape {self.shape} does not hold {dim} values")
        self.schedule = schedule
        self.datasets = dict(datasets)
        self._sq = {k: np.einsum("ij,ij->i", ds.points, ds.points) for k, ds in self.datasets.items()}

    def _check_label(self, cond):
        if cond not in self.datasets:
            raise KeyError(f"no kernel dataset for condition {cond!r}")
        return cond

    def _eps_level(self, x, cond, ab, sigma):
        ds = self.datasets[self._check_label(cond)]
        flat = x.reshape(x.shape[0], -1)
        return kernel_eps(flat, ds.points, ab, sigma, self._sq[cond]).reshape(x.shape)

    def log_prob_level(self, x, cond, ab: float, sigma: float) -> np.ndarray:
        ds = self.datasets[cond]
        x = np.asarray(x, dtype=np.float64).reshape(-1, ds.dim)
        d2 = (
            np.einsum("ij,ij->i", x, x)[:, None]
            - 2 * math.sqrt(ab) * (x @ ds.points.T)
            + ab * self._sq[cond][None, :]
        )
        var = sigma * sigma
        return (
            logsumexp(-0.5 * d2 / var, axis=1)
            - math.log(len(ds))
            - 0.5 * ds.dim * math.log(2 * math.pi * var)
        )
