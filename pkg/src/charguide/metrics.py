"""Evaluation metrics: Gaussian-fit and mixture KL, magnet NLL, Fokker-Planck
mixing error by finite differences, and histogram bimodality detection."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from .magnet import MagnetParams, hamiltonian
from .score_models import MIXTURE_MEANS

__all__ = [
    "GaussianFit",
    "fit_gaussian",
    "gaussian_kl",
    "fit_gaussian_kl",
    "MixtureKL",
    "tilted_mixture_log_partition",
    "mixture_kl",
    "magnet_nll",
    "MixingErrorReport",
    "mixing_error_fd",
    "mixing_error_report",
    "BimodalityReport",
    "bimodality_check",
]


# --- Gaussian fits -----------------------------------------------------------


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    singular: bool = False


def fit_gaussian(samples) -> GaussianFit:
    """Maximum-likelihood mean and (1/n) covariance of ``(n, dim)`` samples."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be an (n, dim) array")
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more samples than dimensions (n={n}, dim={d})")
    mean = x.mean(axis=0)
    c = x - mean
    cov = c.T @ c / n
    cov = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(cov)
        singular = False
    except np.linalg.LinAlgError:
        singular = True
    return GaussianFit(mean, cov, n, singular)


def gaussian_kl(mean_p, cov_p, mean_q, cov_q) -> float:
    """``KL(N(mean_p, cov_p) || N(mean_q, cov_q))`` in nats."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=np.float64))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=np.float64))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=np.float64))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=np.float64))
    d = mean_p.size
    Lq = np.linalg.cholesky(cov_q)
    Lp = np.linalg.cholesky(cov_p)
    m = np.linalg.solve(Lq, mean_q - mean_p)
    A = np.linalg.solve(Lq, Lp)
    logdet_q = 2.0 * np.sum(np.log(np.diag(Lq)))
    logdet_p = 2.0 * np.sum(np.log(np.diag(Lp)))
    return 0.5 * float(np.sum(A * A) + m @ m - d + logdet_q - logdet_p)


def fit_gaussian_kl(samples, target_mean, target_cov) -> float:
    """Fit a Gaussian to ``samples`` and return ``KL(fit || target)``.

    A singular fit (degenerate samples) returns ``inf`` with a warning.
    """
    fit = fit_gaussian(samples)
    try:
        np.linalg.cholesky(np.atleast_2d(target_cov))
    except np.linalg.LinAlgError:
        raise ValueError("target covariance must be positive definite") from None
    if fit.singular:
        warnings.warn("fitted covariance is singular; KL reported as inf", RuntimeWarning,
                      stacklevel=2)
        return math.inf
    return gaussian_kl(fit.mean, fit.cov, target_mean, target_cov)


# --- tilted mixture ----------------------------------------------------------


def _unit_log_normal(x, means):
    # (n, k) log N(x; mu_j, I) in two dimensions
    d = x[:, None, :] - means[None]
    return -0.5 * np.sum(d * d, axis=-1) - 0.5 * means.shape[1] * math.log(2 * math.pi)


def _tilted_log_unnorm(x, cond, omega, means):
    ln = _unit_log_normal(x, means)
    log_c = ln[:, cond]
    log_u = logsumexp(ln, axis=1) - math.log(means.shape[0])
    return (1.0 + omega) * log_c - omega * log_u


def tilted_mixture_log_partition(omega, cond: int, means=MIXTURE_MEANS, n_draws=200000,
                                 rng=None) -> tuple[float, float]:
    """``log Z`` of ``p(x|c)^(1+w) p(x)^(-w)`` by importance sampling from ``p(x|c)``.

    Returns ``(log Z, standard error of log Z)``.  The weights are
    ``(p(x|c) / p(x))^w``, bounded by ``k^w`` for ``k`` equal components.
    """
    rng = np.random.default_rng(rng)
    means = np.asarray(means, dtype=np.float64)
    x = means[cond] + rng.standard_normal((n_draws, means.shape[1]))
    ln = _unit_log_normal(x, means)
    log_w = omega * (ln[:, cond] - (logsumexp(ln, axis=1) - math.log(means.shape[0])))
    log_z = logsumexp(log_w) - math.log(n_draws)
    w = np.exp(log_w - log_z)
    rel_se = float(np.std(w) / math.sqrt(n_draws))
    return float(log_z), rel_se


@dataclass
class MixtureKL:
    kl: float
    stderr: float
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    empty: list = field(default_factory=list)
    log_z: float = 0.0
    log_z_stderr: float = 0.0


def mixture_kl(samples, omega: float, cond: int, means=MIXTURE_MEANS, n_mc: int = 100000,
               seed: int = 0) -> MixtureKL:
    """``KL(fitted mixture || tilted target)`` by Monte Carlo.

    Samples are hard-assigned to the nearest reference mean (the maximum
    responsibility of the equal-weight unit-covariance mixture), a Gaussian
    is fitted per component, and the KL is averaged over ``n_mc`` draws from
    the fitted mixture.  Components with fewer than ``dim + 1`` samples get
    weight 0 and are listed in ``empty``.
    """
    if n_mc < 100000:
        raise ValueError("use at least 1e5 Monte Carlo draws")
    x = np.asarray(samples, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    k, d = means.shape
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"samples must be (n, {d})")
    rng = np.random.default_rng(seed)
    label = np.argmax(_unit_log_normal(x, means), axis=1)
    weights = np.zeros(k)
    fmeans = np.zeros((k, d))
    fcovs = np.tile(np.eye(d), (k, 1, 1))
    empty = []
    for j in range(k):
        pts = x[label == j]
        if pts.shape[0] <= d:
            empty.append(j)
            continue
        fit = fit_gaussian(pts)
        if fit.singular:
            empty.append(j)
            continue
        weights[j] = pts.shape[0]
        fmeans[j], fcovs[j] = fit.mean, fit.cov
    if weights.sum() == 0:
        raise ValueError("no component has enough samples to fit")
    weights /= weights.sum()
    if empty:
        warnings.warn(f"mixture components {empty} have too few samples; weight set to 0",
                      RuntimeWarning, stacklevel=2)

    counts = rng.multinomial(n_mc, weights)
    draws = np.concatenate(
        [rng.multivariate_normal(fmeans[j], fcovs[j], size=counts[j]) for j in range(k) if counts[j]]
    )
    comp_logpdf = np.stack(
        [
            multivariate_normal(fmeans[j], fcovs[j]).logpdf(draws) if weights[j] > 0
            else np.full(n_mc, -np.inf)
            for j in range(k)
        ],
        axis=1,
    )
    with np.errstate(divide="ignore"):
        log_fit = logsumexp(comp_logpdf + np.log(weights), axis=1)
    log_z, log_z_se = tilted_mixture_log_partition(omega, cond, means, rng=rng)
    log_target = _tilted_log_unnorm(draws, cond, omega, means) - log_z
    diff = log_fit - log_target
    kl = float(diff.mean())
    stderr = float(math.sqrt(diff.var() / n_mc + log_z_se**2))
    return MixtureKL(kl, stderr, weights, fmeans, fcovs, empty, log_z, log_z_se)


# --- magnet ------------------------------------------------------------------


def magnet_nll(fields, T: float, mh_reference, params: MagnetParams = MagnetParams()) -> float:
    """Mean ``beta H`` of ``fields`` minus that of the MH reference, both at ``T``."""
    fields = np.asarray(fields, dtype=np.float64)
    ref = np.asarray(mh_reference, dtype=np.float64)
    if fields.shape[0] == 0 or ref.shape[0] == 0:
        raise ValueError("both batches must be non-empty")
    if fields.shape[1:] != ref.shape[1:]:
        raise ValueError(f"lattice mismatch: {fields.shape[1:]} vs {ref.shape[1:]}")
    return float(np.mean(hamiltonian(fields, T, params)) - np.mean(hamiltonian(ref, T, params)))


# --- Fokker-Planck mixing error ----------------------------------------------


def mixing_error_fd(eps_field, probe, t: float, fd: float = 1e-4, fd_t: float | None = None):
    """Finite-difference mixing error of an ``eps(x, t)`` field at one point.

    ``e_m = d eps/dt - 1/2 (grad(eps . x) + lap(eps) + (1 - s^2)/s^2 eps
    - grad |eps|^2 / s)`` with ``s = sqrt(1 - e^-t)``, all derivatives by
    central differences.  ``eps_field(x, t)`` takes a ``(B, dim)`` batch.
    """
    fd_t = fd if fd_t is None else fd_t
    s = math.sqrt(-math.expm1(-t))
    if s < 1e-3:
        raise ValueError("sigma(t) below 1e-3: the 1/sigma terms are too ill-conditioned")
    if t - fd_t <= 0:
        raise ValueError("time step reaches t <= 0")
    x = np.asarray(probe, dtype=np.float64).ravel()
    d = x.size
    I = np.eye(d) * fd
    pts = np.concatenate([x[None], x + I, x - I])        # (1 + 2d, d)
    e = np.asarray(eps_field(pts, t), dtype=np.float64).reshape(1 + 2 * d, d)
    e0, ep, em = e[0], e[1:1 + d], e[1 + d:]
    et = np.asarray(eps_field(np.stack([x, x]), t + fd_t), dtype=np.float64).reshape(2, d)[0]
    etm = np.asarray(eps_field(np.stack([x, x]), t - fd_t), dtype=np.float64).reshape(2, d)[0]
    de_dt = (et - etm) / (2 * fd_t)
    dot_p = np.einsum("kd,kd->k", ep, pts[1:1 + d])
    dot_m = np.einsum("kd,kd->k", em, pts[1 + d:])
    grad_dot = (dot_p - dot_m) / (2 * fd)
    lap = (ep.sum(axis=0) + em.sum(axis=0) - 2 * d * e0) / fd**2
    grad_sq = (np.sum(ep * ep, axis=1) - np.sum(em * em, axis=1)) / (2 * fd)
    L_eps = grad_dot + lap + (1.0 - s * s) / (s * s) * e0
    return de_dt - 0.5 * (L_eps - grad_sq / s)


@dataclass
class MixingErrorReport:
    probe_points: list
    times: list
    e_m_norms: list
    fd_steps: dict


def mixing_error_report(eps_field, probes, times, fd: float = 1e-4) -> MixingErrorReport:
    norms = [float(np.linalg.norm(mixing_error_fd(eps_field, p, t, fd))) for p, t in zip(probes, times)]
    return MixingErrorReport(
        [np.asarray(p).tolist() for p in probes], [float(t) for t in times], norms,
        {"space": fd, "time": fd},
    )


# --- bimodality --------------------------------------------------------------


@dataclass
class BimodalityReport:
    peak_count: int
    peak_to_valley_ratio: float
    peak_locations: list
    peak_heights: list


def bimodality_check(values, bins: int = 80, smooth: float = 2.0,
                     prominence: float = 0.05) -> BimodalityReport:
    """Count peaks of a smoothed histogram.

    Peaks need a prominence of at least ``prominence`` times the global
    maximum.  The ratio compares the lower of the two tallest peaks with the
    minimum between them (``nan`` for fewer than two peaks).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 1000:
        raise ValueError("bimodality check needs at least 1000 values")
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise ValueError("all values are equal; the histogram is degenerate")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    sm = gaussian_filter1d(hist.astype(np.float64), smooth, mode="constant")
    centres = 0.5 * (edges[:-1] + edges[1:])
    # zero padding lets a maximum in the end bins count as a peak
    padded = np.concatenate([[0.0], sm, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * sm.max())
    peaks = peaks - 1
    heights = sm[peaks]
    ratio = float("nan")
    if peaks.size >= 2:
        top = np.sort(peaks[np.argsort(heights)[-2:]])
        valley = sm[top[0]:top[1] + 1].min()
        low_peak = min(sm[top[0]], sm[top[1]])
        ratio = float(low_peak / valley) if valley > 0 else math.inf
    return BimodalityReport(int(peaks.size), ratio, centres[peaks].tolist(), heights.tolist())
