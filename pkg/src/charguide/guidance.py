"""Classifier-free and characteristic guidance.

Characteristic guidance evaluates the two models at shifted points
``x1 = x + w dx`` (conditional) and ``x2 = x + (1 + w) dx`` (unconditional),
where the correction ``dx`` is a root of the residual

    g(dx) = dx - P[(eps_u(x2) - eps_c(x1)) * sigma]

found by fixed-point iteration (SOR, RMSprop or Anderson acceleration).
All solvers run on a batch of states at once; every row keeps its own
stopping decision, and rows that have stopped are frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "PROJECTIONS",
    "SOLVERS",
    "SolverParams",
    "GuidanceSpec",
    "SolverTrace",
    "classifier_free_eps",
    "apply_projection",
    "projection_degenerate",
    "residual_g",
    "solve_delta_x",
    "solve_delta_x_sor",
    "solve_delta_x_rmsprop",
    "solve_delta_x_anderson",
    "characteristic_eps",
    "characteristic_eps_t",
    "closed_form_delta_x_gaussian",
    "gaussian_delta_x_level",
    "Unguided",
    "ClassifierFree",
    "Characteristic",
]

PROJECTIONS = ("identity", "channel_mean", "residual_direction")
SOLVERS = ("sor", "rmsprop", "anderson")
_DEGENERATE_NORM2 = 1e-24


@dataclass(frozen=True)
class SolverParams:
    gamma: float = 0.01
    alpha: float = 0.999
    epsilon_rms: float = 1e-8
    decay_D: float = 0.0
    anderson_m: int = 2

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.epsilon_rms < 0 or self.decay_D < 0:
            raise ValueError("epsilon_rms and decay_D must be non-negative")
        if int(self.anderson_m) != self.anderson_m or self.anderson_m < 2:
            raise ValueError("anderson_m must be an integer >= 2")


@dataclass(frozen=True)
class GuidanceSpec:
    omega: float = 4.0
    projection: str = "identity"
    solver: str = "rmsprop"
    params: SolverParams = field(default_factory=SolverParams)
    max_iters: int = 10
    tolerance: float = 1e-3
    warm_start: bool = False

    def __post_init__(self):
        if self.projection not in PROJECTIONS:
            raise ValueError(f"projection must be one of {PROJECTIONS}, got {self.projection!r}")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("max_iters must be an integer >= 1")


@dataclass
class SolverTrace:
    """Per-row record of one solve.

    ``residual_norms[k]`` holds ``||g||_2`` at iteration ``k + 1`` for every
    row, NaN for rows that had already stopped.  ``iterates`` is empty unless
    recording was requested.
    """

    iterates: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    converged: np.ndarray = None
    iterations_used: np.ndarray = None
    model_evals: np.ndarray = None
    degenerate: np.ndarray = None

    def sample(self, b: int = 0) -> dict:
        norms = [float(r[b]) for r in self.residual_norms if not np.isnan(r[b])]
        return {
            "iterates": [it[b] for it in self.iterates[: len(norms)]],
            "residual_norms": norms,
            "converged": bool(self.converged[b]),
            "iterations_used": int(self.iterations_used[b]),
            "model_evals": int(self.model_evals[b]),
        }


# --- elementary combinations -------------------------------------------------


def classifier_free_eps(eps_cond, eps_uncond, omega: float) -> np.ndarray:
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    return (1.0 + omega) * eps_cond - omega * eps_uncond


def _channel_axes(ndim: int, event_ndim: int) -> tuple[int, ...]:
    # states with >= 3 axes are (C, ...) images and project per channel
    first = ndim - event_ndim + (1 if event_ndim >= 3 else 0)
    return tuple(range(first, ndim))


def projection_degenerate(direction, event_ndim: int | None = None) -> np.ndarray:
    """True for every state whose direction has a (near) zero channel."""
    direction = np.asarray(direction, dtype=np.float64)
    event_ndim = direction.ndim if event_ndim is None else event_ndim
    axes = _channel_axes(direction.ndim, event_ndim)
    gg = np.sum(direction * direction, axis=axes)
    flat = gg.reshape(gg.shape[: direction.ndim - event_ndim] + (-1,))
    return np.any(flat < _DEGENERATE_NORM2, axis=-1)


def apply_projection(v, mode: str, direction=None, event_ndim: int | None = None) -> np.ndarray:
    """Orthogonal projection ``P_g v = (g.v / g.g) g`` applied channel-wise.

    ``event_ndim`` is the number of trailing axes that make up one state
    (defaults to all of ``v``).  ``channel_mean`` uses ``g = 1``.
    """
    v = np.asarray(v, dtype=np.float64)
    if mode == "identity":
        return v
    event_ndim = v.ndim if event_ndim is None else event_ndim
    axes = _channel_axes(v.ndim, event_ndim)
    if mode == "channel_mean":
        return np.broadcast_to(v.mean(axis=axes, keepdims=True), v.shape).copy()
    if mode == "residual_direction":
        if direction is None:
            raise ValueError("residual_direction projection needs a direction vector")
        g = np.asarray(direction, dtype=np.float64)
        gg = np.sum(g * g, axis=axes, keepdims=True)
        gv = np.sum(g * v, axis=axes, keepdims=True)
        ok = gg >= _DEGENERATE_NORM2
        coef = np.where(ok, gv / np.where(ok, gg, 1.0), 0.0)
        return coef * g
    raise ValueError(f"unknown projection {mode!r}")


# --- the fixed-point problem -------------------------------------------------


class _Problem:
    """Residual of the correction equation for a batch of states."""

    def __init__(self, x, eval_cond, eval_uncond, sigma, omega, projection, event_ndim):
        self.x = x
        self.eval_cond = eval_cond
        self.eval_uncond = eval_uncond
        self.sigma = sigma
        self.omega = omega
        self.projection = projection
        self.event_ndim = event_ndim

    def evaluate(self, x, delta):
        e_c = self.eval_cond(x + self.omega * delta)
        e_u = self.eval_uncond(x + (1.0 + self.omega) * delta)
        return e_c, e_u

    def residual(self, delta, e_c, e_u, direction=None):
        diff = (e_u - e_c) * self.sigma
        return delta - apply_projection(diff, self.projection, direction, self.event_ndim)


def _row_norm2(a) -> np.ndarray:
    flat = a.reshape(a.shape[0], -1)
    return np.einsum("ij,ij->i", flat, flat)


def _rows(idx, B):
    # a full index set becomes a slice so reads are views and writes are cheap
    return slice(None) if idx.size == B else idx


class _SOR:
    def __init__(self, params):
        self.gamma = params.gamma

    def step(self, k, delta, g):
        return delta - self.gamma * g

    def keep(self, sel):
        pass


class _RMSprop:
    def __init__(self, params):
        self.p = params
        self.v = None

    def step(self, k, delta, g):
        p = self.p
        v = (1.0 - p.alpha) * g * g
        if self.v is not None:
            v += p.alpha * self.v
        self.v = v
        lr = p.gamma / (1.0 + p.decay_D * k)
        return delta - lr * g / (np.sqrt(v) + p.epsilon_rms)

    def keep(self, sel):
        if self.v is not None:
            self.v = self.v.take(sel, axis=0)


def _min_norm_weights(A, b):
    """Row-wise ``argmin_w ||A w - b||`` (minimum-norm) for ``A: (R, d, m)``."""
    if A.shape[2] == 1:
        a = A[:, :, 0]
        b = b.reshape(a.shape)
        aa = np.einsum("rd,rd->r", a, a)
        ab = np.einsum("rd,rd->r", a, b)
        ok = aa > np.finfo(float).tiny
        return np.where(ok, ab / np.where(ok, aa, 1.0), 0.0)[:, None]
    # pinv(A^T A) A^T == pinv(A); the Gram form keeps the batched SVD tiny
    gram = np.einsum("rdi,rdj->rij", A, A)
    rhs = np.einsum("rdi,rd->ri", A, b)
    return np.einsum("rij,rj->ri", np.linalg.pinv(gram, hermitian=True), rhs)


class _Anderson:
    def __init__(self, params):
        self.gamma = params.gamma
        self.m = int(params.anderson_m)
        self.xb: list[np.ndarray] = []
        self.gb: list[np.ndarray] = []

    def step(self, k, delta, g):
        self.xb.append(delta)
        self.gb.append(g)
        if len(self.xb) < 2:
            return delta - self.gamma * g
        self.gb[-2] = self.gb[-1] - self.gb[-2]
        self.xb[-2] = self.xb[-1] - self.xb[-2]
        if len(self.xb) > self.m:
            del self.gb[0]
            del self.xb[0]
        R = delta.shape[0]
        b_g = g.reshape(R, -1)
        b_x = delta.reshape(R, -1)
        if len(self.gb) == 2:
            # one difference column: closed-form least squares
            a_g = self.gb[0].reshape(R, -1)
            a_x = self.xb[0].reshape(R, -1)
            w = _min_norm_weights(a_g[:, :, None], b_g)
            x_aa = b_x - w * a_x
            g_aa = b_g - w * a_g
            return (x_aa - self.gamma * g_aa).reshape(delta.shape)
        A_g = np.stack([a.reshape(R, -1) for a in self.gb[:-1]], axis=2)
        A_x = np.stack([a.reshape(R, -1) for a in self.xb[:-1]], axis=2)
        w = _min_norm_weights(A_g, b_g)
        x_aa = b_x - np.einsum("rdi,ri->rd", A_x, w)
        g_aa = b_g - np.einsum("rdi,ri->rd", A_g, w)
        return (x_aa - self.gamma * g_aa).reshape(delta.shape)

    def keep(self, sel):
        self.xb = [a.take(sel, axis=0) for a in self.xb]
        self.gb = [a.take(sel, axis=0) for a in self.gb]


_RULES = {"sor": _SOR, "rmsprop": _RMSprop, "anderson": _Anderson}


class _Cache:
    """Model evaluations kept for rows whose final iterate was already evaluated."""

    def __init__(self, x):
        self.x = x
        self.reuse = np.zeros(x.shape[0], dtype=bool)
        self.e_c = None
        self.e_u = None

    def store(self, rows, hit, e_c, e_u):
        """Keep evaluations for working rows ``hit`` (full indices ``rows[hit]``)."""
        if not hit.any():
            return
        if self.e_c is None:
            self.e_c = np.empty_like(self.x)
            self.e_u = np.empty_like(self.x)
        sel = np.flatnonzero(hit)
        full = rows[sel]
        self.reuse[full] = True
        self.e_c[full] = e_c.take(sel, axis=0)
        self.e_u[full] = e_u.take(sel, axis=0)


def _unmoved(before, after) -> np.ndarray:
    R = before.shape[0]
    return np.all(before.reshape(R, -1) == after.reshape(R, -1), axis=1)


def _solve(problem: _Problem, spec: GuidanceSpec, delta0=None, record_iterates=False):
    """Run the configured solver; returns ``(dx, trace, cache, direction)``.

    Rows that meet the stopping rule are written out and dropped from the
    working set, so later iterations only touch the rows still active.
    """
    x = problem.x
    B = x.shape[0]
    state_dim = int(np.prod(x.shape[1:]))
    threshold = spec.tolerance**2 * state_dim
    out = np.zeros_like(x) if delta0 is None else np.array(delta0, dtype=np.float64)
    rule = _RULES[spec.solver](spec.params)
    trace = SolverTrace(
        converged=np.zeros(B, dtype=bool),
        iterations_used=np.zeros(B, dtype=np.int64),
        model_evals=np.zeros(B, dtype=np.int64),
        degenerate=np.zeros(B, dtype=bool),
    )
    cache = _Cache(x)
    idx = np.arange(B)
    xw, dw = x, out.copy()
    direction = None
    pending = None

    if spec.projection == "residual_direction":
        e_c, e_u = problem.evaluate(x, np.zeros_like(x))
        if delta0 is None:
            pending = (e_c, e_u)
        else:
            trace.model_evals += 2
        direction = (e_u - e_c) * problem.sigma
        trace.degenerate[:] = projection_degenerate(direction, x.ndim - 1)
    full_direction = direction

    for k in range(1, spec.max_iters + 1):
        rows = _rows(idx, B)
        if pending is not None:
            (e_c, e_u), pending = pending, None
        else:
            e_c, e_u = problem.evaluate(xw, dw)
        g = problem.residual(dw, e_c, e_u, direction)
        trace.iterations_used[rows] += 1
        trace.model_evals[rows] += 2
        n2 = _row_norm2(g)
        norms = np.full(B, np.nan)
        norms[rows] = np.sqrt(n2)
        trace.residual_norms.append(norms)
        new = rule.step(k, dw, g)
        if record_iterates:
            out[rows] = new
            trace.iterates.append(out.copy())
        done = n2 < threshold
        if k == spec.max_iters:
            cache.store(idx, _unmoved(dw, new), e_c, e_u)
            out[rows] = new
            trace.converged[idx[done]] = True
            break
        if done.any():
            fin = np.flatnonzero(done)
            cache.store(idx, done & _unmoved(dw, new), e_c, e_u)
            out[idx[fin]] = new.take(fin, axis=0)
            trace.converged[idx[fin]] = True
            if fin.size == idx.size:
                break
            sel = np.flatnonzero(~done)
            idx = idx[sel]
            xw = xw.take(sel, axis=0)
            dw = new.take(sel, axis=0)
            if direction is not None:
                direction = direction.take(sel, axis=0)
            rule.keep(sel)
        else:
            dw = new
    return out, trace, cache, full_direction


def _combine(prob: _Problem, delta, cache: _Cache, trace: SolverTrace):
    """Final guided combination; rows whose iterate never moved reuse evaluations.

    The batch is evaluated as a whole and cached rows are patched in, which is
    cheaper than a scattered gather; only the non-reused rows are counted.
    """
    e_c, e_u = prob.evaluate(prob.x, delta)
    if cache.reuse.any():
        e_c[cache.reuse] = cache.e_c[cache.reuse]
        e_u[cache.reuse] = cache.e_u[cache.reuse]
    trace.model_evals[~cache.reuse] += 2
    return classifier_free_eps(e_c, e_u, prob.omega)


# --- step-indexed public API -------------------------------------------------


def _batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(model.shape)
    return (x[None] if single else x), single


def _problem_at_step(x, cond, step, model, spec, uncond):
    sigma = model.schedule.sigma_at(step)
    if sigma <= 0:
        raise ValueError("the correction equation needs sigma > 0 (step >= 1)")
    return _Problem(
        x,
        lambda y: model.eps(y, cond, step),
        lambda y: model.eps(y, uncond, step),
        sigma,
        spec.omega,
        spec.projection,
        len(model.shape),
    )


def residual_g(delta_x, x, cond, step, model, spec: GuidanceSpec, uncond=None) -> np.ndarray:
    """``dx - P[(eps_u(x + (1+w) dx) - eps_c(x + w dx)) sigma_i]``."""
    xb, single = _batch(model, x)
    db = np.asarray(delta_x, dtype=np.float64).reshape(xb.shape)
    prob = _problem_at_step(xb, cond, step, model, spec, uncond)
    direction = None
    if spec.projection == "residual_direction":
        e_c0, e_u0 = prob.evaluate(xb, np.zeros_like(xb))
        direction = (e_u0 - e_c0) * prob.sigma
    e_c, e_u = prob.evaluate(xb, db)
    g = prob.residual(db, e_c, e_u, direction)
    return g[0] if single else g


def solve_delta_x(x, cond, step, model, spec: GuidanceSpec, uncond=None, delta0=None,
                  record_iterates=True):
    """Solve for the correction with ``spec.solver``; returns ``(dx, trace)``."""
    xb, single = _batch(model, x)
    prob = _problem_at_step(xb, cond, step, model, spec, uncond)
    d0 = None if delta0 is None else np.asarray(delta0, dtype=np.float64).reshape(xb.shape)
    delta, trace, _, _ = _solve(prob, spec, d0, record_iterates)
    return (delta[0] if single else delta), trace


def solve_delta_x_sor(x, cond, step, model, spec, uncond=None, **kw):
    return solve_delta_x(x, cond, step, model, replace(spec, solver="sor"), uncond, **kw)


def solve_delta_x_rmsprop(x, cond, step, model, spec, uncond=None, **kw):
    return solve_delta_x(x, cond, step, model, replace(spec, solver="rmsprop"), uncond, **kw)


def solve_delta_x_anderson(x, cond, step, model, spec, uncond=None, **kw):
    return solve_delta_x(x, cond, step, model, replace(spec, solver="anderson"), uncond, **kw)


def characteristic_eps(x, cond, step, model, spec: GuidanceSpec, uncond=None, delta0=None):
    """Guided ``eps`` with the characteristic correction; returns ``(eps, trace)``."""
    xb, single = _batch(model, x)
    prob = _problem_at_step(xb, cond, step, model, spec, uncond)
    d0 = None if delta0 is None else np.asarray(delta0, dtype=np.float64).reshape(xb.shape)
    delta, trace, cache, _ = _solve(prob, spec, d0)
    eps = _combine(prob, delta, cache, trace)
    return (eps[0] if single else eps), trace


def characteristic_eps_t(x, cond, t: float, model, spec: GuidanceSpec, uncond=None):
    """Continuous-time variant on ``model.eps_t`` with ``sigma(t) = sqrt(1 - e^-t)``."""
    xb, single = _batch(model, x)
    sigma = math.sqrt(-math.expm1(-t))
    prob = _Problem(
        xb,
        lambda y: model.eps_t(y, cond, t),
        lambda y: model.eps_t(y, uncond, t),
        sigma,
        spec.omega,
        spec.projection,
        len(model.shape),
    )
    delta, trace, cache, _ = _solve(prob, spec)
    eps = _combine(prob, delta, cache, trace)
    return (eps[0] if single else eps), trace


# --- closed-form oracle for the affine Gaussian scores -----------------------


def gaussian_delta_x_level(x, c, ab: float, sigma: float, omega: float) -> np.ndarray:
    """Exact correction for ``s_c(y) = sqrt(ab) c - y``, ``s_u(y) = -y / (1 + 4 ab)``.

    The correction equation becomes ``M dx = rhs`` with
    ``M = (1 - sigma^2 (k (1 + w) - w)) I``, ``k = 1 / (1 + 4 ab)``, and
    ``rhs = sigma^2 (sqrt(ab) c - (1 - k) x)``.  A singular system gets the
    minimum-norm solution.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    k = 1.0 / (1.0 + 4.0 * ab)
    s2 = sigma * sigma
    coef = 1.0 - s2 * (k * (1.0 + omega) - omega)
    rhs = s2 * (math.sqrt(ab) * c - (1.0 - k) * x)
    dim = x.shape[-1]
    M = coef * np.eye(dim)
    if abs(np.linalg.det(M)) < 1e-12:
        flat = rhs.reshape(-1, dim).T
        sol = np.linalg.lstsq(M, flat, rcond=None)[0]
        return sol.T.reshape(rhs.shape)
    return rhs / coef


def closed_form_delta_x_gaussian(x, c, step: int, omega: float, schedule: NoiseSchedule):
    return gaussian_delta_x_level(
        x, c, schedule.alpha_bar_at(step), schedule.sigma_at(step), omega
    )


# --- guides: the eps callback used by samplers -------------------------------


class Unguided:
    """Plain conditional (or unconditional) model."""

    method = "none"

    def __init__(self, model, cond=None):
        self.model = model
        self.cond = cond
        self.omega = 0.0

    def __call__(self, x, step):
        return self.model.eps(x, self.cond, step)


class ClassifierFree:
    method = "cf"

    def __init__(self, model, cond, omega: float, uncond=None):
        self.model = model
        self.cond = cond
        self.uncond = uncond
        self.omega = float(omega)

    def __call__(self, x, step):
        e_c = self.model.eps(x, self.cond, step)
        e_u = self.model.eps(x, self.uncond, step)
        return classifier_free_eps(e_c, e_u, self.omega)


@dataclass
class StepStats:
    step: int
    mean_iterations: float
    max_iterations: int
    converged_fraction: float
    mean_residual: float
    model_evals: int


class Characteristic:
    """Characteristic guidance for a sampling run.

    Keeps per-step aggregate statistics in ``step_stats`` and per-trajectory
    totals (``total_iterations``, ``total_model_evals``, ``missed_steps``).
    ``solve_delta`` may be overridden to inject a fixed correction.
    """

    method = "ch"

    def __init__(self, model, cond, spec: GuidanceSpec, uncond=None):
        self.model = model
        self.cond = cond
        self.uncond = uncond
        self.spec = spec
        self.omega = float(spec.omega)
        self.step_stats: list[StepStats] = []
        self._prev_delta = None
        self.total_iterations = None
        self.total_model_evals = None
        self.missed_steps = None

    def solve_delta(self, prob: _Problem, step: int):
        d0 = self._prev_delta if self.spec.warm_start else None
        return _solve(prob, self.spec, d0)

    def __call__(self, x, step):
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        if self.total_iterations is None or self.total_iterations.shape[0] != B:
            self.total_iterations = np.zeros(B, dtype=np.int64)
            self.total_model_evals = np.zeros(B, dtype=np.int64)
            self.missed_steps = np.zeros(B, dtype=np.int64)
        prob = _problem_at_step(x, self.cond, step, self.model, self.spec, self.uncond)
        delta, trace, cache = self.solve_delta(prob, step)[:3]
        eps = _combine(prob, delta, cache, trace)
        if self.spec.warm_start:
            self._prev_delta = delta
        self.total_iterations += trace.iterations_used
        self.total_model_evals += trace.model_evals
        self.missed_steps += ~trace.converged
        last = np.full(B, np.nan)
        for r in trace.residual_norms:
            last = np.where(np.isnan(r), last, r)
        self.step_stats.append(
            StepStats(
                step=int(step),
                mean_iterations=float(trace.iterations_used.mean()),
                max_iterations=int(trace.iterations_used.max(initial=0)),
                converged_fraction=float(trace.converged.mean()),
                mean_residual=float(np.nanmean(last)) if np.any(~np.isnan(last)) else 0.0,
                model_evals=int(trace.model_evals.sum()),
            )
        )
        return eps


GuideFn = Callable[[np.ndarray, int], np.ndarray]
