"""Backward diffusion samplers: SDE, probability-flow ODE, DDIM and DPM++2M.

A sampler walks a decreasing list of step indices ending at 0 and calls a
guide ``eps_fn(x, step)`` on the whole batch at each step.  Each trajectory
owns an RNG stream seeded from ``(seed, trajectory index)``, so adding
trajectories never changes earlier ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "SAMPLER_KINDS",
    "SamplerKind",
    "SampleBatch",
    "sde_step",
    "ode_step",
    "ddim_step",
    "dpmpp2m_step",
    "trajectory_rngs",
    "initial_noise",
    "run_sampler",
]

SAMPLER_KINDS = ("sde", "ode", "ddim", "dpmpp2m")
# standard-normal draws are generated this many steps at a time per trajectory
_NOISE_BLOCK = 64


@dataclass(frozen=True)
class SamplerKind:
    kind: str
    steps: int

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"sampler must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("sampler steps must be an integer >= 1")
        if self.kind == "dpmpp2m" and self.steps < 2:
            raise ValueError("dpmpp2m needs at least 2 steps")

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.steps}"

    def step_indices(self, schedule: NoiseSchedule) -> list[int]:
        if self.kind in ("sde", "ode"):
            if self.steps != schedule.n:
                raise ValueError(
                    f"{self.kind} walks the full schedule: steps must equal n={schedule.n}"
                )
            return list(range(schedule.n, -1, -1))
        return schedule.strided(self.steps)


@dataclass
class SampleBatch:
    samples: np.ndarray
    seed: int
    sampler: SamplerKind
    guidance: dict
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.samples.shape[0] < 1:
            raise ValueError("a batch needs at least one sample")


# --- single steps ------------------------------------------------------------


def _score(eps, schedule: NoiseSchedule, i: int):
    sigma = schedule.sigma_at(i)
    if sigma <= 0:
        raise IndexError("backward steps start from a step with sigma > 0")
    return -np.asarray(eps, dtype=np.float64) / sigma


def sde_step(x, i: int, eps, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Ancestral move from step ``i`` to ``i - 1``."""
    beta = schedule.beta_into(i)
    s = _score(eps, schedule, i)
    return (x + s * beta) / math.sqrt(1.0 - beta) + math.sqrt(beta) * noise


def ode_step(x, i: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Explicit Euler move of the probability-flow ODE from ``i`` to ``i - 1``."""
    beta = schedule.beta_into(i)
    s = _score(eps, schedule, i)
    return x + (0.5 * x + 0.5 * s) * beta


def _check_order(i, i_prev, schedule):
    schedule.alpha_bar_at(i)
    schedule.alpha_bar_at(i_prev)
    if i_prev > i:
        raise ValueError(f"target step {i_prev} must not exceed current step {i}")


def ddim_step(x, i: int, i_prev: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    _check_order(i, i_prev, schedule)
    if i_prev == i:
        return np.array(x, dtype=np.float64)
    a_i = math.sqrt(schedule.alpha_bar_at(i))
    x0 = (x - schedule.sigma_at(i) * eps) / a_i
    return math.sqrt(schedule.alpha_bar_at(i_prev)) * x0 + schedule.sigma_at(i_prev) * eps


def _lam(schedule: NoiseSchedule, i: int) -> float:
    return math.log(math.sqrt(schedule.alpha_bar_at(i)) / schedule.sigma_at(i))


def dpmpp2m_step(x, i: int, i_prev: int, eps, schedule: NoiseSchedule,
                 prev_data_pred=None, i_last: int | None = None):
    """Second-order multistep update; returns ``(x_next, x0_hat)``.

    ``prev_data_pred`` is the ``x0_hat`` produced at the previous (noisier)
    step ``i_last``.  Landing on step 0 returns the data prediction itself.
    """
    if i_prev >= i:
        raise ValueError(f"target step {i_prev} must be below current step {i}")
    _check_order(i, i_prev, schedule)
    a_i = math.sqrt(schedule.alpha_bar_at(i))
    s_i = schedule.sigma_at(i)
    x0 = (x - s_i * eps) / a_i
    use_history = prev_data_pred is not None
    if use_history and i_last is None:
        raise ValueError("i_last is required with prev_data_pred")
    if i_prev == 0:
        # infinite lambda interval: the exponential integrator lands on x0_hat
        return x0, x0
    lam_i = _lam(schedule, i)
    h = _lam(schedule, i_prev) - lam_i
    if use_history:
        r = (lam_i - _lam(schedule, i_last)) / h
        D = (1.0 + 1.0 / (2.0 * r)) * x0 - (1.0 / (2.0 * r)) * prev_data_pred
    else:
        D = x0
    a_prev = math.sqrt(schedule.alpha_bar_at(i_prev))
    x_next = (schedule.sigma_at(i_prev) / s_i) * x - a_prev * math.expm1(-h) * D
    return x_next, x0


# --- randomness --------------------------------------------------------------


def trajectory_rngs(seed: int, B: int, offset: int = 0) -> list[np.random.Generator]:
    """One generator per trajectory, keyed by ``(seed, index)``."""
    return [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(offset + b,)))
        for b in range(B)
    ]


def initial_noise(rngs, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


class _NoiseStream:
    """Per-trajectory standard-normal draws served one step at a time."""

    def __init__(self, rngs, shape):
        self.rngs = rngs
        self.shape = tuple(shape)
        self.buf = None
        self.pos = _NOISE_BLOCK

    def next(self) -> np.ndarray:
        if self.pos == _NOISE_BLOCK:
            self.buf = np.stack(
                [r.standard_normal((_NOISE_BLOCK,) + self.shape) for r in self.rngs], axis=1
            )
            self.pos = 0
        out = self.buf[self.pos]
        self.pos += 1
        return out


# --- driver ------------------------------------------------------------------


def _guidance_summary(guide) -> dict:
    out = {"method": getattr(guide, "method", "custom"), "omega": getattr(guide, "omega", None)}
    spec = getattr(guide, "spec", None)
    if spec is not None:
        out.update(
            solver=spec.solver,
            projection=spec.projection,
            tolerance=spec.tolerance,
            max_iters=spec.max_iters,
            gamma=spec.params.gamma,
            alpha=spec.params.alpha,
            anderson_m=spec.params.anderson_m,
            warm_start=spec.warm_start,
        )
    return out


def _trace_summary(guide) -> dict:
    stats = getattr(guide, "step_stats", None)
    if stats is None:
        return {}
    return {
        "per_step": [vars(s).copy() for s in stats],
        "per_trajectory": {
            "total_iterations": guide.total_iterations.tolist(),
            "total_model_evals": guide.total_model_evals.tolist(),
            "missed_steps": guide.missed_steps.tolist(),
        },
    }


def run_sampler(model, guide, sampler: SamplerKind, B: int, seed: int) -> SampleBatch:
    """Draw ``B`` samples with guide ``eps_fn(x, step)``; deterministic in ``seed``."""
    if int(B) != B or B < 1:
        raise ValueError("batch size must be a positive integer")
    schedule = model.schedule
    steps = sampler.step_indices(schedule)
    rngs = trajectory_rngs(seed, B)
    x = initial_noise(rngs, model.shape)
    noise = _NoiseStream(rngs, model.shape) if sampler.kind == "sde" else None
    prev_x0 = None
    i_last = None
    for i, i_prev in zip(steps[:-1], steps[1:]):
        eps = guide(x, i)
        if sampler.kind == "sde":
            z = noise.next()
            # no fresh noise on the move into clean data
            x = sde_step(x, i, eps, schedule, z if i_prev > 0 else 0.0)
        elif sampler.kind == "ode":
            x = ode_step(x, i, eps, schedule)
        elif sampler.kind == "ddim":
            x = ddim_step(x, i, i_prev, eps, schedule)
        else:
            x, x0 = dpmpp2m_step(x, i, i_prev, eps, schedule, prev_x0, i_last)
            prev_x0, i_last = x0, i
    return SampleBatch(x, int(seed), sampler, _guidance_summary(guide), _trace_summary(guide))
