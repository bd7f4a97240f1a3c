"""Landau-Ginzburg lattice magnet and its Metropolis-Hastings reference sampler.

Fields are periodic ``L x L`` grids of real magnetization values.  The
dimensionless energy is

    beta H = K * ( 1/2 sum_<ij> (phi_i - phi_j)^2
                   + sum_i [ m2/2 (T - Tc) phi_i^2 + lam/24 phi_i^4 ] )

where ``<ij>`` runs over the ``2 L^2`` nearest-neighbour pairs of the torus.
Because ``beta H`` is affine in ``T``, tilting two Boltzmann densities at
``T1`` and ``T0`` by a guidance scale gives the density at
``(1 + w) T1 - w T0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MagnetParams",
    "LatticeField",
    "MHResult",
    "hamiltonian",
    "hamiltonian_grad",
    "local_energy_change",
    "mh_chain",
    "omega_for_temperature",
    "temperature_for_omega",
    "mean_magnetization",
]


@dataclass(frozen=True)
class MagnetParams:
    m2: float = 0.1
    lam: float = 1.0
    K: float = 1.0
    Tc: float = 200.0


@dataclass(frozen=True)
class LatticeField:
    """One periodic magnetization grid with its temperature label."""

    phi: np.ndarray
    temperature: float

    def __post_init__(self):
        phi = np.array(self.phi, dtype=np.float64)
        if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
            raise ValueError(f"a lattice field is a square grid, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("lattice field has non-finite entries")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def L(self) -> int:
        return self.phi.shape[0]


def _grid(fields) -> np.ndarray:
    if isinstance(fields, LatticeField):
        return fields.phi
    phi = np.asarray(fields, dtype=np.float64)
    if phi.ndim < 2 or phi.shape[-1] != phi.shape[-2]:
        raise ValueError(f"expected (..., L, L) fields, got shape {phi.shape}")
    return phi


def hamiltonian(fields, T: float, params: MagnetParams = MagnetParams()):
    """``beta H`` of one field or a batch ``(..., L, L)``."""
    phi = _grid(fields)
    p = params
    dx = phi - np.roll(phi, -1, axis=-1)
    dy = phi - np.roll(phi, -1, axis=-2)
    gradient = 0.5 * np.sum(dx * dx + dy * dy, axis=(-2, -1))
    phi2 = phi * phi
    local = np.sum(0.5 * p.m2 * (T - p.Tc) * phi2 + p.lam / 24.0 * phi2 * phi2, axis=(-2, -1))
    out = p.K * (gradient + local)
    return float(out) if np.ndim(out) == 0 else out


def hamiltonian_grad(fields, T: float, params: MagnetParams = MagnetParams()) -> np.ndarray:
    """``d(beta H)/d(phi)`` with the same shape as the input."""
    phi = _grid(fields)
    p = params
    lap = (
        np.roll(phi, 1, axis=-1) + np.roll(phi, -1, axis=-1)
        + np.roll(phi, 1, axis=-2) + np.roll(phi, -1, axis=-2)
        - 4.0 * phi
    )
    return p.K * (-lap + p.m2 * (T - p.Tc) * phi + p.lam / 6.0 * phi**3)


def _neighbour_sum(phi):
    return (
        np.roll(phi, 1, axis=-1) + np.roll(phi, -1, axis=-1)
        + np.roll(phi, 1, axis=-2) + np.roll(phi, -1, axis=-2)
    )


def local_energy_change(phi, i: int, j: int, new_value: float, T: float,
                        params: MagnetParams = MagnetParams()) -> float:
    """Change of ``beta H`` when site ``(i, j)`` of one field is set to ``new_value``."""
    phi = _grid(phi)
    L = phi.shape[-1]
    if L < 2:
        raise ValueError("lattice size L must be >= 2")
    nb = [phi[(i + 1) % L, j], phi[(i - 1) % L, j], phi[i, (j + 1) % L], phi[i, (j - 1) % L]]
    old = phi[i, j]
    return _site_delta(old, new_value, sum(nb), T, params)


def _site_delta(old, new, nb_sum, T, p: MagnetParams):
    # 1/2 sum_n [(new - n)^2 - (old - n)^2] over 4 neighbours, plus the site terms
    coupling = 2.0 * (new * new - old * old) - (new - old) * nb_sum
    n2, o2 = new * new, old * old
    site = 0.5 * p.m2 * (T - p.Tc) * (n2 - o2) + p.lam / 24.0 * (n2 * n2 - o2 * o2)
    return p.K * (coupling + site)


@dataclass
class MHResult:
    fields: np.ndarray          # (n_samples, L, L)
    acceptance_rate: float
    chain_ids: np.ndarray       # chain index of every recorded field
    initial_signs: np.ndarray   # +1 / -1 per chain

    @property
    def mode_balance(self) -> float:
        """Fraction of recorded fields with positive mean magnetization."""
        return float(np.mean(mean_magnetization(self.fields) > 0))


def mh_chain(
    T: float,
    params: MagnetParams = MagnetParams(),
    n_samples: int = 60000,
    thin: int = 10,
    burn_in: int = 2000,
    step_width: float = 0.8,
    seed: int = 0,
    n_chains: int = 512,
    L: int = 8,
    init_scale: float = 1.0,
) -> MHResult:
    """Metropolis-Hastings sampling of ``exp(-beta H)`` at temperature ``T``.

    Runs ``n_chains`` independent chains in lockstep.  A sweep visits every
    site once with single-site Gaussian proposals, in checkerboard order so
    that all sites of one colour update together.  Each chain starts from a
    uniform field ``+-init_scale`` with a random sign, records every
    ``thin``-th sweep after ``burn_in`` sweeps, and the records are
    interleaved sweep by sweep until ``n_samples`` fields are collected.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if thin < 1 or burn_in < 0 or step_width <= 0 or n_chains < 1:
        raise ValueError("invalid chain settings")
    if L < 2:
        # a 1x1 torus makes the site its own neighbour; the local update breaks
        raise ValueError("lattice size L must be >= 2")
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=n_chains)
    phi = np.broadcast_to(signs[:, None, None] * init_scale, (n_chains, L, L)).copy()
    ii, jj = np.indices((L, L))
    colours = [((ii + jj) % 2) == c for c in (0, 1)]
    if L % 2:
        # odd tori have same-colour neighbours; fall back to four sublattices
        colours = [((ii % 2) == a) & ((jj % 2) == b) for a in (0, 1) for b in (0, 1)]

    per_chain = math.ceil(n_samples / n_chains)
    records = np.empty((per_chain, n_chains, L, L))
    accepted = 0
    proposed = 0
    total_sweeps = burn_in + per_chain * thin
    for sweep in range(1, total_sweeps + 1):
        for mask in colours:
            nb = _neighbour_sum(phi)
            prop = phi + step_width * rng.standard_normal(phi.shape)
            dH = _site_delta(phi, prop, nb, T, params)
            u = rng.random(phi.shape)
            # log u < -dH  <=>  accept with min(1, exp(-dH))
            accept = mask & (np.log(u) < -dH)
            phi = np.where(accept, prop, phi)
            if sweep > burn_in:
                accepted += int(accept.sum())
                proposed += int(mask.sum()) * n_chains
        if sweep > burn_in and (sweep - burn_in) % thin == 0:
            records[(sweep - burn_in) // thin - 1] = phi
    fields = records.reshape(-1, L, L)[:n_samples]
    chain_ids = np.tile(np.arange(n_chains), per_chain)[:n_samples]
    rate = accepted / proposed if proposed else float("nan")
    return MHResult(fields, rate, chain_ids, signs)


def omega_for_temperature(T: float, T1: float = 200.0, T0: float = 201.0) -> float:
    """Guidance scale that tilts models at ``T1`` and ``T0`` to temperature ``T``."""
    if T0 == T1:
        raise ValueError("the two training temperatures must differ")
    return (T1 - T) / (T0 - T1)


def temperature_for_omega(omega: float, T1: float = 200.0, T0: float = 201.0) -> float:
    return (1.0 + omega) * T1 - omega * T0


def mean_magnetization(fields) -> np.ndarray:
    phi = _grid(fields)
    return phi.reshape(phi.shape[:-2] + (-1,)).mean(axis=-1)
