import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from charguide.magnet import (
    LatticeField,
    MagnetParams,
    hamiltonian,
    hamiltonian_grad,
    local_energy_change,
    mean_magnetization,
    mh_chain,
    omega_for_temperature,
    temperature_for_omega,
)

fields = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s).normal(size=(8, 8)) * 1.5)


def _precision(L, T, p):
    # quadratic part of beta H built bond by bond
    n = L * L
    A = np.zeros((n, n))

    def idx(i, j):
        return (i % L) * L + (j % L)

    for i in range(L):
        for j in range(L):
            for a, b in ((idx(i, j), idx(i, j + 1)), (idx(i, j), idx(i + 1, j))):
                A[a, a] += 1
                A[b, b] += 1
                A[a, b] -= 1
                A[b, a] -= 1
            A[idx(i, j), idx(i, j)] += p.m2 * (T - p.Tc)
    return p.K * A


def test_quadratic_energy_matches_bond_sum(rng):
    p = MagnetParams(lam=0.0)
    phi = rng.normal(size=(5, 5))
    A = _precision(5, 203.0, p)
    assert hamiltonian(phi, 203.0, p) == pytest.approx(0.5 * phi.ravel() @ A @ phi.ravel(), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(phi=fields, T=st.floats(190, 210))
def test_z2_symmetry(phi, T):
    assert hamiltonian(phi, T) == pytest.approx(hamiltonian(-phi, T), rel=1e-13, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(phi=fields, i=st.integers(0, 7), j=st.integers(0, 7), new=st.floats(-4, 4),
       T=st.floats(190, 210))
def test_local_change_equals_full_recompute(phi, i, j, new, T):
    after = phi.copy()
    after[i, j] = new
    full = hamiltonian(after, T) - hamiltonian(phi, T)
    assert local_energy_change(phi, i, j, new, T) == pytest.approx(full, abs=1e-10)


def test_gradient_matches_finite_difference(rng):
    phi = rng.normal(size=(4, 4))
    g = hamiltonian_grad(phi, 197.0)
    h = 1e-6
    for i, j in [(0, 0), (1, 3), (3, 2)]:
        e = np.zeros_like(phi)
        e[i, j] = h
        fd = (hamiltonian(phi + e, 197.0) - hamiltonian(phi - e, 197.0)) / (2 * h)
        assert g[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_temperature_guidance_identity(rng):
    # ten random fields: tilting the two scores equals the score at the tilted temperature
    for _ in range(10):
        phi = rng.normal(size=(8, 8))
        w = float(rng.uniform(0, 6))
        lhs = (1 + w) * -hamiltonian_grad(phi, 200.0) - w * -hamiltonian_grad(phi, 201.0)
        np.testing.assert_allclose(lhs, -hamiltonian_grad(phi, temperature_for_omega(w)), atol=1e-9)
        # and the same by finite differences of the energy
        k = tuple(rng.integers(0, 8, size=2))
        e = np.zeros_like(phi)
        e[k] = 1e-5
        T = temperature_for_omega(w)
        fd = (hamiltonian(phi + e, T) - hamiltonian(phi - e, T)) / 2e-5
        assert -fd == pytest.approx(lhs[k], rel=1e-5, abs=1e-5)


def test_omega_temperature_map():
    assert omega_for_temperature(196.0) == 4.0
    assert omega_for_temperature(200.0) == 0.0
    assert temperature_for_omega(4.0) == 196.0
    with pytest.raises(ValueError):
        omega_for_temperature(196.0, 200.0, 200.0)


def test_mh_matches_gaussian_covariance():
    # lam = 0 above Tc: exp(-beta H) is Gaussian with precision A
    p = MagnetParams(lam=0.0)
    L, T = 4, 210.0
    cov = np.linalg.inv(_precision(L, T, p))
    r = mh_chain(T, p, n_samples=40000, L=L, seed=1, burn_in=500)
    site_var = r.fields.reshape(-1, L * L).var(axis=0).mean()
    assert site_var == pytest.approx(np.diag(cov).mean(), rel=0.03)
    assert mean_magnetization(r.fields).var() == pytest.approx(cov.mean(), rel=0.05)


@pytest.mark.parametrize("T", [196.0, 201.0])
def test_acceptance_rate_in_target_band(T):
    r = mh_chain(T, n_samples=2048, burn_in=200, n_chains=256, seed=4)
    assert 0.3 <= r.acceptance_rate <= 0.6


def test_mh_signs_are_indistinguishable():
    r = mh_chain(196.0, n_samples=30000, burn_in=1000, n_chains=512, seed=7)
    m = np.abs(mean_magnetization(r.fields))
    up = r.initial_signs[r.chain_ids] > 0
    assert ks_2samp(m[up], m[~up]).pvalue > 0.001
    assert 0.2 < r.mode_balance < 0.8


def test_mh_is_seeded():
    a = mh_chain(199.0, n_samples=100, burn_in=10, n_chains=8, seed=3)
    b = mh_chain(199.0, n_samples=100, burn_in=10, n_chains=8, seed=3)
    np.testing.assert_array_equal(a.fields, b.fields)
    assert a.fields.shape == (100, 8, 8)


def test_validation():
    with pytest.raises(ValueError):
        mh_chain(200.0, L=1)
    with pytest.raises(ValueError):
        mh_chain(200.0, n_samples=0)
    with pytest.raises(ValueError):
        LatticeField(np.zeros((2, 3)), 200.0)
    with pytest.raises(ValueError):
        LatticeField(np.full((2, 2), np.nan), 200.0)
    f = LatticeField(np.ones((3, 3)), 200.0)
    assert f.L == 3 and isinstance(hamiltonian(f, 200.0), float)
