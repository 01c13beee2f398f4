import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eigh, expm

from transportlab.discrete import (
    DiscretePotential, DiscreteState, WindowSaturation, cesaro_discrete_moments, cesaro_exact,
    chebyshev_evolve, dimer_certificate, dimer_experiment, dimer_pair_blocks, dimer_sup_norm,
    discrete_moment, discrete_moments, discrete_pairing, discrete_transfer, free_delta_abelian,
    free_delta_cesaro, one_step, time_side_moments,
)
from transportlab.words import BernoulliSource

FREE = DiscretePotential.constant(0.0)


def random_truncation(rng, n):
    first = -int(rng.integers(0, n))
    V = DiscretePotential.explicit(rng.uniform(-2, 2, n), first=first)
    k = int(rng.integers(1, 4))
    start = int(rng.integers(first, first + n - k + 1))
    f = DiscreteState(tuple(rng.normal(size=k) + 1j * rng.normal(size=k)), first=start)
    return V, f


def dimer(lam, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return DiscretePotential.dimer(lam, BernoulliSource(0.5, seed, 0))


# -- transfer matrices ---------------------------------------------------------------

def test_free_one_step_quarter_turn():
    A = one_step(0.0, 0.0)
    assert np.array_equal(A, [[0, -1], [1, 0]])
    assert np.array_equal(np.linalg.matrix_power(A, 4), np.eye(2))
    assert np.allclose(discrete_transfer(FREE, 0.0, 0, 4), np.eye(2))


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.7])
def test_dimer_block_is_minus_identity(lam):
    B0, _ = dimer_pair_blocks(lam, lam)
    assert np.array_equal(B0, -np.eye(2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=40), st.floats(-4, 4),
       st.integers(0, 40), st.integers(0, 40))
def test_transfer_unimodular_and_cocycle(vals, E, a, b):
    V = DiscretePotential.explicit(vals + [0.0] * 41, first=0)
    m = discrete_transfer(V, E, a, b)
    assert abs(np.linalg.det(m) - 1) < 1e-9 * max(1.0, np.linalg.norm(m) ** 2)
    mid = (a + b) // 2
    comp = discrete_transfer(V, E, mid, b) @ discrete_transfer(V, E, a, mid)
    assert np.allclose(comp, m, rtol=1e-9, atol=1e-9 * np.linalg.norm(m))
    back = discrete_transfer(V, E, b, a) @ m
    assert np.allclose(back, np.eye(2), atol=1e-8 * np.linalg.norm(m) ** 2)


def test_transfer_propagates_solution():
    rng = np.random.default_rng(1)
    V = DiscretePotential.explicit(rng.uniform(-1, 1, 30), first=-5)
    E = 0.37
    u = np.zeros(32)
    u[0], u[1] = 0.3, -1.1          # u(-6), u(-5)
    pot = V.window(-5, 24)
    for i in range(1, 31):
        u[i + 1] = (E - pot[i - 1]) * u[i] - u[i - 1]
    m = discrete_transfer(V, E, -6, 20)
    assert np.allclose(m @ [u[1], u[0]], [u[27], u[26]])


def test_transfer_outside_window():
    V = DiscretePotential.explicit([1.0, 2.0], first=1)
    with pytest.raises(IndexError):
        discrete_transfer(V, 0.0, 0, 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(-500, 500), st.sampled_from([0.3, 0.5, 0.7]))
def test_dimer_values_pair_up(seed, start, lam):
    v = dimer(lam, seed).window(2 * start - 1, 2 * start + 60)
    assert set(np.unique(v)) <= {lam, -lam}
    assert np.array_equal(v[0::2], v[1::2])


@pytest.mark.parametrize("lam", [0.3, 0.5, 0.7])
@pytest.mark.parametrize("sign", [1, -1])
def test_dimer_transfer_bounded_by_certificate(lam, sign):
    cert = dimer_certificate(lam, sign * lam)
    assert cert.phase_ok
    worst = max(dimer_sup_norm(dimer(lam, s), sign * lam, 0, 10_000) for s in range(20))
    assert worst <= cert.bound


def test_dimer_certificate_half():
    cert = dimer_certificate(0.5)
    assert {round(e % (2 * math.pi), 12) for e in cert.eta} == {round(math.pi, 12),
                                                             round(2 * math.pi / 3, 12)}
    assert abs(cert.phase_gap - math.pi / 3) < 1e-12


def test_dimer_outside_range_warns():
    with pytest.warns(UserWarning):
        DiscretePotential.dimer(1.5, BernoulliSource(0.5, 0, 0))


def test_dimer_off_critical_grows():
    # E away from +-lam: random pair products are hyperbolic
    assert dimer_sup_norm(dimer(0.5, 0), 0.1, 0, 2000) > 1e3


# -- moments -----------------------------------------------------------------------

@pytest.mark.parametrize("case", range(3))
@pytest.mark.parametrize("T", [1.0, 10.0, 100.0])
def test_kato_closure_small_truncations(case, T):
    rng = np.random.default_rng(100 + case)
    V, f = random_truncation(rng, int(rng.integers(20, 120)))
    ps = (0.0, 1.0, 2.0)
    energy = [s.value for s in discrete_moments(V, f, T, ps, window=(V.first, V.last)).samples]
    time = time_side_moments(V, f, T, ps, (V.first, V.last))
    assert np.allclose(energy, time, rtol=1e-6, atol=0)


def test_expm_oracle_limit():
    V = DiscretePotential.explicit(np.zeros(201), first=-100)
    with pytest.raises(ValueError):
        time_side_moments(V, DiscreteState.delta(0), 1.0, (0,), (-100, 100))


@pytest.mark.parametrize("T", [3.0, 30.0])
def test_p0_is_norm(T):
    f = DiscreteState((1.0, -2.0, 0.5j), first=2)
    res = discrete_moments(dimer(0.5, 4), f, T, (0.0,))
    assert abs(res.samples[0].value / f.norm2() - 1) < 1e-4
    assert abs(res.pairing_mass / f.norm2() - 1) < 1e-4


@pytest.mark.parametrize("T", [1.0, 7.0, 40.0])
def test_free_delta_closed_forms(T):
    ab = discrete_moment(FREE, DiscreteState.delta(1), T, 2.0)
    ce = cesaro_discrete_moments(FREE, DiscreteState.delta(1), T, (2.0,))[0].value
    assert abs(ab / free_delta_abelian(T) - 1) < 1e-8
    assert abs(ce / free_delta_cesaro(T) - 1) < 1e-8


def test_bessel_sum_identity():
    # sum_m (m+1)^2 J_m(2t)^2 over m in Z equals 2 t^2 + 1
    from scipy.special import jv
    m = np.arange(-200, 201)
    for t in (0.5, 3.0, 20.0):
        assert abs(np.sum((m + 1.0) ** 2 * jv(m, 2 * t) ** 2) - (2 * t * t + 1)) < 1e-9


def test_chebyshev_matches_expm():
    rng = np.random.default_rng(3)
    V, f = random_truncation(rng, 80)
    lo, hi = V.first, V.last
    H = np.diag(V.window(lo, hi)) + np.diag(np.ones(hi - lo), 1) + np.diag(np.ones(hi - lo), -1)
    psi0 = np.zeros(hi - lo + 1, complex)
    psi0[f.sites - lo] = f.values
    times = [0.0, 0.3, 2.0, 11.5]
    got = chebyshev_evolve(V, f, times, (lo, hi))
    for t, g in zip(times, got):
        assert np.allclose(g, expm(-1j * H * t) @ psi0, atol=1e-11)


@pytest.mark.parametrize("T", [2.0, 15.0])
def test_cesaro_chebyshev_vs_eigen(T):
    rng = np.random.default_rng(7)
    V, f = random_truncation(rng, 90)
    ps = (0.0, 2.0)
    a = [s.value for s in cesaro_discrete_moments(V, f, T, ps, window=(V.first, V.last))]
    b = cesaro_exact(V, f, T, ps, (V.first, V.last))
    assert np.allclose(a, b, rtol=1e-9)


def test_cesaro_equals_abelian_for_stationary_state():
    # eigenvector of the truncation: |psi_t(n)|^2 is constant in t
    rng = np.random.default_rng(5)
    V = DiscretePotential.explicit(rng.uniform(-1, 1, 40), first=-20)
    H = np.diag(V.window(-20, 19)) + np.diag(np.ones(39), 1) + np.diag(np.ones(39), -1)
    _, Q = eigh(H)
    f = DiscreteState(tuple(Q[:, 7]), first=-20)
    ps = (0.0, 2.0)
    a = [s.value for s in discrete_moments(V, f, 9.0, ps, window=(-20, 19)).samples]
    c = [s.value for s in cesaro_discrete_moments(V, f, 9.0, ps, window=(-20, 19))]
    static = [float(np.sum(np.abs(Q[:, 7]) ** 2 * np.abs(np.arange(-20, 20)) ** p)) for p in ps]
    assert np.allclose(a, static, rtol=1e-7)
    assert np.allclose(c, static, rtol=1e-10)


def test_half_and_whole_line_agree_deep_inside():
    f = DiscreteState((1.0, 0.5), first=60)
    V = dimer(0.5, 2)
    h = discrete_moments(V, f, 2.0, (0.0, 2.0), boundary="half").samples
    w = discrete_moments(V, f, 2.0, (0.0, 2.0), boundary="whole").samples
    for a, b in zip(h, w):
        assert abs(a.value / b.value - 1) < 1e-8


def test_half_line_differs_near_boundary():
    f = DiscreteState.delta(1)
    h = discrete_moment(FREE, f, 10.0, 2.0, boundary="half")
    w = discrete_moment(FREE, f, 10.0, 2.0, boundary="whole")
    assert abs(h / w - 1) > 1e-2


def test_window_saturation():
    V = DiscretePotential.explicit(np.zeros(100), first=-50)
    with pytest.raises(WindowSaturation):
        discrete_moments(V, DiscreteState.delta(0), 50.0, (2.0,))


def test_bad_boundary_and_half_support():
    with pytest.raises(ValueError):
        discrete_moments(FREE, DiscreteState.delta(0), 1.0, (0,), boundary="half")
    with pytest.raises(ValueError):
        discrete_moments(FREE, DiscreteState.delta(1), 1.0, (0,), boundary="left")


# -- pairings and the dimer experiment -------------------------------------------------

def test_delta_one_pairing_is_one():
    for seed in range(5):
        assert discrete_pairing(dimer(0.5, seed), DiscreteState.delta(1), 0.5) == (1.0,)


def _engineered(V, E0):
    u = np.array([1.0, E0 - V.window(1, 1)[0]])   # u(1), u(2) with u(0) = 0
    if u[1] == 0:
        return DiscreteState.delta(2)
    return DiscreteState((1.0, -u[0] / u[1]), first=1)


def test_engineered_state_is_orthogonal_and_still_runs():
    V = dimer(0.5, 9)
    f = _engineered(V, 0.5)
    assert abs(discrete_pairing(V, f, 0.5)[0]) < 1e-14
    rep = dimer_experiment(0.5, 2.0, [9], np.geomspace(5, 50, 8), f=f)
    assert len(rep.fits) == 1 and np.isfinite(rep.median)


def test_whole_line_pairing_pair():
    f = DiscreteState((1.0, 2.0), first=3)
    vals = discrete_pairing(FREE, f, 0.0, boundary="whole")
    # u = (1, 0) at (3, 2) -> u(4) = -u(2) = 0; u = (0, 1) -> u(4) = -1
    assert vals == (1.0, -2.0)


def test_dimer_experiment_small_grid():
    rep = dimer_experiment(0.5, 2.0, [0, 1], np.geomspace(10, 100, 8))
    rec = rep.to_record()
    assert rec["target"] == 1.5 and rec["deterministic_bound"] == 1.0
    assert rep.all_at_least(1.0)
    assert rec["certificate"]["phase_ok"]


def test_dimer_experiment_warns_on_support():
    with pytest.warns(UserWarning):
        dimer_experiment(0.5, 0.0, [0], np.geomspace(1, 10, 8), f=DiscreteState.delta(5))
