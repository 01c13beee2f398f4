import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transportlab import _kernels as K
from transportlab.transfer import (
    LocalPotential, PotentialModel, brute_pair_norm, det2, gronwall_bound,
    gronwall_check, inv2, max_transfer_norm, op_norm, propagate, sobolev_check,
    sobolev_constant, solution_on_grid, step_matrix, sup_pair_norm, word_matrix,
    word_matrix_real,
)
from transportlab.words import BernoulliSource, Word, sample_word


def bernoulli_model(lam=1.0, n=1000, seed=0, start=0):
    return PotentialModel.step_model(lam, sample_word(BernoulliSource(0.5, seed), start, n))


def naive_cell(E, h):
    # independent closed form with an explicit branch per sign
    k = np.sqrt(complex(E - h))
    if abs(k) < 1e-12:
        return np.array([[1.0, 1.0], [0.0, 1.0]])
    return np.array([[np.cos(k), np.sin(k) / k], [-k * np.sin(k), np.cos(k)]])


def test_step_examples():
    np.testing.assert_allclose(step_matrix(np.pi ** 2, 0.0), -np.eye(2), atol=1e-15)
    np.testing.assert_allclose(step_matrix(1.0, 1.0), [[1, 1], [0, 1]], atol=0)
    np.testing.assert_allclose(step_matrix(np.pi ** 2 + 1, 1.0), -np.eye(2), atol=1e-15)


@pytest.mark.parametrize("E", [-7.3, -1e-3, 1e-9, 0.4, 3.0, 55.5, 2.0 + 0.3j, -4 - 1j])
def test_step_matches_branchwise_formula(E):
    got = step_matrix(E, 0.5)
    np.testing.assert_allclose(got, naive_cell(E, 0.5), rtol=1e-12, atol=1e-12)
    assert abs(det2(got) - 1) < 1e-13


def test_step_smooth_across_threshold():
    E = 1.0 + np.linspace(-1e-3, 1e-3, 41)
    m = step_matrix(E, 1.0)
    assert np.max(np.abs(np.diff(m, axis=0))) < 1e-4


def test_propagate_delegates_and_free():
    np.testing.assert_array_equal(propagate(LocalPotential.step(2.0), 5.0), step_matrix(5.0, 2.0))
    free = propagate(LocalPotential.step(0.0), 1.0)
    np.testing.assert_allclose(free, [[np.cos(1), np.sin(1)], [-np.sin(1), np.cos(1)]], atol=1e-15)


def test_profile_richardson_ratio():
    bump = LocalPotential.profile(lambda x: 3 * np.sin(np.pi * x) ** 2, n=9)
    h = 2.0 ** -5
    m1, m2, m3 = (propagate(bump, 3.0, h / 2 ** i) for i in range(3))
    ratio = np.max(np.abs(m1 - m2)) / np.max(np.abs(m2 - m3))
    assert 15.0 < ratio < 17.0
    m, err = propagate(bump, 3.0, with_error=True)
    assert err < 1e-12


def test_constant_profile_matches_step():
    flat = LocalPotential.profile(lambda x: 2.0 + 0 * x, n=5)
    np.testing.assert_allclose(propagate(flat, 5.0), step_matrix(5.0, 2.0), atol=1e-11)


def test_profile_validation(tmp_path):
    with pytest.raises(ValueError):
        LocalPotential("profile", x=np.array([0, 0.5, 1.0]), values=np.array([0, np.inf, 0]))
    path = tmp_path / "v.csv"
    path.write_text("x,V\n0,0\n0.5,1\n1,0\n")
    g = LocalPotential.from_csv(path)
    assert g.l1_norm() == pytest.approx(0.5)


def test_word_matrix_examples():
    model = PotentialModel.step_model(1.0, Word.from_string("01"))
    np.testing.assert_allclose(word_matrix(model, 0, 0, 3.0), np.eye(2))
    got = word_matrix(model, 0, 2, np.pi ** 2)
    np.testing.assert_allclose(got, -step_matrix(np.pi ** 2, 1.0), atol=1e-14)


def test_word_matrix_left_fold():
    model = bernoulli_model(n=1000, seed=3)
    acc = np.eye(2)
    for j in model.word.letters:
        acc = naive_cell(2.5, float(j)).real @ acc
    np.testing.assert_allclose(word_matrix(model, 0, 1000, 2.5), acc, rtol=1e-9)


def test_reverse_is_inverse():
    model = bernoulli_model(n=200, seed=5)
    fwd = word_matrix(model, 10, 150, 4.0)
    np.testing.assert_allclose(word_matrix(model, 150, 10, 4.0) @ fwd, np.eye(2), atol=1e-8)


def test_out_of_window():
    model = bernoulli_model(n=50)
    with pytest.raises(IndexError):
        word_matrix(model, 0, 51, 1.0)


@given(st.integers(0, 120), st.integers(0, 120), st.integers(0, 120),
       st.floats(-3.0, 60.0), st.floats(0.0, 0.05))
@settings(max_examples=60, deadline=None)
def test_cocycle(m, k, n, E, eta):
    model = bernoulli_model(n=120, seed=11)
    z = E + 1j * eta
    a, b = word_matrix(model, k, m, z), word_matrix(model, n, k, z)
    scale = op_norm(a) * op_norm(b)
    assert np.max(np.abs(a @ b - word_matrix(model, n, m, z))) <= 1e-9 * scale


@pytest.mark.parametrize("E", [0.7, 9.0, 40.0])
def test_free_exactness(E):
    model = PotentialModel.free(0, 10 ** 4)
    for n in (1, 17, 10 ** 4):
        np.testing.assert_allclose(word_matrix(model, 0, n, E), step_matrix(E, 0.0, float(n)), atol=1e-9)


def test_determinant_drift_long_chain():
    model = bernoulli_model(n=10 ** 6, seed=2)
    for z in (np.pi ** 2, np.pi ** 2 + 1e-6j):
        assert abs(det2(word_matrix(model, 0, 10 ** 6, z)) - 1) < 1e-10


def test_op_norm():
    assert op_norm(np.diag([2.0, 0.5])) == pytest.approx(2.0)
    th = 0.3
    assert op_norm(np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.normal(size=(2, 2)) * rng.uniform(0.1, 30)
        a /= np.sqrt(abs(det2(a)))
        if det2(a) < 0:
            a[0] *= -1
        assert abs(op_norm(a) / op_norm(inv2(a)) - 1) < 1e-10
        c = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        assert op_norm(c) == pytest.approx(np.linalg.svd(c, compute_uv=False)[0], rel=1e-12)


@pytest.mark.parametrize("E", [np.pi ** 2, 2.5, 30.0, np.pi ** 2 + 1e-3, 2.0 + 0.01j])
def test_sup_pair_norm_matches_brute_force(E):
    model = bernoulli_model(n=1500, seed=8)
    prods = K.indexed_prefix_products(model.letter_matrices(E), model.word.cells(0, 1500), 64)
    assert sup_pair_norm(prods) == pytest.approx(brute_pair_norm(prods), rel=1e-10)
    classes = np.arange(len(prods)) % 3
    assert sup_pair_norm(prods, classes) == pytest.approx(brute_pair_norm(prods), rel=1e-10)


def test_real_endpoints():
    model = bernoulli_model(n=40, seed=4)
    np.testing.assert_allclose(word_matrix_real(model, 30.0, 3.0, 7.0), word_matrix(model, 3, 30, 7.0), atol=1e-12)
    a = word_matrix_real(model, 21.3, 4.7, 7.0)
    b = word_matrix_real(model, 21.3, 12.25, 7.0) @ word_matrix_real(model, 12.25, 4.7, 7.0)
    np.testing.assert_allclose(a, b, atol=1e-11)
    np.testing.assert_allclose(word_matrix_real(model, 4.7, 21.3, 7.0) @ a, np.eye(2), atol=1e-10)


def test_gronwall_examples():
    assert gronwall_bound(3.0, 100.0, 0.0) == 3.0
    C, N, alpha = 2.0, 1000.0, 0.4
    assert gronwall_bound(C * N ** alpha, N, N ** (-1 - alpha)) <= C * np.exp(C) * N ** alpha * (1 + 1e-12)
    with pytest.raises(ValueError):
        gronwall_bound(0.5, 1.0, 0.1)


def test_gronwall_step_model():
    model = bernoulli_model(n=1001, seed=21)
    rep = gronwall_check(model, np.pi ** 2, 1000, 1000, np.random.default_rng(5))
    assert rep.violations == 0
    assert rep.L >= max_transfer_norm(model, np.pi ** 2, 0, 1000) * (1 - 1e-12)


def test_sobolev_free_sine():
    k = 3.0
    x = np.linspace(0, 10, 10 * 256 + 1)
    u, du = np.sin(k * x), k * np.cos(k * x)
    rep = sobolev_check(x, u, du, np.full(x.size, -k ** 2))
    assert rep.ok and np.isfinite(rep.max_ratio)
    # explicit integral at a maximum of |u'|: k^2 / (1 - sin(2k)/(2k))
    assert rep.max_ratio == pytest.approx(k ** 2 / (1 - np.sin(2 * k) / (2 * k)), rel=1e-3)


def test_sobolev_constant_solution():
    x = np.linspace(0, 5, 5 * 64 + 1)
    rep = sobolev_check(x, np.ones_like(x), np.zeros_like(x), np.zeros_like(x))
    assert rep.max_ratio == 0.0


def test_sobolev_rejects_non_solution():
    x = np.linspace(0, 5, 321)
    with pytest.raises(ValueError):
        sobolev_check(x, np.sin(x), np.cos(x) + 1.0, np.zeros_like(x))


def test_sobolev_bernoulli_refinement():
    model = bernoulli_model(n=101, seed=3)
    out = []
    for per_cell in (64, 128):
        x, u, du = solution_on_grid(model, 5.0, 0, 100, per_cell=per_cell)
        q = model.potential(0.5 * (x[1:] + x[:-1])) - 5.0
        rep = sobolev_check(x, u, du, q)
        assert rep.ok
        out.append(rep.max_ratio)
    assert out[0] == pytest.approx(out[1], rel=1e-3)


def test_sobolev_constant_monotone_bins():
    assert sobolev_constant(0.1) <= sobolev_constant(2.0) <= sobolev_constant(8.0)
