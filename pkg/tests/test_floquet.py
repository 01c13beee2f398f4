import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from transportlab.floquet import (
    analytic_eigenvector, band_scan, bands, conjugated_pair, diagonalize_pair,
    discriminant, find_critical_energies, interior_margin, real_conjugator, rotation,
)
from transportlab.transfer import LocalPotential, PotentialModel, max_transfer_norm, step_matrix
from transportlab.words import BernoulliSource, sample_word

PI2 = np.pi ** 2
FREE = LocalPotential.step(0.0)
STEP1 = LocalPotential.step(1.0)


def d5(f, x, h):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def test_discriminant_examples():
    assert discriminant(FREE, PI2 / 4) == pytest.approx(0.0, abs=1e-15)
    assert discriminant(LocalPotential.step(0.7), 0.7) == 2.0
    assert discriminant(STEP1, PI2 + 1) == pytest.approx(-2.0, abs=1e-14)
    E = np.linspace(0.1, 80, 50)
    np.testing.assert_allclose(discriminant(FREE, E), 2 * np.cos(np.sqrt(E)), atol=1e-13)


def test_free_band_characterization():
    E, D = band_scan([FREE], (-20.0, 120.0), 0.01).T
    assert np.array_equal(np.abs(D) <= 2.0 + 1e-13, E >= -1e-12)
    (lo, hi), = bands(FREE, (-20.0, 120.0))
    assert lo == pytest.approx(0.0, abs=1e-10) and hi == pytest.approx(120.0)
    # edges are closed gaps at n^2 pi^2
    for n in (1, 2, 3):
        assert abs(abs(discriminant(FREE, (n * np.pi) ** 2)) - 2) < 1e-13
        assert interior_margin(FREE, (n * np.pi) ** 2) > 0.5


def test_step_pair_critical_energies():
    certs = find_critical_energies(FREE, STEP1, (1.0, 50.0))
    expected = sorted([PI2, 4 * PI2, PI2 + 1, 4 * PI2 + 1])
    np.testing.assert_allclose([c.E0 for c in certs], expected, atol=1e-10)
    for c in certs:
        assert c.commutator_residual < 1e-10
        assert min(c.interior_margins) > 0
        assert c.rotation_residual((FREE, STEP1)) < 1e-9
        assert not c.degenerate
    assert certs[0].eta0 == pytest.approx(np.pi)
    assert certs[0].diagonalizer == 1  # T_0 = -I there, so the other cell supplies F


def test_critical_roots_stable_under_regridding():
    a = find_critical_energies(FREE, STEP1, (1.0, 45.0))
    b = find_critical_energies(FREE, STEP1, (1.0, 45.0), spacing=5e-4)
    np.testing.assert_allclose([c.E0 for c in a], [c.E0 for c in b], atol=1e-10)


def test_identical_cells_flagged_degenerate():
    certs = find_critical_energies(STEP1, STEP1, (2.0, 30.0))
    assert certs and all(c.degenerate for c in certs)
    assert all(c.commutator_residual == 0.0 for c in certs)


def test_residual_at_pi2():
    from transportlab.floquet import commutator
    T0, T1 = step_matrix(PI2, 0.0), step_matrix(PI2, 1.0)
    assert np.linalg.norm(commutator(T0, T1)) < 1e-10


def test_profile_pair_certificates_sound():
    bump = LocalPotential.profile(lambda x: 2 * np.sin(np.pi * x) ** 2, n=65)
    certs = find_critical_energies(FREE, bump, (5.0, 45.0))
    assert certs
    for c in certs:
        assert c.commutator_residual <= 1e-10
        assert c.rotation_residual((FREE, bump)) < 1e-9
    # closed gaps of the free cell commute with everything
    assert any(abs(c.E0 - PI2) < 1e-9 for c in certs)


def test_certificate_bounds_word_products():
    cert = find_critical_energies(FREE, STEP1, (9.0, 10.0))[0]
    for seed in range(5):
        w = sample_word(BernoulliSource(0.5, seed), 0, 2000)
        sup = max_transfer_norm(PotentialModel.step_model(1.0, w), cert.E0, 0, 2000)
        assert sup <= cert.condition * (1 + 1e-9)


def test_certificate_json_roundtrip():
    cert = find_critical_energies(FREE, STEP1, (9.0, 10.0))[0]
    rec = json.loads(cert.to_json())
    assert rec["E0"] == cert.E0 and len(rec["F"]) == 4
    F = np.array([complex(*z) for z in rec["F"]]).reshape(2, 2)
    np.testing.assert_array_equal(F, cert.F)


def test_diagonalize_minus_identity_pair():
    d = diagonalize_pair(-np.eye(2), -np.eye(2))
    assert d.a0 == -1 and d.a1 == -1 and d.b0 == 0 and d.b1 == 0
    np.testing.assert_array_equal(d.F, np.eye(2))
    assert np.angle(d.a0) % (2 * np.pi) == pytest.approx(np.pi)


def test_diagonalize_rejects():
    shear = np.array([[1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="parabolic"):
        diagonalize_pair(shear, np.eye(2))
    with pytest.raises(ValueError, match="commute"):
        diagonalize_pair(step_matrix(3.0, 0.0), step_matrix(3.0, 1.0))


def test_free_quarter_point_rho_is_i():
    s = analytic_eigenvector(FREE, PI2 / 4, PI2 / 4)
    assert s.rho_plus == pytest.approx(1j, abs=1e-14)
    assert s.branch_tag == "interior"
    assert np.angle(s.rho_plus) == pytest.approx(np.pi / 2)


def test_interior_c_formula():
    E = 20.0
    T = step_matrix(E, 1.0)
    s = analytic_eigenvector(STEP1, E, E)
    D = np.trace(T)
    rho = 0.5 * (D + 1j * np.sqrt(4 - D * D))
    assert s.c_plus == pytest.approx((rho - T[0, 0]) / T[0, 1], rel=1e-12)
    np.testing.assert_allclose(T @ s.v_plus, s.rho_plus * s.v_plus, atol=1e-12)


@pytest.mark.parametrize("which", [0, 1])
def test_tilde_unit_determinant_and_conjugate_form(which):
    cells = (FREE, STEP1)
    E_c = PI2 + 1
    E = E_c + np.linspace(-0.05, 0.05, 21)
    t0, t1 = conjugated_pair(cells, E_c, E, which)
    for t in (t0, t1):
        a, b = t[:, 0, 0], t[:, 1, 0]
        np.testing.assert_allclose(t[:, 1, 1], np.conj(a), atol=1e-10)
        np.testing.assert_allclose(t[:, 0, 1], np.conj(b), atol=1e-10)
        np.testing.assert_allclose(np.abs(a) ** 2 - np.abs(b) ** 2, 1.0, atol=1e-9)


def test_closed_gap_of_the_step_diagonalizer_choice():
    # at pi^2 + 1, T_1 = -I and T_0 is elliptic; F comes from T_0
    cells = (FREE, STEP1)
    E_c = PI2 + 1
    cert = find_critical_energies(FREE, STEP1, (10.5, 11.0))[0]
    assert cert.diagonalizer == 0
    deltas = np.array([1e-2, 1e-3, 1e-4])
    t0, t1 = conjugated_pair(cells, E_c, E_c + deltas, which=0)
    assert np.max(np.abs(t0[:, 1, 0])) < 1e-12
    np.testing.assert_allclose(np.abs(t0[:, 0, 0]), 1.0, atol=1e-12)
    _, t1c = conjugated_pair(cells, E_c, np.array([E_c]), which=0)
    assert abs(t1c[0, 1, 0]) < 1e-10
    slopes = np.abs(t1[:, 1, 0]) / deltas
    assert slopes[-1] > 1e-3
    assert abs(slopes[1] - slopes[2]) / slopes[2] < 0.02
    # the closed-gap cell's own eigenvector limit does not diagonalize T_0
    t0_bad, _ = conjugated_pair(cells, E_c, np.array([E_c]), which=1)
    assert abs(t0_bad[0, 1, 0]) > 1e-3


def test_degenerate_edge_rho_derivative():
    data = analytic_eigenvector(FREE, PI2)
    assert data.branch_tag == "degenerate_edge"
    deriv = d5(data.rho_plus, PI2, 1e-3)
    D = lambda e: discriminant(FREE, e)
    h = 1e-3
    d2 = (-D(PI2 - 2 * h) + 16 * D(PI2 - h) - 30 * D(PI2) + 16 * D(PI2 + h) - D(PI2 + 2 * h)) / (12 * h * h)
    assert abs(deriv - 1j * np.sqrt(abs(d2) / 2)) < 1e-6
    # closed form: D'' = 1/(2 pi^2) for 2 cos sqrt(E) at pi^2
    assert abs(deriv - 1j / (2 * np.pi)) < 1e-6


def test_degenerate_edge_c_limit():
    data = analytic_eigenvector(FREE, PI2)
    deltas = 10.0 ** -np.arange(2, 6)
    vals = data.c_plus(PI2 + deltas)
    # c_+ is analytic, so first-order Richardson on halving deltas
    half = data.c_plus(PI2 + deltas / 2)
    extrap = 2 * half - vals
    assert np.all(np.abs(extrap - extrap[-1]) < 1e-6)
    assert abs(extrap[-1].imag) > 1.0
    # free cell: c_+ = -i sqrt(E) on the continued branch
    assert extrap[-1] == pytest.approx(-1j * np.pi, abs=1e-6)
    assert data.c_at_center == pytest.approx(-1j * np.pi, abs=1e-7)


def test_rejects_nondegenerate_edge():
    with pytest.raises(ValueError, match="not interior"):
        analytic_eigenvector(STEP1, 1.0)


@settings(max_examples=40, deadline=None)
@given(E=st.floats(0.2, 60.0), which=st.sampled_from([FREE, STEP1]))
def test_eigen_pairing_property(E, which):
    D = float(discriminant(which, E))
    if abs(D) > 2 - 1e-3:
        return
    data = analytic_eigenvector(which, E)
    pts = E + np.linspace(-0.5, 0.5, 5) * min(data.radius, 1e-2)
    T = step_matrix(pts, which.height)
    v = data.v_plus(pts)
    rho = data.rho_plus(pts)
    np.testing.assert_allclose(np.einsum("nij,nj->ni", T, v), rho[:, None] * v, atol=1e-10)
    np.testing.assert_allclose(np.einsum("nij,nj->ni", T, np.conj(v)), np.conj(rho)[:, None] * np.conj(v),
                               atol=1e-10)
    np.testing.assert_allclose(np.abs(rho), 1.0, atol=1e-10)


def test_real_conjugation_form():
    cert = find_critical_energies(FREE, STEP1, (10.0, 11.0))[0]
    M = real_conjugator(cert.F)
    assert np.isrealobj(M)
    R = M @ step_matrix(cert.E0, 0.0) @ np.linalg.inv(M)
    np.testing.assert_allclose(R, rotation(cert.eta0), atol=1e-9)
