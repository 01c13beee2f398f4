"""Rotation-plus-scaling (Pruefer-type) view of conjugated transfer matrices.

T~_j = F^{-1} T_j F = [[a_j, conj b_j], [b_j, conj a_j]] acts on the circle
vectors e~_theta = (e^{i theta}, e^{-i theta})/sqrt 2.  Angles are handled
internally as unit complex numbers z = e^{i theta}.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from . import _kernels as K
from .floquet import cell_matrix, conjugated_pair
from .transfer import PotentialModel, RENORM_EVERY, op_norm, sup_pair_norm, word_matrix
from .words import BernoulliSource, Word, sample_letters

__all__ = [
    "canon", "PrueferCoeffs", "theta_action", "norm_identity", "sup_norm_identity",
    "deviation_sum", "lognorm_reconstruction", "fit_error_model", "DeviationStats",
    "excluded_set_estimate", "phase_gate", "theta_pair_bound",
]

TWO_PI = 2 * np.pi
THETA_GRID = 1024
C_STEP = 1e-5


def canon(theta):
    """Representative in [0, 2 pi)."""
    t = np.mod(theta, TWO_PI)
    return np.where(t >= TWO_PI, 0.0, t) if np.ndim(t) else (0.0 if t >= TWO_PI else float(t))


def e_tilde(theta):
    theta = np.asarray(theta, float)
    return np.stack([np.exp(1j * theta), np.exp(-1j * theta)], axis=-1) / np.sqrt(2)


# -- coefficients -----------------------------------------------------------

@dataclass
class PrueferCoeffs:
    """a_j(E_c + delta), b_j(E_c + delta) and c_j = e^{i eta_j} b_j'(E_c).

    Built from a critical-energy certificate (cells given), or constant
    in delta for synthetic experiments (cells None).
    """
    eta: np.ndarray
    c: np.ndarray
    cells: tuple = None
    E_c: float = None
    which: int = 0
    const_ab: tuple = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def synthetic(cls, a, b, c=None):
        a = np.asarray(a, complex)
        b = np.asarray(b, complex)
        det = np.abs(a) ** 2 - np.abs(b) ** 2
        if np.any(np.abs(det - 1) > 1e-9):
            raise ValueError("need |a|^2 - |b|^2 = 1")
        c = np.zeros(2, complex) if c is None else np.asarray(c, complex)
        return cls(eta=np.angle(a) % TWO_PI, c=c, const_ab=(a, b))

    @classmethod
    def from_certificate(cls, cells, cert, step=C_STEP):
        E_c, which = cert.E0, cert.diagonalizer
        d = step * np.array([-2, -1, 1, 2])
        t = conjugated_pair(cells, E_c, E_c + d, which)
        b = np.stack([t[0][:, 1, 0], t[1][:, 1, 0]], axis=1)   # (4, 2)
        db = (b[0] - 8 * b[1] + 8 * b[2] - b[3]) / (12 * step)
        eta = np.array([cert.eta0, cert.eta1])
        return cls(eta=eta, c=np.exp(1j * eta) * db, cells=tuple(cells), E_c=E_c, which=which)

    def ab(self, delta):
        """(a, b), each shape (2,), at E_c + delta."""
        if self.const_ab is not None:
            return self.const_ab
        key = float(delta)
        hit = self._cache.get(key)
        if hit is None:
            t0, t1 = conjugated_pair(self.cells, self.E_c, self.E_c + key, self.which)
            hit = (np.array([t0[0, 0], t1[0, 0]]), np.array([t0[1, 0], t1[1, 0]]))
            if len(self._cache) < 4096:
                self._cache[key] = hit
        return hit

    def tilde(self, delta):
        a, b = self.ab(delta)
        return np.array([[[a[j], np.conj(b[j])], [b[j], np.conj(a[j])]] for j in (0, 1)])

    @property
    def phase_gap(self):
        """|p e^{2i eta0} + (1-p) e^{2i eta1}| < 1 iff eta0 - eta1 is not a multiple of pi."""
        d = (self.eta[0] - self.eta[1]) % np.pi
        return min(d, np.pi - d)


def phase_gate(eta0, eta1, p):
    """Modulus of the convex combination p e^{2i eta0} + (1 - p) e^{2i eta1}."""
    return abs(p * np.exp(2j * eta0) + (1 - p) * np.exp(2j * eta1))


# -- single steps and the circle identity ---------------------------------------

def theta_action(a, b, theta):
    """S(theta) and log ||T~ e~_theta|| for T~ = [[a, conj b], [b, conj a]]."""
    z = np.exp(1j * np.asarray(theta, float))
    top = a * z + np.conj(b) * np.conj(z)
    bottom = b * z + np.conj(a) * np.conj(z)
    r = np.abs(top)
    if np.any(r == 0):
        raise ValueError("T~ e~_theta vanished; coefficients violate |a|^2 - |b|^2 = 1")
    if np.max(np.abs(bottom - np.conj(top))) > 1e-12 * max(1.0, float(np.max(r))):
        raise ValueError("components are not complex conjugates")
    return canon(np.angle(top)), np.log(r)


def norm_identity(a, b, theta):
    """1 + 2 Re(a b e^{2 i theta}) + 2 |b|^2."""
    return 1 + 2 * np.real(a * b * np.exp(2j * np.asarray(theta))) + 2 * np.abs(b) ** 2


def _check_form(M, rtol=1e-10):
    M = np.asarray(M, complex)
    scale = max(1.0, float(np.max(np.abs(M))))
    if (abs(M[1, 1] - np.conj(M[0, 0])) > rtol * scale
            or abs(M[0, 1] - np.conj(M[1, 0])) > rtol * scale):
        raise ValueError("matrix is not of the form [[a, conj b], [b, conj a]]")
    return M[0, 0], M[1, 0]


def sup_norm_identity(M, grid=THETA_GRID):
    """sup_theta ||M e~_theta|| for M = [[a, conj b], [b, conj a]].

    ||M e~_theta||^2 = |a|^2 + |b|^2 + 2 Re(a b e^{2 i theta}) peaks at
    (|a| + |b|)^2; the grid maximum is checked against it.
    """
    a, b = _check_form(M)
    theta = np.arange(grid) * TWO_PI / grid
    v = e_tilde(theta) @ np.asarray(M).T
    on_grid = float(np.max(np.linalg.norm(v, axis=-1)))
    exact = abs(a) + abs(b)
    if on_grid > exact * (1 + 1e-12):
        raise ArithmeticError("grid sup exceeds the closed form")
    return exact


def theta_pair_bound(A):
    """sqrt 2 * max(||A e_0||, ||A e_{pi/2}||), an upper bound for ||A||."""
    A = np.asarray(A)
    return np.sqrt(2) * max(np.linalg.norm(A[:, 0]), np.linalg.norm(A[:, 1]))


# -- sums along words -------------------------------------------------------

def _letters(word, start, N):
    if isinstance(word, Word):
        return np.ascontiguousarray(word.cells(start, start + N))
    return np.ascontiguousarray(np.asarray(word, np.uint8)[start:start + N])


def deviation_sum(word, coeffs, delta, theta0, N, start=0, with_angles=False):
    """I_k = sum_{l<k} c_{w_l} e^{2 i S^l(theta0)} for k = 0..N.

    Angles follow S^{l+1} = S_{delta, w_l} o S^l with the exact action.
    """
    if delta * delta * N > 1:
        warnings.warn(f"delta^2 N = {delta * delta * N:.3g} > 1; outside the large-deviation regime",
                      stacklevel=2)
    letters = _letters(word, start, N)
    a, b = coeffs.ab(delta)
    sums, zs, logf = K.theta_walk(letters, np.asarray(a, complex), np.asarray(b, complex),
                                  np.asarray(coeffs.c, complex), complex(np.exp(1j * theta0)))
    if with_angles:
        return sums, canon(np.angle(zs)), logf
    return sums


def lognorm_reconstruction(word, coeffs, delta, m, k, grid=THETA_GRID):
    """(predicted, actual) for log ||T_w(k, m, E_c + delta)||^2.

    predicted = 2 delta sup_theta Re sum_{l=m}^{k-1} c_{w_l} e^{2 i S^{l,m}(theta)},
    the sup over a theta grid; actual from the transfer module.
    """
    letters = _letters(word, m, k - m)
    a, b = coeffs.ab(delta)
    theta = np.arange(grid) * TWO_PI / grid
    finals = _final_sums(letters, np.asarray(a, complex), np.asarray(b, complex),
                         np.asarray(coeffs.c, complex), np.exp(1j * theta))
    predicted = 2 * delta * float(np.max(np.real(finals)))
    if coeffs.cells is None:
        T = coeffs.tilde(delta)
        prod = K.chain_product(np.ascontiguousarray(T[letters]), RENORM_EVERY)
    else:
        model = PotentialModel(coeffs.cells, word if isinstance(word, Word) else Word.from_letters(word))
        prod = word_matrix(model, m, k, coeffs.E_c + delta)
    actual = 2 * float(np.log(op_norm(prod)))
    return predicted, actual


def _final_sums(letters, a, b, c, z):
    z = z.copy()
    s = np.zeros_like(z)
    for j in letters:
        s += c[j] * z * z
        v = a[j] * z + np.conj(b[j]) * np.conj(z)
        z = v / np.abs(v)
    return s


def fit_error_model(deltas, horizons, discrepancies):
    """Smallest envelope A delta^2 (k - m) + B over |discrepancy| (A, B >= 0).

    A from a nonnegative least-squares fit, then B lifted so the envelope
    covers every sample.
    """
    x = np.asarray(deltas, float) ** 2 * np.asarray(horizons, float)
    y = np.abs(np.asarray(discrepancies, float))
    A, _ = nnls(np.column_stack([x, np.ones_like(x)]), y)
    A = float(A[0])
    B = float(max(0.0, np.max(y - A * x)))
    return A, B


# -- large deviations ---------------------------------------------------------

@dataclass
class DeviationStats:
    N: int
    alpha: float
    theta0: tuple
    delta: tuple
    exceed_count: int
    trials: int
    bound: float = float("nan")
    bound_violations: int = 0
    grid_points: int = 0
    max_sum: float = 0.0

    def __post_init__(self):
        if self.exceed_count > self.trials:
            raise ValueError("exceed_count cannot exceed trials")

    @property
    def fraction(self):
        return self.exceed_count / self.trials

    def merge(self, other):
        if (self.N, self.alpha) != (other.N, other.alpha):
            raise ValueError("can only merge stats of the same experiment")
        return DeviationStats(
            self.N, self.alpha, self.theta0, self.delta,
            self.exceed_count + other.exceed_count, self.trials + other.trials,
            max(self.bound, other.bound), self.bound_violations + other.bound_violations,
            max(self.grid_points, other.grid_points), max(self.max_sum, other.max_sum))

    def to_record(self):
        return {"N": self.N, "alpha": self.alpha, "theta0": list(self.theta0),
                "delta": list(self.delta), "exceed_count": self.exceed_count,
                "trials": self.trials, "fraction": self.fraction, "C_estimate": self.bound,
                "bound_violations": self.bound_violations, "grid_points": self.grid_points,
                "max_sum": self.max_sum}


def excluded_set_estimate(coeffs, p, alpha, N, trials, seed, stream=0, bridge=np.e,
                          thetas=(0.0, np.pi / 2), spot_checks=0):
    """Monte Carlo size of the excluded set near E_c, with a bridged norm bound.

    Trial t reads letters 0..2N-1 of stream `stream + t`.  A realization is
    excluded once |I_k(theta, delta)| >= (2N)^{alpha + 1/2} for some k <= 2N,
    theta in `thetas` and grid delta.  The delta grid covers
    |delta| <= N^{-alpha - 1/2}: each next point lies one Gronwall radius
    ln(bridge) / (L 2N) further, L being the largest (max_x ||P_x||_F)^2 over
    realizations still in play.  Between grid points every kept realization
    then obeys ||T(x, y)|| <= bridge * L for 0 <= x, y <= 2N.
    spot_checks > 0 re-measures the exact sup at random off-grid deltas.
    """
    if coeffs.phase_gap < 1e-9:
        raise ValueError("phase condition fails: eta0 - eta1 is a multiple of pi")
    if coeffs.cells is None:
        raise ValueError("need certificate-backed coefficients (cells) for the norm bound")
    span = 2 * N
    letters = np.stack([sample_letters(BernoulliSource(p, seed, stream + t), 0, span)
                        for t in range(trials)])
    eps = N ** (-alpha - 0.5)
    threshold = span ** (alpha + 0.5)
    z0 = np.exp(1j * np.asarray(thetas, float))
    c = np.asarray(coeffs.c, complex)
    alive = np.ones(trials, bool)
    bound = 0.0
    max_sum = 0.0
    delta = -eps
    grid = 0
    while True:
        a, b = coeffs.ab(delta)
        idx = np.nonzero(alive)[0]
        if idx.size:
            best = K.theta_walk_max(letters[idx], np.asarray(a, complex), np.asarray(b, complex),
                                    c, z0).max(axis=1)
            max_sum = max(max_sum, float(best.max()))
            alive[idx[best >= threshold]] = False
        lm = _cell_mats(coeffs, delta)
        L = 1.0
        for t in np.nonzero(alive)[0]:
            L = max(L, K.prefix_max_frobenius(lm, letters[t]) ** 2)
        grid += 1
        bound = max(bound, bridge * L)
        if delta >= eps:
            break
        delta = min(eps, delta + np.log(bridge) / (L * span))
    violations = 0
    if spot_checks:
        rng = np.random.default_rng([seed, N, 7])
        kept = np.nonzero(alive)[0]
        for _ in range(spot_checks if kept.size else 0):
            t = rng.choice(kept)
            d = rng.uniform(-eps, eps)
            prods = K.indexed_prefix_products(_cell_mats(coeffs, d), letters[t], RENORM_EVERY)
            violations += sup_pair_norm(prods) > bound
    exceed = int(trials - alive.sum())
    return DeviationStats(N, alpha, tuple(float(t) for t in thetas), (-eps, eps), exceed, trials,
                          float(bound), int(violations), grid, max_sum)


def _cell_mats(coeffs, delta):
    E = coeffs.E_c + delta
    return np.ascontiguousarray(np.stack([cell_matrix(g, E) for g in coeffs.cells]))
