"""Periodic parents: discriminants, bands, critical energies, diagonalizers.

T_j(E) is the unit-cell matrix of letter j.  An energy is critical when the
two cell matrices commute and sits inside both periodic spectra.  The
diagonalizer F = (v+, v-) is built from eigenvectors of one cell matrix
that depend analytically on E, including at closed gaps where T = +-I.
"""
import json
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .transfer import propagate, op_norm

__all__ = [
    "cell_matrix", "discriminant", "band_scan", "bands", "commutator",
    "CriticalEnergyCert", "find_critical_energies", "diagonalize_pair",
    "AnalyticEigenData", "analytic_eigenvector", "conjugated_pair",
    "real_conjugator", "rotation",
]

COMM_TOL = 1e-10
GRID = 1e-3
INTERIOR_SLACK = 1e-6
FD_STEP = 1e-4
_OUTSIDE = 2.0 + 1e-10   # |D| above this counts as a gap
_PM_I_TOL = 1e-8
_SCAN_RADIUS = 1.0

_Q = np.array([[1.0, 1j], [1.0, -1j]]) / np.sqrt(2.0)

Diagonalization = namedtuple("Diagonalization", "F a0 b0 a1 b1 source")
EigenSample = namedtuple("EigenSample", "E rho_plus c_plus v_plus branch_tag")


def cell_matrix(cell, E):
    return propagate(cell, E)


def discriminant(cell, E):
    """D(E) = trace of the cell matrix; real for real E."""
    m = cell_matrix(cell, E)
    d = m[..., 0, 0] + m[..., 1, 1]
    if not np.iscomplexobj(np.asarray(E)):
        d = np.real(d)
    return d


def _d5(f, x, h=FD_STEP):
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


def _d5_second(f, x, h=FD_STEP):
    return (-f(x - 2 * h) + 16 * f(x - h) - 30 * f(x) + 16 * f(x + h) - f(x + 2 * h)) / (12 * h * h)


def band_scan(cells, window, spacing=GRID):
    """Rows (E, D_0, D_1, ...) on a uniform grid over the window."""
    lo, hi = window
    n = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
    E = lo + spacing * np.arange(n)
    cols = [E] + [discriminant(c, E) for c in cells]
    return np.column_stack(cols)


def bands(cell, window, spacing=GRID):
    """Band intervals |D| <= 2 inside the window, edges bisected to 1e-12."""
    E, D = band_scan([cell], window, spacing).T
    inside = np.abs(D) <= 2.0
    f = lambda e: abs(float(discriminant(cell, e))) - 2.0
    out = []
    start = E[0] if inside[0] else None
    for i in range(1, len(E)):
        if inside[i] and not inside[i - 1]:
            start = brentq(f, E[i - 1], E[i], xtol=1e-12)
        elif inside[i - 1] and not inside[i]:
            out.append((start, brentq(f, E[i - 1], E[i], xtol=1e-12)))
            start = None
    if start is not None:
        out.append((start, E[-1]))
    return out


def commutator(A, B):
    return A @ B - B @ A


def rotation(eta):
    c, s = np.cos(eta), np.sin(eta)
    return np.array([[c, -s], [s, c]])


def real_conjugator(F):
    """Real M with M T M^{-1} in rotation form whenever F^{-1} T F = diag(rho, conj rho)."""
    R = F @ _Q
    if np.max(np.abs(R.imag)) > 1e-9 * max(1.0, np.max(np.abs(R))):
        raise ValueError("columns of F are not complex conjugates")
    return np.linalg.inv(R.real)


def _phase(z):
    eta = float(np.angle(z) % (2 * np.pi))
    return 0.0 if eta > 2 * np.pi - 1e-12 else eta


def _pm_identity(T, tol=_PM_I_TOL):
    """+1 or -1 when T = +-I, else 0."""
    for s in (1.0, -1.0):
        if np.max(np.abs(T - s * np.eye(2))) <= tol:
            return int(s)
    return 0


def _sqrt_4_minus_d2(T):
    # 4 - D^2 = -(a - d)^2 - 4 b c when det = 1; no cancellation near +-I
    a, b, c, d = T[..., 0, 0], T[..., 0, 1], T[..., 1, 0], T[..., 1, 1]
    return -(a - d) ** 2 - 4 * b * c


# -- interior of the spectrum --------------------------------------------------

def _edge_distance(cell, E0, direction, radius=_SCAN_RADIUS, spacing=GRID):
    """Distance from E0 to the first gap point in one direction (capped)."""
    steps = spacing * np.arange(1, int(radius / spacing) + 1)
    pts = E0 + direction * steps
    D = np.abs(discriminant(cell, pts))
    out = np.nonzero(D > _OUTSIDE)[0]
    if out.size == 0:
        return radius
    i = out[0]
    a = E0 if i == 0 else pts[i - 1]
    b = pts[i]
    g = lambda e: abs(float(discriminant(cell, e))) - _OUTSIDE
    if g(a) > 0:
        return 0.0
    return abs(brentq(g, min(a, b), max(a, b), xtol=1e-13) - E0)


def degenerate_edge(cell, E0):
    """True when T(E0) = +-I and D has a strict extremum there pointing into the band."""
    T = cell_matrix(cell, E0)
    s = _pm_identity(T)
    if s == 0:
        return False
    d2 = _d5_second(lambda e: float(discriminant(cell, e)), E0)
    return s * d2 < -1e-8


def interior_margin(cell, E0):
    """Radius of the symmetric interval around E0 that stays inside the band.

    Zero when E0 is not certified interior: |D| must be <= 2 - 1e-6 at E0,
    or E0 must be a closed gap.
    """
    D0 = abs(float(discriminant(cell, E0)))
    if D0 > 2.0 - INTERIOR_SLACK and not degenerate_edge(cell, E0):
        return 0.0
    return min(_edge_distance(cell, E0, -1), _edge_distance(cell, E0, +1))


# -- analytic eigenvectors ------------------------------------------------

@dataclass(frozen=True)
class AnalyticEigenData:
    """rho_+(E), c_+(E), v_+ = (1, c_+) on an interval around E_c.

    interior: rho_+ = (D + i sqrt(4 - D^2))/2 with the standard root.
    degenerate_edge: the root is continued through E_c, taken positive for
    E > E_c and negative below.
    """
    cell: object
    E_c: float
    branch_tag: str
    radius: float
    c_at_center: complex = field(default=None)

    def _check(self, E):
        if np.any(np.abs(np.asarray(E) - self.E_c) >= self.radius):
            raise ValueError(f"E outside the analytic interval of radius {self.radius:.3g}")

    def _rho(self, E, T):
        root = np.sqrt(np.maximum(np.real(_sqrt_4_minus_d2(T)), 0.0))
        if self.branch_tag == "degenerate_edge":
            root = np.where(np.asarray(E) >= self.E_c, root, -root)
        D = np.real(T[..., 0, 0] + T[..., 1, 1])
        return 0.5 * (D + 1j * root)

    def rho_plus(self, E):
        self._check(E)
        return self._rho(E, cell_matrix(self.cell, np.asarray(E, float)))

    def c_plus(self, E):
        self._check(E)
        E = np.asarray(E, float)
        T = cell_matrix(self.cell, E)
        c = (self._rho(E, T) - T[..., 0, 0]) / T[..., 0, 1]
        if self.branch_tag == "degenerate_edge":
            c = np.where(np.abs(E - self.E_c) < 1e-12, self.c_at_center, c)
        return c

    def v_plus(self, E):
        c = self.c_plus(E)
        return np.stack([np.ones_like(c), c], axis=-1)

    def F(self, E):
        c = self.c_plus(E)
        out = np.empty(np.shape(c) + (2, 2), complex)
        out[..., 0, 0] = 1.0
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = c
        out[..., 1, 1] = np.conj(c)
        return out

    def sample(self, E):
        return EigenSample(np.asarray(E, float), self.rho_plus(E), self.c_plus(E),
                           self.v_plus(E), self.branch_tag)


def _build_eigen(cell, E_c):
    T = cell_matrix(cell, E_c)
    D = float(np.real(T[0, 0] + T[1, 1]))
    if abs(D) < 2.0 - INTERIOR_SLACK:
        radius = min(_edge_distance(cell, E_c, -1), _edge_distance(cell, E_c, +1))
        return AnalyticEigenData(cell, float(E_c), "interior", radius)
    if not degenerate_edge(cell, E_c):
        raise ValueError(f"E_c={E_c} is not interior: |D|={abs(D):.12g} without a closed gap")
    radius = min(_edge_distance(cell, E_c, -1), _edge_distance(cell, E_c, +1))
    draft = AnalyticEigenData(cell, float(E_c), "degenerate_edge", radius)
    # l'Hopital: numerator and denominator of c_+ both vanish to first order
    num = _d5(lambda e: draft._rho(e, cell_matrix(cell, e)) - cell_matrix(cell, e)[0, 0], E_c)
    den = _d5(lambda e: cell_matrix(cell, e)[0, 1], E_c)
    return AnalyticEigenData(cell, float(E_c), "degenerate_edge", radius, complex(num / den))


def analytic_eigenvector(cell, E_c, E=None):
    """Analytic eigen-data of the cell matrix around E_c; sampled at E when given."""
    data = _build_eigen(cell, E_c)
    return data if E is None else data.sample(E)


# -- diagonalizing a commuting pair ------------------------------------------

def _tilde(F, T):
    return np.linalg.solve(F, T @ F)


def diagonalize_pair(T0, T1, context=None, which="auto"):
    """F with F^{-1} T_j F = [[a_j, conj b_j], [b_j, conj a_j]] and b_j = 0 at E_c.

    context = (cells, E_c) allows closed-gap eigenvectors; without it a
    +-I pair gets F = I.  which: "auto" picks the cell with |D| < 2,
    or an explicit 0 / 1.
    """
    T0 = np.asarray(T0, float)
    T1 = np.asarray(T1, float)
    T = (T0, T1)
    scale = max(1.0, np.max(np.abs(T0)) * np.max(np.abs(T1)))
    if np.linalg.norm(commutator(T0, T1)) > 1e-8 * scale:
        raise ValueError("matrices do not commute")
    D = [float(np.trace(t)) for t in T]
    pm = [_pm_identity(t) for t in T]
    strict = [abs(d) < 2.0 - INTERIOR_SLACK for d in D]
    for j in (0, 1):
        if not strict[j] and pm[j] == 0 and abs(D[j]) <= 2.0 + 1e-9:
            raise ValueError(f"not critical: cell {j} is parabolic but not +-I")
        if abs(D[j]) > 2.0 + 1e-9:
            raise ValueError(f"not critical: cell {j} is hyperbolic (|D|={abs(D[j]):.6g})")
    if which == "auto":
        which = 0 if strict[0] else (1 if strict[1] else 0)
    which = int(which)
    if strict[which]:
        if context is not None:
            cells, E_c = context
            F = analytic_eigenvector(cells[which], E_c).F(E_c)
        else:
            Tw = T[which]
            rho = 0.5 * (D[which] + 1j * np.sqrt(4.0 - D[which] ** 2))
            c = (rho - Tw[0, 0]) / Tw[0, 1]
            F = np.array([[1.0, 1.0], [c, np.conj(c)]])
    elif context is not None:
        cells, E_c = context
        F = analytic_eigenvector(cells[which], E_c).F(E_c)
    else:
        if pm[0] == 0 or pm[1] == 0:
            raise ValueError("non-strict diagonalizer needs a closed gap (T = +-I)")
        F = np.eye(2, dtype=complex)
    t0, t1 = _tilde(F, T0), _tilde(F, T1)
    return Diagonalization(F, t0[0, 0], t0[1, 0], t1[0, 0], t1[1, 0], which)


def conjugated_pair(cells, E_c, E, which):
    """T~_0(E), T~_1(E) with the analytic F(E) of cell `which`."""
    data = _build_eigen(cells[which], E_c)
    E = np.asarray(E, float)
    F = data.F(E)
    out = []
    for g in cells:
        out.append(np.linalg.solve(F, cell_matrix(g, E) @ F))
    return out


# -- critical energies ---------------------------------------------------

@dataclass
class CriticalEnergyCert:
    E0: float
    eta0: float
    eta1: float
    F: np.ndarray
    commutator_residual: float
    interior_margins: tuple
    diagonalizer: int
    degenerate: bool = False

    @property
    def condition(self):
        """||F|| ||F^-1||; bounds every integer-endpoint transfer norm at E0."""
        return float(op_norm(self.F) * op_norm(np.linalg.inv(self.F)))

    @property
    def phase_gap_ok(self):
        """eta0 - eta1 not a multiple of pi."""
        d = (self.eta0 - self.eta1) % np.pi
        return min(d, np.pi - d) > 1e-9

    def rotation_residual(self, cells):
        M = real_conjugator(self.F)
        Minv = np.linalg.inv(M)
        worst = 0.0
        for g, eta in zip(cells, (self.eta0, self.eta1)):
            R = M @ cell_matrix(g, self.E0) @ Minv
            worst = max(worst, float(np.max(np.abs(R - rotation(eta)))))
        return worst

    def to_record(self):
        return {
            "E0": self.E0,
            "eta0": self.eta0,
            "eta1": self.eta1,
            "residual": self.commutator_residual,
            "margins": list(self.interior_margins),
            "diagonalizer": self.diagonalizer,
            "degenerate": self.degenerate,
            "F": [[float(z.real), float(z.imag)] for z in self.F.ravel()],
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)


def _certify(g0, g1, E0, degenerate=False, which="auto"):
    cells = (g0, g1)
    T0, T1 = cell_matrix(g0, E0), cell_matrix(g1, E0)
    res = float(np.linalg.norm(commutator(T0, T1)))
    margins = (interior_margin(g0, E0), interior_margin(g1, E0))
    if min(margins) <= 0:
        return None
    try:
        dg = diagonalize_pair(T0, T1, (cells, E0), which)
    except ValueError:
        return None
    return CriticalEnergyCert(float(E0), _phase(dg.a0), _phase(dg.a1), dg.F, res,
                              margins, dg.source, degenerate)


def _entry_roots(E, vals, f):
    roots = []
    sgn = np.sign(vals)
    for i in np.nonzero(sgn == 0)[0]:
        roots.append(E[i])
    for i in np.nonzero(sgn[:-1] * sgn[1:] < 0)[0]:
        roots.append(brentq(f, E[i], E[i + 1], xtol=1e-12, rtol=4 * np.finfo(float).eps))
    return roots


def find_critical_energies(g0, g1, window, spacing=GRID, tol=COMM_TOL, which="auto"):
    """Certified critical energies in the window, sorted.

    Candidates come from sign changes of each commutator entry and from
    local minima of its Frobenius norm (touching zeros); each is kept only
    with residual <= tol and positive interior margins for both cells.
    A commutator that vanishes on the whole grid (g0 = g1) yields one
    representative per band, flagged degenerate.
    """
    lo, hi = window
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise ValueError("window must be a bounded interval")
    E = lo + spacing * np.arange(int(np.floor((hi - lo) / spacing)) + 1)
    E = E[(E > lo) & (E < hi)]
    C = commutator(cell_matrix(g0, E), cell_matrix(g1, E))
    scale = np.max(np.abs(C)) if C.size else 0.0
    if scale <= 1e-12:
        out = []
        for a, b in bands(g0, window, spacing):
            cert = _certify(g0, g1, 0.5 * (a + b), degenerate=True, which=which)
            if cert is not None:
                out.append(cert)
        return out

    def entry(i, k):
        return lambda e: float(commutator(cell_matrix(g0, e), cell_matrix(g1, e))[i, k])

    cand = []
    for i, k in ((0, 0), (0, 1), (1, 0)):
        vals = C[:, i, k]
        if np.max(np.abs(vals)) <= 1e-12 * max(scale, 1.0):
            continue  # identically zero entry
        cand.extend(_entry_roots(E, vals, entry(i, k)))
    fro = np.sqrt(np.sum(np.abs(C) ** 2, axis=(-2, -1)))
    fro_fn = lambda e: float(np.linalg.norm(commutator(cell_matrix(g0, e), cell_matrix(g1, e))))
    for i in np.nonzero((fro[1:-1] < fro[:-2]) & (fro[1:-1] <= fro[2:]) & (fro[1:-1] < 1e-3))[0] + 1:
        r = minimize_scalar(fro_fn, bounds=(E[i - 1], E[i + 1]), method="bounded",
                            options={"xatol": 1e-13})
        cand.append(float(r.x))
    cand.sort()
    out = []
    for e0 in cand:
        if out and abs(e0 - out[-1].E0) < 1e-8:
            continue
        if fro_fn(e0) > tol:
            continue
        cert = _certify(g0, g1, e0, which=which)
        if cert is not None:
            out.append(cert)
    return out
