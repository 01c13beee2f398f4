"""Time-averaged transport moments from resolvents.

    M_f(T, p) = (1/(pi T)) int dE int |x|^p |u_{f, E+i/T}(x)|^2 dx,
    u_{f,z} = (H - z)^{-1} f.

No time evolution happens here.  u is assembled by variation of constants
from a solution regular on the left (Dirichlet at 0 on the half line, decaying
to the left on the whole line) and one decaying to the right.  The right tail
(and left tail) is swept cell by cell in `_kernels.tail_sweep`, which also
accumulates the weighted norms, so the solution itself is only stored when a
single z is asked for (`solve_resolvent`).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import special

from . import _kernels as K
from .transfer import PotentialModel, adj2, cos_sqrt, propagate, sinc_sqrt

# G7-K15 (QUADPACK qk15)
_XGK = np.array([0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                 0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                 0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                 0.207784955007898467600689403773245, 0.0])
_WGK = np.array([0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                 0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                 0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                 0.204432940075298892414161999234649, 0.209482141084727828012999174891714])
_WG7 = np.array([0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                 0.381830050505118944950369775488975, 0.417959183673469387755102040816327])


def _gk15_rule():
    x = np.concatenate([-_XGK[:7], _XGK[7:][::-1], _XGK[:7][::-1]])
    wk = np.concatenate([_WGK[:7], _WGK[7:], _WGK[:7][::-1]])
    wg_half = np.zeros(8)
    wg_half[[1, 3, 5, 7]] = _WG7
    wg = np.concatenate([wg_half[:7], wg_half[7:], wg_half[:7][::-1]])
    order = np.argsort(x)
    return x[order], wk[order], wg[order]


GK_X, GK_WK, GK_WG = _gk15_rule()

INNER_NODES = 10
INNER_PANELS_PER_CELL = 4
EDGE_TOL = 1e-10          # |psi(R)|^2 / |psi(inner)|^2 before a Dirichlet cut is accepted
TAIL_TOL = 1e-6           # share of the last swept cell in the running tail norm
WRONSKIAN_MIN = 1e-12
R_START = 64
CHUNK = 2048
NEAR_CELLS = 8            # direct Gram matrices below this |x| for non-integer p
BINOM_TERMS = 17


class ResolventError(ArithmeticError):
    """Numerical failure of a resolvent solve."""


# -- initial states --------------------------------------------------------

def _phi1(w):
    # (e^w - 1)/w
    w = np.asarray(w, complex)
    small = np.abs(w) < 1e-3
    safe = np.where(small, 1.0, w)
    ser = 1 + w / 2 + w ** 2 / 6 + w ** 3 / 24 + w ** 4 / 120
    return np.where(small, ser, np.expm1(safe) / safe)


def _phi2(w):
    # int_0^1 t e^{wt} dt
    w = np.asarray(w, complex)
    small = np.abs(w) < 1e-3
    safe = np.where(small, 1.0, w)
    ser = 0.5 + w / 3 + w ** 2 / 8 + w ** 3 / 30 + w ** 4 / 144
    return np.where(small, ser, (np.exp(safe) * (safe - 1) + 1) / safe ** 2)


def _exp_integral(alpha, a, b):
    """int_a^b e^{alpha x} dx, entire in alpha."""
    return np.exp(alpha * a) * (b - a) * _phi1(alpha * (b - a))


_KINDS = ("indicator", "constant", "sine", "cosine", "profile")


@dataclass(frozen=True, eq=False)
class InitialState:
    """Compactly supported f on [a, b].

    sine/cosine: amplitude * sin|cos(mode pi (x - a)/(b - a)); profile is the
    piecewise-linear interpolant of (xs, values).
    """
    kind: str
    a: float
    b: float
    amplitude: float = 1.0
    mode: int = 1
    xs: np.ndarray = None
    values: np.ndarray = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown initial state kind {self.kind!r}")
        if self.kind == "profile":
            xs = np.asarray(self.xs, float)
            vs = np.asarray(self.values, float)
            if xs.ndim != 1 or xs.shape != vs.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
                raise ValueError("profile needs increasing xs with matching values")
            if not np.all(np.isfinite(vs)):
                raise ValueError("profile values must be finite")
            object.__setattr__(self, "xs", xs)
            object.__setattr__(self, "values", vs)
            object.__setattr__(self, "a", float(xs[0]))
            object.__setattr__(self, "b", float(xs[-1]))
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or self.b <= self.a:
            raise ValueError("support must be a finite interval a < b")
        if not self.norm2() > 0:
            raise ValueError("initial state has zero norm")

    @classmethod
    def indicator(cls, a=0.0, b=1.0):
        return cls("indicator", float(a), float(b))

    @classmethod
    def constant(cls, a, b, value):
        return cls("constant", float(a), float(b), amplitude=float(value))

    @classmethod
    def sine(cls, a, b, mode=1, amplitude=1.0):
        return cls("sine", float(a), float(b), float(amplitude), int(mode))

    @classmethod
    def cosine(cls, a, b, mode=0, amplitude=1.0):
        return cls("cosine", float(a), float(b), float(amplitude), int(mode))

    @classmethod
    def profile(cls, xs, values):
        xs = np.asarray(xs, float)
        return cls("profile", float(xs[0]), float(xs[-1]), xs=xs, values=values)

    @classmethod
    def from_function(cls, func, a, b, n=257):
        xs = np.linspace(a, b, n)
        return cls.profile(xs, np.asarray(func(xs), float))

    @classmethod
    def from_csv(cls, path):
        data = np.genfromtxt(path, delimiter=",", comments="#")
        data = data[np.all(np.isfinite(data), axis=1)]
        return cls.profile(data[:, 0], data[:, 1])

    @property
    def length(self):
        return self.b - self.a

    @property
    def _nu(self):
        return self.mode * np.pi / self.length

    def __call__(self, x):
        x = np.asarray(x, float)
        inside = (x >= self.a) & (x <= self.b)
        if self.kind in ("indicator", "constant"):
            val = np.full(x.shape, self.amplitude)
        elif self.kind == "sine":
            val = self.amplitude * np.sin(self._nu * (x - self.a))
        elif self.kind == "cosine":
            val = self.amplitude * np.cos(self._nu * (x - self.a))
        else:
            val = np.interp(x, self.xs, self.values)
        return np.where(inside, val, 0.0)

    def norm2(self):
        c2 = self.amplitude ** 2
        if self.kind in ("indicator", "constant"):
            return c2 * self.length
        if self.kind == "sine":
            return c2 * self.length / 2 if self.mode != 0 else 0.0
        if self.kind == "cosine":
            return c2 * self.length * (1.0 if self.mode == 0 else 0.5)
        v0, v1 = self.values[:-1], self.values[1:]
        return float(np.sum(np.diff(self.xs) * (v0 * v0 + v0 * v1 + v1 * v1) / 3))

    def breakpoints(self):
        if self.kind == "profile" and self.xs.size <= 65:
            return self.xs.copy()
        return np.array([self.a, self.b])

    def jumps(self):
        """(position, jump) of f across each discontinuity."""
        left = float(self(np.array(self.a)))
        right = float(self(np.array(self.b)))
        out = []
        if left != 0.0:
            out.append((self.a, left))
        if right != 0.0:
            out.append((self.b, -right))
        return out

    def fourier(self, k):
        """int f(x) e^{-ikx} dx, closed form for every kind."""
        k = np.asarray(k, float)
        al = -1j * k
        a, b = self.a, self.b
        if self.kind in ("indicator", "constant"):
            return self.amplitude * _exp_integral(al, a, b)
        if self.kind in ("sine", "cosine"):
            nu = self._nu
            up = np.exp(-1j * nu * a) * _exp_integral(1j * nu + al, a, b)
            dn = np.exp(1j * nu * a) * _exp_integral(-1j * nu + al, a, b)
            if self.kind == "sine":
                return self.amplitude * (up - dn) / 2j
            return self.amplitude * (up + dn) / 2
        out = np.zeros(k.shape, complex)
        x0, h = self.xs[:-1], np.diff(self.xs)
        v0 = self.values[:-1]
        slope = np.diff(self.values) / h
        flat = al.ravel()
        res = np.zeros(flat.shape, complex)
        for lo in range(0, flat.size, 4096):
            w = flat[lo:lo + 4096, None]
            base = np.exp(w * x0)
            seg = base * (v0 * h * _phi1(w * h) + slope * h * h * _phi2(w * h))
            res[lo:lo + 4096] = seg.sum(axis=1)
        out[...] = res.reshape(k.shape)
        return out

    def grid(self, n=257):
        x = np.linspace(self.a, self.b, n)
        return x, self(x)

    def to_record(self):
        rec = {"kind": self.kind, "a": self.a, "b": self.b, "amplitude": self.amplitude,
               "mode": self.mode}
        if self.kind == "profile":
            rec["samples"] = int(self.xs.size)
        return rec


def _validate_line(f, line):
    if line not in ("half", "whole"):
        raise ValueError(f"line must be 'half' or 'whole', got {line!r}")
    if line == "half" and f.a < 0:
        raise ValueError("half-line initial states must live in [0, inf)")


# -- cell geometry -------------------------------------------------------

def _partials(g, E, ts):
    """Transfer matrices from 0 to t inside cell g; ts sorted in [0, 1]. (nE, nt, 2, 2)."""
    E = np.atleast_1d(np.asarray(E, complex))
    ts = np.asarray(ts, float)
    if g.is_step:
        q = E[:, None] - g.height
        w = np.sqrt(q)
        tiny = np.abs(w) < 1e-6
        if tiny.any():
            # series branch near the band bottom
            z = q * ts[None, :] ** 2
            c = cos_sqrt(z)
            s = ts * sinc_sqrt(z)
        else:
            e = np.exp(1j * w * ts[None, :])
            ei = 1.0 / e
            c = 0.5 * (e + ei)
            s = (e - ei) / (2j * w)
        out = np.empty(c.shape + (2, 2), complex)
        out[..., 0, 0] = c
        out[..., 0, 1] = s
        out[..., 1, 0] = -q * s
        out[..., 1, 1] = c
        return out
    out = np.empty((E.size, ts.size, 2, 2), complex)
    acc = np.broadcast_to(np.eye(2, dtype=complex), (E.size, 2, 2))
    prev = 0.0
    for i, t in enumerate(ts):
        if t > prev:
            acc = g.partial_matrix(E, prev, t) @ acc
            prev = t
        out[:, i] = acc
    return out


def _gram_nodes(E, vlo):
    span = float(np.max(np.abs(np.asarray(E) - vlo), initial=1.0))  # complex E: |z - V|
    nq = int(min(96, 8 * math.ceil((16 + 1.5 * math.sqrt(span)) / 8)))
    t, w = np.polynomial.legendre.leggauss(nq)
    return 0.5 * (t + 1), 0.5 * w


def _jacobi_nodes(p, n):
    # int_0^1 t^p g(t) dt
    x, w = special.roots_jacobi(n, 0.0, p)
    return 0.5 * (x + 1), w * 0.5 ** (p + 1)


def _outer(r):
    return np.conj(r)[..., :, None] * r[..., None, :]


def _is_int(p):
    return float(p).is_integer()


def _right_rows(g, E, ts):
    """First rows r(t) with psi(t) = r(t) . (psi, psi')(1) inside cell g; (nE, nt, 2).

    Built from the reflected cell, so hyperbolic energies never cancel."""
    ts = np.asarray(ts, float)
    s = 1.0 - ts
    order = np.argsort(s)
    P = np.empty((np.size(E), ts.size, 2, 2), complex)
    P[:, order] = _partials(g.reflected(), E, s[order])
    return np.stack([P[..., 0, 0], -P[..., 0, 1]], axis=-1)


def _hermitian_table(m):
    return np.stack([m[..., 0, 0].real, m[..., 1, 1].real, m[..., 0, 1].real, m[..., 0, 1].imag],
                    axis=-1)


def _letter_tables(letter_map, E, ps):
    """Inverse cell matrices and Gram tables for the sweep kernel."""
    nE = E.size
    nP = len(ps)
    integer = all(_is_int(p) for p in ps)
    jtop = int(max(ps)) + 1 if integer else BINOM_TERMS
    n_near = 0 if integer else NEAR_CELLS
    vlo = min(g.bounds()[0] for g in letter_map)
    ts, wt = _gram_nodes(E, vlo)
    minv = np.empty((nE, 2, 2, 2), complex)
    gram = np.empty((nE, 2, jtop, 4))
    near = np.empty((nE, 2, nP, n_near, 4))
    for ell, g in enumerate(letter_map):
        minv[:, ell] = adj2(propagate(g, E))
        rr = _outer(_right_rows(g, E, ts))
        for j in range(jtop):
            gram[:, ell, j] = _hermitian_table(np.einsum("q,eqab->eab", wt * ts ** j, rr))
        for ip, p in enumerate(ps):
            for n in range(n_near):
                if n == 0 and not _is_int(p):
                    tj, wj = _jacobi_nodes(p, ts.size)
                    rj = _outer(_right_rows(g, E, tj))
                    m = np.einsum("q,eqab->eab", wj, rj)
                else:
                    m = np.einsum("q,eqab->eab", wt * (n + ts) ** p, rr)
                near[:, ell, ip, n] = _hermitian_table(m)
    nterms = np.array([int(p) + 1 if _is_int(p) else jtop for p in ps], np.int64)
    return minv, gram, near, nterms


def _binomial_coefs(ps, nterms, x0, R):
    """coef[k, ip, j] = binom(p, j) (x0 + k)^(p - j)."""
    n = (x0 + np.arange(R, dtype=float))[:, None]
    out = np.zeros((R, len(ps), int(nterms.max(initial=1))))
    for ip, p in enumerate(ps):
        j = np.arange(nterms[ip])
        with np.errstate(divide="ignore", invalid="ignore"):
            pw = np.where(n > 0, n ** (p - j), (p - j == 0).astype(float))
        out[:, ip, :nterms[ip]] = special.binom(p, j) * pw
    return out


def _exterior_tail(ps, w, b):
    """int_0^inf (w + s)^p e^{-b s} ds for each p; shape (nE, nP)."""
    b = np.asarray(b, float)
    out = np.empty((b.size, len(ps)))
    for ip, p in enumerate(ps):
        if _is_int(p):
            p = int(p)
            j = np.arange(p + 1)
            coef = special.binom(p, j) * float(w) ** (p - j) * special.factorial(j)
            out[:, ip] = np.sum(coef[None, :] / b[:, None] ** (j + 1), axis=1)
            continue
        x = b * w
        big = x > 50
        val = np.empty(b.size)
        xs = np.where(big, 1.0, x)
        val[~big] = (special.gammaincc(p + 1, xs) * special.gamma(p + 1) * np.exp(xs)
                     / b ** (p + 1))[~big]
        if big.any():
            # e^x x^{-p} Gamma(p+1, x) = sum_k (p)_k falling / x^k
            xb = x[big]
            term = np.ones_like(xb)
            s = np.ones_like(xb)
            for k in range(1, 25):
                term = term * (p + 1 - k) / xb
                s = s + term
            val[big] = s * float(w) ** p / b[big]
        out[:, ip] = val
    return out


@dataclass
class _Tail:
    psi0: np.ndarray      # unit Cauchy vector at the inner edge
    J: np.ndarray         # weighted norms in that normalization
    R: np.ndarray         # cells swept
    cap_hit: np.ndarray


def _next_cut(R, edge, cap, target):
    # extrapolate the observed decay rate; at least double, at most x16
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = -np.log(edge) / R
        guess = np.where(rate > 0, 1.25 * math.log(1.0 / target) / rate, 16 * R)
    return np.minimum(np.clip(np.ceil(guess), 2 * R, 16 * R).astype(np.int64), cap)


def _sweep(letter_map, letters, x0, E, ps, exterior, R0, edge_tol=EDGE_TOL, tail_tol=TAIL_TOL):
    """Decaying solution beyond the inner region, one side.  ps must end with its maximum."""
    nE = E.size
    nP = len(ps)
    cap = letters.size
    if exterior is not None:
        kappa = np.sqrt(E - exterior)
        v_init = np.stack([np.ones(nE, complex), 1j * kappa], axis=1)
        J_init = _exterior_tail(ps, x0 + cap, 2 * kappa.imag)
        if cap == 0:
            nrm = np.linalg.norm(v_init, axis=1)
            return _Tail(v_init / nrm[:, None], J_init / (nrm ** 2)[:, None],
                         np.zeros(nE, np.int64), np.zeros(nE, bool))
    minv, gram, near, nterms = _letter_tables(letter_map, E, ps)
    letters = np.ascontiguousarray(letters, np.uint8)
    if exterior is not None:
        R = np.full(nE, cap, np.int64)
        coef = _binomial_coefs(ps, nterms, x0, cap)
        psi0, J, _, _ = K.tail_sweep(letters, minv, gram, near, x0, coef, nterms, R,
                                     v_init, J_init)
        return _Tail(psi0, J, R, np.zeros(nE, bool))
    v_init = np.zeros((nE, 2), complex)
    v_init[:, 1] = 1.0
    J_init = np.zeros((nE, nP))
    R = np.full(nE, min(R0, cap), np.int64)
    psi0 = np.empty((nE, 2), complex)
    J = np.empty((nE, nP))
    cap_hit = np.zeros(nE, bool)
    todo = np.arange(nE)
    coef = _binomial_coefs(ps, nterms, x0, 0)
    while todo.size:
        rmax = int(R[todo].max())
        if coef.shape[0] < rmax:
            coef = _binomial_coefs(ps, nterms, x0, rmax)
        out = K.tail_sweep(letters, minv[todo], gram[todo], near[todo], x0, coef, nterms,
                           R[todo], v_init[todo], J_init[todo])
        psi0[todo], J[todo] = out[0], out[1]
        ok = (out[2] ** 2 <= edge_tol) & (out[3] <= tail_tol)
        at_cap = R[todo] >= cap
        cap_hit[todo[~ok & at_cap]] = True
        more = ~ok & ~at_cap
        R[todo[more]] = _next_cut(R[todo[more]], out[2][more], cap, math.sqrt(edge_tol) / 4)
        todo = todo[more]
    return _Tail(psi0, J, R, cap_hit)


# -- inner region ----------------------------------------------------------

@lru_cache(maxsize=16)
def _gl(n):
    return np.polynomial.legendre.leggauss(n)


@lru_cache(maxsize=8)
def _integration_matrix(n):
    """S[i, j] = int_{-1}^{x_i} l_j(s) ds for the Gauss-Legendre Lagrange basis."""
    x, _ = np.polynomial.legendre.leggauss(n)
    V = np.polynomial.legendre.legvander(x, n - 1)
    B = np.empty((n, n))
    B[:, 0] = x + 1
    for k in range(1, n):
        ek1 = np.zeros(k + 2)
        ek1[k + 1] = 1
        em1 = np.zeros(k)
        em1[k - 1] = 1
        B[:, k] = (np.polynomial.legendre.legval(x, ek1) - np.polynomial.legendre.legval(x, em1)) / (2 * k + 1)
    return B @ np.linalg.inv(V)


@dataclass
class _InnerGrid:
    cL: int
    cR: int
    x: np.ndarray          # nodes, increasing
    w: np.ndarray
    fx: np.ndarray
    panel_lo: np.ndarray   # panel edges
    panel_hi: np.ndarray
    cell_nodes: list       # per cell: (node slice, local offsets)
    S: np.ndarray

    @classmethod
    def for_energies(cls, f, line, E, vlo):
        # keep sqrt|E - V| times the panel width below 1.5
        k = math.sqrt(float(np.max(np.abs(np.asarray(E) - vlo), initial=0.0)))
        return cls.build(f, line, per_cell=max(INNER_PANELS_PER_CELL, math.ceil(k / 1.5)))

    @classmethod
    def build(cls, f, line, n_in=INNER_NODES, per_cell=INNER_PANELS_PER_CELL):
        cL = 0 if line == "half" else min(0, math.floor(f.a))
        cR = max(1, math.ceil(f.b))
        gx, gw = np.polynomial.legendre.leggauss(n_in)
        brk = set(np.linspace(cL, cR, (cR - cL) * per_cell + 1).tolist())
        brk.update(float(v) for v in f.breakpoints() if cL < v < cR)
        edges = np.array(sorted(brk))
        lo, hi = edges[:-1], edges[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        x = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        w = (half[:, None] * gw[None, :]).ravel()
        cells = []
        cell_of = np.floor(x).astype(np.int64)
        for n in range(cL, cR):
            idx = np.flatnonzero(cell_of == n)
            cells.append((idx, x[idx] - n))
        return cls(cL, cR, x, w, f(x), lo, hi, cells, _integration_matrix(n_in))

    @property
    def n_in(self):
        return self.S.shape[0]

    def cumulative(self, g, from_right=False):
        """int_{cL}^{x_i} g (or int_{x_i}^{cR} g) for g sampled at the nodes; (nE, N).

        Accumulating from the side where g is small keeps exponentially
        growing integrands free of cancellation.
        """
        nE = g.shape[0]
        gp = g.reshape(nE, -1, self.n_in)
        half = (0.5 * (self.panel_hi - self.panel_lo))[None, :, None]
        within = np.einsum("ij,epj->epi", self.S, gp) * half
        totals = np.einsum("j,epj->ep", _gl(self.n_in)[1], gp) * half[..., 0]
        if from_right:
            within = totals[..., None] - within
            after = np.cumsum(totals[:, ::-1], axis=1)[:, ::-1] - totals
            return (within + after[..., None]).reshape(nE, -1), totals.sum(axis=1)
        before = np.cumsum(totals, axis=1) - totals
        return (within + before[..., None]).reshape(nE, -1), totals.sum(axis=1)


def _apply(m, v):
    # batched 2x2 matrix times vector, broadcasting leading axes
    out = np.empty(np.broadcast_shapes(m.shape[:-2], v.shape[:-1]) + (2,), complex)
    out[..., 0] = m[..., 0, 0] * v[..., 0] + m[..., 0, 1] * v[..., 1]
    out[..., 1] = m[..., 1, 0] * v[..., 0] + m[..., 1, 1] * v[..., 1]
    return out


def _inner_solution(model, grid, E, phi_edge, psi_edge, derivative=False):
    """u at the inner nodes for unit f-coupling; returns (u, du, Phi(cR), Psi(cL), W)."""
    nE = E.size
    N = grid.x.size
    phi = np.empty((nE, N, 2), complex)
    psi = np.empty((nE, N, 2), complex)
    letters = model.word.cells(grid.cL, grid.cR)
    mats = []
    ph = phi_edge
    for (idx, ts), ell in zip(grid.cell_nodes, letters):
        P = _partials(model.letter_map[ell], E, np.append(ts, 1.0))
        mats.append(P[:, -1])
        phi[:, idx] = _apply(P[:, :-1], ph[:, None, :])
        ph = _apply(P[:, -1], ph)
    phi_R = ph
    ps_ = psi_edge
    flip = np.array([1.0, -1.0])
    for (idx, ts), M, ell in zip(reversed(grid.cell_nodes), reversed(mats), letters[::-1]):
        # reach the nodes backwards from the right cell edge: forward from the
        # left edge would push the decaying solution through the growing one
        back = 1.0 - ts[::-1]
        Pr = _partials(model.letter_map[ell].reflected(), E, back)[:, ::-1]
        psi[:, idx] = _apply(Pr, (ps_ * flip)[:, None, :]) * flip
        ps_ = _apply(adj2(M), ps_)
    W = psi_edge[:, 0] * phi_R[:, 1] - psi_edge[:, 1] * phi_R[:, 0]
    Phi, Phi_tot = grid.cumulative(phi[..., 0] * grid.fx)
    Psi, Psi_tot = grid.cumulative(psi[..., 0] * grid.fx, from_right=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (psi[..., 0] * Phi + phi[..., 0] * Psi) / W[:, None]
        du = (psi[..., 1] * Phi + phi[..., 1] * Psi) / W[:, None] if derivative else None
    return u, du, Phi_tot, Psi_tot, W


# -- batched resolvent norms ----------------------------------------------------

@dataclass
class ResolventNorms:
    """Weighted norms int |x|^p |u_{f,z}|^2 for many z at once."""
    z: np.ndarray
    ps: tuple
    norms: np.ndarray        # (nz, nP)
    pairing: np.ndarray      # <f, u_{f,z}>
    ubar_right: np.ndarray   # (u, u') at the right inner edge
    wronskian: np.ndarray
    cap_hit: np.ndarray
    R_right: np.ndarray
    R_left: np.ndarray


def _side_letters(model, grid, line):
    right = np.ascontiguousarray(model.word.cells(grid.cR, model.word.end_cell))
    left = None
    if line == "whole":
        left = np.ascontiguousarray(model.word.cells(model.word.first_cell, grid.cL)[::-1])
    return right, left


def _chunk(model, f, grid, line, z, ps, exterior, R0, letters):
    right_letters, left_letters = letters
    grid = _InnerGrid.for_energies(f, line, z, model.bounds()[0])
    right = _sweep(model.letter_map, right_letters, grid.cR, z, ps, exterior, R0)
    nE = z.size
    if line == "half":
        phi_edge = np.zeros((nE, 2), complex)
        phi_edge[:, 1] = 1.0
        left = None
    else:
        refl = tuple(g.reflected() for g in model.letter_map)
        left = _sweep(refl, left_letters, -grid.cL, z, ps, exterior, R0)
        phi_edge = left.psi0 * np.array([1.0, -1.0])
    u, _, Phi_R, Psi_L, W = _inner_solution(model, grid, z, phi_edge, right.psi0)
    ax = np.abs(grid.x)
    norms = np.empty((nE, len(ps)))
    u2 = np.abs(u) ** 2
    for ip, p in enumerate(ps):
        norms[:, ip] = u2 @ (grid.w * ax ** p)
    cR = Phi_R / W
    norms += np.abs(cR)[:, None] ** 2 * right.J
    cap_hit = right.cap_hit.copy()
    R_left = np.zeros(nE, np.int64)
    if left is not None:
        norms += np.abs(Psi_L / W)[:, None] ** 2 * left.J
        cap_hit |= left.cap_hit
        R_left = left.R
    pairing = u @ (grid.w * grid.fx)
    ubar = cR[:, None] * right.psi0
    return norms, pairing, ubar, W, cap_hit, right.R, R_left


def resolvent_norms(model, f, z, ps=(0.0,), line="half", exterior=None, R0=R_START,
                    threads=1, chunk=CHUNK):
    """int |x|^p |u_{f,z}(x)|^2 dx for every z (Im z > 0) and p in ps.

    exterior=None cuts the decaying solution with a Dirichlet condition at R,
    doubling R per z until the cut is invisible or the word window runs out
    (cap_hit).  exterior=V_inf instead treats the potential as the constant
    V_inf outside the word window, with exact exponential tails.
    """
    _validate_line(f, line)
    z = np.atleast_1d(np.asarray(z, complex))
    if np.any(z.imag <= 0):
        raise ValueError("resolvent needs Im z > 0")
    ps = tuple(float(p) for p in np.atleast_1d(ps))
    if any(p < 0 for p in ps):
        raise ValueError("moment orders must be nonnegative")
    grid = _InnerGrid.build(f, line)
    if grid.cL < model.word.first_cell or grid.cR > model.word.end_cell:
        raise ValueError("word window does not cover the support of f")
    letters = _side_letters(model, grid, line)
    p_order = np.argsort(ps, kind="stable")
    p_sorted = tuple(ps[i] for i in p_order)
    order = np.argsort(z.real, kind="stable")
    pieces = [order[i:i + chunk] for i in range(0, order.size, chunk)]

    def run(idx):
        return _chunk(model, f, grid, line, z[idx], p_sorted, exterior, R0, letters)

    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, pieces))
    else:
        results = [run(idx) for idx in pieces]
    nz = z.size
    norms = np.empty((nz, len(ps)))
    pairing = np.empty(nz, complex)
    ubar = np.empty((nz, 2), complex)
    W = np.empty(nz, complex)
    cap_hit = np.empty(nz, bool)
    Rr = np.empty(nz, np.int64)
    Rl = np.empty(nz, np.int64)
    for idx, res in zip(pieces, results):
        norms[idx], pairing[idx], ubar[idx], W[idx], cap_hit[idx], Rr[idx], Rl[idx] = res
    norms[:, p_order] = norms.copy()
    if np.any(np.abs(W) < WRONSKIAN_MIN):
        raise ResolventError("Wronskian below 1e-12: z too close to the real axis or R too small")
    return ResolventNorms(z, ps, norms, pairing, ubar, W, cap_hit, Rr, Rl)


# -- energy quadrature -----------------------------------------------------------

@dataclass
class EnergyRule:
    E: np.ndarray
    w: np.ndarray          # Kronrod weights
    w_err: np.ndarray      # Kronrod minus embedded Gauss weights

    @property
    def size(self):
        return self.E.size


_TAIL_T_EDGES = np.array([0.0, 0.5, 0.8, 0.95, 0.99, 1.0])


def energy_rule(T, E_lo, E_hi, lower_tail=True, tail_scale=1.0):
    """G7-K15 panels of width 2/T on [E_lo, E_hi] (node gaps <= 0.21/T) and
    E = E_lo - s t/(1-t) for the half-line below E_lo."""
    if T <= 0:
        raise ValueError("T must be positive")
    if E_hi <= E_lo:
        raise ValueError("empty energy window")
    n = max(1, math.ceil((E_hi - E_lo) * T / 2.0))
    edges = np.linspace(E_lo, E_hi, n + 1)
    mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
    E = (mid[:, None] + half[:, None] * GK_X).ravel()
    w = (half[:, None] * GK_WK).ravel()
    we = (half[:, None] * (GK_WK - GK_WG)).ravel()
    if lower_tail:
        te = _TAIL_T_EDGES
        tm, th = 0.5 * (te[:-1] + te[1:]), 0.5 * np.diff(te)
        t = (tm[:, None] + th[:, None] * GK_X).ravel()
        jac = tail_scale / (1 - t) ** 2
        E = np.concatenate([E_lo - tail_scale * t / (1 - t), E])
        w = np.concatenate([(th[:, None] * GK_WK).ravel() * jac, w])
        we = np.concatenate([(th[:, None] * (GK_WK - GK_WG)).ravel() * jac, we])
    return EnergyRule(E, w, we)


def free_upper_tail(f, T, E_max, line="half", shift=0.0, k_max=400.0):
    """(1/(pi T)) int_{E_max}^inf ||(H_0 + shift - E - i/T)^{-1} f||^2 dE, exact
    for the constant potential `shift`.  Also equals the spectral mass of f
    above E_max seen through the Poisson kernel."""
    _validate_line(f, line)
    kc = math.sqrt(max(E_max - shift, 0.0))
    K_top = max(k_max, 4 * kc)
    reach = max(abs(f.a), abs(f.b), 1.0)
    dk = min(0.25, 2.0 / reach)
    edges = set(np.arange(0.0, K_top, dk).tolist())
    edges.add(K_top)
    if kc > 0:
        width = 1.0 / (2 * kc * T)
        m = 0
        while width * 2 ** m < dk:
            for sgn in (-1, 1):
                e = kc + sgn * width * 2 ** m
                if 0 < e < K_top:
                    edges.add(e)
            m += 1
        edges.add(kc)
    edges = np.array(sorted(edges))
    gx, gw = np.polynomial.legendre.leggauss(16)
    mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
    k = (mid[:, None] + half[:, None] * gx).ravel()
    wk = (half[:, None] * gw).ravel()
    h = 0.5 + np.arctan((k * k + shift - E_max) * T) / np.pi
    fp, fm = f.fourier(k), f.fourier(-k)
    jumps = f.jumps()
    if line == "whole":
        dens = (np.abs(fp) ** 2 + np.abs(fm) ** 2) / (2 * np.pi)
        rest = sum(ja * jb * _cos_tail(xa - xb, K_top) for xa, ja in jumps for xb, jb in jumps) / np.pi
    else:
        sine = (fm - fp) / 2j
        dens = 2 / np.pi * np.abs(sine) ** 2
        rest = sum(ja * jb * (_cos_tail(xa - xb, K_top) + _cos_tail(xa + xb, K_top))
                   for xa, ja in jumps for xb, jb in jumps) / np.pi
    return float(np.sum(wk * dens * h) + rest)


def _cos_tail(d, K):
    """int_K^inf cos(d k)/k^2 dk: the jump part of |f^(k)|^2 past the k cut."""
    a = abs(d)
    if a == 0:
        return 1.0 / K
    si, _ = special.sici(a * K)
    return math.cos(a * K) / K - a * (np.pi / 2 - si)


_Y_GROWTH = 2.0
# one step cell grows like exp(sqrt(y/2)); 1e5 keeps it near e^224
Y_CUT = 1e5
# y = y_turn/u^2 maps y^{-k/2} tails to polynomials in u
_U_EDGES = np.array([0.05, 0.15, 0.35, 0.6, 1.0])


def contour_rule(T, y_turn=2.0, y_cut=Y_CUT):
    """Nodes y on [1/T, y_cut]: dyadic GK panels up to y_turn, then y = y_turn/u^2."""
    eps = 1.0 / T
    edges = [eps]
    while edges[-1] < y_turn:
        edges.append(min(edges[-1] * _Y_GROWTH, y_turn))
    edges = np.array(edges)
    mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
    y = (mid[:, None] + half[:, None] * GK_X).ravel()
    w = (half[:, None] * GK_WK).ravel()
    ue = np.concatenate([[math.sqrt(y_turn / y_cut)], _U_EDGES[_U_EDGES > math.sqrt(y_turn / y_cut)]])
    um, uh = 0.5 * (ue[:-1] + ue[1:]), 0.5 * np.diff(ue)
    u = (um[:, None] + uh[:, None] * GK_X).ravel()
    wu = (uh[:, None] * GK_WK).ravel()
    return np.concatenate([y, y_turn / u ** 2]), np.concatenate([w, wu * 2 * y_turn / u ** 3])


def _free_twin(f, line):
    return PotentialModel.free(min(0, math.floor(f.a)), max(1, math.ceil(f.b)))


def upper_tail(model, f, T, E_max, line="half", exterior=None, threads=1, y_cut=Y_CUT):
    """(1/(pi T)) int_{E_max}^inf ||u_{f,E+i/T}||^2 dE without an energy cut.

    <f, (H - z)^{-1} f> is analytic in Im z > 0, so the integral turns onto the
    vertical line E_max + iy, y >= 1/T:
        tail = ||f||^2/2 + (1/pi) int_{1/T}^inf Re F(E_max + iy) dy.
    The free F_0 is subtracted on the line and its tail added in closed form,
    leaving an integrand that decays like 1/y^2. Past y_cut the difference is
    taken as A/z^2 with A matched at y_cut.
    """
    y, w = contour_rule(T, y_cut=y_cut)
    z = E_max + 1j * np.append(y, y_cut)
    F = resolvent_norms(model, f, z, (0.0,), line, exterior, threads=threads).pairing
    F0 = resolvent_norms(_free_twin(f, line), f, z, (0.0,), line, 0.0, threads=threads).pairing
    d = F - F0
    A = d[-1] * z[-1] ** 2
    rest = (A * -1j / z[-1]).real
    return free_upper_tail(f, T, E_max, line) + (float(np.sum(w * d[:-1].real)) + rest) / np.pi


# -- moments --------------------------------------------------------------------

@dataclass(frozen=True)
class MomentSample:
    T: float
    p: float
    value: float
    err: float
    mean: str = "abelian"
    cap_hits: int = 0
    n_energies: int = 0
    truncated: bool = False     # energies above E_max left out (p > 0)
    upper_tail: float = 0.0

    @property
    def flagged(self):
        return self.cap_hits > 0

    def to_record(self):
        return {"T": self.T, "p": self.p, "M": self.value, "err": self.err, "mean": self.mean,
                "cap_hits": self.cap_hits, "n_energies": self.n_energies,
                "truncated": self.truncated, "upper_tail": self.upper_tail}


def default_energy_max(model, T=None):
    return model.bounds()[1] + 50.0


def kato_moments(model, f, T, ps, line="half", E_max=None, exterior=None, lower_tail=True,
                 tail="contour", threads=1, R0=R_START):
    """Abelian moments M_f(T, p) for every p in ps from one set of solves.

    Energies above E_max enter only at p = 0, through `upper_tail` (tail="contour")
    or the free closed form (tail="free"); p > 0 samples are truncated there.
    """
    if tail not in ("contour", "free"):
        raise ValueError("tail must be 'contour' or 'free'")
    if T <= 0:
        raise ValueError("T must be positive")
    E_max = default_energy_max(model) if E_max is None else float(E_max)
    E_lo = model.bounds()[0] - 1.0
    rule = energy_rule(T, E_lo, E_max, lower_tail=lower_tail)
    res = resolvent_norms(model, f, rule.E + 1j / T, ps, line, exterior, R0, threads)
    pref = 1.0 / (np.pi * T)
    hits = int(res.cap_hit.sum())
    tail_value = None
    out = []
    for ip, p in enumerate(res.ps):
        col = np.ascontiguousarray(res.norms[:, ip])
        val = pref * float(np.sum(rule.w * col))
        err = pref * abs(float(np.sum(rule.w_err * col)))
        if p == 0:
            if tail_value is None:
                tail_value = (upper_tail(model, f, T, E_max, line, exterior, threads)
                              if tail == "contour" else free_upper_tail(f, T, E_max, line))
            val += tail_value
        out.append(MomentSample(float(T), p, val, err, "abelian", hits, rule.size, p > 0,
                                tail_value if p == 0 else 0.0))
    return out


def kato_moment(model, f, T, p, line="half", **kw):
    return kato_moments(model, f, T, (p,), line, **kw)[0]


def spectral_mass(model, f, T, line="half", E_max=None, exterior=None, threads=1):
    """(1/pi) int Im<f, u_{f,E+i/T}> dE, the second route to ||f||^2."""
    E_max = default_energy_max(model) if E_max is None else float(E_max)
    rule = energy_rule(T, model.bounds()[0] - 1.0, E_max)
    res = resolvent_norms(model, f, rule.E + 1j / T, (0.0,), line, exterior, threads=threads)
    body = float(np.sum(rule.w * res.pairing.imag)) / np.pi
    return body + upper_tail(model, f, T, E_max, line, exterior, threads)


# Cesaro from Abelian means: sum_m c_m (Abel at r_m T) reproduces the first four
# t-moments of the uniform window on [0, T].  An approximation, not an identity.
CESARO_RATIOS = (0.25, 0.5, 1.0, 2.0)


def cesaro_weights(ratios=CESARO_RATIOS):
    r = np.asarray(ratios, float)
    j = np.arange(r.size)
    A = r[None, :] ** j[:, None] * special.factorial(j)[:, None] / 2.0 ** j[:, None]
    return np.linalg.solve(A, 1.0 / (j + 1))


def cesaro_moments(model, f, T, ps, line="half", ratios=CESARO_RATIOS, **kw):
    c = cesaro_weights(ratios)
    parts = [kato_moments(model, f, T * r, ps, line, **kw) for r in ratios]
    out = []
    for ip, p in enumerate(parts[0]):
        val = sum(cm * part[ip].value for cm, part in zip(c, parts))
        err = sum(abs(cm) * part[ip].err for cm, part in zip(c, parts))
        hits = sum(part[ip].cap_hits for part in parts)
        out.append(MomentSample(float(T), p.p, float(val), float(err), "cesaro", hits,
                                sum(part[ip].n_energies for part in parts), p.truncated,
                                float(sum(cm * part[ip].upper_tail for cm, part in zip(c, parts)))))
    return out


def cesaro_moment(model, f, T, p, line="half", **kw):
    return cesaro_moments(model, f, T, (p,), line, **kw)[0]


@dataclass
class MomentCurve:
    p: float
    samples: list = field(default_factory=list)   # MomentSample
    mean: str = "abelian"

    @property
    def T(self):
        return np.array([s.T for s in self.samples])

    @property
    def M(self):
        return np.array([s.value for s in self.samples])

    @property
    def err(self):
        return np.array([s.err for s in self.samples])

    @property
    def flags(self):
        return np.array([s.flagged for s in self.samples])

    def rows(self):
        return [(s.T, s.value, s.err) for s in self.samples]

    def csv_text(self):
        lines = ["T,M,err"]
        lines += [f"{T!r},{M!r},{e!r}" for T, M, e in self.rows()]
        return "\n".join(lines) + "\n"


def moment_curves(model, f, Ts, ps, line="half", mean="abelian", **kw):
    fn = kato_moments if mean == "abelian" else cesaro_moments
    if mean not in ("abelian", "cesaro"):
        raise ValueError("mean must be 'abelian' or 'cesaro'")
    ps = tuple(float(p) for p in np.atleast_1d(ps))
    curves = [MomentCurve(p, [], mean) for p in ps]
    for T in Ts:
        for curve, s in zip(curves, fn(model, f, float(T), ps, line, **kw)):
            curve.samples.append(s)
    return curves


def moment_curve(model, f, Ts, p, line="half", mean="abelian", **kw):
    return moment_curves(model, f, Ts, (p,), line, mean, **kw)[0]


def geometric_times(T_lo, T_hi, n):
    return np.geomspace(T_lo, T_hi, n)


# -- exponents ---------------------------------------------------------------

class FlaggedSampleError(ValueError):
    pass


@dataclass(frozen=True)
class ExponentFit:
    """Top-decade least-squares slope of log M against log T: a finite-T
    surrogate for the lower growth exponent, never the liminf itself."""
    beta_minus: float
    T_lo: float
    T_hi: float
    residual: float
    n_samples: int
    p: float = float("nan")
    method: str = "top-decade least squares"

    def to_record(self):
        return {"beta_minus": self.beta_minus, "window": [self.T_lo, self.T_hi],
                "residual": self.residual, "n_samples": self.n_samples, "p": self.p,
                "method": self.method}

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)


def fit_beta(curve, allow_flagged=False):
    T, M = curve.T, curve.M
    if T.size < 8:
        raise ValueError("need at least 8 samples")
    if T.max() < 10 * T.min() * (1 - 1e-12):
        raise ValueError("samples must span at least one decade")
    sel = T >= T.max() / 10 * (1 - 1e-12)
    if sel.sum() < 2:
        raise ValueError("top decade holds fewer than 2 samples")
    if not allow_flagged and curve.flags[sel].any():
        raise FlaggedSampleError("flagged samples inside the fit window")
    if np.any(M[sel] <= 0):
        raise ValueError("moments must be positive to fit a power law")
    lx, ly = np.log(T[sel]), np.log(M[sel])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return ExponentFit(float(coef[0]), float(T[sel].min()), float(T[sel].max()), resid,
                       int(sel.sum()), curve.p)


def log_convexity_gaps(ps, values):
    """theta log M(p1) + (1-theta) log M(p3) - log M(p2) over consecutive triples;
    Hoelder makes every gap nonnegative."""
    ps = np.asarray(ps, float)
    lv = np.log(np.asarray(values, float))
    gaps = []
    for i in range(ps.size - 2):
        p1, p2, p3 = ps[i:i + 3]
        th = (p3 - p2) / (p3 - p1)
        gaps.append(th * lv[i] + (1 - th) * lv[i + 2] - lv[i + 1])
    return np.array(gaps)


@dataclass(frozen=True)
class LowerBoundCheck:
    alpha: float
    p: float
    C_fit: float
    T: tuple
    ratios: tuple      # M / (C_fit |B(T)| T^{(p-3 alpha)/(1+alpha)})

    @property
    def holds(self):
        return all(r >= 1.0 for r in self.ratios[1:])


def lower_bound_check(curve, alpha, T0, B_measure=lambda T: 2.0 / T):
    """Fit the constant at T0, then test the scaling form at 2 T0 and 4 T0."""
    def shape(T):
        return B_measure(T) * T ** ((curve.p - 3 * alpha) / (1 + alpha))

    lookup = {round(math.log(s.T), 9): s.value for s in curve.samples}
    Ts = (T0, 2 * T0, 4 * T0)
    try:
        Ms = [lookup[round(math.log(t), 9)] for t in Ts]
    except KeyError:
        raise ValueError("curve needs samples at T0, 2 T0 and 4 T0") from None
    C = Ms[0] / shape(T0)
    return LowerBoundCheck(alpha, curve.p, C, Ts, tuple(m / (C * shape(t)) for m, t in zip(Ms, Ts)))


# -- single-z solutions -----------------------------------------------------------

def _store_backward(minv2, letters, v_init):
    """Cauchy vectors at cells 0..R of the outward sweep, scaled so vec[0] is a unit vector."""
    R = letters.size
    vecs = np.empty((R + 1, 2), complex)
    logs = np.zeros(R + 1)
    v = np.asarray(v_init, complex)
    lg = 0.0
    vecs[R] = v
    for k in range(R - 1, -1, -1):
        v = minv2[letters[k]] @ v
        big = np.max(np.abs(v))
        if big > 1e150:
            v = v / big
            lg += math.log(big)
        vecs[k] = v
        logs[k] = lg
    nrm = np.linalg.norm(vecs[0])
    with np.errstate(under="ignore"):
        scale = np.exp(logs - logs[0]) / nrm
    return vecs * scale[:, None]


def _barycentric(nodes, vals, x):
    # Gauss-Legendre nodes on the panel; weights for Lagrange interpolation
    n = nodes.size
    d = nodes[:, None] - nodes[None, :]
    np.fill_diagonal(d, 1.0)
    bw = 1.0 / np.prod(d, axis=1)
    diff = x[:, None] - nodes[None, :]
    exact = np.isclose(diff, 0.0, atol=1e-15)
    diff = np.where(exact, 1.0, diff)
    t = bw[None, :] / diff
    out = (t @ vals) / t.sum(axis=1)
    hit = exact.any(axis=1)
    if hit.any():
        out[hit] = vals[np.argmax(exact[hit], axis=1)]
    return out


@dataclass
class ResolventSolution:
    """u_{f,z} for one z: inner nodes plus the two tails as scaled solutions."""
    z: complex
    line: str
    R: int
    wronskian: complex
    model: object
    grid: _InnerGrid
    u_nodes: np.ndarray
    du_nodes: np.ndarray
    right_coef: complex
    right_vecs: np.ndarray
    left_coef: complex = 0.0
    left_vecs: np.ndarray = None
    exterior: float = None
    f: InitialState = None

    def _tail(self, x, coef, vecs, start, sign, letter_map):
        # sign=+1: cells start, start+1, ...;  sign=-1: reflected cells to the left
        y = sign * (x - start)
        n = np.floor(y).astype(np.int64)
        t = y - n
        out = np.zeros((x.size, 2), complex)
        inside = n < vecs.shape[0] - 1
        for i in np.flatnonzero(inside):
            cell_abs = start + n[i] if sign > 0 else start - n[i] - 1
            ell = self.model.word.cells(cell_abs, cell_abs + 1)[0]
            g = letter_map[ell]
            P = _partials(g, np.array([self.z]), np.array([t[i]]))[0, 0]
            out[i] = P @ vecs[n[i]]
        outside = ~inside
        if outside.any():
            if self.exterior is not None:  # Dirichlet cut: zero beyond R
                kap = np.sqrt(self.z - self.exterior)
                d = y[outside] - (vecs.shape[0] - 1)
                base = vecs[-1, 0] * np.exp(1j * kap * d)
                out[outside, 0] = base
                out[outside, 1] = 1j * kap * base
        out *= coef
        if sign < 0:
            out[:, 1] = -out[:, 1]
        return out

    def evaluate(self, x):
        """(u, u') at points x."""
        x = np.atleast_1d(np.asarray(x, float))
        out = np.zeros((x.size, 2), complex)
        g = self.grid
        inner = (x >= g.cL) & (x <= g.cR)
        if self.line == "half" and np.any(x < 0):
            raise ValueError("half-line solution lives on x >= 0")
        if inner.any():
            xi = x[inner]
            pan = np.clip(np.searchsorted(g.panel_hi, xi, side="left"), 0, g.panel_hi.size - 1)
            res = np.empty((xi.size, 2), complex)
            for j in np.unique(pan):
                sel = pan == j
                sl = slice(j * g.n_in, (j + 1) * g.n_in)
                res[sel, 0] = _barycentric(g.x[sl], self.u_nodes[sl], xi[sel])
                res[sel, 1] = _barycentric(g.x[sl], self.du_nodes[sl], xi[sel])
            out[inner] = res
        right = x > g.cR
        if right.any():
            out[right] = self._tail(x[right], self.right_coef, self.right_vecs, g.cR, 1,
                                    self.model.letter_map)
        left = x < g.cL
        if left.any():
            out[left] = self._tail(x[left], self.left_coef, self.left_vecs, g.cL, -1,
                                   tuple(h.reflected() for h in self.model.letter_map))
        return out

    def grid_values(self, x_max, per_cell=32):
        x = np.linspace(0.0 if self.line == "half" else -x_max, x_max,
                        int(per_cell * x_max * (1 if self.line == "half" else 2)) + 1)
        ub = self.evaluate(x)
        return x, ub[:, 0], ub[:, 1]

    def l2_norm(self, x_lo, x_hi, nodes=24):
        edges = np.arange(math.floor(x_lo), math.ceil(x_hi) + 1, 0.5)
        edges = np.unique(np.clip(np.concatenate([edges, self.grid.panel_lo, [self.grid.panel_hi[-1]]]), x_lo, x_hi))
        gx, gw = np.polynomial.legendre.leggauss(nodes)
        mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
        xs = (mid[:, None] + half[:, None] * gx).ravel()
        ws = (half[:, None] * gw).ravel()
        return float(np.sqrt(np.sum(ws * np.abs(self.evaluate(xs)[:, 0]) ** 2)))

    @property
    def dirichlet_value(self):
        return complex(self.evaluate(np.array([0.0]))[0, 0])

    def residual(self, x_max=None, h=1e-4, per_cell=16):
        """max |-u'' + (V - z) u - f| / max|f| on a grid away from jumps of f and V."""
        x_max = self.grid.cR + 4 if x_max is None else x_max
        lo = 0.0 if self.line == "half" else -x_max
        x = np.linspace(lo, x_max, int(per_cell * (x_max - lo)) + 1)[1:-1]
        bad = np.zeros(x.size, bool)
        for b in np.concatenate([self.f.breakpoints(), np.arange(math.floor(lo), math.ceil(x_max) + 1)]):
            bad |= np.abs(x - b) < 3 * h
        x = x[~bad]
        dp = self.evaluate(x + h)[:, 1]
        dm = self.evaluate(x - h)[:, 1]
        u = self.evaluate(x)[:, 0]
        upp = (dp - dm) / (2 * h)
        r = -upp + (self.model.potential(x) - self.z) * u - self.f(x)
        return float(np.max(np.abs(r)) / max(np.max(np.abs(self.f(x))), 1e-300))


def _build_solution(model, f, z, line, R, exterior):
    grid = _InnerGrid.build(f, line)
    E = np.array([z], complex)
    right_letters, left_letters = _side_letters(model, grid, line)
    Rr = right_letters.size if exterior is not None else min(R, right_letters.size)
    rl = right_letters[:Rr]
    mats = np.stack([propagate(g, z) for g in model.letter_map])
    minv2 = adj2(mats)
    if exterior is None:
        v_r = np.array([0.0, 1.0], complex)
    else:
        v_r = np.array([1.0, 1j * np.sqrt(z - exterior)])
    right_vecs = _store_backward(minv2, rl, v_r)
    left_vecs = None
    if line == "half":
        phi_edge = np.array([[0.0, 1.0]], complex)
    else:
        Rl = left_letters.size if exterior is not None else min(R, left_letters.size)
        ll = left_letters[:Rl]
        refl = np.stack([propagate(g.reflected(), z) for g in model.letter_map])
        v_l = v_r.copy()
        left_vecs = _store_backward(adj2(refl), ll, v_l)
        phi_edge = (left_vecs[0] * np.array([1.0, -1.0]))[None, :]
    u, du, Phi_R, Psi_L, W = _inner_solution(model, grid, E, phi_edge, right_vecs[0][None, :],
                                             derivative=True)
    if abs(W[0]) < WRONSKIAN_MIN:
        raise ResolventError("Wronskian below 1e-12: z too close to the real axis or R too small")
    sol = ResolventSolution(complex(z), line, int(Rr), complex(W[0]), model, grid, u[0], du[0],
                            complex(Phi_R[0] / W[0]), right_vecs,
                            complex(Psi_L[0] / W[0]) if line == "whole" else 0.0, left_vecs,
                            exterior, f)
    return sol


def solve_resolvent(model, f, z, R=None, line="half", x_max=10.0, exterior=None, rtol=1e-8):
    """u_{f,z} = (H - z)^{-1} f with adaptive Dirichlet cut R.

    R doubles (starting from R, default 64 cells) until doubling changes the
    L2 norm of u on [0, x_max] (or [-x_max, x_max]) by less than rtol.
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError("resolvent needs Im z > 0")
    _validate_line(f, line)
    grid = _InnerGrid.build(f, line)
    if grid.cL < model.word.first_cell or grid.cR > model.word.end_cell:
        raise ValueError("word window does not cover the support of f")
    lo = 0.0 if line == "half" else -x_max
    if exterior is not None:
        return _build_solution(model, f, z, line, 0, exterior)
    cap = model.word.end_cell - grid.cR
    if line == "whole":
        cap = min(cap, grid.cL - model.word.first_cell)
    R = min(R_START if R is None else int(R), cap)
    sol = _build_solution(model, f, z, line, R, None)
    prev = sol.l2_norm(lo, x_max)
    while True:
        if R >= cap:
            raise ResolventError(f"R-doubling did not settle inside the word window (R={R})")
        R = min(2 * R, cap)
        nxt = _build_solution(model, f, z, line, R, None)
        cur = nxt.l2_norm(lo, x_max)
        if abs(cur - prev) <= rtol * max(cur, 1e-300):
            return nxt
        sol, prev = nxt, cur


# -- non-orthogonality ------------------------------------------------------------

def _solution_rows(model, E, x_nodes, start, init):
    """Real-E solution with Cauchy data `init` at x = start, evaluated at nodes (sorted)."""
    E = np.array([E], complex)
    lo = math.floor(min(start, x_nodes.min()))
    hi = math.ceil(max(start, x_nodes.max()))
    pts = np.append(x_nodes, start)
    cell_of = np.minimum(np.floor(pts).astype(np.int64), hi - 1)
    trans = np.empty((pts.size, 2, 2), complex)
    acc = np.eye(2, dtype=complex)
    for n in range(lo, hi):
        idx = np.flatnonzero(cell_of == n)
        ell = model.word.cells(n, n + 1)[0]
        ts = pts[idx] - n
        order = np.argsort(ts)
        P = _partials(model.letter_map[ell], E, np.append(ts[order], 1.0))[0]
        trans[idx[order]] = P[:-1] @ acc
        acc = P[-1] @ acc
    T_start = trans[-1]
    Y = trans[:-1] @ np.linalg.inv(T_start)
    return (Y @ np.asarray(init, complex))[:, 0]


@dataclass(frozen=True)
class PairingResult:
    E0: float
    values: tuple
    silent: bool

    def to_record(self):
        return {"E0": self.E0, "values": [float(np.real(v)) for v in self.values],
                "silent": self.silent}


SILENT_TOL = 1e-10


def orthogonality_test(model, f, E0, line="half", nodes=16, panels_per_cell=8):
    """<u, f> for the Dirichlet solution at 0 (half line) or for the fundamental
    pair with Cauchy data (1,0), (0,1) at the left end of supp f (whole line)."""
    _validate_line(f, line)
    brk = set(np.linspace(f.a, f.b, max(2, int(np.ceil((f.b - f.a) * panels_per_cell)) + 1)).tolist())
    brk.update(float(v) for v in f.breakpoints())
    brk.update(float(n) for n in range(math.ceil(f.a), math.floor(f.b) + 1))
    edges = np.array(sorted(v for v in brk if f.a <= v <= f.b))
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    mid, half = 0.5 * (edges[:-1] + edges[1:]), 0.5 * np.diff(edges)
    x = (mid[:, None] + half[:, None] * gx).ravel()
    w = (half[:, None] * gw).ravel()
    fw = w * f(x)
    if line == "half":
        vals = (float(np.real(np.sum(fw * _solution_rows(model, E0, x, 0.0, (0.0, 1.0))))),)
    else:
        vals = tuple(float(np.real(np.sum(fw * _solution_rows(model, E0, x, f.a, init))))
                     for init in ((1.0, 0.0), (0.0, 1.0)))
    return PairingResult(float(E0), vals, all(abs(v) < SILENT_TOL for v in vals))


def pairing_scan(model, f, lam, n_max=64, line="half", base=0.0):
    """Pairings at E0 in {n^2 pi^2 + base} and {n^2 pi^2 + base + lam}, n <= n_max."""
    out = []
    for n in range(1, n_max + 1):
        for shift in (base, base + lam):
            out.append(orthogonality_test(model, f, n * n * np.pi ** 2 + shift, line))
    return out


@dataclass(frozen=True)
class KappaEstimate:
    E0: float
    delta: float
    infimum: float
    argmin: complex
    n_points: int


def kappa_infimum(model, f, E0, delta, line="half", n_radii=6, n_angles=13, exterior=None):
    """Smallest ||(u, u')(s)||^2 over a polar grid of the upper half-disk
    |z - E0| <= delta; s is the right edge of the inner region (ceil of sup f).
    Empirical: the grid says nothing about points between its nodes."""
    r = delta * np.arange(1, n_radii + 1) / n_radii
    th = np.linspace(0.0, np.pi, n_angles + 2)[1:-1]
    z = (E0 + r[:, None] * np.exp(1j * th[None, :])).ravel()
    res = resolvent_norms(model, f, z, (0.0,), line, exterior)
    vals = np.sum(np.abs(res.ubar_right) ** 2, axis=1)
    i = int(np.argmin(vals))
    return KappaEstimate(float(E0), float(delta), float(vals[i]), complex(z[i]), int(z.size))
