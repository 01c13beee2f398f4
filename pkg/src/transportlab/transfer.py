"""Transfer matrices of -u'' + (V - z) u = 0 on unit cells and along words.

Matrices act on (u, u') and are plain numpy arrays of shape (..., 2, 2).
Step cells use closed forms built on the entire functions
cos(sqrt w) and sin(sqrt w)/sqrt w, so E = h and E < h need no branching.
"""
import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels as K
from .words import Word

__all__ = [
    "LocalPotential", "PotentialModel", "cos_sqrt", "sinc_sqrt", "step_matrix",
    "propagate", "word_matrix", "word_matrix_real", "op_norm", "inv2", "adj2", "det2",
    "sup_pair_norm", "max_transfer_norm", "gronwall_bound", "gronwall_check",
    "solution_on_grid", "sobolev_ratios", "sobolev_check", "sobolev_constant",
    "uniform_local_l1",
]

RENORM_EVERY = 64
DEFAULT_STEP = 2.0 ** -10

_SERIES_RADIUS = 1e-2
_COS_COEF = np.array([1.0 / np.prod(np.arange(1, 2 * n + 1, dtype=float)) * (-1) ** n for n in range(8)])
_SIN_COEF = np.array([1.0 / np.prod(np.arange(1, 2 * n + 2, dtype=float)) * (-1) ** n for n in range(8)])


def _entire(z, coef, closed):
    z = np.asarray(z)
    cz = z.astype(complex)
    small = np.abs(cz) < _SERIES_RADIUS
    w = np.sqrt(np.where(small, 1.0, cz))
    out = closed(w)
    if np.any(small):
        zs = cz[small] if cz.ndim else cz
        ser = np.polynomial.polynomial.polyval(zs, coef)
        if cz.ndim:
            out[small] = ser
        else:
            out = ser
    if not np.iscomplexobj(z):
        return out.real
    return out


def cos_sqrt(z):
    """cos(sqrt z), entire in z."""
    return _entire(z, _COS_COEF, np.cos)


def sinc_sqrt(z):
    """sin(sqrt z)/sqrt z, entire in z."""
    return _entire(z, _SIN_COEF, lambda w: np.sin(w) / w)


def step_matrix(E, h, length=1.0):
    """Exact transfer matrix across a constant cell of height h."""
    if length <= 0:
        raise ValueError("length must be positive")
    E = np.asarray(E)
    z = (E - h) * length ** 2
    c = cos_sqrt(z)
    s = sinc_sqrt(z)
    out = np.empty(np.shape(z) + (2, 2), dtype=np.result_type(c, s))
    out[..., 0, 0] = c
    out[..., 0, 1] = length * s
    out[..., 1, 0] = -(z / length) * s
    out[..., 1, 1] = c
    return out


def det2(m):
    m = np.asarray(m)
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def inv2(m):
    m = np.asarray(m)
    out = np.empty_like(m)
    d = det2(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out / d[..., None, None]


def adj2(m):
    """Adjugate; the inverse of a unimodular matrix without dividing by a
    determinant that cancels catastrophically once entries are large."""
    m = np.asarray(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out


def op_norm(m):
    """Largest singular value via the closed 2x2 formula."""
    m = np.asarray(m)
    fro = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    d = np.abs(det2(m))
    disc = np.sqrt(np.maximum(fro * fro - 4.0 * d * d, 0.0))
    return np.sqrt(0.5 * (fro + disc))


def _norm_from_fro2(fro2):
    # unimodular: s_max^2 + s_min^2 = fro2, s_max s_min = 1
    fro2 = np.maximum(fro2, 2.0)
    return np.sqrt(0.5 * (fro2 + np.sqrt(fro2 * fro2 - 4.0)))


# -- cells ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LocalPotential:
    """Potential on one cell [0, length): a constant step or a sampled profile.

    Profiles are piecewise linear between samples; propagation steps never
    straddle a sample point.
    """
    kind: str
    height: float = 0.0
    x: np.ndarray = None
    values: np.ndarray = None
    length: float = 1.0

    def __post_init__(self):
        if self.kind not in ("step", "profile"):
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.length <= 0:
            raise ValueError("cell length must be positive")
        if self.kind == "profile":
            x = np.asarray(self.x, float)
            v = np.asarray(self.values, float)
            if x.ndim != 1 or x.shape != v.shape or x.size < 2:
                raise ValueError("profile needs matching 1-d x and values, at least 2 points")
            if np.any(np.diff(x) <= 0) or abs(x[0]) > 1e-12 or abs(x[-1] - self.length) > 1e-9:
                raise ValueError("profile grid must increase from 0 to the cell length")
            if not np.all(np.isfinite(v)):
                raise ValueError("profile is not integrable (non-finite samples)")
            object.__setattr__(self, "x", x)
            object.__setattr__(self, "values", v)

    @classmethod
    def step(cls, height, length=1.0):
        return cls("step", height=float(height), length=float(length))

    @classmethod
    def profile(cls, func, n=257, length=1.0):
        x = np.linspace(0.0, length, n)
        return cls("profile", x=x, values=np.asarray(func(x), float), length=float(length))

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header
        arr = np.array(rows)
        return cls("profile", x=arr[:, 0], values=arr[:, 1], length=float(arr[-1, 0]))

    @property
    def is_step(self):
        return self.kind == "step"

    def __call__(self, t):
        t = np.asarray(t, float)
        if self.is_step:
            return np.full(t.shape, self.height)
        return np.interp(t, self.x, self.values)

    def l1_norm(self):
        if self.is_step:
            return abs(self.height) * self.length
        # exact for the piecewise linear interpolant
        v0, v1 = self.values[:-1], self.values[1:]
        dx = np.diff(self.x)
        same = v0 * v1 >= 0
        seg = np.where(same, 0.5 * np.abs(v0 + v1) * dx,
                       0.5 * dx * (v0 ** 2 + v1 ** 2) / np.maximum(np.abs(v0) + np.abs(v1), 1e-300))
        return float(np.sum(seg))

    def bounds(self):
        if self.is_step:
            return self.height, self.height
        return float(self.values.min()), float(self.values.max())

    def reflected(self):
        if self.is_step:
            return self
        x = self.length - self.x[::-1]
        return LocalPotential("profile", x=x, values=self.values[::-1].copy(), length=self.length)

    def magnus_grid(self, a=0.0, b=None, h_step=DEFAULT_STEP):
        """Step edges on [a, b] refining the sample grid to spacing <= h_step."""
        b = self.length if b is None else b
        inner = self.x[(self.x > a) & (self.x < b)]
        brk = np.concatenate([[a], inner, [b]])
        pieces = []
        for lo, hi in zip(brk[:-1], brk[1:]):
            m = max(1, int(np.ceil((hi - lo) / h_step - 1e-9)))
            pieces.append(np.linspace(lo, hi, m + 1)[:-1])
        return np.concatenate(pieces + [[b]])

    def partial_matrix(self, E, a, b, h_step=DEFAULT_STEP):
        """Transfer matrix from a to b inside the cell (0 <= a <= b <= length)."""
        if b - a <= 0:
            return np.broadcast_to(np.eye(2), np.shape(E) + (2, 2)).astype(np.result_type(E, float))
        if self.is_step:
            return step_matrix(E, self.height, b - a)
        return _magnus(self, E, self.magnus_grid(a, b, h_step))


_GAUSS2 = np.array([0.5 - np.sqrt(3) / 6, 0.5 + np.sqrt(3) / 6])


def _magnus_inputs(cell, edges):
    hs = np.diff(edges)
    t1 = edges[:-1] + _GAUSS2[0] * hs
    t2 = edges[:-1] + _GAUSS2[1] * hs
    return hs, cell(t1), cell(t2)


def _magnus(cell, E, edges):
    hs, v1, v2 = _magnus_inputs(cell, edges)
    E = np.asarray(E)
    flat = np.atleast_1d(E).astype(complex).ravel()
    out = K.magnus_chain(hs, v1, v2, flat)
    if not np.iscomplexobj(E):
        out = out.real
    return out.reshape(np.shape(E) + (2, 2))


def propagate(cell, E, h_step=DEFAULT_STEP, with_error=False):
    """Fourth-order cell transfer matrix; exact for step cells.

    with_error=True also returns the Richardson estimate |M_h - M_{h/2}|/15.
    """
    if h_step <= 0:
        raise ValueError("h_step must be positive")
    if cell.is_step:
        m = step_matrix(E, cell.height, cell.length)
        return (m, 0.0) if with_error else m
    m = _magnus(cell, E, cell.magnus_grid(0.0, cell.length, h_step))
    if not with_error:
        return m
    m2 = _magnus(cell, E, cell.magnus_grid(0.0, cell.length, h_step / 2))
    err = np.max(np.abs(m - m2)) / 15.0
    return m2, float(err)


# -- models ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PotentialModel:
    """V(x) = sum_n g_{w_n}(x - n) over the word's window."""
    letter_map: tuple
    word: Word

    def __post_init__(self):
        if len(self.letter_map) != 2 or any(not isinstance(g, LocalPotential) for g in self.letter_map):
            raise ValueError("letter_map must map both letters to a LocalPotential")
        if any(abs(g.length - 1.0) > 1e-12 for g in self.letter_map):
            raise ValueError("model cells must have unit length")
        object.__setattr__(self, "letter_map", tuple(self.letter_map))

    @classmethod
    def step_model(cls, lam, word, base=0.0):
        return cls((LocalPotential.step(base), LocalPotential.step(base + lam)), word)

    @classmethod
    def free(cls, first_cell, end_cell):
        w = Word.from_letters(np.zeros(end_cell - first_cell, np.uint8), -first_cell)
        zero = LocalPotential.step(0.0)
        return cls((zero, zero), w)

    def letter_matrices(self, E, h_step=DEFAULT_STEP):
        """(..., 2, 2, 2): cell matrix of letter j at index [..., j, :, :]."""
        return np.stack([propagate(g, E, h_step) for g in self.letter_map], axis=-3)

    def uniform_l1(self):
        return max(g.l1_norm() for g in self.letter_map)

    def bounds(self):
        lo = min(g.bounds()[0] for g in self.letter_map)
        hi = max(g.bounds()[1] for g in self.letter_map)
        return lo, hi

    def potential(self, x):
        x = np.asarray(x, float)
        n = np.floor(x).astype(np.int64)
        letters = self.word.letters[n + self.word.origin_index]
        t = x - n
        out = np.empty(x.shape)
        for j, g in enumerate(self.letter_map):
            sel = letters == j
            out[sel] = g(t[sel])
        return out


def word_matrix(model, from_cell, to_cell, E, h_step=DEFAULT_STEP):
    """T(to, from, E): transfer from cell boundary `from_cell` to `to_cell`."""
    lo, hi = sorted((from_cell, to_cell))
    letters = model.word.cells(lo, hi)
    E = np.asarray(E)
    if np.ndim(E):
        return np.stack([word_matrix(model, from_cell, to_cell, e, h_step) for e in E.ravel()]
                        ).reshape(E.shape + (2, 2))
    lm = model.letter_matrices(E, h_step)
    prod = K.chain_product(np.ascontiguousarray(lm[letters]), RENORM_EVERY)
    if from_cell > to_cell:
        return adj2(prod)
    return prod


def word_matrix_real(model, x, y, E, h_step=DEFAULT_STEP):
    """Transfer from real position y to real position x, splitting partial cells."""
    if x < y:
        return adj2(word_matrix_real(model, y, x, E, h_step))
    ny, nx = int(np.floor(y)), int(np.floor(x))
    g = model.letter_map
    L = model.word.letters
    o = model.word.origin_index
    if ny == nx:
        return g[L[ny + o]].partial_matrix(E, y - ny, x - nx, h_step)
    head = g[L[ny + o]].partial_matrix(E, y - ny, 1.0, h_step)
    mid = word_matrix(model, ny + 1, nx, E, h_step)
    if x > nx:
        tail = g[L[nx + o]].partial_matrix(E, 0.0, x - nx, h_step)
    else:
        tail = np.eye(2)
    return tail @ mid @ head


# -- sup over pairs -----------------------------------------------------------

def _pair_coords(prods):
    """Vectors g_x, h_y with ||P_x P_y^{-1}||_F^2 = <g_x, h_y> for det-one P."""
    p = np.asarray(prods)
    a, b, c, d = p[:, 0, 0], p[:, 0, 1], p[:, 1, 0], p[:, 1, 1]
    if np.iscomplexobj(p):
        g00 = abs(a) ** 2 + abs(c) ** 2
        g11 = abs(b) ** 2 + abs(d) ** 2
        g01 = np.conj(a) * b + np.conj(c) * d
        # H = adj adj^H for adj = [[d, -b], [-c, a]]
        h00 = abs(d) ** 2 + abs(b) ** 2
        h11 = abs(c) ** 2 + abs(a) ** 2
        h10 = -c * np.conj(d) - a * np.conj(b)
        g = np.stack([g00, g11, g01.real, g01.imag], axis=1)
        h = np.stack([h00, h11, 2 * h10.real, -2 * h10.imag], axis=1)
    else:
        g = np.stack([a * a + c * c, b * b + d * d, a * b + c * d], axis=1)
        h = np.stack([d * d + b * b, c * c + a * a, -2 * (d * c + b * a)], axis=1)
    return g, h


def _affine_frame(pts, queries, rtol=1e-11):
    """Centre, principal axes and the affine rank that matters for <pts, queries>.

    An axis is dropped when the spread of the points along it, times the
    largest query norm, is below rtol times a lower bound of the answer.
    Products at a critical energy sit on a planar ellipse up to ~1e-13
    roundoff; rtol must clear that or every point becomes a hull vertex.
    """
    centre = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centre, full_matrices=False)
    spread = np.max(np.abs((pts - centre) @ vt.T), axis=0)
    qmax = np.max(np.linalg.norm(queries, axis=1))
    lower = max(float(np.max(queries @ centre)), 1.0)
    keep = spread * qmax > rtol * lower
    rank = int(np.sum(keep))
    return centre, vt[keep], rank


def _support_max(pts, queries):
    """max_i <pts_i, q> for every query row, exploiting low affine rank."""
    if pts.shape[0] <= 64:
        return np.max(queries @ pts.T, axis=1)
    centre, axes, rank = _affine_frame(pts, queries)
    if rank == 0:
        return queries @ centre
    if rank == 1:
        s = (pts - centre) @ axes[0]
        lo, hi = s.min(), s.max()
        d = queries @ axes[0]
        return queries @ centre + np.maximum(lo * d, hi * d)
    if rank == 2:
        xy = (pts - centre) @ axes.T
        try:
            hull = ConvexHull(xy)
        except QhullError:
            return np.max(queries @ pts.T, axis=1)
        poly = xy[hull.vertices]  # counter-clockwise
        return queries @ centre + _polygon_support(poly, queries @ axes.T)
    verts = pts
    if rank == pts.shape[1]:
        try:
            verts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    best = np.full(queries.shape[0], -np.inf)
    for i0 in range(0, verts.shape[0], 512):
        best = np.maximum(best, np.max(queries @ verts[i0:i0 + 512].T, axis=1))
    return best


def _polygon_support(poly, dirs):
    """max over a convex CCW polygon of <v, d>, via outward edge-normal angles."""
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([edges[:, 1], -edges[:, 0]], axis=1)
    ang = np.arctan2(normals[:, 1], normals[:, 0])
    start = int(np.argmin(ang))
    ang = np.roll(ang, -start)
    order_v = np.roll(np.arange(poly.shape[0]), -start)
    # vertex k+1 (after edge k) is extreme for directions between normals k and k+1
    q = np.arctan2(dirs[:, 1], dirs[:, 0])
    idx = np.searchsorted(ang, q)
    cand = order_v[(idx % poly.shape[0])]
    best = np.einsum("ij,ij->i", poly[cand], dirs)
    for shift in (-1, 1):  # guard against ties at breakpoints
        alt = order_v[((idx + shift) % poly.shape[0])]
        best = np.maximum(best, np.einsum("ij,ij->i", poly[alt], dirs))
    return best


def sup_pair_norm(prods, classes=None):
    """sup over x, y of ||P_x P_y^{-1}|| for unimodular P.

    Uses ||P_x P_y^{-1}||_F^2 = <g_x, h_y> and convex-hull support queries.
    That inner product cancels badly once the P grow large, so when the
    rounding bound is not small against the answer the exact O(n^2) scan
    takes over.  `classes` (optional labels) lets orbits that are
    individually planar be handled separately; it changes speed only.
    """
    prods = np.asarray(prods)
    g, h = _pair_coords(prods)
    labels = np.zeros(len(prods), int) if classes is None else np.asarray(classes)
    best = 0.0
    for c in np.unique(labels):
        sup = _support_max(g[labels == c], h)
        best = max(best, float(sup.max()))
    rounding = 64 * np.finfo(float).eps * np.max(np.abs(g)) * np.max(np.abs(h)) * g.shape[1]
    if rounding > 1e-10 * best:
        best = K.max_pair_direct(np.ascontiguousarray(prods))
    return float(_norm_from_fro2(best))


def max_transfer_norm(model, E, start, stop, classes=None):
    """sup over integer x, y in [start, stop] of ||T(x, y, E)||."""
    letters = model.word.cells(start, stop)
    lm = model.letter_matrices(E)
    prods = K.indexed_prefix_products(np.ascontiguousarray(lm), letters, RENORM_EVERY)
    return sup_pair_norm(prods, classes)


def brute_pair_norm(prods):
    return float(_norm_from_fro2(K.max_pair_direct(np.ascontiguousarray(prods))))


# -- perturbation in energy ------------------------------------------------

def gronwall_bound(L, dx, delta):
    if L < 1:
        raise ValueError("L must be >= 1 (it bounds norms of unimodular matrices)")
    # an infinite bound is vacuous but correct
    with np.errstate(over="ignore"):
        return L * np.exp(L * abs(dx) * abs(delta))


@dataclass
class GronwallReport:
    L: float
    samples: int
    violations: int
    worst_ratio: float


def gronwall_check(model, E, N, samples, rng, sub=4, delta_scale=None):
    """Sample (x, y, delta) in [0, N]^2 x disc and test the energy-perturbation bound.

    L is the sup over a grid with `sub` points per cell, which stands in for
    the sup over real x, y.
    """
    delta_scale = 1.0 / N if delta_scale is None else delta_scale
    pts = np.arange(0, N * sub + 1) / sub
    prods = _grid_prefix(model, E, pts)
    L = max(1.0, sup_pair_norm(prods))
    worst = 0.0
    bad = 0
    for _ in range(samples):
        x, y = rng.uniform(0, N, size=2)
        delta = delta_scale * rng.uniform() * np.exp(2j * np.pi * rng.uniform())
        if rng.uniform() < 0.5:
            delta = delta.real
        m = word_matrix_real(model, x, y, E + delta)
        ratio = float(op_norm(m)) / gronwall_bound(L, x - y, delta)
        worst = max(worst, ratio)
        bad += ratio > 1.0 + 1e-12
    return GronwallReport(L, samples, bad, worst)


def _grid_prefix(model, E, pts):
    """Transfer matrices from pts[0] to every grid point (sorted, sub-cell)."""
    out = np.empty((len(pts), 2, 2), dtype=np.result_type(E, float))
    out[0] = np.eye(2)
    cur = np.eye(2)
    for i in range(1, len(pts)):
        cur = word_matrix_real(model, pts[i], pts[i - 1], E) @ cur
        out[i] = cur
    return out


# -- Sobolev-type derivative control ------------------------------------------

def uniform_local_l1(x, q):
    """sup over unit windows of the integral of |q| (trapezoid on the grid)."""
    x = np.asarray(x)
    dx = x[1] - x[0]
    w = int(round(1.0 / dx))
    a = np.abs(np.asarray(q))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (a[1:] + a[:-1]) * dx)])
    if len(x) <= w:
        return float(cum[-1])
    return float(np.max(cum[w:] - cum[:-w]))


def solution_on_grid(model, E, x0, x1, per_cell=64, init=(1.0, 0.0)):
    """(x, u, u') on a uniform grid over [x0, x1] (integer endpoints)."""
    E = complex(E) if np.iscomplexobj(E) else float(E)
    n = (x1 - x0) * per_cell
    xs = x0 + np.arange(n + 1) / per_cell
    t = np.arange(per_cell + 1) / per_cell
    sub = []
    for g in model.letter_map:
        sub.append(np.stack([g.partial_matrix(E, 0.0, ti) for ti in t]))
    letters = model.word.cells(x0, x1)
    vec = np.array(init, dtype=np.result_type(E, float))
    u = np.empty(n + 1, vec.dtype)
    du = np.empty(n + 1, vec.dtype)
    for c, j in enumerate(letters):
        blk = sub[j] @ vec
        u[c * per_cell: (c + 1) * per_cell + 1] = blk[:, 0]
        du[c * per_cell: (c + 1) * per_cell + 1] = blk[:, 1]
        vec = blk[-1]
    return xs, u, du


def sobolev_ratios(x, u, du):
    """|u'(x)|^2 / int_{x-1}^{x+1} |u|^2 at every grid point with a full window."""
    x = np.asarray(x)
    dx = x[1] - x[0]
    w = int(round(1.0 / dx))
    a = np.abs(u) ** 2
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (a[1:] + a[:-1]) * dx)])
    idx = np.arange(w, len(x) - w)
    local = cum[idx + w] - cum[idx - w]
    return x[idx], np.abs(du[idx]) ** 2 / local


@dataclass
class SobolevReport:
    max_ratio: float
    constant: float
    local_l1: float
    residual: float
    ok: bool


def sobolev_check(x, u, du, q, constant=None, residual_tol=1e-3):
    """Derivative bound for a sampled solution of u'' = q u.

    q is sampled either on the grid or on the midpoints between grid points;
    midpoints are the right choice when q jumps at grid points.
    """
    x = np.asarray(x)
    dx = x[1] - x[0]
    q = np.asarray(q)
    q_mid = q if q.shape[0] == x.shape[0] - 1 else 0.5 * (q[1:] + q[:-1])
    lhs = np.diff(du) / dx
    rhs = q_mid * 0.5 * (u[1:] + u[:-1])
    scale = np.max(np.abs(rhs)) + np.max(np.abs(lhs)) + 1e-300
    residual = float(np.max(np.abs(lhs - rhs)) / scale)
    if residual > residual_tol:
        raise ValueError(f"sampled u does not solve the equation (relative residual {residual:.2e})")
    _, r = sobolev_ratios(x, u, du)
    m = uniform_local_l1(0.5 * (x[1:] + x[:-1]), q_mid)
    C = sobolev_constant(m) if constant is None else constant
    mx = float(np.max(r))
    return SobolevReport(mx, C, m, residual, mx <= C)


def _step_family(q, lengths):
    """Transfer matrices of u'' = q u (q constant) over each length."""
    z = -q * lengths ** 2
    c = cos_sqrt(z + 0j)
    s = sinc_sqrt(z + 0j)
    out = np.empty(lengths.shape + (2, 2), complex)
    out[..., 0, 0] = c
    out[..., 0, 1] = lengths * s
    out[..., 1, 0] = q * lengths * s
    out[..., 1, 1] = c
    return out


def _worst_ratio_piecewise(widths, qvals):
    """Exact sup over all solutions of |u'(0)|^2 / int_{-1}^{1} |u|^2 for piecewise
    constant q on [-1, 1] (pieces listed left to right, widths summing to 2)."""
    edges = np.concatenate([[-1.0], -1.0 + np.cumsum(widths)])
    k0 = int(np.searchsorted(edges, 0.0, side="right")) - 1
    # split the piece containing 0 so 0 is an edge
    e = list(edges)
    qv = list(qvals)
    if abs(edges[k0]) > 1e-15:
        e.insert(k0 + 1, 0.0)
        qv.insert(k0 + 1, qv[k0])
        k0 += 1
    e = np.array(e)
    qv = np.array(qv, complex)
    nodes, wts = np.polynomial.legendre.leggauss(16)
    G = np.zeros((2, 2), complex)
    # Phi normalized to the identity at 0, walked outwards on both sides
    for sgn, pieces in ((1, range(k0, len(qv))), (-1, range(k0 - 1, -1, -1))):
        phi = np.eye(2, dtype=complex)
        for i in pieces:
            width = e[i + 1] - e[i]
            t = 0.5 * width * (nodes + 1)
            fam = _step_family(qv[i], np.append(t, width))
            if sgn < 0:
                fam = adj2(fam)
            rows = (fam[:-1] @ phi)[:, 0, :]
            phi = fam[-1] @ phi
            G += np.einsum("q,qi,qj->ij", 0.5 * width * wts, np.conj(rows), rows)
    Ginv = np.linalg.inv(G)
    return float(Ginv[1, 1].real)


@lru_cache(maxsize=64)
def _calibrated(mbin):
    m = mbin * 0.25
    rng = np.random.default_rng(20240611 + mbin)
    best = 0.0
    for phi in np.linspace(0.0, 2 * np.pi, 33):
        best = max(best, _worst_ratio_piecewise(np.array([2.0]), np.array([m * np.exp(1j * phi)])))
    for trial in range(400):
        npieces = int(rng.integers(1, 24))
        widths = rng.dirichlet(np.ones(npieces)) * 2.0
        if trial % 3 == 0:  # concentrated spike near the centre
            widths = np.array([1.0 - 0.02, 0.04, 1.0 - 0.02])
            npieces = 3
        mag = rng.dirichlet(np.ones(npieces) * 0.3)
        phase = np.exp(1j * np.pi * rng.integers(0, 2, npieces)) if trial % 2 else \
            np.exp(2j * np.pi * rng.uniform(size=npieces))
        dens = mag / widths
        qv = dens * phase
        # scale so the largest unit-window mass equals m
        xs = np.linspace(-1, 1, 801)
        edges = np.concatenate([[-1.0], -1.0 + np.cumsum(widths)])
        idx = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, npieces - 1)
        loc = uniform_local_l1(xs, np.abs(qv[idx]))
        qv = qv * (m / loc) if loc > 0 else qv
        best = max(best, _worst_ratio_piecewise(widths, qv))
    return best


def sobolev_constant(local_l1):
    """Calibrated constant C(M) for |u'(x)|^2 <= C int_{x-1}^{x+1} |u|^2.

    Worst case over a fixed random family of piecewise-constant q with
    uniform local L1 norm M (rounded up to a 0.25 grid), times 1.5.
    """
    mbin = max(1, int(np.ceil(local_l1 / 0.25 - 1e-12)))
    return 1.5 * _calibrated(mbin)
