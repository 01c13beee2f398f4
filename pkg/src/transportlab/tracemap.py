"""Trace maps for Thue-Morse (TM) and period-doubling (PD) hierarchies.

Level-k blocks are the transfer matrices over S^k(a) and S^k(b):

    TM   M0_k = M1_{k-1} M0_{k-1},  M1_k = M0_{k-1} M1_{k-1}
    PD   M0_k = M1_{k-1} M0_{k-1},  M1_k = M0_{k-1} M0_{k-1}

with traces x_k = tr M0_k, y_k = tr M1_k. The TM trace map is
x_k = x_{k-2}^2 (x_{k-1} - 2) + 2 for k >= 3. For PD, y_k = x_{k-1}^2 - 2 and
x_k = x_{k-1} y_{k-1} - c with c = tr(M_a^{-1} M_b), a level-independent
constant (c = 2 for the discrete one-step matrices).

Arbitrary positions in the subshift are handled as factors of the superword
S^m(a); a factor's matrix is assembled from level blocks along the binary
substitution tree, never cell by cell.
"""
from dataclasses import dataclass, field, replace
import json
import math
import warnings

import numpy as np
from scipy.optimize import brentq

from . import _kernels as K
from .transfer import op_norm, propagate
from .words import RULES, substitution_power

__all__ = [
    "TraceOrbit", "ExceptionalEnergy", "GrowthReport", "trace_step", "seed_traces",
    "orbit", "level_blocks", "level_traces", "direct_blocks", "direct_traces", "find_exceptional",
    "factor_matrix", "certify_growth", "trace_condition", "DEFAULT_WINDOW", "ROOT_TOL",
]

DEFAULT_WINDOW = (0.0, 100.0)
DEFAULT_SPACING = 1e-3
ROOT_TOL = 1e-10
IDENTITY_TOL = 1e-8


def _check_rule(rule):
    if rule not in ("TM", "PD"):
        raise ValueError(f"rule must be 'TM' or 'PD', got {rule!r}")


_SCALE_AT = 1e64
# computed det carries ~fro * eps error; past this it adds more drift than it removes
_DET_RENORM_FRO = 64.0


def _unimodular(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    fro = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    ok = (fro < _DET_RENORM_FRO) & (np.abs(det - 1.0) < 0.5)
    s = np.where(ok, 1.0 / np.sqrt(np.where(ok, det, 1.0)), 1.0)
    return m * s[..., None, None]


def _next_blocks(rule, m0, m1):
    if rule == "TM":
        return _unimodular(m1 @ m0), _unimodular(m0 @ m1)
    return _unimodular(m1 @ m0), _unimodular(m0 @ m0)


def _mul_scaled(p, q):
    # (matrix, log scale) pairs; value = matrix * exp(log scale)
    m, lg = p[0] @ q[0], p[1] + q[1]
    big = np.max(np.abs(m))
    if big > _SCALE_AT:
        return m / big, lg + math.log(big)
    if lg == 0.0:
        m = _unimodular(m)
    return m, lg


def _next_scaled(rule, b0, b1):
    if rule == "TM":
        return _mul_scaled(b1, b0), _mul_scaled(b0, b1)
    return _mul_scaled(b1, b0), _mul_scaled(b0, b0)


def _trace_gap(t_rec, block):
    m, lg = block
    tr = float(np.real(m[0, 0] + m[1, 1]))
    if lg == 0.0:
        return abs(t_rec - tr) / max(1.0, abs(tr))
    w = math.exp(-lg)
    return abs(t_rec * w - tr) / max(w, abs(tr))


@dataclass(frozen=True)
class TraceOrbit:
    """Traces x_k, y_k for levels first_level, first_level+1, ...

    `mats` (optional) holds ((M0_k, s0), (M1_k, s1)) for the same levels, the
    block being M * exp(s); s stays 0 until entries pass 1e64. `pd_const` is
    tr(M_a^{-1} M_b), only used by the PD recursion. Traces beyond float range
    are inf.
    """
    rule: str
    x: tuple
    y: tuple = ()
    E: float = float("nan")
    mats: tuple = None
    first_level: int = 0
    pd_const: float = 2.0

    def __post_init__(self):
        _check_rule(self.rule)
        if self.y and len(self.y) != len(self.x):
            raise ValueError("x and y must cover the same levels")
        if self.mats is not None and len(self.mats) != len(self.x):
            raise ValueError("one matrix pair per level")

    @property
    def last_level(self):
        return self.first_level + len(self.x) - 1

    def level(self, k):
        i = k - self.first_level
        if not 0 <= i < len(self.x):
            raise IndexError(f"level {k} not in orbit [{self.first_level}, {self.last_level}]")
        return i

    def xk(self, k):
        return self.x[self.level(k)]

    def yk(self, k):
        return self.y[self.level(k)]

    def block(self, k, which=0):
        m, lg = self.mats[self.level(k)][which]
        return m * math.exp(lg) if lg else m

    def product_residual(self, upto=None):
        """max relative gap between recursion traces and carried block traces

        Levels whose recursion value is no longer finite are skipped; the
        second return value is the last level compared.
        """
        if self.mats is None:
            raise ValueError("orbit carries no matrices")
        worst, last = 0.0, self.first_level - 1
        top = self.last_level if upto is None else upto
        for i, (b0, b1) in enumerate(self.mats[: top - self.first_level + 1]):
            vals = [(self.x[i], b0)] + ([(self.y[i], b1)] if self.y else [])
            if not all(np.isfinite(v) for v, _ in vals):
                break
            for t_rec, b in vals:
                worst = max(worst, _trace_gap(t_rec, b))
            last = self.first_level + i
        return worst, last

    def rows(self):
        """(k, x_k, y_k) rows for CSV output"""
        ys = self.y if self.y else (float("nan"),) * len(self.x)
        return [(self.first_level + i, float(np.real(xv)), float(np.real(yv)))
                for i, (xv, yv) in enumerate(zip(self.x, ys))]


def trace_step(rule, state):
    """Append the next level to a TraceOrbit using the trace map."""
    _check_rule(rule)
    if state.rule != rule:
        raise ValueError(f"orbit follows {state.rule}, not {rule}")
    k = state.last_level + 1
    x, y = state.x, state.y
    if rule == "TM":
        if len(x) < 2 or k < 3:
            raise ValueError("TM step needs x_{k-2}, x_{k-1} and k >= 3")
        xn = x[-2] * x[-2] * (x[-1] - 2.0) + 2.0
        yn = xn
    else:
        if not y or k < 1:
            raise ValueError("PD step needs x_{k-1} and y_{k-1}")
        xn = x[-1] * y[-1] - state.pd_const
        yn = x[-1] * x[-1] - 2.0
    mats = state.mats
    if mats is not None:
        mats = mats + (_next_scaled(rule, *mats[-1]),)
    ys = y + (yn,) if y else ()
    return replace(state, x=x + (xn,), y=ys, mats=mats)


def _letter_mats(g_a, g_b, E):
    return propagate(g_a, E), propagate(g_b, E)


def seed_traces(rule, g_a, g_b, E, carry=True):
    """Levels 0, 1, 2 from explicit products over S^k(a), S^k(b)."""
    _check_rule(rule)
    ma, mb = _letter_mats(g_a, g_b, E)
    letters = np.array([ma, mb])
    xs, ys, mats = [], [], []
    for k in range(3):
        m0 = K.chain_product(letters[substitution_power(rule, k, 0).letters], 0)
        m1 = K.chain_product(letters[substitution_power(rule, k, 1).letters], 0)
        xs.append(m0[0, 0] + m0[1, 1])
        ys.append(m1[0, 0] + m1[1, 1])
        mats.append(((m0, 0.0), (m1, 0.0)))
    adj_a = np.array([[ma[1, 1], -ma[0, 1]], [-ma[1, 0], ma[0, 0]]])
    c = np.trace(adj_a @ mb)
    if np.isrealobj(ma) and np.isrealobj(mb):
        xs, ys, c = [float(v) for v in xs], [float(v) for v in ys], float(c)
    return TraceOrbit(rule, tuple(xs), tuple(ys), float(np.real(E)) if np.ndim(E) == 0 else E,
                      tuple(mats) if carry else None, 0, c)


def orbit(rule, g_a, g_b, E, levels, carry=True):
    """Seed and run the trace map up to `levels` (inclusive)."""
    st = seed_traces(rule, g_a, g_b, E, carry)
    if levels < 2:
        return replace(st, x=st.x[:levels + 1], y=st.y[:levels + 1],
                       mats=None if st.mats is None else st.mats[:levels + 1])
    while st.last_level < levels:
        st = trace_step(rule, st)
    return st


def level_blocks(rule, g_a, g_b, E, levels):
    """(M0_k, M1_k) for k = 0..levels by block recursion; E may be an array."""
    _check_rule(rule)
    m0, m1 = _letter_mats(g_a, g_b, E)
    out = [(m0, m1)]
    for _ in range(levels):
        m0, m1 = _next_blocks(rule, m0, m1)
        out.append((m0, m1))
    return out


def level_traces(rule, g_a, g_b, E, k):
    """x_k(E) by block products; vectorized over E."""
    m0, _ = level_blocks(rule, g_a, g_b, E, k)[k]
    tr = m0[..., 0, 0] + m0[..., 1, 1]
    return np.real(tr) if np.isrealobj(np.asarray(E)) else tr


def direct_blocks(rule, g_a, g_b, E, k):
    """((M0_k, s0), (M1_k, s1)) from the raw cell-by-cell product; real E only."""
    ma, mb = _letter_mats(g_a, g_b, float(E))
    letters = np.array([ma, mb])
    return tuple(K.chain_scaled(letters, substitution_power(rule, k, root).letters)
                 for root in (0, 1))


def direct_traces(rule, g_a, g_b, E, k):
    """x_k, y_k from the raw cell-by-cell product; inf past float range."""
    out = []
    for m, lg in direct_blocks(rule, g_a, g_b, E, k):
        tr = float(m[0, 0] + m[1, 1])
        with np.errstate(over="ignore"):
            out.append(tr * np.exp(lg) if lg else tr)
    return tuple(float(v) for v in out)


# -- exceptional energies ----------------------------------------------------

@dataclass(frozen=True)
class ExceptionalEnergy:
    rule: str
    k: int
    E0: float
    residual: float
    identity_residual: float
    certificate_norm: float
    growth_model: str

    @property
    def defining_level(self):
        return self.k - 2 if self.rule == "TM" else self.k - 1

    def to_record(self):
        return {
            "rule": self.rule, "k": self.k, "E0": self.E0, "residual": self.residual,
            "identity_residual": self.identity_residual,
            "certificate_norm": self.certificate_norm, "growth_model": self.growth_model,
        }

    def to_json(self):
        return json.dumps(self.to_record(), sort_keys=True)


def _defining_level(rule, k):
    _check_rule(rule)
    if rule == "TM":
        if k < 3:
            raise ValueError("TM exceptional energies need k >= 3")
        return k - 2
    if k < 2:
        raise ValueError("PD exceptional energies need k >= 2")
    return k - 1


def _certify_root(rule, g_a, g_b, k, E0):
    j = _defining_level(rule, k)
    orb = orbit(rule, g_a, g_b, E0, max(k, 2))
    res = abs(orb.xk(j))
    m0, m1 = orb.block(k, 0), orb.block(k, 1)
    eye = np.eye(2)
    if rule == "TM":
        ident = max(np.max(np.abs(m0 - eye)), np.max(np.abs(m1 - eye)))
        model = "bounded"
    else:
        ident = float(np.max(np.abs(m1 + eye)))
        model = "linear"
    cert = max(op_norm(orb.block(j, w)) for j in range(k + 1) for w in (0, 1))
    return ExceptionalEnergy(rule, k, float(E0), float(res), float(ident), float(cert), model)


def find_exceptional(rule, g_a, g_b, k=None, window=DEFAULT_WINDOW, spacing=DEFAULT_SPACING):
    """Roots of the defining trace in `window`, each re-certified on the recursion.

    TM roots solve x_{k-2}(E) = 0, PD roots x_{k-1}(E) = 0. Tangential zeros
    between grid points are not seen.
    """
    if k is None:
        k = 3 if rule == "TM" else 2
    j = _defining_level(rule, k)
    lo, hi = window
    E = np.arange(lo + spacing, hi + 0.5 * spacing, spacing)
    f = level_traces(rule, g_a, g_b, E, j)
    # TODO: certify only sign changes; even-order roots need a |f| minimum pass like floquet's
    f_scalar = lambda e: float(level_traces(rule, g_a, g_b, e, j))
    roots = [float(e) for e in E[f == 0.0]]
    idx = np.nonzero(np.sign(f[:-1]) * np.sign(f[1:]) < 0)[0]
    for i in idx:
        roots.append(brentq(f_scalar, E[i], E[i + 1], xtol=1e-14, rtol=4 * np.finfo(float).eps,
                            maxiter=200))
    out = []
    for e0 in sorted(roots):
        rec = _certify_root(rule, g_a, g_b, k, e0)
        if rec.residual > ROOT_TOL:
            warnings.warn(f"root {e0} fails the recursion residual ({rec.residual:.2e}); dropped")
            continue
        out.append(rec)
    return out


# -- hierarchical factor products ------------------------------------------------

def _tuple_blocks(blocks):
    return [tuple(tuple(float(v) for v in m.ravel()) for m in pair) for pair in blocks]


def _mul(p, q):
    # (p @ q) for row-major 4-tuples
    return (p[0] * q[0] + p[1] * q[2], p[0] * q[1] + p[1] * q[3],
            p[2] * q[0] + p[3] * q[2], p[2] * q[1] + p[3] * q[3])


_EYE = (1.0, 0.0, 0.0, 1.0)


def _suffix(tb, images, letter, level, off):
    # cells [off, 2^level) inside a level-`level` block of `letter`
    acc = _EYE
    while level > 0:
        half = 1 << (level - 1)
        left, right = images[letter]
        if off < half:
            acc = _mul(acc, tb[level - 1][right])
            letter = left
        else:
            off -= half
            letter = right
        level -= 1
    if off == 0:
        acc = _mul(acc, tb[0][letter])
    return acc


def _prefix(tb, images, letter, level, n):
    # cells [0, n) inside a level-`level` block of `letter`; deeper factors go left
    acc = _EYE
    while level > 0:
        half = 1 << (level - 1)
        left, right = images[letter]
        if n >= half:
            acc = _mul(tb[level - 1][left], acc)
            n -= half
            letter = right
        else:
            letter = left
        level -= 1
    if n == 1:
        acc = _mul(tb[0][letter], acc)
    return acc


def factor_matrix(tb, rule, m, x, y):
    """Transfer matrix over cells [x, y) of S^m(a), from tuple blocks `tb`."""
    if not 0 <= x <= y <= (1 << m):
        raise IndexError(f"factor [{x}, {y}) outside S^{m}(a)")
    if x == y:
        return _EYE
    images = RULES[rule]
    letter, level, base = 0, m, 0
    # descend to the smallest block holding [x, y)
    while level > 0:
        half = 1 << (level - 1)
        left, right = images[letter]
        if y - base <= half:
            letter = left
        elif x - base >= half:
            base += half
            letter = right
        else:
            break
        level -= 1
    if level == 0:
        return tb[0][letter]
    half = 1 << (level - 1)
    left, right = images[letter]
    suf = _suffix(tb, images, left, level - 1, x - base)
    pre = _prefix(tb, images, right, level - 1, y - base - half)
    return _mul(pre, suf)


def _op_norm_t(p):
    a, b, c, d = p
    s = a * a + b * b + c * c + d * d
    det = a * d - b * c
    return math.sqrt(0.5 * (s + math.sqrt(max(s * s - 4.0 * det * det, 0.0))))


@dataclass
class GrowthReport:
    rule: str
    E0: float
    levels: np.ndarray
    lengths: np.ndarray
    sup_norm: np.ndarray
    max_linear_ratio: float
    loglog_slope: float
    affine: tuple
    diagonal_norm: float
    probes: int
    samples: list = field(default_factory=list, repr=False)

    @property
    def level_ratio(self):
        """sup at the top level over sup two levels below"""
        if len(self.sup_norm) < 3:
            return float("nan")
        return float(self.sup_norm[-1] / self.sup_norm[-3])

    def bounded_ok(self, tol=0.05):
        return abs(self.level_ratio - 1.0) <= tol

    def linear_ok(self, slack=0.1):
        return self.loglog_slope <= 1.0 + slack

    def to_record(self):
        return {
            "rule": self.rule, "E0": self.E0, "levels": self.levels.tolist(),
            "lengths": self.lengths.tolist(), "sup_norm": self.sup_norm.tolist(),
            "max_linear_ratio": self.max_linear_ratio, "loglog_slope": self.loglog_slope,
            "affine": list(self.affine), "level_ratio": self.level_ratio,
            "diagonal_norm": self.diagonal_norm, "probes": self.probes,
        }


def certify_growth(ee, g_a, g_b, max_level=20, probes=1000, seed=0, levels=None, margin=2):
    """Sup of ||M(x, y, E0)|| over random factors of S^m(a), m = max_level + margin.

    For each level L, `probes` pairs with x - y in (2^{L-1}, 2^L] and uniform
    start are drawn. Positions are integer cell boundaries.
    """
    rec = _certify_root(ee.rule, g_a, g_b, ee.k, ee.E0)
    if rec.residual > ROOT_TOL:
        raise ValueError(f"E0 = {ee.E0} fails its root residual ({rec.residual:.2e})")
    m = max_level + margin
    tb = _tuple_blocks(level_blocks(ee.rule, g_a, g_b, ee.E0, m))
    if levels is None:
        levels = np.arange(1, max_level + 1)
    levels = np.asarray(levels, dtype=int)
    rng = np.random.Generator(np.random.Philox(seed))
    top = 1 << m
    sups, samples = [], []
    for L in levels:
        lo, hi = (1 << (L - 1)) + 1, 1 << L
        if L == 0:
            lo = hi = 1
        d = rng.integers(lo, hi + 1, size=probes)
        x = rng.integers(0, top - d + 1)
        norms = np.array([_op_norm_t(factor_matrix(tb, ee.rule, m, int(a), int(a + b)))
                          for a, b in zip(x, d)])
        sups.append(norms.max())
        samples.append((d, norms))
    sups = np.array(sups)
    lengths = (1 << levels).astype(float)
    dd = np.concatenate([s[0] for s in samples]).astype(float)
    nn = np.concatenate([s[1] for s in samples])
    slope = float(np.polyfit(np.log(lengths), np.log(sups), 1)[0]) if len(levels) > 1 else 0.0
    A = np.column_stack([np.ones_like(lengths), lengths])
    affine = tuple(float(v) for v in np.linalg.lstsq(A, sups, rcond=None)[0])
    x0 = int(rng.integers(0, top))
    diag = _op_norm_t(factor_matrix(tb, ee.rule, m, x0, x0))
    return GrowthReport(ee.rule, ee.E0, levels, lengths, sups, float(np.max(nn / (1.0 + dd))),
                        slope, affine, diag, probes, samples)


def trace_condition(rule, g_a, g_b, E, levels, rel_step=1e-7):
    """|E dx_k/dE| / max(1, |x_k|) per level, by central differences on the recursion."""
    h = rel_step * max(abs(E), 1.0)
    x = np.array(orbit(rule, g_a, g_b, E, levels, carry=False).x)
    xp = np.array(orbit(rule, g_a, g_b, E + h, levels, carry=False).x)
    xm = np.array(orbit(rule, g_a, g_b, E - h, levels, carry=False).x)
    with np.errstate(invalid="ignore", over="ignore"):
        return np.abs(E * (xp - xm) / (2 * h)) / np.maximum(1.0, np.abs(x))
