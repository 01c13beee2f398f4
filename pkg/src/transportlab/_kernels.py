"""Hot loops, each in a numba flavour (`*_nb`) and a numpy flavour (`*_np`).

The public name binds to one of them according to `_accel.USE_NUMBA`.
Both flavours must agree to rounding; tests/test_kernels.py holds them to it.
"""
import numpy as np

from ._accel import njit, pick

# renormalize only while det is still trustworthy (fro^2 * eps small)
_RENORM_FRO_MAX = 1e8


# -- 2x2 product chains ------------------------------------------------------

@njit
def _renorm(m00, m01, m10, m11):
    det = m00 * m11 - m01 * m10
    fro = abs(m00) ** 2 + abs(m01) ** 2 + abs(m10) ** 2 + abs(m11) ** 2
    if fro < _RENORM_FRO_MAX and abs(det - 1.0) < 0.5:
        s = 1.0 / np.sqrt(det)
        return m00 * s, m01 * s, m10 * s, m11 * s
    return m00, m01, m10, m11


@njit
def _chain_product_nb(mats, renorm_every):
    out = np.zeros((2, 2), mats.dtype)
    m00 = out[0, 0] + 1.0
    m01 = out[0, 1]
    m10 = out[1, 0]
    m11 = out[1, 1] + 1.0
    for i in range(mats.shape[0]):
        a00 = mats[i, 0, 0]
        a01 = mats[i, 0, 1]
        a10 = mats[i, 1, 0]
        a11 = mats[i, 1, 1]
        n00 = a00 * m00 + a01 * m10
        n01 = a00 * m01 + a01 * m11
        n10 = a10 * m00 + a11 * m10
        n11 = a10 * m01 + a11 * m11
        m00, m01, m10, m11 = n00, n01, n10, n11
        if renorm_every > 0 and (i + 1) % renorm_every == 0:
            m00, m01, m10, m11 = _renorm(m00, m01, m10, m11)
    out[0, 0] = m00
    out[0, 1] = m01
    out[1, 0] = m10
    out[1, 1] = m11
    return out


def _renorm_np(m):
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    fro = np.sum(np.abs(m) ** 2, axis=(-2, -1))
    ok = (fro < _RENORM_FRO_MAX) & (np.abs(det - 1.0) < 0.5)
    s = np.where(ok, 1.0 / np.sqrt(np.where(ok, det, 1.0)), 1.0)
    return m * s[..., None, None]


def _chain_product_np(mats, renorm_every):
    # pairwise tree: result = mats[-1] @ ... @ mats[0]
    cur = np.array(mats, copy=True)
    if cur.shape[0] == 0:
        return np.eye(2, dtype=cur.dtype)
    while cur.shape[0] > 1:
        n = cur.shape[0]
        head = cur[1:n - n % 2:2] @ cur[0:n - n % 2:2]
        if n % 2:
            head = np.concatenate([head, cur[-1:]], axis=0)
        cur = _renorm_np(head) if renorm_every > 0 else head
    return cur[0]


chain_product = pick(_chain_product_nb, _chain_product_np)


@njit
def _prefix_products_nb(mats, renorm_every):
    n = mats.shape[0]
    out = np.zeros((n + 1, 2, 2), mats.dtype)
    out[0, 0, 0] = 1.0
    out[0, 1, 1] = 1.0
    m00 = out[0, 0, 0]
    m01 = out[0, 0, 1]
    m10 = out[0, 1, 0]
    m11 = out[0, 1, 1]
    for i in range(n):
        a00 = mats[i, 0, 0]
        a01 = mats[i, 0, 1]
        a10 = mats[i, 1, 0]
        a11 = mats[i, 1, 1]
        n00 = a00 * m00 + a01 * m10
        n01 = a00 * m01 + a01 * m11
        n10 = a10 * m00 + a11 * m10
        n11 = a10 * m01 + a11 * m11
        m00, m01, m10, m11 = n00, n01, n10, n11
        if renorm_every > 0 and (i + 1) % renorm_every == 0:
            m00, m01, m10, m11 = _renorm(m00, m01, m10, m11)
        out[i + 1, 0, 0] = m00
        out[i + 1, 0, 1] = m01
        out[i + 1, 1, 0] = m10
        out[i + 1, 1, 1] = m11
    return out


def _prefix_products_np(mats, renorm_every):
    # Hillis-Steele inclusive scan under (A, B) -> B @ A
    p = np.array(mats, copy=True)
    n = p.shape[0]
    s = 1
    while s < n:
        p[s:] = p[s:] @ p[:-s]
        if renorm_every > 0:
            p = _renorm_np(p)
        s *= 2
    eye = np.eye(2, dtype=p.dtype)[None]
    return np.concatenate([eye, p], axis=0)


prefix_products = pick(_prefix_products_nb, _prefix_products_np)


@njit
def _indexed_prefix_nb(letter_mats, letters, renorm_every):
    n = letters.shape[0]
    mats = np.empty((n, 2, 2), letter_mats.dtype)
    for i in range(n):
        mats[i] = letter_mats[letters[i]]
    return _prefix_products_nb(mats, renorm_every)


def _indexed_prefix_np(letter_mats, letters, renorm_every):
    return _prefix_products_np(letter_mats[letters], renorm_every)


indexed_prefix_products = pick(_indexed_prefix_nb, _indexed_prefix_np)


@njit
def _prefix_max_norm_nb(letter_mats, letters):
    """max over k of the Frobenius norm of the k-th prefix product."""
    m00 = letter_mats[0, 0, 0] * 0.0 + 1.0
    m01 = letter_mats[0, 0, 0] * 0.0
    m10 = m01
    m11 = m00
    best = 2.0
    for i in range(letters.shape[0]):
        j = letters[i]
        a00 = letter_mats[j, 0, 0]
        a01 = letter_mats[j, 0, 1]
        a10 = letter_mats[j, 1, 0]
        a11 = letter_mats[j, 1, 1]
        n00 = a00 * m00 + a01 * m10
        n01 = a00 * m01 + a01 * m11
        n10 = a10 * m00 + a11 * m10
        n11 = a10 * m01 + a11 * m11
        m00, m01, m10, m11 = n00, n01, n10, n11
        fro = abs(m00) ** 2 + abs(m01) ** 2 + abs(m10) ** 2 + abs(m11) ** 2
        if fro > best:
            best = fro
    return np.sqrt(best)


def _prefix_max_norm_np(letter_mats, letters):
    p = _prefix_products_np(letter_mats[letters], 0)
    return float(np.sqrt(np.max(np.sum(np.abs(p) ** 2, axis=(1, 2)))))


prefix_max_frobenius = pick(_prefix_max_norm_nb, _prefix_max_norm_np)


# -- pairwise sup of ||P_x P_y^{-1}|| -----------------------------------------

@njit
def _max_pair_direct_nb(prods):
    """max over x, y of ||P_x adj(P_y)||_F^2, products formed explicitly."""
    n = prods.shape[0]
    best = 0.0
    for y in range(n):
        # adj(P_y) = [[d, -b], [-c, a]]
        b00 = prods[y, 1, 1]
        b01 = -prods[y, 0, 1]
        b10 = -prods[y, 1, 0]
        b11 = prods[y, 0, 0]
        for x in range(n):
            a00 = prods[x, 0, 0]
            a01 = prods[x, 0, 1]
            a10 = prods[x, 1, 0]
            a11 = prods[x, 1, 1]
            f = (abs(a00 * b00 + a01 * b10) ** 2 + abs(a00 * b01 + a01 * b11) ** 2
                 + abs(a10 * b00 + a11 * b10) ** 2 + abs(a10 * b01 + a11 * b11) ** 2)
            if f > best:
                best = f
    return best


def _max_pair_direct_np(prods, chunk=512):
    p = np.asarray(prods)
    adj = np.empty_like(p)
    adj[:, 0, 0] = p[:, 1, 1]
    adj[:, 1, 1] = p[:, 0, 0]
    adj[:, 0, 1] = -p[:, 0, 1]
    adj[:, 1, 0] = -p[:, 1, 0]
    best = 0.0
    for y0 in range(0, p.shape[0], chunk):
        m = p[:, None] @ adj[None, y0:y0 + chunk]
        best = max(best, float(np.max(np.sum(np.abs(m) ** 2, axis=(-2, -1)))))
    return best


max_pair_direct = pick(_max_pair_direct_nb, _max_pair_direct_np)


# -- fourth-order Magnus propagation -------------------------------------------

_SQ3_12 = np.sqrt(3.0) / 12.0


@njit
def _cs_nb(z):
    # cos(sqrt z), sin(sqrt z)/sqrt z
    if abs(z) < 1e-2:
        c = 1.0 + 0j
        s = 1.0 + 0j
        term_c = 1.0 + 0j
        term_s = 1.0 + 0j
        for n in range(1, 8):
            term_c = term_c * (-z) / ((2 * n - 1) * (2 * n))
            term_s = term_s * (-z) / ((2 * n) * (2 * n + 1))
            c += term_c
            s += term_s
        return c, s
    w = np.sqrt(z + 0j)
    return np.cos(w), np.sin(w) / w


@njit
def _magnus_chain_nb(hs, v1, v2, energies):
    ne = energies.shape[0]
    out = np.empty((ne, 2, 2), np.complex128)
    for e in range(ne):
        E = energies[e]
        m00 = 1.0 + 0j
        m01 = 0.0 + 0j
        m10 = 0.0 + 0j
        m11 = 1.0 + 0j
        for i in range(hs.shape[0]):
            h = hs[i]
            q1 = v1[i] - E
            q2 = v2[i] - E
            al = _SQ3_12 * h * h * (q1 - q2)
            be = 0.5 * h * (q1 + q2)
            c, s = _cs_nb(-(al * al + h * be))
            a00 = c + s * al
            a01 = s * h
            a10 = s * be
            a11 = c - s * al
            n00 = a00 * m00 + a01 * m10
            n01 = a00 * m01 + a01 * m11
            n10 = a10 * m00 + a11 * m10
            n11 = a10 * m01 + a11 * m11
            m00, m01, m10, m11 = n00, n01, n10, n11
        out[e, 0, 0] = m00
        out[e, 0, 1] = m01
        out[e, 1, 0] = m10
        out[e, 1, 1] = m11
    return out


def _cs_np(z):
    z = np.asarray(z, complex)
    small = np.abs(z) < 1e-2
    w = np.sqrt(np.where(small, 1.0, z))
    c = np.cos(w)
    s = np.sin(w) / w
    if np.any(small):
        zs = z[small]
        tc = np.ones_like(zs)
        ts = np.ones_like(zs)
        cs, ss = tc.copy(), ts.copy()
        for n in range(1, 8):
            tc = tc * (-zs) / ((2 * n - 1) * (2 * n))
            ts = ts * (-zs) / ((2 * n) * (2 * n + 1))
            cs += tc
            ss += ts
        c[small] = cs
        s[small] = ss
    return c, s


def _magnus_chain_np(hs, v1, v2, energies):
    E = np.asarray(energies, complex)
    m = np.zeros((E.size, 2, 2), complex)
    m[:, 0, 0] = m[:, 1, 1] = 1.0
    for i in range(hs.shape[0]):
        h = hs[i]
        q1 = v1[i] - E
        q2 = v2[i] - E
        al = _SQ3_12 * h * h * (q1 - q2)
        be = 0.5 * h * (q1 + q2)
        c, s = _cs_np(-(al * al + h * be))
        a = np.empty_like(m)
        a[:, 0, 0] = c + s * al
        a[:, 0, 1] = s * h
        a[:, 1, 0] = s * be
        a[:, 1, 1] = c - s * al
        m = a @ m
    return m


magnus_chain = pick(_magnus_chain_nb, _magnus_chain_np)


# -- Pruefer angle walks -------------------------------------------------------
# z = exp(i theta); one step of letter j maps z to the phase of
# a_j z + conj(b_j) conj(z) and adds c_j z^2 to the running sum.

@njit
def _theta_walk_max_nb(letters, a, b, c, z0):
    T, K = letters.shape
    nq = z0.shape[0]
    # per letter: a + conj(b) and the rows of z -> a z + conj(b) conj(z) as a real 2x2 map
    m00 = a.real + b.real
    m01 = -a.imag - b.imag
    m10 = a.imag - b.imag
    m11 = a.real - b.real
    cr = c.real.copy()
    ci = c.imag.copy()
    out = np.empty((T, nq))
    xs = np.empty(nq)
    ys = np.empty(nq)
    sr = np.empty(nq)
    si = np.empty(nq)
    best = np.empty(nq)
    for t in range(T):
        for q in range(nq):
            xs[q] = z0[q].real
            ys[q] = z0[q].imag
            sr[q] = 0.0
            si[q] = 0.0
            best[q] = 0.0
        for k in range(K):
            j = letters[t, k]
            for q in range(nq):
                x = xs[q]
                y = ys[q]
                zr = x * x - y * y
                zi = 2.0 * x * y
                r = sr[q] + cr[j] * zr - ci[j] * zi
                i = si[q] + cr[j] * zi + ci[j] * zr
                sr[q] = r
                si[q] = i
                m = r * r + i * i
                if m > best[q]:
                    best[q] = m
                vr = m00[j] * x + m01[j] * y
                vi = m10[j] * x + m11[j] * y
                inv = 1.0 / np.sqrt(vr * vr + vi * vi)
                xs[q] = vr * inv
                ys[q] = vi * inv
        for q in range(nq):
            out[t, q] = np.sqrt(best[q])
    return out


def _theta_walk_max_np(letters, a, b, c, z0):
    letters = np.asarray(letters)
    T, K = letters.shape
    z = np.broadcast_to(np.asarray(z0, complex), (T, len(z0))).copy()
    s = np.zeros_like(z)
    best = np.zeros(z.shape)
    for k in range(K):
        j = letters[:, k][:, None]
        s += c[j] * z * z
        np.maximum(best, np.abs(s), out=best)
        v = a[j] * z + np.conj(b[j]) * np.conj(z)
        z = v / np.abs(v)
    return best


theta_walk_max = pick(_theta_walk_max_nb, _theta_walk_max_np)


@njit
def _theta_walk_nb(letters, a, b, c, z0):
    K = letters.shape[0]
    sums = np.empty(K + 1, np.complex128)
    zs = np.empty(K + 1, np.complex128)
    logf = np.empty(K)
    z = z0
    s = 0j
    sums[0] = s
    zs[0] = z
    for k in range(K):
        j = letters[k]
        s += c[j] * z * z
        v = a[j] * z + np.conj(b[j]) * np.conj(z)
        r = abs(v)
        logf[k] = np.log(r)
        z = v / r
        sums[k + 1] = s
        zs[k + 1] = z
    return sums, zs, logf


def _theta_walk_np(letters, a, b, c, z0):
    K = letters.shape[0]
    sums = np.empty(K + 1, complex)
    zs = np.empty(K + 1, complex)
    logf = np.empty(K)
    z = complex(z0)
    s = 0j
    sums[0], zs[0] = s, z
    for k in range(K):
        j = letters[k]
        s += c[j] * z * z
        v = a[j] * z + np.conj(b[j]) * np.conj(z)
        r = abs(v)
        logf[k] = np.log(r)
        z = v / r
        sums[k + 1], zs[k + 1] = s, z
    return sums, zs, logf


theta_walk = pick(_theta_walk_nb, _theta_walk_np)


# -- log-scaled chains (hyperbolic energies overflow plain products) -------------

_SCALE_AT = 1e64


@njit
def _chain_scaled_nb(letter_mats, letters):
    m00 = 1.0
    m01 = 0.0
    m10 = 0.0
    m11 = 1.0
    logscale = 0.0
    for i in range(letters.shape[0]):
        a = letter_mats[letters[i]]
        n00 = a[0, 0] * m00 + a[0, 1] * m10
        n01 = a[0, 0] * m01 + a[0, 1] * m11
        n10 = a[1, 0] * m00 + a[1, 1] * m10
        n11 = a[1, 0] * m01 + a[1, 1] * m11
        m00, m01, m10, m11 = n00, n01, n10, n11
        big = max(max(abs(m00), abs(m01)), max(abs(m10), abs(m11)))
        if big > _SCALE_AT:
            m00 /= big
            m01 /= big
            m10 /= big
            m11 /= big
            logscale += np.log(big)
    out = np.empty((2, 2))
    out[0, 0] = m00
    out[0, 1] = m01
    out[1, 0] = m10
    out[1, 1] = m11
    return out, logscale


def _chain_scaled_np(letter_mats, letters):
    # pairwise tree with per-level rescaling; real matrices only
    cur = np.array(letter_mats[letters], dtype=float)
    logs = np.zeros(cur.shape[0])
    if cur.shape[0] == 0:
        return np.eye(2), 0.0
    while cur.shape[0] > 1:
        n = cur.shape[0]
        even = n - n % 2
        head = cur[1:even:2] @ cur[0:even:2]
        hl = logs[1:even:2] + logs[0:even:2]
        if n % 2:
            head = np.concatenate([head, cur[-1:]], axis=0)
            hl = np.concatenate([hl, logs[-1:]])
        big = np.max(np.abs(head), axis=(1, 2))
        scale = big > _SCALE_AT
        head[scale] /= big[scale, None, None]
        hl[scale] += np.log(big[scale])
        cur, logs = head, hl
    return cur[0], float(logs[0])


chain_scaled = pick(_chain_scaled_nb, _chain_scaled_np)


# -- backward resolvent sweep ----------------------------------------------------
# One pass per energy from the outer cut R down to the inner edge x0, carrying
# the decaying solution's Cauchy vector v and the weighted norms
#   J_p = int_{x0}^{R} |x|^p |psi|^2 dx
# as Hermitian forms in v at each cell's RIGHT edge (the backward direction
# never cancels).  Gram tables hold (G00, G11, Re G01, Im G01).
# Cell n = x0 + k: sum_j coef[k, ip, j] q_j with q_j the form of
# G_j = int t^j r* r dt (binomial expansion of (n + t)^p), or the direct
# table near[.., n] for n < near.shape[3].

_SWEEP_SCALE = 1e40  # |v| bound entering the forms


@njit
def _tail_sweep_nb(letters, minv, gram, near, x0, coef, nterms, R, v_init, J_init):
    nE = minv.shape[0]
    nP = nterms.shape[0]
    n_near = near.shape[3]
    jtop = gram.shape[2]
    psi0 = np.empty((nE, 2), np.complex128)
    J = np.empty((nE, nP))
    edge = np.empty(nE)
    last = np.empty(nE)
    ptop = nP - 1
    q = np.empty(jtop)
    acc = np.empty(nP)
    for e in range(nE):
        v0 = v_init[e, 0]
        v1 = v_init[e, 1]
        logscale = 0.0
        big = max(abs(v0), abs(v1))
        if big > _SWEEP_SCALE:
            v0 /= big
            v1 /= big
            logscale = np.log(big)
        for ip in range(nP):
            acc[ip] = J_init[e, ip] * np.exp(-2.0 * logscale)
        lastc = 0.0
        for k in range(R[e] - 1, -1, -1):
            n = x0 + k
            ell = letters[k]
            a = v0.real * v0.real + v0.imag * v0.imag
            b = v1.real * v1.real + v1.imag * v1.imag
            cr = v0.real * v1.real + v0.imag * v1.imag
            ci = v0.real * v1.imag - v0.imag * v1.real
            if n < n_near:
                for ip in range(nP):
                    g = near[e, ell, ip, n]
                    c = g[0] * a + g[1] * b + 2.0 * (g[2] * cr - g[3] * ci)
                    acc[ip] += c
                    if ip == ptop and k == R[e] - 1:
                        lastc = c
            else:
                for j in range(jtop):
                    g = gram[e, ell, j]
                    q[j] = g[0] * a + g[1] * b + 2.0 * (g[2] * cr - g[3] * ci)
                for ip in range(nP):
                    c = 0.0
                    for j in range(nterms[ip]):
                        c += coef[k, ip, j] * q[j]
                    acc[ip] += c
                    if ip == ptop and k == R[e] - 1:
                        lastc = c
            m = minv[e, ell]
            w0 = m[0, 0] * v0 + m[0, 1] * v1
            v1 = m[1, 0] * v0 + m[1, 1] * v1
            v0 = w0
            big = max(abs(v0.real) + abs(v0.imag), abs(v1.real) + abs(v1.imag))
            if big > _SWEEP_SCALE:
                v0 /= big
                v1 /= big
                s2 = big * big
                for ip in range(nP):
                    acc[ip] /= s2
                lastc /= s2
                logscale += np.log(big)
        nrm = np.sqrt(abs(v0) ** 2 + abs(v1) ** 2)
        psi0[e, 0] = v0 / nrm
        psi0[e, 1] = v1 / nrm
        for ip in range(nP):
            J[e, ip] = acc[ip] / (nrm * nrm)
        last[e] = lastc / acc[ptop] if acc[ptop] > 0 else 0.0
        vin = np.sqrt(abs(v_init[e, 0]) ** 2 + abs(v_init[e, 1]) ** 2)
        edge[e] = vin * np.exp(-logscale) / nrm
    return psi0, J, edge, last


def _hform_np(g, v):
    # g (..., 4) real Hermitian table, v (..., 2) complex
    a = np.abs(v[..., 0]) ** 2
    b = np.abs(v[..., 1]) ** 2
    c = np.conj(v[..., 0]) * v[..., 1]
    return g[..., 0] * a + g[..., 1] * b + 2.0 * (g[..., 2] * c.real - g[..., 3] * c.imag)


def _tail_sweep_np(letters, minv, gram, near, x0, coef, nterms, R, v_init, J_init):
    nE = minv.shape[0]
    nP = nterms.shape[0]
    n_near = near.shape[3]
    ptop = nP - 1
    v = np.array(v_init, dtype=complex)
    big = np.max(np.abs(v), axis=1)
    logscale = np.where(big > _SWEEP_SCALE, np.log(np.maximum(big, 1e-300)), 0.0)
    v /= np.exp(logscale)[:, None]
    acc = np.array(J_init, dtype=float) * np.exp(-2 * logscale)[:, None]
    lastc = np.zeros(nE)
    rows = np.arange(nE)
    R = np.asarray(R)
    for k in range(int(R.max(initial=0)) - 1, -1, -1):
        on = R > k
        if not on.any():
            continue
        ell = int(letters[k])
        idx = rows[on]
        vv = v[idx]
        n = x0 + k
        if n < n_near:
            c = np.stack([_hform_np(near[idx, ell, ip, n], vv) for ip in range(nP)], axis=1)
        else:
            q = _hform_np(gram[idx, ell], vv[:, None, :])
            c = np.zeros((idx.size, nP))
            for ip in range(nP):
                nt = int(nterms[ip])
                c[:, ip] = q[:, :nt] @ coef[k, ip, :nt]
        acc[idx] += c
        first = R[idx] - 1 == k
        lastc[idx[first]] = c[first, ptop]
        vv = np.einsum("eij,ej->ei", minv[idx, ell], vv)
        big = np.max(np.abs(vv.real) + np.abs(vv.imag), axis=1)
        sc = big > _SWEEP_SCALE
        if sc.any():
            vv[sc] /= big[sc, None]
            s_idx = idx[sc]
            acc[s_idx] /= (big[sc] ** 2)[:, None]
            lastc[s_idx] /= big[sc] ** 2
            logscale[s_idx] += np.log(big[sc])
        v[idx] = vv
    nrm = np.sqrt(np.sum(np.abs(v) ** 2, axis=1))
    psi0 = v / nrm[:, None]
    J = acc / (nrm ** 2)[:, None]
    top = acc[:, ptop]
    last = np.where(top > 0, lastc / np.where(top > 0, top, 1.0), 0.0)
    vin = np.sqrt(np.sum(np.abs(v_init) ** 2, axis=1))
    edge = vin * np.exp(-logscale) / nrm
    return psi0, J, edge, last


tail_sweep = pick(_tail_sweep_nb, _tail_sweep_np)


# -- discrete resolvent moments --------------------------------------------------
# (H - z) u = f on a window with unit off-diagonals, H = V on the diagonal.
# With Im z > 0 every Thomas pivot has Im beta <= -Im z, so no pivoting.
# Returns sum_n |n|^p |u(n)|^2 per (z, p) and the same sum over edge sites.

_TRI_BLOCK = 8  # energies advanced together; independent pivot chains overlap


@njit
def _tridiag_moments_nb(V, pos, edge_mask, f_idx, f_val, z, ps):
    N = V.shape[0]
    nz = z.shape[0]
    nP = ps.shape[0]
    B = _TRI_BLOCK
    out = np.zeros((nz, nP))
    edge = np.zeros((nz, nP))
    pairing = np.empty(nz, np.complex128)
    cr = np.empty((N, B))
    ci = np.empty((N, B))
    dr = np.zeros((N, B))
    di = np.zeros((N, B))
    fr = np.zeros(N)
    fi = np.zeros(N)
    for i in range(f_idx.shape[0]):
        fr[f_idx[i]] = f_val[i].real
        fi[f_idx[i]] = f_val[i].imag
    lo_f = f_idx.min()
    hi_f = f_idx.max()
    wts = np.empty((N, nP))
    for n in range(N):
        a = abs(pos[n])
        for ip in range(nP):
            wts[n, ip] = 1.0 if ps[ip] == 0.0 else a ** ps[ip]
    zr = np.empty(B)
    zi = np.empty(B)
    br = np.empty(B)
    bi = np.empty(B)
    xr = np.empty(B)
    xi = np.empty(B)
    m = np.empty(B)
    acc = np.empty((B, nP))
    acc_e = np.empty((B, nP))
    prr = np.empty(B)
    pri = np.empty(B)
    for e0 in range(0, nz, B):
        nb = min(B, nz - e0)
        for j in range(B):
            # padded lanes repeat the last energy
            zr[j] = z[e0 + min(j, nb - 1)].real
            zi[j] = z[e0 + min(j, nb - 1)].imag
        for j in range(B):
            br[j] = V[0] - zr[j]
            bi[j] = -zi[j]
        for n in range(N):
            if n > 0:
                for j in range(B):
                    br[j] = V[n] - zr[j] - cr[n - 1, j]
                    bi[j] = -zi[j] - ci[n - 1, j]
            for j in range(B):
                inv = 1.0 / (br[j] * br[j] + bi[j] * bi[j])  # |beta| >= Im z
                cr[n, j] = br[j] * inv
                ci[n, j] = -bi[j] * inv
        # rhs vanishes below lo_f, so d does too
        for j in range(B):
            xr[j] = 0.0
            xi[j] = 0.0
        for n in range(lo_f, N):
            for j in range(B):
                tr = fr[n] - xr[j]
                ti = fi[n] - xi[j]
                xr[j] = tr * cr[n, j] - ti * ci[n, j]
                xi[j] = tr * ci[n, j] + ti * cr[n, j]
                dr[n, j] = xr[j]
                di[n, j] = xi[j]
        acc[:, :] = 0.0
        acc_e[:, :] = 0.0
        prr[:] = 0.0
        pri[:] = 0.0
        for j in range(B):
            xr[j] = 0.0
            xi[j] = 0.0
        for n in range(N - 1, -1, -1):
            for j in range(B):
                tr = -(cr[n, j] * xr[j] - ci[n, j] * xi[j])
                ti = -(cr[n, j] * xi[j] + ci[n, j] * xr[j])
                if n >= lo_f:
                    tr += dr[n, j]
                    ti += di[n, j]
                xr[j] = tr
                xi[j] = ti
                m[j] = tr * tr + ti * ti
            for j in range(B):
                for ip in range(nP):
                    acc[j, ip] += wts[n, ip] * m[j]
            if edge_mask[n]:
                for j in range(B):
                    for ip in range(nP):
                        acc_e[j, ip] += wts[n, ip] * m[j]
            if lo_f <= n <= hi_f:
                for j in range(B):
                    prr[j] += fr[n] * xr[j] + fi[n] * xi[j]
                    pri[j] += fr[n] * xi[j] - fi[n] * xr[j]
        for j in range(nb):
            for ip in range(nP):
                out[e0 + j, ip] = acc[j, ip]
                edge[e0 + j, ip] = acc_e[j, ip]
            pairing[e0 + j] = complex(prr[j], pri[j])
    return out, edge, pairing


def _tridiag_moments_np(V, pos, edge_mask, f_idx, f_val, z, ps, chunk=256):
    N = V.shape[0]
    rhs = np.zeros(N, complex)
    rhs[f_idx] = f_val
    a = np.abs(pos)
    wts = np.stack([np.ones(N) if p == 0 else a ** p for p in ps], axis=1)
    outs, edges, prs = [], [], []
    for i0 in range(0, z.shape[0], chunk):
        zz = z[i0:i0 + chunk]
        c = np.empty((N, zz.size), complex)
        d = np.empty((N, zz.size), complex)
        beta = V[0] - zz
        c[0] = 1.0 / beta
        d[0] = rhs[0] / beta
        for n in range(1, N):
            beta = V[n] - zz - c[n - 1]
            c[n] = 1.0 / beta
            d[n] = (rhs[n] - d[n - 1]) / beta
        u = np.empty_like(d)
        u[N - 1] = d[N - 1]
        for n in range(N - 2, -1, -1):
            u[n] = d[n] - c[n] * u[n + 1]
        m = np.abs(u) ** 2
        outs.append(m.T @ wts)
        edges.append(m[edge_mask].T @ wts[edge_mask])
        prs.append(u.T @ np.conj(rhs))
    return np.concatenate(outs), np.concatenate(edges), np.concatenate(prs)


tridiag_moments = pick(_tridiag_moments_nb, _tridiag_moments_np)


# -- Chebyshev time step for tridiagonal H ------------------------------------------
# psi <- sum_k coef[k] T_k(Hs) psi with Hs = (H - shift)/scale, unit off-diagonals.

@njit
def _cheb_step_nb(V, shift, scale, coef, psi):
    N = psi.shape[0]
    t0 = psi.copy()
    t1 = np.empty(N, np.complex128)
    t2 = np.empty(N, np.complex128)
    out = coef[0] * t0
    if coef.shape[0] == 1:
        return out
    for n in range(N):
        s = (V[n] - shift) * t0[n]
        if n > 0:
            s += t0[n - 1]
        if n < N - 1:
            s += t0[n + 1]
        t1[n] = s / scale
    out += coef[1] * t1
    for k in range(2, coef.shape[0]):
        for n in range(N):
            s = (V[n] - shift) * t1[n]
            if n > 0:
                s += t1[n - 1]
            if n < N - 1:
                s += t1[n + 1]
            t2[n] = 2.0 * s / scale - t0[n]
        out += coef[k] * t2
        t0, t1, t2 = t1, t2, t0
    return out


def _cheb_step_np(V, shift, scale, coef, psi):
    def hs(v):
        w = (V - shift) * v
        w[:-1] += v[1:]
        w[1:] += v[:-1]
        return w / scale
    t0 = psi.astype(complex)
    out = coef[0] * t0
    if coef.shape[0] == 1:
        return out
    t1 = hs(t0)
    out = out + coef[1] * t1
    for k in range(2, coef.shape[0]):
        t0, t1 = t1, 2.0 * hs(t1) - t0
        out = out + coef[k] * t1
    return out


cheb_step = pick(_cheb_step_nb, _cheb_step_np)
