"""numba vs numpy timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Both paths are called directly (the _nb / _np twins), so one process times
both regardless of TRANSPORTLAB_NO_JIT.  Each kernel is warmed up once
before timing; the table reports the best of `repeat` runs.
"""
import argparse
import csv
import sys
import time

import numpy as np

from transportlab import _accel
from transportlab import _kernels as K
from transportlab.transfer import LocalPotential, step_matrix


def _cases(rng):
    mats = np.stack([step_matrix(9.87, 0.0), step_matrix(9.87, 1.0)])
    letters = rng.integers(0, 2, 100_000).astype(np.uint8)
    seq = np.ascontiguousarray(mats[letters[:20_000]])
    prods = K._indexed_prefix_np(mats, letters[:2000], 64)
    n = 20_000
    V = rng.uniform(-1, 1, n)
    pos = np.arange(n, dtype=float) - n // 2
    mask = np.zeros(n, bool)
    mask[:500] = mask[-500:] = True
    f_idx = np.array([n // 2], np.int64)
    f_val = np.array([1.0 + 0j])
    z = np.linspace(-2.5, 2.5, 64) + 0.01j
    ps = np.array([0.0, 2.0])
    psi = np.zeros(4000, complex)
    psi[2000] = 1.0
    from transportlab.discrete import _cheb_coefs
    coef = _cheb_coefs(1.0, 3.0)
    V4 = V[:4000].copy()
    cell = LocalPotential.profile(lambda t: np.sin(3 * t) ** 2)
    from transportlab.transfer import _magnus_inputs
    hs, v1, v2 = _magnus_inputs(cell, cell.magnus_grid())
    energies = np.linspace(1, 60, 256).astype(complex)
    a = np.array([1.0 + 0.01j, 0.99 - 0.02j])
    b = np.array([0.01j, -0.02 + 0.0j])
    c = np.array([0.01j, 0.02 + 0j])
    walk_letters = rng.integers(0, 2, (50, 2000)).astype(np.uint8)
    z0 = np.exp(1j * np.array([0.0, np.pi / 2]))
    return [
        ("chain_product", (K._chain_product_nb, K._chain_product_np), (seq, 64), "20k 2x2"),
        ("indexed_prefix_products", (K._indexed_prefix_nb, K._indexed_prefix_np),
         (mats, letters, 64), "100k letters"),
        ("prefix_max_frobenius", (K._prefix_max_norm_nb, K._prefix_max_norm_np),
         (mats, letters), "100k letters"),
        ("max_pair_direct", (K._max_pair_direct_nb, K._max_pair_direct_np), (prods,), "2k^2 pairs"),
        ("chain_scaled", (K._chain_scaled_nb, K._chain_scaled_np), (mats, letters), "100k letters"),
        ("magnus_chain", (K._magnus_chain_nb, K._magnus_chain_np), (hs, v1, v2, energies),
         "256 energies"),
        ("theta_walk_max", (K._theta_walk_max_nb, K._theta_walk_max_np),
         (walk_letters, a, b, c, z0), "50 x 2k"),
        ("tridiag_moments", (K._tridiag_moments_nb, K._tridiag_moments_np),
         (V, pos, mask, f_idx, f_val, z, ps), "64 E x 20k sites"),
        ("cheb_step", (K._cheb_step_nb, K._cheb_step_np), (V4, 0.0, 3.0, coef, psi), "4k sites"),
    ]


def _best(fn, args, repeat):
    fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv", metavar="PATH")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':26s} {'size':18s} {'numba [ms]':>11s} {'numpy [ms]':>11s} {'speedup':>8s}")
    for name, (nb, npy), a, size in _cases(np.random.default_rng(0)):
        t_nb = _best(nb, a, args.repeat)
        t_np = _best(npy, a, args.repeat)
        rows.append((name, size, t_nb * 1e3, t_np * 1e3, t_np / t_nb))
        print(f"{name:26s} {size:18s} {t_nb * 1e3:11.3f} {t_np * 1e3:11.3f} {t_np / t_nb:8.1f}")
    # tail_sweep end to end: one resolvent_norms call per backend
    from transportlab.dynamics import InitialState, resolvent_norms
    from transportlab.transfer import PotentialModel
    from transportlab.words import BernoulliSource, sample_word
    model = PotentialModel.step_model(1.0, sample_word(BernoulliSource(0.5, 0, 0), -4096, 4096))
    zs = np.linspace(0.0, 12.0, 400) + 0.01j
    f = InitialState.indicator(0, 1)
    real = K.tail_sweep
    times = []
    for impl in (K._tail_sweep_nb, K._tail_sweep_np):
        K.tail_sweep = impl
        try:
            times.append(_best(lambda: resolvent_norms(model, f, zs, (0.0, 2.0)), (), args.repeat))
        finally:
            K.tail_sweep = real
    rows.append(("tail_sweep (resolvent_norms)", "400 E", times[0] * 1e3, times[1] * 1e3,
                 times[1] / times[0]))
    print(f"{rows[-1][0]:26s} {'400 E':18s} {times[0] * 1e3:11.3f} {times[1] * 1e3:11.3f} "
          f"{times[1] / times[0]:8.1f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel", "size", "numba_ms", "numpy_ms", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
