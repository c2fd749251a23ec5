"""Time the numba and numpy flavour of every hot kernel on realistic shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick] [--json out.json]

Both flavours are imported directly from ``ivplda.kernels`` so one process
covers both, regardless of IVPLDA_DISABLE_NUMBA.  The first jit call (compile
or cache load) is excluded from the timings.  Each row also reports the max
absolute difference between the two outputs.
"""

import argparse
import json
import time

import numpy as np

from ivplda import kernels as k
from ivplda._accel import HAVE_NUMBA


def _cases(quick):
    rng = np.random.default_rng(0)
    T, C, D = (2000, 64, 60) if quick else (10000, 256, 60)
    X = rng.standard_normal((T, D))
    means = rng.standard_normal((C, D))
    A = rng.standard_normal((C, D, D)) * 0.1 + np.eye(D)
    covs = A @ A.transpose(0, 2, 1)
    chol = np.linalg.cholesky(covs)
    prec = np.ascontiguousarray(np.linalg.inv(chol))
    log_const = -0.5 * D * k.LOG_2PI - np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    logp = k.gauss_loglik_np(X, means, prec, log_const)
    post, _ = k.normalize_log_rows_np(logp, 1e-8)
    raw = rng.random(T * 10) > 0.4
    feats = rng.standard_normal((T * 3, D))
    K, R = (20000, 400) if not quick else (5000, 400)
    em = rng.standard_normal((K, R))
    te = rng.standard_normal((K, R))
    n = rng.integers(1, 4, K).astype(float)
    psi = np.sort(rng.exponential(1.0, R))[::-1].copy()
    return [
        (f"gauss_loglik T={T} C={C} D={D}", "gauss_loglik", (X, means, prec, log_const)),
        (f"normalize_log_rows T={T} C={C}", "normalize_log_rows", (logp, 1e-8)),
        (f"zero_first_stats T={T} C={C} D={D}", "zero_first_stats", (post, X)),
        (f"window_majority T={raw.size} w=11", "window_majority", (raw, 5)),
        (f"sliding_mean T={feats.shape[0]} D={D} w=301", "sliding_mean", (feats, 150)),
        (f"diag_llr trials={K} R={R}", "diag_llr", (em, n, te, psi)),
    ]


def _best(fn, args, repeat):
    times = []
    out = None
    for _ in range(repeat):
        start = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - start)
    return min(times), out


def _maxdiff(a, b):
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype == bool:
        return float((a != b).sum())
    return float(np.max(np.abs(a - b)))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--quick", action="store_true", help="smaller shapes")
    p.add_argument("--json", help="also write the rows as JSON")
    a = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy flavour can run")
    rows = []
    print(f"{'kernel':<40} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for label, name, args in _cases(a.quick):
        np_fn = getattr(k, name + "_np")
        t_np, out_np = _best(np_fn, args, a.repeat)
        row = {"kernel": label, "numpy_s": t_np}
        if HAVE_NUMBA:
            jit_fn = getattr(k, name + "_jit")
            jit_fn(*args)  # compile / load from cache
            t_jit, out_jit = _best(jit_fn, args, a.repeat)
            row.update(numba_s=t_jit, speedup=t_np / t_jit, max_abs_diff=_maxdiff(out_np, out_jit))
            print(f"{label:<40} {1e3 * t_np:10.2f} {1e3 * t_jit:10.2f} {t_np / t_jit:8.2f} "
                  f"{row['max_abs_diff']:11.2e}")
        else:
            print(f"{label:<40} {1e3 * t_np:10.2f}")
        rows.append(row)
    if a.json:
        with open(a.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return rows


if __name__ == "__main__":
    main()
