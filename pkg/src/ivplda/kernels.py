"""Hot inner loops, each with a numba and a pure-numpy implementation.

The ``*_jit`` functions are written as explicit loops so numba can compile
them; the ``*_np`` functions are the vectorised fallback.  Module-level names
without a suffix dispatch to whichever backend ``_accel`` selected.  Both
flavours must agree to floating-point round-off; ``tests/test_kernels.py``
checks this and ``benchmarks/bench_kernels.py`` times them.
"""

import math

import numpy as np
from scipy.special import logsumexp

from ._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Gaussian log-densities for full-covariance mixtures
# ---------------------------------------------------------------------------

def _gauss_loglik_py(X, means, prec_chol, log_const):
    T, D = X.shape
    C = means.shape[0]
    out = np.empty((T, C))
    for c in range(C):
        P = prec_chol[c]
        # the product goes to BLAS; the loop fuses centring, squaring and the row sum
        b = P @ means[c]
        Z = X @ P.T
        for t in range(T):
            q = 0.0
            for i in range(D):
                z = Z[t, i] - b[i]
                q += z * z
            out[t, c] = log_const[c] - 0.5 * q
    return out


# fastmath lets the reduction vectorise; results move by round-off only
gauss_loglik_jit = njit(_gauss_loglik_py, fastmath=True)


def gauss_loglik_np(X, means, prec_chol, log_const):
    """Per-frame, per-component log N(x; mean_c, cov_c).

    ``prec_chol[c]`` is the inverse of the lower Cholesky factor of cov_c and
    ``log_const[c]`` is ``-D/2 log 2pi - 1/2 log|cov_c|``.
    """
    T = X.shape[0]
    C = means.shape[0]
    out = np.empty((T, C))
    for c in range(C):
        Z = (X - means[c]) @ prec_chol[c].T
        out[:, c] = log_const[c] - 0.5 * np.einsum("ij,ij->i", Z, Z)
    return out


# ---------------------------------------------------------------------------
# Responsibilities
# ---------------------------------------------------------------------------

def _normalize_log_rows_py(logp, prune):
    T, C = logp.shape
    post = np.empty((T, C))
    frame_ll = np.empty(T)
    for t in range(T):
        m = logp[t, 0]
        for c in range(1, C):
            if logp[t, c] > m:
                m = logp[t, c]
        s = 0.0
        for c in range(C):
            e = math.exp(logp[t, c] - m)
            post[t, c] = e
            s += e
        frame_ll[t] = m + math.log(s)
        kept = 0.0
        for c in range(C):
            p = post[t, c] / s
            if p < prune:
                p = 0.0
            post[t, c] = p
            kept += p
        for c in range(C):
            post[t, c] /= kept
    return post, frame_ll


normalize_log_rows_jit = njit(_normalize_log_rows_py)


def normalize_log_rows_np(logp, prune):
    """Row-wise softmax of ``logp`` with pruning; also returns the row log-sum-exp."""
    frame_ll = logsumexp(logp, axis=1)
    post = np.exp(logp - frame_ll[:, None])
    if prune > 0.0:
        post[post < prune] = 0.0
        post /= post.sum(axis=1, keepdims=True)
    return post, frame_ll


# ---------------------------------------------------------------------------
# Baum-Welch zeroth/first-order statistics
# ---------------------------------------------------------------------------

def _zero_first_stats_py(post, X):
    T, C = post.shape
    D = X.shape[1]
    n = np.zeros(C)
    f = np.zeros((C, D))
    for t in range(T):
        for c in range(C):
            g = post[t, c]
            if g == 0.0:
                continue
            n[c] += g
            for d in range(D):
                f[c, d] += g * X[t, d]
    return n, f


zero_first_stats_jit = njit(_zero_first_stats_py)


def zero_first_stats_np(post, X):
    return post.sum(axis=0), post.T @ X


# ---------------------------------------------------------------------------
# Sliding windows (VAD consensus, CMN)
# ---------------------------------------------------------------------------

def _window_majority_py(raw, half):
    T = raw.shape[0]
    out = np.zeros(T, dtype=np.bool_)
    for t in range(T):
        lo = max(0, t - half)
        hi = min(T, t + half + 1)
        votes = 0
        for k in range(lo, hi):
            if raw[k]:
                votes += 1
        out[t] = 2 * votes > hi - lo
    return out


window_majority_jit = njit(_window_majority_py)


def window_majority_np(raw, half):
    """Strict majority of ``raw`` inside a centred window truncated at the edges."""
    T = raw.shape[0]
    csum = np.concatenate(([0], np.cumsum(raw.astype(np.int64))))
    idx = np.arange(T)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, T)
    votes = csum[hi] - csum[lo]
    return 2 * votes > hi - lo


def _sliding_mean_py(X, half):
    T, D = X.shape
    out = np.empty((T, D))
    acc = np.zeros(D)
    lo = 0
    hi = 0
    for t in range(T):
        new_lo = max(0, t - half)
        new_hi = min(T, t + half + 1)
        while hi < new_hi:
            for d in range(D):
                acc[d] += X[hi, d]
            hi += 1
        while lo < new_lo:
            for d in range(D):
                acc[d] -= X[lo, d]
            lo += 1
        for d in range(D):
            out[t, d] = acc[d] / (hi - lo)
    return out


sliding_mean_jit = njit(_sliding_mean_py)


def sliding_mean_np(X, half):
    T = X.shape[0]
    csum = np.vstack([np.zeros((1, X.shape[1])), np.cumsum(X, axis=0)])
    idx = np.arange(T)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, T)
    return (csum[hi] - csum[lo]) / (hi - lo)[:, None]


# ---------------------------------------------------------------------------
# Two-covariance LLR in the diagonalised PLDA space
# ---------------------------------------------------------------------------

def _diag_llr_py(enroll_mean, n_enroll, test, psi):
    K, R = test.shape
    out = np.empty(K)
    for k in range(K):
        n = n_enroll[k]
        s = 0.0
        for d in range(R):
            p = psi[d]
            if p == 0.0:
                continue
            denom = n * p + 1.0
            mu = n * p / denom * enroll_mean[k, d]
            var_same = 1.0 + p / denom
            var_diff = 1.0 + p
            u = test[k, d]
            r = u - mu
            s += 0.5 * (math.log(var_diff) - math.log(var_same))
            s += 0.5 * (u * u / var_diff - r * r / var_same)
        out[k] = s
    return out


diag_llr_jit = njit(_diag_llr_py)


def diag_llr_np(enroll_mean, n_enroll, test, psi):
    n = np.asarray(n_enroll, dtype=float)[:, None]
    denom = n * psi + 1.0
    mu = n * psi / denom * enroll_mean
    var_same = 1.0 + psi / denom
    var_diff = 1.0 + psi
    terms = 0.5 * (np.log(var_diff) - np.log(var_same)) + 0.5 * (
        test**2 / var_diff - (test - mu) ** 2 / var_same
    )
    return terms.sum(axis=1)


if USE_NUMBA:
    gauss_loglik = gauss_loglik_jit
    normalize_log_rows = normalize_log_rows_jit
    zero_first_stats = zero_first_stats_jit
    window_majority = window_majority_jit
    sliding_mean = sliding_mean_jit
    diag_llr = diag_llr_jit
else:
    gauss_loglik = gauss_loglik_np
    normalize_log_rows = normalize_log_rows_np
    zero_first_stats = zero_first_stats_np
    window_majority = window_majority_np
    sliding_mean = sliding_mean_np
    diag_llr = diag_llr_np
