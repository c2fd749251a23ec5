"""Two-covariance PLDA: EM learning of (B, W), the diagonalising
post-normalisation with eigenvoice truncation, and LLR scoring.

Per speaker s with n_s sessions and centred mean m_s, one EM pass computes

    M_s = (B^-1 + n_s W^-1)^-1,     w_s = n_s M_s W^-1 m_s
    B <- (1/S) sum_s (w_s w_s' + M_s)
    W <- (1/N) [sum_s n_s ((m_s - w_s)(m_s - w_s)' + M_s) + within-speaker scatter]

M_s is evaluated through the joint diagonalisation of (B, W): with W = LL'
and L^-1 B L^-T = Q diag(lam) Q', M_s = L Q diag(lam / (1 + n_s lam)) Q' L'.
"""

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .embedspace import RIDGE, length_normalize, ridge_term, within_class_scatter
from .errors import DataError, NumericalError
from .io import read_record, write_record

log = logging.getLogger(__name__)


@dataclass(eq=False)
class PldaModel:
    m_all: np.ndarray
    B: np.ndarray
    W: np.ndarray


@dataclass(eq=False)
class PostNormTransform:
    A: np.ndarray  # P' L^-1
    psi: np.ndarray  # descending
    m_all: np.ndarray
    rank: int

    @property
    def dim(self):
        return self.A.shape[0]


def _symmetrize(M):
    return 0.5 * (M + M.T)


def _cholesky(M, what):
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def _speaker_stats(vectors, speakers):
    X = np.asarray(vectors, dtype=np.float64)
    scatter, uniq, counts, means = within_class_scatter(X, speakers)
    if uniq.size < 2:
        raise DataError("PLDA needs at least 2 speakers")
    return X, scatter, counts.astype(np.float64), means


def init_plda(vectors, speakers, ridge=RIDGE):
    """Deterministic start: mean of speaker means, scatter-based B and W plus a ridge."""
    X, scatter, counts, means = _speaker_stats(vectors, speakers)
    if counts.max() < 2:
        log.error("every speaker has a single session: within-class covariance is ridge only")
    m_all = means.mean(axis=0)
    centered = means - m_all
    W = scatter / X.shape[0]
    B = centered.T @ centered / means.shape[0]
    return PldaModel(m_all, B + ridge_term(B, ridge), W + ridge_term(W, ridge))


def plda_em_step(B, W, centered_means, counts, within_scatter=None):
    """One pass of the update equations; returns (B_new, W_new)."""
    m = np.atleast_2d(np.asarray(centered_means, dtype=np.float64))
    n = np.asarray(counts, dtype=np.float64)
    S, R = m.shape
    N = n.sum()
    L = _cholesky(W, "W")
    Linv_B = solve_triangular(L, B, lower=True)
    Bt = _symmetrize(solve_triangular(L, Linv_B.T, lower=True))
    lam, Q = np.linalg.eigh(Bt)
    if lam.min() < -1e-10 * max(1.0, abs(lam).max()):
        raise NumericalError("B is not positive semi-definite")
    lam = np.clip(lam, 0.0, None)
    LQ = L @ Q
    shrink = lam[None, :] / (1.0 + n[:, None] * lam[None, :])  # S x R, diag of Q'L^-1 M_s L^-T Q
    proj = solve_triangular(L, m.T, lower=True).T @ Q  # Q' L^-1 m_s per row
    w = (n[:, None] * shrink * proj) @ LQ.T
    M_sum = (LQ * shrink.sum(axis=0)) @ LQ.T
    nM_sum = (LQ * (n[:, None] * shrink).sum(axis=0)) @ LQ.T
    resid = m - w
    acc_b = w.T @ w + M_sum
    acc_w = (resid * n[:, None]).T @ resid + nM_sum
    if within_scatter is not None:
        acc_w = acc_w + within_scatter
    return _symmetrize(acc_b / S), _symmetrize(acc_w / N)


def train_plda(vectors, speakers, iterations=10, ridge=RIDGE, include_within_scatter=True,
               init=None, history=None):
    """EM learning of B and W from labelled vectors.

    ``m_all`` is fixed from the initial estimate.  With
    ``include_within_scatter`` false, W is re-estimated from the speaker means
    alone (the scatter of sessions around their speaker mean is ignored).
    The ridge is re-added after every pass so directions with no variance
    (for example a subspace removed by IDVC) keep B and W invertible.
    """
    X, scatter, counts, means = _speaker_stats(vectors, speakers)
    model = init if init is not None else init_plda(X, speakers, ridge)
    centered = means - model.m_all
    B, W = model.B, model.W
    for it in range(1, iterations + 1):
        B, W = plda_em_step(B, W, centered, counts, scatter if include_within_scatter else None)
        if ridge:
            B, W = B + ridge_term(B, ridge), W + ridge_term(W, ridge)
        for name, M in (("B", B), ("W", W)):
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"PLDA iteration {it}: {name} lost positive definiteness") from exc
        if history is not None:
            history.append((B.copy(), W.copy()))
    return PldaModel(model.m_all, B, W)


def postnorm_fit(model):
    """A = P' L^-1 with W = LL' and L^-1 B L^-T = P diag(psi) P', psi descending."""
    L = _cholesky(model.W, "W")
    Linv_B = solve_triangular(L, model.B, lower=True)
    Bt = _symmetrize(solve_triangular(L, Linv_B.T, lower=True))
    psi, P = np.linalg.eigh(Bt)
    order = np.argsort(-psi, kind="stable")
    psi, P = np.clip(psi[order], 0.0, None), P[:, order]
    A = solve_triangular(L, P, lower=True, trans="T").T  # P' L^-1
    return PostNormTransform(A, psi, model.m_all.copy(), psi.size)


def postnorm_apply(v, t, subtract_mean=None):
    m_all = t.m_all if subtract_mean is None else subtract_mean
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.dim:
        raise DataError(f"vector dimension {v.shape[-1]} does not match transform {t.dim}")
    return length_normalize((v - m_all) @ t.A.T)


def truncate_eigenvoices(t, rank):
    if not 0 <= rank <= t.psi.size:
        raise DataError(f"eigenvoice rank {rank} outside [0, {t.psi.size}]")
    psi = t.psi.copy()
    psi[rank:] = 0.0
    return replace(t, psi=psi, rank=rank)


def enroll_mean(E):
    """Column means with exactly rounded sums, so the result ignores row order."""
    E = np.atleast_2d(np.asarray(E, dtype=np.float64))
    return np.array([math.fsum(col) for col in E.T]) / E.shape[0]


def score_trial(enroll_vectors, test_vector, t):
    """Log-likelihood ratio of one test vector against n enrollment vectors."""
    E = np.atleast_2d(np.asarray(enroll_vectors, dtype=np.float64))
    u = np.asarray(test_vector, dtype=np.float64)
    if E.shape[0] == 0:
        raise DataError("a trial needs at least one enrollment vector")
    if E.shape[1] != t.psi.size or u.shape != (t.psi.size,):
        raise DataError("trial vectors do not match the PLDA dimension")
    return float(score_batch(enroll_mean(E)[None], np.array([E.shape[0]]), u[None], t.psi)[0])


def score_batch(enroll_means, n_enroll, tests, psi):
    return kernels.diag_llr(np.ascontiguousarray(enroll_means, dtype=np.float64),
                            np.ascontiguousarray(n_enroll, dtype=np.float64),
                            np.ascontiguousarray(tests, dtype=np.float64),
                            np.ascontiguousarray(psi, dtype=np.float64))


def save_plda_model(path, model):
    R = model.m_all.shape[0]
    write_record(path, b"PLDM", [R], [model.m_all[None], model.B, model.W])


def load_plda_model(path):
    _, (m_all, B, W) = read_record(path, b"PLDM")
    return PldaModel(m_all[0], _symmetrize(B), _symmetrize(W))


def save_plda(path, t):
    R = t.dim
    write_record(path, b"PLDA", [R, t.rank], [t.m_all[None], t.A, t.psi[None]])


def load_plda(path):
    (R, rank), (m_all, A, psi) = read_record(path, b"PLDA")
    return PostNormTransform(A, psi[0], m_all[0], rank)
