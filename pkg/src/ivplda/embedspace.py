"""I-vector space normalisation: within-class whitening with length
normalisation (LW), inter-dataset variability compensation (IDVC) and
mean-shifting."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DataError, NumericalError
from .io import read_record, write_record

log = logging.getLogger(__name__)

RIDGE = 1e-6


def ridge_term(scatter, scale=RIDGE):
    """``scale * trace / R`` (or ``scale`` alone for an all-zero scatter) times I."""
    R = scatter.shape[0]
    level = np.trace(scatter) / R
    return scale * (level if level > 0 else 1.0) * np.eye(R)


def group_by_speaker(vectors, speakers):
    labels = np.asarray(speakers)
    if labels.shape[0] != vectors.shape[0]:
        raise DataError("speaker labels do not match the number of vectors")
    if (labels == "").any():
        raise DataError("every training vector needs a speaker label")
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, vectors.shape[1]))
    np.add.at(sums, inverse, vectors)
    return uniq, inverse, counts, sums / counts[:, None]


def within_class_scatter(vectors, speakers):
    """Sum over sessions of (v - speaker mean)(v - speaker mean)'; also returns speaker stats."""
    uniq, inverse, counts, means = group_by_speaker(vectors, speakers)
    resid = vectors - means[inverse]
    return resid.T @ resid, uniq, counts, means


def length_normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise DataError("degenerate vector")
    return x / norms


@dataclass(eq=False)
class LwTransform:
    mu: np.ndarray
    w_chol: np.ndarray

    @property
    def within(self):
        return self.w_chol @ self.w_chol.T


def fit_lw(vectors, speakers, ridge=RIDGE):
    """Global mean and Cholesky factor of the pooled within-speaker covariance."""
    X = np.asarray(vectors, dtype=np.float64)
    scatter, uniq, counts, _ = within_class_scatter(X, speakers)
    if uniq.size < 2:
        raise DataError("LW whitening needs at least 2 speakers")
    if counts.max() < 2:
        raise DataError("LW whitening needs a speaker with at least 2 sessions")
    W = scatter / X.shape[0]
    W = W + ridge_term(W, ridge)
    try:
        chol = np.linalg.cholesky(W)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("within-class covariance is singular; increase the ridge") from exc
    return LwTransform(X.mean(axis=0), chol)


def whiten(v, t):
    """Within-class standardisation without the length normalisation."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.mu.shape[0]:
        raise DataError(f"vector dimension {v.shape[-1]} does not match transform {t.mu.shape[0]}")
    centered = np.atleast_2d(v - t.mu)
    u = solve_triangular(t.w_chol, centered.T, lower=True).T
    return u.reshape(v.shape)


def apply_lw(v, t):
    return length_normalize(whiten(v, t))


@dataclass(eq=False)
class IdvcModel:
    basis: np.ndarray  # R x K, orthonormal columns
    center: np.ndarray

    @property
    def rank(self):
        return self.basis.shape[1]


def fit_idvc(subsets, tol=1e-8, max_rank=None, center=True):
    """Orthonormal basis of the span of the per-subset mean vectors.

    ``subsets`` maps a subset key to an (n_i x R) array.  Means are centred on
    their average unless ``center`` is false.  The rank keeps singular values
    above ``tol`` times the larger of 1 and the biggest subset-mean norm.
    """
    if len(subsets) < 2:
        raise DataError("IDVC needs at least 2 subsets")
    means = []
    for key in sorted(subsets):
        X = np.atleast_2d(np.asarray(subsets[key], dtype=np.float64))
        if X.shape[0] == 0 or X.size == 0:
            raise DataError(f"IDVC subset {key!r} is empty")
        means.append(X.mean(axis=0))
    means = np.array(means)
    mid = means.mean(axis=0) if center else np.zeros(means.shape[1])
    U, s, _ = np.linalg.svd((means - mid).T, full_matrices=False)
    scale = max(1.0, np.linalg.norm(means, axis=1).max())
    K = int((s > tol * scale).sum())
    if max_rank is not None:
        K = min(K, max_rank)
    return IdvcModel(U[:, :K].copy(), mid)


def apply_idvc(v, m):
    """Remove the component of ``v`` inside the IDVC subspace."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != m.basis.shape[0]:
        raise DataError(f"vector dimension {v.shape[-1]} does not match IDVC basis {m.basis.shape[0]}")
    if m.rank == 0:
        return v.copy()
    return v - (v @ m.basis) @ m.basis.T


@dataclass(eq=False)
class MeanShift:
    delta: np.ndarray


def fit_mean_shift(dev_vectors):
    X = np.atleast_2d(np.asarray(dev_vectors, dtype=np.float64))
    if X.shape[0] == 0 or X.size == 0:
        raise DataError("mean-shift needs a non-empty development set")
    return MeanShift(X.mean(axis=0))


def apply_mean_shift(v, m, side="test", enroll_too=False):
    """Subtract the development mean from test-side vectors.

    Enrollment vectors pass through unless ``enroll_too``; training vectors
    always pass through.
    """
    v = np.asarray(v, dtype=np.float64)
    if side not in ("enroll", "train", "test"):
        raise DataError(f"side must be 'enroll', 'train' or 'test', got {side!r}")
    if side == "test" or (side == "enroll" and enroll_too):
        return v - m.delta
    return v.copy()


def save_lw(path, t):
    write_record(path, b"LWTR", [t.mu.shape[0]], [t.mu[None], t.w_chol])


def load_lw(path):
    _, (mu, chol) = read_record(path, b"LWTR")
    return LwTransform(mu[0], np.tril(chol))


def save_idvc(path, m):
    R, K = m.basis.shape
    write_record(path, b"IDVC", [R, K], [m.center[None], m.basis.T.reshape(K, R) if K else np.zeros((0, R))])


def load_idvc(path):
    (R, K), (center, basis_t) = read_record(path, b"IDVC")
    basis = basis_t.T if K else np.zeros((R, 0))
    # re-orthonormalise after the float32 round trip
    if K:
        basis, _ = np.linalg.qr(basis)
    return IdvcModel(basis, center[0])


def save_mean_shift(path, m):
    write_record(path, b"MSHF", [m.delta.shape[0]], [m.delta[None]])


def load_mean_shift(path):
    _, (delta,) = read_record(path, b"MSHF")
    return MeanShift(delta[0])
