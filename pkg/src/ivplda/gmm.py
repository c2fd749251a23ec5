"""Full-covariance GMM-UBM: EM training, frame posteriors and the coupled
PLP/MFCC ("two-feats") UBM pair."""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from . import kernels
from .errors import DataError, NumericalError
from .io import read_record, write_record

log = logging.getLogger(__name__)

DEFAULT_PRUNE = 1e-8


@dataclass(eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            self.means.shape[0], self.means.shape[1], self.means.shape[1])
        if self.weights.shape != (self.means.shape[0],):
            raise DataError("weights and means disagree on the component count")

    @property
    def num_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @cached_property
    def cholesky(self):
        try:
            return np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("GMM covariance is not positive definite") from exc

    @cached_property
    def precision_cholesky(self):
        eye = np.eye(self.dim)
        return np.ascontiguousarray(np.stack([solve_triangular(L, eye, lower=True) for L in self.cholesky]))

    @cached_property
    def log_const(self):
        logdet = 2.0 * np.log(np.diagonal(self.cholesky, axis1=1, axis2=2)).sum(axis=1)
        return -0.5 * (self.dim * kernels.LOG_2PI + logdet)

    @cached_property
    def log_weights(self):
        return np.log(np.maximum(self.weights, 1e-300))

    def validate(self):
        if abs(self.weights.sum() - 1.0) > 1e-10 or (self.weights < 0).any():
            raise DataError("GMM weights must form a probability simplex")
        self.cholesky  # noqa: B018 - raises when a covariance is not SPD
        return self


@dataclass(eq=False)
class CoupledUbm:
    """PLP and MFCC UBMs whose components correspond index by index."""

    plp_ubm: GmmModel
    mfcc_ubm: GmmModel

    def __post_init__(self):
        if self.plp_ubm.num_components != self.mfcc_ubm.num_components:
            raise DataError("coupled UBMs need the same number of components")

    def posteriors(self, plp_frames, mfcc_frames, prune=DEFAULT_PRUNE):
        p_plp = gmm_posteriors(self.plp_ubm, plp_frames, prune=0.0)
        p_mfcc = gmm_posteriors(self.mfcc_ubm, mfcc_frames, prune=0.0)
        return combine_posteriors(p_plp, p_mfcc, prune=prune)


def _as_array(frames):
    data = getattr(frames, "data", frames)
    return np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype=np.float64)))


def _as_list(frame_sets):
    if isinstance(frame_sets, np.ndarray) or hasattr(frame_sets, "data"):
        frame_sets = [frame_sets]
    return [_as_array(f) for f in frame_sets]


def weighted_loglik(model, X):
    """T x C matrix of log w_c + log N(x_t; mean_c, cov_c)."""
    X = _as_array(X)
    if X.shape[1] != model.dim:
        raise DataError(f"frame dimension {X.shape[1]} does not match GMM dimension {model.dim}")
    ll = kernels.gauss_loglik(X, model.means, model.precision_cholesky, model.log_const)
    return ll + model.log_weights


def gmm_posteriors(model, frames, prune=DEFAULT_PRUNE):
    """Component responsibilities per frame; entries below ``prune`` are zeroed."""
    post, _ = kernels.normalize_log_rows(weighted_loglik(model, frames), prune)
    return post


def average_loglik(model, frame_sets):
    total = 0.0
    count = 0
    for X in _as_list(frame_sets):
        _, frame_ll = kernels.normalize_log_rows(weighted_loglik(model, X), 0.0)
        total += frame_ll.sum()
        count += frame_ll.size
    return total / count


def floor_covariances(covs, floor):
    """Clamp each covariance's eigenvalues from below at ``floor``."""
    out = covs.copy()
    for c, cov in enumerate(covs):
        cov = 0.5 * (cov + cov.T)
        vals, vecs = np.linalg.eigh(cov)
        if vals[0] < floor:
            cov = (vecs * np.maximum(vals, floor)) @ vecs.T
            cov = 0.5 * (cov + cov.T)
        out[c] = cov
    return out


def _accumulate(post, X, n, f, S):
    n_u, f_u = kernels.zero_first_stats(post, X)
    n += n_u
    f += f_u
    for c in np.flatnonzero(n_u > 0.0):
        S[c] += (X * post[:, c, None]).T @ X


def _m_step(n, f, S, previous, floor):
    N = n.sum()
    C, D = f.shape
    weights = n / N
    means = previous.means.copy()
    covs = previous.covariances.copy()
    live = n > 1e-10 * N
    means[live] = f[live] / n[live, None]
    for c in np.flatnonzero(live):
        covs[c] = S[c] / n[c] - np.outer(means[c], means[c])
    if (~live).any():
        log.warning("%d GMM components received no data; parameters kept", int((~live).sum()))
    return GmmModel(weights, means, floor_covariances(covs, floor))


def em_step(model, frame_sets, floor):
    """One EM iteration; returns (new model, average log-likelihood under ``model``)."""
    C, D = model.num_components, model.dim
    n = np.zeros(C)
    f = np.zeros((C, D))
    S = np.zeros((C, D, D))
    total = 0.0
    count = 0
    for X in _as_list(frame_sets):
        post, frame_ll = kernels.normalize_log_rows(weighted_loglik(model, X), 0.0)
        total += frame_ll.sum()
        count += frame_ll.size
        _accumulate(post, X, n, f, S)
    return _m_step(n, f, S, model, floor), total / count


def global_gaussian(frame_sets):
    X = np.vstack(_as_list(frame_sets))
    mean = X.mean(axis=0)
    diff = X - mean
    return mean, diff.T @ diff / X.shape[0]


def _split(model, target, rng):
    C = model.num_components
    k = min(C, target - C)
    order = np.argsort(-model.weights, kind="stable")[:k]
    weights = list(model.weights)
    means = list(model.means)
    covs = list(model.covariances)
    for c in order:
        sigma = np.sqrt(np.diag(model.covariances[c]))
        direction = rng.choice([-1.0, 1.0], size=model.dim)
        offset = 0.1 * sigma * direction
        weights[c] = model.weights[c] / 2.0
        means[c] = model.means[c] + offset
        weights.append(model.weights[c] / 2.0)
        means.append(model.means[c] - offset)
        covs.append(model.covariances[c].copy())
    return GmmModel(np.array(weights), np.array(means), np.array(covs))


def train_gmm_em(frame_sets, num_components, iterations=10, seed=0, split_iterations=2,
                 floor_scale=1e-4, history=None):
    """Train a full-covariance GMM by binary splitting followed by EM.

    Starts from the global Gaussian, splits the heaviest components along
    +-0.1 sigma (random sign per dimension, drawn from ``seed``) until
    ``num_components`` is reached, running ``split_iterations`` EM passes per
    level, then runs ``iterations`` EM passes at full size.  If ``history`` is
    a list, the average frame log-likelihood before each full-size pass is
    appended to it, followed by the final value.
    """
    frames = _as_list(frame_sets)
    if num_components < 1:
        raise DataError("need at least one component")
    total = sum(X.shape[0] for X in frames)
    D = frames[0].shape[1]
    if total < 10 * num_components * D:
        raise DataError(f"insufficient data: {total} frames for {num_components} components "
                        f"of dimension {D} (need {10 * num_components * D})")
    rng = np.random.default_rng(seed)
    mean, cov = global_gaussian(frames)
    floor = floor_scale * np.trace(cov) / D
    model = GmmModel(np.ones(1), mean[None], floor_covariances(cov[None], floor))
    while model.num_components < num_components:
        model = _split(model, num_components, rng)
        for _ in range(split_iterations):
            model, ll = em_step(model, frames, floor)
        log.info("GMM split to %d components, avg LL %.4f", model.num_components, ll)
    for it in range(iterations):
        model, ll = em_step(model, frames, floor)
        if history is not None:
            history.append(ll)
        log.debug("GMM EM iteration %d avg LL %.6f", it + 1, ll)
    if history is not None:
        history.append(average_loglik(model, frames))
    return model


def mstep_from_posteriors(posteriors, frame_sets, floor_scale=1e-4):
    """Single M-step: a GMM fitted to ``frame_sets`` under fixed responsibilities."""
    frames = _as_list(frame_sets)
    posts = _as_list(posteriors)
    if len(frames) != len(posts):
        raise DataError("posterior and frame lists differ in length")
    C = posts[0].shape[1]
    D = frames[0].shape[1]
    n = np.zeros(C)
    f = np.zeros((C, D))
    S = np.zeros((C, D, D))
    for i, (P, X) in enumerate(zip(posts, frames)):
        if P.shape[0] != X.shape[0]:
            raise DataError(f"utterance {i}: {P.shape[0]} posterior rows vs {X.shape[0]} frames")
        if P.shape[1] != C:
            raise DataError(f"utterance {i}: {P.shape[1]} posterior columns, expected {C}")
        _accumulate(P, X, n, f, S)
    _, cov = global_gaussian(frames)
    floor = floor_scale * np.trace(cov) / D
    seed_model = GmmModel(np.full(C, 1.0 / C), np.zeros((C, D)), np.tile(cov, (C, 1, 1)))
    return _m_step(n, f, S, seed_model, floor)


def couple_ubm(plp_ubm, mfcc_frames, plp_frames, floor_scale=1e-4):
    """Estimate an MFCC UBM from PLP-UBM responsibilities with a single M-step."""
    mfcc = _as_list(mfcc_frames)
    plp = _as_list(plp_frames)
    if len(mfcc) != len(plp):
        raise DataError("MFCC and PLP utterance lists differ in length")
    for i, (Xm, Xp) in enumerate(zip(mfcc, plp)):
        if Xm.shape[0] != Xp.shape[0]:
            raise DataError(f"utterance {i}: {Xm.shape[0]} MFCC frames vs {Xp.shape[0]} PLP frames")
    posts = [gmm_posteriors(plp_ubm, Xp, prune=0.0) for Xp in plp]
    return CoupledUbm(plp_ubm, mstep_from_posteriors(posts, mfcc, floor_scale))


def combine_posteriors(p_plp, p_mfcc, prune=0.0):
    """Elementwise product of two posterior streams, renormalised per frame.

    Frames whose product sums to zero fall back to the uniform distribution.
    """
    a = np.asarray(p_plp, dtype=np.float64)
    b = np.asarray(p_mfcc, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"posterior shapes differ: {a.shape} vs {b.shape}")
    prod = a * b
    total = prod.sum(axis=1, keepdims=True)
    dead = total[:, 0] <= 0.0
    if dead.any():
        prod[dead] = 1.0
        total[dead] = a.shape[1]
    out = prod / total
    if prune > 0.0:
        out[out < prune] = 0.0
        out /= out.sum(axis=1, keepdims=True)
    return out


_GMM_MAGIC = b"GMMR"


def save_gmm(path, model):
    C, D = model.num_components, model.dim
    write_record(path, _GMM_MAGIC, [C, D],
                 [model.weights[None], model.means, model.covariances.reshape(C * D, D)])


def load_gmm(path):
    (C, D), (w, m, cov) = read_record(path, _GMM_MAGIC)
    w = w[0]
    return GmmModel(w / w.sum(), m, cov.reshape(C, D, D))
