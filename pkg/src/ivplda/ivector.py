"""Baum-Welch statistics, total-variability training and i-vector extraction.

The model is the usual factor analysis over GMM supervectors: frames aligned
to component c are drawn from N(mean_c + T_c w, cov_c) with w ~ N(0, I).
Internally every block is whitened by the inverse Cholesky factor of its
covariance, so the E-step only needs inner products.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import kernels
from .errors import DataError, NumericalError
from .gmm import GmmModel
from .io import read_ivmx, read_record, read_tsv, write_ivmx, write_record, write_tsv

log = logging.getLogger(__name__)

_CHUNK = 256


@dataclass(eq=False)
class SufficientStats:
    n: np.ndarray
    f: np.ndarray
    utterance_id: str = ""

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.atleast_2d(np.asarray(self.f, dtype=np.float64))
        if self.f.shape[0] != self.n.shape[0]:
            raise DataError("zeroth- and first-order statistics disagree on the component count")

    def __add__(self, other):
        return SufficientStats(self.n + other.n, self.f + other.f, self.utterance_id)

    def centered(self, means):
        """First-order statistics around the UBM means: f - n * mean."""
        return self.f - self.n[:, None] * means


def accumulate_stats(posteriors, frames, utterance_id=""):
    """Zeroth and first order statistics of ``frames`` under ``posteriors``."""
    post = np.ascontiguousarray(np.asarray(posteriors, dtype=np.float64))
    X = np.ascontiguousarray(np.asarray(getattr(frames, "data", frames), dtype=np.float64))
    if post.ndim != 2 or X.ndim != 2 or post.shape[0] != X.shape[0]:
        raise DataError(f"posteriors {post.shape} and frames {X.shape} are not aligned")
    n, f = kernels.zero_first_stats(post, X)
    return SufficientStats(n, f, utterance_id)


def stack_stats(stats, means):
    """Stack a sequence of stats into (N: U x C, centred F: U x C x D)."""
    if not stats:
        raise DataError("no statistics given")
    N = np.stack([s.n for s in stats])
    F = np.stack([s.centered(means) for s in stats])
    if N.shape[1] != means.shape[0] or F.shape[2] != means.shape[1]:
        raise DataError(f"statistics of shape {F.shape[1:]} do not match UBM {means.shape}")
    return N, F


@dataclass(eq=False)
class TotalVariabilityModel:
    ubm: GmmModel
    T: np.ndarray  # (C*D) x R
    diagonal: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        C, D = self.ubm.num_components, self.ubm.dim
        if self.T.shape[0] != C * D:
            raise DataError(f"T has {self.T.shape[0]} rows, expected C*D = {C * D}")
        if not np.isfinite(self.T).all():
            raise NumericalError("T contains non-finite entries")

    @property
    def rank(self):
        return self.T.shape[1]

    @property
    def blocks(self):
        return self.T.reshape(self.ubm.num_components, self.ubm.dim, self.rank)

    @property
    def cov_cholesky(self):
        if "chol" not in self._cache:
            if self.diagonal:
                d = np.diagonal(self.ubm.covariances, axis1=1, axis2=2)
                self._cache["chol"] = np.stack([np.diag(np.sqrt(v)) for v in d])
            else:
                self._cache["chol"] = self.ubm.cholesky
        return self._cache["chol"]

    @property
    def whitened_blocks(self):
        """L_c^-1 T_c for every component."""
        if "tw" not in self._cache:
            L = self.cov_cholesky
            self._cache["tw"] = np.stack([solve_triangular(L[c], Tc, lower=True)
                                          for c, Tc in enumerate(self.blocks)])
        return self._cache["tw"]

    @property
    def block_gram(self):
        """T_c' cov_c^-1 T_c for every component, shape C x R x R."""
        if "gram" not in self._cache:
            tw = self.whitened_blocks
            self._cache["gram"] = np.einsum("cdr,cds->crs", tw, tw)
        return self._cache["gram"]

    def whiten_first_order(self, F):
        L = self.cov_cholesky
        out = np.empty_like(F)
        for c in range(F.shape[1]):
            out[:, c, :] = solve_triangular(L[c], F[:, c, :].T, lower=True).T
        return out


def _posterior(model, N, Fw):
    """Posterior precision factor, mean, covariance and log-likelihood terms per utterance."""
    U = N.shape[0]
    R = model.rank
    C, D = model.ubm.num_components, model.ubm.dim
    prec = np.eye(R) + (N @ model.block_gram.reshape(C, R * R)).reshape(U, R, R)
    b = Fw.reshape(U, C * D) @ model.whitened_blocks.reshape(C * D, R)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("i-vector posterior precision is not positive definite") from exc
    eye = np.eye(R)
    mean = np.empty((U, R))
    cov = np.empty((U, R, R))
    for u in range(U):
        mean[u] = cho_solve((chol[u], True), b[u])
        cov[u] = cho_solve((chol[u], True), eye)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    objective = 0.5 * np.einsum("ur,ur->u", b, mean) - 0.5 * logdet
    return mean, cov, objective


def tv_estep(model, stats):
    """E-step accumulators over ``stats``: (sum_u n_uc E[ww'], sum_u fw_uc E[w]', objective)."""
    C, D, R = model.ubm.num_components, model.ubm.dim, model.rank
    acc_ww = np.zeros((C, R, R))
    acc_fw = np.zeros((C, D, R))
    objective = 0.0
    for start in range(0, len(stats), _CHUNK):
        N, F = stack_stats(stats[start:start + _CHUNK], model.ubm.means)
        Fw = model.whiten_first_order(F)
        mean, cov, obj = _posterior(model, N, Fw)
        second = cov + np.einsum("ur,us->urs", mean, mean)
        acc_ww += np.einsum("uc,urs->crs", N, second)
        acc_fw += np.einsum("ucd,ur->cdr", Fw, mean)
        objective += obj.sum()
    return acc_ww, acc_fw, objective


def tv_mstep(model, acc_ww, acc_fw, total_count=None):
    """Solve T_c = (sum f E[w]') (sum n E[ww'])^-1 per component, back in feature space."""
    scale = 1.0 if total_count is None else max(total_count, 1.0)
    if np.abs(acc_fw).max() <= 1e-12 * scale:
        raise NumericalError("degenerate T update: centred first-order statistics carry no variability")
    C, D, R = acc_fw.shape
    L = model.cov_cholesky
    blocks = np.empty((C, D, R))
    for c in range(C):
        try:
            factor = np.linalg.cholesky(acc_ww[c])
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular M-step Gram matrix for component {c}") from exc
        tw = cho_solve((factor, True), acc_fw[c].T).T
        blocks[c] = L[c] @ tw
    return TotalVariabilityModel(model.ubm, blocks.reshape(C * D, R), model.diagonal)


def init_tv(ubm, rank, seed=0, diagonal=False):
    """Random Gaussian T scaled by 0.1 of each dimension's UBM standard deviation."""
    rng = np.random.default_rng(seed)
    C, D = ubm.num_components, ubm.dim
    sigma = np.sqrt(np.diagonal(ubm.covariances, axis1=1, axis2=2))
    blocks = 0.1 * sigma[:, :, None] * rng.standard_normal((C, D, rank))
    return TotalVariabilityModel(ubm, blocks.reshape(C * D, rank), diagonal)


def train_tv_em(stats, ubm, rank, iterations=5, seed=0, init=None, diagonal=False, history=None):
    """EM estimation of the total-variability matrix.

    ``history`` (a list) receives the data log-likelihood, up to a constant
    independent of T, evaluated at the start of each iteration.
    """
    stats = list(stats)
    if rank < 1:
        raise DataError("i-vector rank must be positive")
    if len(stats) < rank:
        raise DataError(f"need at least {rank} utterances to train rank-{rank} T, got {len(stats)}")
    model = init if init is not None else init_tv(ubm, rank, seed, diagonal)
    total = float(sum(s.n.sum() for s in stats))
    for it in range(iterations):
        acc_ww, acc_fw, objective = tv_estep(model, stats)
        if history is not None:
            history.append(objective)
        log.info("TV EM iteration %d objective %.6f", it + 1, objective)
        model = tv_mstep(model, acc_ww, acc_fw, total)
    return model


def extract_ivectors(stats, model):
    """Posterior means E[w] for a sequence of stats; returns U x R."""
    out = []
    for start in range(0, len(stats), _CHUNK):
        N, F = stack_stats(stats[start:start + _CHUNK], model.ubm.means)
        mean, _, _ = _posterior(model, N, model.whiten_first_order(F))
        out.append(mean)
    return np.vstack(out)


def extract_ivector(stats, model):
    return extract_ivectors([stats], model)[0]


_TV_MAGIC = b"TVMR"


def save_tv(path, model):
    C, D = model.ubm.num_components, model.ubm.dim
    write_record(path, _TV_MAGIC, [C, D, model.rank, int(model.diagonal)],
                 [model.ubm.weights[None], model.ubm.means,
                  model.ubm.covariances.reshape(C * D, D), model.T])


def load_tv(path):
    (C, D, R, diagonal), (w, m, cov, T) = read_record(path, _TV_MAGIC)
    w = w[0]
    ubm = GmmModel(w / w.sum(), m, cov.reshape(C, D, D))
    return TotalVariabilityModel(ubm, T, bool(diagonal))


# ---------------------------------------------------------------------------
# Labelled i-vector collections
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class IVectorSet:
    """Rows of i-vectors with their utterance ids, speaker labels and partition keys."""

    vectors: np.ndarray
    utt_ids: list
    speakers: list = None
    partitions: list = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        n = self.vectors.shape[0]
        self.utt_ids = [str(u) for u in self.utt_ids]
        self.speakers = [""] * n if self.speakers is None else [str(s) for s in self.speakers]
        self.partitions = [""] * n if self.partitions is None else [str(p) for p in self.partitions]
        if not (len(self.utt_ids) == len(self.speakers) == len(self.partitions) == n):
            raise DataError("i-vector labels do not match the number of vectors")
        if not np.isfinite(self.vectors).all():
            raise DataError("i-vectors contain non-finite values")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def with_vectors(self, vectors):
        return IVectorSet(vectors, self.utt_ids, self.speakers, self.partitions)

    def subset(self, index):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return IVectorSet(self.vectors[index], [self.utt_ids[i] for i in index],
                          [self.speakers[i] for i in index], [self.partitions[i] for i in index])

    def select_ids(self, ids):
        pos = {u: i for i, u in enumerate(self.utt_ids)}
        missing = [u for u in ids if u not in pos]
        if missing:
            raise DataError(f"unknown utterance ids: {', '.join(missing[:5])}")
        return self.subset([pos[u] for u in ids])

    @staticmethod
    def concat(sets):
        return IVectorSet(np.vstack([s.vectors for s in sets]),
                          sum((s.utt_ids for s in sets), []),
                          sum((s.speakers for s in sets), []),
                          sum((s.partitions for s in sets), []))


def save_ivectors(path, ivs):
    """Write ``path`` (IVMX) and ``path + '.tsv'`` (utt_id, speaker, partition)."""
    write_ivmx(path, ivs.vectors)
    write_tsv(str(path) + ".tsv", zip(ivs.utt_ids, ivs.speakers, ivs.partitions))


def load_ivectors(path):
    vectors = read_ivmx(path)
    rows = read_tsv(str(path) + ".tsv", ncols=3)
    if len(rows) != vectors.shape[0]:
        raise DataError(f"{path}: {vectors.shape[0]} vectors but {len(rows)} sidecar rows")
    utt, spk, part = zip(*rows) if rows else ((), (), ())
    return IVectorSet(vectors, list(utt), list(spk), list(part))


def save_stats(prefix, stats):
    """Stats of many utterances: ``prefix.n.ivmx`` (U x C), ``prefix.f.ivmx`` (U x C*D), ``prefix.tsv``."""
    write_ivmx(f"{prefix}.n.ivmx", np.stack([s.n for s in stats]))
    write_ivmx(f"{prefix}.f.ivmx", np.stack([s.f.reshape(-1) for s in stats]))
    write_tsv(f"{prefix}.tsv", [[s.utterance_id] for s in stats])


def load_stats(prefix):
    N = read_ivmx(f"{prefix}.n.ivmx")
    F = read_ivmx(f"{prefix}.f.ivmx")
    ids = [r[0] for r in read_tsv(f"{prefix}.tsv", ncols=1)]
    C = N.shape[1]
    return [SufficientStats(N[i], F[i].reshape(C, -1), ids[i]) for i in range(N.shape[0])]
