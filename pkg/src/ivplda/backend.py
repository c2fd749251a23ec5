"""The i-vector back-end chain shared by the CLI stages and the tests:

    LW -> data shift (IDVC | mean | none) -> length-norm -> PLDA -> post-norm -> score
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import embedspace as es
from . import plda as pl
from .errors import DataError
from .metrics import ScoreSet

log = logging.getLogger(__name__)

SHIFTING = ("idvc", "mean", "none")
DEV_SUBSET = "__dev__"


@dataclass(eq=False)
class Backend:
    lw: es.LwTransform
    shifting: str
    postnorm: pl.PostNormTransform
    idvc: es.IdvcModel = None
    mean_shift: es.MeanShift = None
    plda: pl.PldaModel = None
    shift_enroll: bool = False


def idvc_subsets(train, dev=None):
    """Training vectors grouped by partition key, plus the development set.

    Development vectors form one extra subset, or one per partition key when
    they carry keys.
    """
    subsets = {}
    for key in sorted(set(train.partitions)):
        subsets[key or "all"] = train.vectors[[p == key for p in train.partitions]]
    if dev is not None and len(dev):
        for key in sorted(set(dev.partitions)):
            name = DEV_SUBSET + (":" + key if key else "")
            subsets[name] = dev.vectors[[p == key for p in dev.partitions]]
    return subsets


def apply_shift(vectors, b, side):
    if b.shifting == "idvc":
        return es.apply_idvc(vectors, b.idvc)
    if b.shifting == "mean":
        return es.apply_mean_shift(vectors, b.mean_shift, side, b.shift_enroll)
    return np.asarray(vectors, dtype=np.float64).copy()


def prepare(vectors, b, side):
    """LW, shift and the second length normalisation, i.e. the PLDA input space."""
    return es.length_normalize(apply_shift(es.apply_lw(vectors, b.lw), b, side))


def fit_backend(train, dev=None, shifting="idvc", plda_iterations=10, eigenvoice_rank=None,
                idvc_max_rank=None, shift_enroll=False):
    """Fit every back-end transform on labelled ``train`` and unlabeled ``dev`` i-vectors."""
    if shifting not in SHIFTING:
        raise DataError(f"shifting must be one of {SHIFTING}, got {shifting!r}")
    lw = es.fit_lw(train.vectors, train.speakers)
    train_lw = es.apply_lw(train.vectors, lw)
    dev_lw = es.apply_lw(dev.vectors, lw) if dev is not None and len(dev) else None
    b = Backend(lw, shifting, None, shift_enroll=shift_enroll)
    if shifting == "idvc":
        subsets = idvc_subsets(train.with_vectors(train_lw),
                               dev.with_vectors(dev_lw) if dev_lw is not None else None)
        b.idvc = es.fit_idvc(subsets, max_rank=idvc_max_rank)
        log.info("IDVC removes a %d-dimensional subspace from %d subsets", b.idvc.rank, len(subsets))
    elif shifting == "mean":
        if dev_lw is None:
            raise DataError("mean-shifting needs development i-vectors")
        b.mean_shift = es.fit_mean_shift(dev_lw)
    x = es.length_normalize(apply_shift(train_lw, b, "train"))
    b.plda = pl.train_plda(x, train.speakers, plda_iterations)
    t = pl.postnorm_fit(b.plda)
    if eigenvoice_rank is not None:
        t = pl.truncate_eigenvoices(t, eigenvoice_rank)
    b.postnorm = t
    return b


def embed(vectors, b, side):
    """Full transform chain ending in the diagonalised, length-normalised PLDA space."""
    return pl.postnorm_apply(prepare(vectors, b, side), b.postnorm)


def score_trials(b, enroll, test, trials, enroll_map=None):
    """Score ``trials`` (sequence of (model_id, test_id, label, partition)).

    ``enroll_map`` maps a model id to its enrollment utterance ids; without it
    every enrollment utterance is its own model.
    """
    e = enroll.with_vectors(prepare(enroll.vectors, b, "enroll"))
    t = test.with_vectors(prepare(test.vectors, b, "test"))
    return score_prepared(b.postnorm, e, t, trials, enroll_map)


def score_prepared(postnorm, enroll, test, trials, enroll_map=None):
    """Like :func:`score_trials` for vectors already in the PLDA input space."""
    if enroll_map is None:
        enroll_map = {u: [u] for u in enroll.utt_ids}
    e = pl.postnorm_apply(enroll.vectors, postnorm)
    t = pl.postnorm_apply(test.vectors, postnorm)
    e_pos = {u: i for i, u in enumerate(enroll.utt_ids)}
    t_pos = {u: i for i, u in enumerate(test.utt_ids)}
    models = sorted({tr[0] for tr in trials})
    model_mean = {}
    model_n = {}
    for m in models:
        utts = enroll_map.get(m)
        if not utts:
            raise DataError(f"no enrollment utterances for model {m!r}")
        try:
            idx = [e_pos[u] for u in utts]
        except KeyError as exc:
            raise DataError(f"enrollment utterance {exc.args[0]!r} has no i-vector") from exc
        model_mean[m] = pl.enroll_mean(e[idx])
        model_n[m] = len(idx)
    try:
        test_idx = [t_pos[tr[1]] for tr in trials]
    except KeyError as exc:
        raise DataError(f"test utterance {exc.args[0]!r} has no i-vector") from exc
    means = np.array([model_mean[tr[0]] for tr in trials]).reshape(len(trials), -1)
    counts = np.array([model_n[tr[0]] for tr in trials], dtype=float)
    scores = pl.score_batch(means, counts, t[test_idx].reshape(len(trials), -1), postnorm.psi)
    labels = [tr[2] if len(tr) > 2 else "unknown" for tr in trials]
    parts = [tr[3] if len(tr) > 3 else "" for tr in trials]
    return ScoreSet([tr[0] for tr in trials], [tr[1] for tr in trials], scores, labels, parts)
