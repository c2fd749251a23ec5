"""Score fusion and detection metrics (EER, minC_primary) with partition
breakdowns.

EER convention: operating points come from accepting trials whose score is
>= each distinct score value (plus reject-all).  P_miss is non-decreasing and
P_fa non-increasing along the sweep; the EER is read where they cross, by
linear interpolation between the two adjacent operating points.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .io import read_tsv, write_tsv

TARGET, NONTARGET, UNKNOWN = 1, 0, -1
_LABELS = {"target": TARGET, "nontarget": NONTARGET, "unknown": UNKNOWN, "": UNKNOWN}
_NAMES = {v: k for k, v in _LABELS.items() if k}
CPRIMARY_PRIORS = (0.01, 0.005)
ALL = "all"


@dataclass(eq=False)
class ScoreSet:
    enroll_ids: list
    test_ids: list
    scores: np.ndarray
    labels: np.ndarray = None
    partitions: list = None

    def __post_init__(self):
        n = len(self.enroll_ids)
        self.enroll_ids = [str(e) for e in self.enroll_ids]
        self.test_ids = [str(t) for t in self.test_ids]
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels is None:
            self.labels = np.full(n, UNKNOWN)
        self.labels = np.array([_LABELS[x] if isinstance(x, str) else int(x) for x in self.labels],
                               dtype=np.int64)
        if self.partitions is None:
            self.partitions = [""] * n
        self.partitions = [str(p) for p in self.partitions]
        if not (len(self.test_ids) == self.scores.size == self.labels.size == len(self.partitions) == n):
            raise DataError("score set columns have different lengths")
        if not np.isfinite(self.scores).all():
            raise DataError("scores must be finite")
        keys = self.keys()
        if len(set(keys)) != n:
            raise DataError("duplicate (enroll_id, test_id) pairs in score set")

    def __len__(self):
        return self.scores.size

    def keys(self):
        return list(zip(self.enroll_ids, self.test_ids))

    def subset(self, mask):
        idx = np.flatnonzero(mask)
        return ScoreSet([self.enroll_ids[i] for i in idx], [self.test_ids[i] for i in idx],
                        self.scores[idx], self.labels[idx], [self.partitions[i] for i in idx])

    def split(self):
        return self.scores[self.labels == TARGET], self.scores[self.labels == NONTARGET]


def _require_labels(tar, non):
    if tar.size == 0 or non.size == 0:
        raise DataError("metrics need at least one target and one nontarget trial")


def operating_points(tar, non):
    """(P_miss, P_fa) at every distinct threshold, sweeping from accept-all to reject-all."""
    scores = np.concatenate([tar, non])
    is_tar = np.concatenate([np.ones(tar.size), np.zeros(non.size)])
    order = np.argsort(scores, kind="stable")
    scores, is_tar = scores[order], is_tar[order]
    # first index of each run of equal scores: thresholds accept scores >= value
    starts = np.flatnonzero(np.r_[True, scores[1:] != scores[:-1]])
    below_tar = np.r_[0.0, np.cumsum(is_tar)]
    below_non = np.r_[0.0, np.cumsum(1.0 - is_tar)]
    cut = np.r_[starts, scores.size]
    p_miss = below_tar[cut] / tar.size
    p_fa = 1.0 - below_non[cut] / non.size
    return p_miss, p_fa


def eer_from_points(p_miss, p_fa):
    diff = p_miss - p_fa
    # the sweep starts at accept-all (diff = -1) and ends at reject-all (diff = +1)
    i = int(np.argmax(diff >= 0.0))
    if diff[i] == 0.0:
        return float(p_miss[i])
    m0, f0, m1, f1 = p_miss[i - 1], p_fa[i - 1], p_miss[i], p_fa[i]
    t = (f0 - m0) / ((m1 - m0) - (f1 - f0))
    return float(m0 + t * (m1 - m0))


def eer_arrays(tar, non):
    tar, non = np.asarray(tar, float), np.asarray(non, float)
    _require_labels(tar, non)
    return eer_from_points(*operating_points(tar, non))


def compute_eer(scores):
    return eer_arrays(*scores.split())


def min_cnorm(p_miss, p_fa, p_target):
    beta = (1.0 - p_target) / p_target
    return float(np.min(p_miss + beta * p_fa))


def min_cprimary_arrays(tar, non, priors=CPRIMARY_PRIORS):
    tar, non = np.asarray(tar, float), np.asarray(non, float)
    _require_labels(tar, non)
    p_miss, p_fa = operating_points(tar, non)
    return float(np.mean([min_cnorm(p_miss, p_fa, p) for p in priors]))


def compute_min_cprimary(scores):
    return min_cprimary_arrays(*scores.split())


@dataclass
class MetricReport:
    eer: float
    min_c_primary: float
    num_target: int
    num_nontarget: int
    partitions: dict = field(default_factory=dict)
    convention: str = "EER by linear interpolation between adjacent ROC operating points; " \
                      "minC_primary = mean of min normalised DCF at P_target 0.01 and 0.005"

    @property
    def equalized_eer(self):
        return float(np.mean([p["eer"] for p in self.partitions.values()]))

    @property
    def equalized_min_c(self):
        return float(np.mean([p["min_c_primary"] for p in self.partitions.values()]))

    def to_dict(self):
        return {"convention": self.convention, "eer": self.eer, "min_c_primary": self.min_c_primary,
                "num_target": self.num_target, "num_nontarget": self.num_nontarget,
                "equalized_eer": self.equalized_eer, "equalized_min_c_primary": self.equalized_min_c,
                "partitions": self.partitions}


def report(scores):
    """Pooled metrics plus one row per partition key (empty key counts as 'all')."""
    tar, non = scores.split()
    keys = [p or ALL for p in scores.partitions]
    rows = {}
    for key in sorted(set(keys)):
        sub = scores.subset(np.array([k == key for k in keys]))
        t, n = sub.split()
        if t.size == 0 or n.size == 0:
            continue
        rows[key] = {"eer": eer_arrays(t, n), "min_c_primary": min_cprimary_arrays(t, n),
                     "num_target": int(t.size), "num_nontarget": int(n.size)}
    return MetricReport(eer_arrays(tar, non), min_cprimary_arrays(tar, non),
                        int(tar.size), int(non.size), rows)


def fuse_scores(sets):
    """Equal-weight mean of scores over sub-systems sharing the same trial keys."""
    if not sets:
        raise DataError("nothing to fuse")
    base = sets[0]
    base_keys = base.keys()
    total = base.scores.copy()
    for k, other in enumerate(sets[1:], 1):
        pos = {key: i for i, key in enumerate(other.keys())}
        missing = [key for key in base_keys if key not in pos]
        extra = set(pos) - set(base_keys)
        if missing or extra:
            bad = [f"{e}/{t}" for e, t in (missing + sorted(extra))[:10]]
            raise DataError(f"score set {k} trial keys differ from set 0: {', '.join(bad)}")
        total += other.scores[[pos[key] for key in base_keys]]
    return ScoreSet(base.enroll_ids, base.test_ids, total / len(sets), base.labels, base.partitions)


def write_scores(path, scores):
    write_tsv(path, [(e, t, f"{s:.6f}") for e, t, s in zip(scores.enroll_ids, scores.test_ids, scores.scores)])


def read_trial_key(path):
    """Trial key TSV: enroll_id, test_id, label, partition_key."""
    rows = read_tsv(path, ncols=4)
    for r in rows:
        if r[2] not in _LABELS:
            raise DataError(f"{path}: unknown trial label {r[2]!r}")
    return rows


def read_scores(path, key_path=None):
    rows = read_tsv(path, ncols=3)
    enroll, test, raw = zip(*rows) if rows else ((), (), ())
    try:
        values = np.array([float(x) for x in raw])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric score") from exc
    if key_path is None:
        return ScoreSet(list(enroll), list(test), values)
    key = {(r[0], r[1]): (r[2], r[3]) for r in read_trial_key(key_path)}
    missing = [(e, t) for e, t in zip(enroll, test) if (e, t) not in key]
    if missing:
        raise DataError(f"{path}: {len(missing)} scored trials absent from the key, e.g. {missing[0]}")
    labels = [key[(e, t)][0] for e, t in zip(enroll, test)]
    parts = [key[(e, t)][1] for e, t in zip(enroll, test)]
    return ScoreSet(list(enroll), list(test), values, labels, parts)


def label_name(code):
    return _NAMES[int(code)]
