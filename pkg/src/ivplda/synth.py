"""Synthetic corpora with known ground truth, plus brute-force oracles.

Every generator is a pure function of its arguments and seed.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .errors import DataError
from .gmm import GmmModel
from .io import write_tsv
from .ivector import IVectorSet, SufficientStats, save_ivectors


@dataclass
class SynthSpec:
    seed: int = 0
    speakers: int = 100
    sessions_per_speaker: int = 10
    dim: int = 10
    b_diag: np.ndarray = None
    w_diag: np.ndarray = None
    shift_vectors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.speakers < 1 or self.sessions_per_speaker < 1 or self.dim < 1:
            raise DataError("synthetic corpus sizes must be positive")
        self.b_diag = np.ones(self.dim) if self.b_diag is None else np.broadcast_to(
            np.asarray(self.b_diag, dtype=float), (self.dim,)).copy()
        self.w_diag = np.ones(self.dim) if self.w_diag is None else np.broadcast_to(
            np.asarray(self.w_diag, dtype=float), (self.dim,)).copy()
        if (self.b_diag < 0).any() or (self.w_diag < 0).any():
            raise DataError("variances must be nonnegative")
        self.shift_vectors = {str(k): np.asarray(v, dtype=float) for k, v in self.shift_vectors.items()}


def gen_plda_vectors(spec, speaker_prefix="spk"):
    """Draw x_s ~ N(0, B) per speaker and x_s + y + shift(partition), y ~ N(0, W), per session.

    Speakers are assigned to the partitions of ``spec.shift_vectors``
    round-robin in sorted key order (no partitions: empty key, no shift).
    """
    rng = np.random.default_rng(spec.seed)
    S, n, R = spec.speakers, spec.sessions_per_speaker, spec.dim
    keys = sorted(spec.shift_vectors)
    spk_x = rng.standard_normal((S, R)) * np.sqrt(spec.b_diag)
    sess = rng.standard_normal((S, n, R)) * np.sqrt(spec.w_diag)
    vectors = spk_x[:, None, :] + sess
    partitions = []
    for s in range(S):
        key = keys[s % len(keys)] if keys else ""
        if key:
            vectors[s] += spec.shift_vectors[key]
        partitions += [key] * n
    speakers = [f"{speaker_prefix}{s:05d}" for s in range(S) for _ in range(n)]
    utts = [f"{speaker_prefix}{s:05d}-{i:03d}" for s in range(S) for i in range(n)]
    return IVectorSet(vectors.reshape(S * n, R), utts, speakers, partitions)


def _psd_sqrt(cov):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def gen_gmm_frames(model, num_frames, seed=0):
    """Ancestral sampling; returns (frames T x D, component index per frame)."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(model.num_components, size=num_frames, p=model.weights / model.weights.sum())
    noise = rng.standard_normal((num_frames, model.dim))
    frames = np.empty((num_frames, model.dim))
    for c in range(model.num_components):
        idx = comp == c
        frames[idx] = model.means[c] + noise[idx] @ _psd_sqrt(model.covariances[c]).T
    return frames, comp


def random_gmm(num_components, dim, seed=0, spread=3.0, cov_scale=0.3):
    """A GMM with N(0, spread^2) means and well-conditioned random full covariances."""
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, spread, (num_components, dim))
    A = rng.normal(0.0, cov_scale, (num_components, dim, dim)) + np.eye(dim)
    covs = A @ A.transpose(0, 2, 1)
    weights = rng.dirichlet(np.full(num_components, 5.0))
    return GmmModel(weights, means, covs)


def gen_tv_stats(ubm, T_true, num_utts, frames_per_utt=200, seed=0):
    """Exact Baum-Welch statistics of frames drawn from the total-variability model.

    Each utterance draws w ~ N(0, I), hard-assigns ``frames_per_utt`` frames to
    components by the UBM weights, and samples each frame from
    N(mean_c + T_c w, cov_c).  Returns (stats list, true i-vectors).
    """
    rng = np.random.default_rng(seed)
    C, D = ubm.num_components, ubm.dim
    R = T_true.shape[1]
    blocks = T_true.reshape(C, D, R)
    chol = ubm.cholesky
    stats = []
    ws = rng.standard_normal((num_utts, R))
    for u in range(num_utts):
        counts = rng.multinomial(frames_per_utt, ubm.weights).astype(float)
        shifted = ubm.means + blocks @ ws[u]
        noise = rng.standard_normal((C, D)) * np.sqrt(counts)[:, None]
        f = counts[:, None] * shifted + np.einsum("cij,cj->ci", chol, noise)
        stats.append(SufficientStats(counts, f, f"utt{u:05d}"))
    return stats, ws


def llr_oracle_1d(psi, n, enroll_mean, test, points=100_001):
    """Same-vs-different speaker log-ratio by trapezoid integration over the latent speaker.

    Model: speaker x ~ N(0, psi); each observation ~ N(x, 1).  The n
    enrollment observations enter through their mean, N(enroll_mean; x, 1/n).
    """
    if psi < 0 or n < 1:
        raise DataError("need psi >= 0 and n >= 1")
    if psi == 0:
        return 0.0
    half = 10.0 * np.sqrt(psi + 1.0)
    x = np.linspace(-half, half, points)

    def log_normal(v, mean, var):
        return -0.5 * (np.log(2.0 * np.pi * var) + (v - mean) ** 2 / var)

    def log_integral(logf):
        m = logf.max()
        return m + np.log(trapezoid(np.exp(logf - m), x))

    prior = log_normal(x, 0.0, psi)
    enroll = log_normal(enroll_mean, x, 1.0 / n)
    probe = log_normal(test, x, 1.0)
    joint = log_integral(prior + enroll + probe)
    separate = log_integral(prior + enroll) + log_integral(prior + probe)
    return float(joint - separate)


def random_spd(dim, rng, condition=100.0):
    """Random SPD matrix with eigenvalues log-uniform in [1, condition]."""
    Q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    vals = np.exp(rng.uniform(0.0, np.log(condition), dim))
    return (Q * vals) @ Q.T


@dataclass(eq=False)
class SreCorpus:
    """Train/dev/enroll/test i-vectors plus a trial list ``(model, test, label, partition)``."""

    train: IVectorSet
    dev: IVectorSet
    enroll: IVectorSet
    test: IVectorSet
    trials: list
    enroll_map: dict

    def roles(self):
        """(utt_id, role) rows in corpus order."""
        out = []
        for role in ("train", "dev", "enroll", "test"):
            out += [(u, role) for u in getattr(self, role).utt_ids]
        return out

    def all_vectors(self):
        return IVectorSet.concat([self.train, self.dev, self.enroll, self.test])


def gen_sre_corpus(seed=0, dim=10, train_speakers=300, train_sessions=8, eval_speakers=60,
                   enroll_sessions=1, test_sessions=3, dev_speakers=50, dev_sessions=2,
                   b_diag=4.0, w_diag=1.0, train_shifts=None, test_shift=None,
                   eval_partitions=("f", "m")):
    """A verification corpus drawn from the two-covariance model.

    Training speakers cycle through ``train_shifts`` partitions.  Evaluation
    and development speakers alternate over ``eval_partitions``.
    ``test_shift`` is either one vector added to every test and development
    session, or a dict giving the offset per evaluation partition (missing
    keys: no offset).  Enrollment sessions are never shifted.  Every model is
    scored against every test utterance.
    """
    rng = np.random.default_rng(seed)
    train = gen_plda_vectors(SynthSpec(int(rng.integers(2**31)), train_speakers, train_sessions, dim,
                                       b_diag, w_diag, train_shifts or {}), speaker_prefix="trn")
    bvar = np.broadcast_to(np.asarray(b_diag, float), (dim,))
    wvar = np.broadcast_to(np.asarray(w_diag, float), (dim,))
    if isinstance(test_shift, dict):
        shifts = {k: np.asarray(v, float) for k, v in test_shift.items()}
    else:
        shift = np.zeros(dim) if test_shift is None else np.asarray(test_shift, float)
        shifts = {k: shift for k in eval_partitions}

    def offsets(parts):
        return np.array([shifts.get(p, np.zeros(dim)) for p in parts])

    spk_ids = [f"evl{s:05d}" for s in range(eval_speakers)]
    spk_part = [eval_partitions[s % len(eval_partitions)] for s in range(eval_speakers)]
    x = rng.standard_normal((eval_speakers, dim)) * np.sqrt(bvar)
    enr = x[:, None, :] + rng.standard_normal((eval_speakers, enroll_sessions, dim)) * np.sqrt(wvar)
    tst = (x[:, None, :] + rng.standard_normal((eval_speakers, test_sessions, dim)) * np.sqrt(wvar)
           + offsets(spk_part)[:, None, :])
    enroll = IVectorSet(enr.reshape(-1, dim),
                        [f"{s}-e{i:02d}" for s in spk_ids for i in range(enroll_sessions)],
                        [s for s in spk_ids for _ in range(enroll_sessions)],
                        [p for p in spk_part for _ in range(enroll_sessions)])
    test = IVectorSet(tst.reshape(-1, dim),
                      [f"{s}-t{i:02d}" for s in spk_ids for i in range(test_sessions)],
                      [s for s in spk_ids for _ in range(test_sessions)],
                      [p for p in spk_part for _ in range(test_sessions)])
    dev_part = [eval_partitions[s % len(eval_partitions)] for s in range(dev_speakers)]
    xd = rng.standard_normal((dev_speakers, dim)) * np.sqrt(bvar)
    yd = rng.standard_normal((dev_speakers, dev_sessions, dim)) * np.sqrt(wvar)
    dev_vec = (xd[:, None, :] + yd + offsets(dev_part)[:, None, :]).reshape(-1, dim)
    # development data is unlabeled for speaker but keeps its partition key
    dev = IVectorSet(dev_vec, [f"dev{i:06d}" for i in range(dev_vec.shape[0])],
                     partitions=[p for p in dev_part for _ in range(dev_sessions)])
    enroll_map = {s: [f"{s}-e{i:02d}" for i in range(enroll_sessions)] for s in spk_ids}
    trials = []
    for s in spk_ids:
        for u, spk, part in zip(test.utt_ids, test.speakers, test.partitions):
            trials.append((s, u, "target" if spk == s else "nontarget", part))
    return SreCorpus(train, dev, enroll, test, trials, enroll_map)


def add_noise(ivs, scale, seed=0):
    """A copy of ``ivs`` with independent N(0, scale^2) noise on every coordinate."""
    rng = np.random.default_rng(seed)
    return ivs.with_vectors(ivs.vectors + scale * rng.standard_normal(ivs.vectors.shape))


def write_sre_corpus(corpus, out_dir):
    """Write the corpus in the pipeline's i-vector-mode layout.

    Files: ``ivectors.ivmx`` (+ ``.tsv`` sidecar), ``roles.tsv`` (utt_id, role),
    ``trials.tsv`` (trial key) and ``enroll.tsv`` (model_id, utt_id).
    Returns the list of written paths.
    """
    paths = {name: os.path.join(out_dir, name) for name in
             ("ivectors.ivmx", "roles.tsv", "trials.tsv", "enroll.tsv")}
    save_ivectors(paths["ivectors.ivmx"], corpus.all_vectors())
    write_tsv(paths["roles.tsv"], corpus.roles())
    write_tsv(paths["trials.tsv"], corpus.trials)
    write_tsv(paths["enroll.tsv"], [(m, u) for m in sorted(corpus.enroll_map) for u in corpus.enroll_map[m]])
    return [paths["ivectors.ivmx"], paths["ivectors.ivmx"] + ".tsv"] + \
        [paths[k] for k in ("roles.tsv", "trials.tsv", "enroll.tsv")]


def demo_config(seed=0, plda_iterations=10):
    """TOML text running the three shifting variants on a written corpus, plus their fusion."""
    lines = [
        "schema_version = 1",
        f"seed = {int(seed)}",
        'workdir = "work"',
        "",
        "[data]",
        'ivectors = "ivectors.ivmx"',
        'roles = "roles.tsv"',
        'trials = "trials.tsv"',
        'enroll_map = "enroll.tsv"',
        "",
        "[plda]",
        f"iterations = {int(plda_iterations)}",
    ]
    for name in ("idvc", "mean", "none"):
        lines += ["", "[[systems]]", f'name = "{name}"', f'shifting = "{name}"']
    lines += ["", "[[fusions]]", 'name = "fusion"', 'members = ["idvc", "mean", "none"]', ""]
    return "\n".join(lines)
