"""File-level stage runners and the config-driven pipeline.

Every stage reads its inputs from disk, writes its outputs atomically and
leaves ``<first output>.manifest.json`` recording input hashes, parameters and
the stage seed.  Manifests carry no timestamps, so a rerun on the same inputs
is byte-identical.  ``run_pipeline`` wires the stages in the fixed order of
``STAGE_ORDER`` for every configured sub-system, fuses and evaluates.
"""

import hashlib
import json
import logging
import os
import resource
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial

import numpy as np

from . import backend as bk
from . import embedspace as es
from . import frontend as fe
from . import gmm
from . import ivector as iv
from . import metrics as mt
from . import plda as pl
from ._accel import backend_name
from .errors import ConfigError, DataError, IvpldaError
from .io import atomic_open, file_sha256, read_archive, read_tsv, read_wav, write_archive, write_tsv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)
timing_log = logging.getLogger("ivplda.timing")

SCHEMA_VERSION = 1
STAGE_ORDER = ("features", "vad", "ubm", "stats", "tv", "ivector",
               "lw", "shift", "plda", "postnorm", "score", "fuse", "evaluate")
FEATURE_KINDS = ("mfcc", "plp")
POSTERIOR_KINDS = ("ubm", "two-feats", "external")
ROLES = ("train", "dev", "enroll", "test")


def stage_seed(root, stage):
    """Split the root seed into an independent, stable seed per stage name."""
    digest = hashlib.sha256(f"{root}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


# ---------------------------------------------------------------------------
# manifests, timing, worker pools
# ---------------------------------------------------------------------------

def manifest_path(output):
    return str(output) + ".manifest.json"


def _manifest(stage, inputs, outputs, params, seed):
    # paths are relative to the manifest so a moved work tree keeps identical manifests
    here = os.path.dirname(os.path.abspath(manifest_path(outputs[0])))
    rel = lambda p: os.path.relpath(os.path.abspath(p), here).replace(os.sep, "/")  # noqa: E731
    return {
        "stage": stage,
        "seed": seed,
        "params": params,
        "backend": backend_name(),
        "inputs": {rel(p): file_sha256(p) for p in inputs},
        "outputs": {rel(p): file_sha256(p) for p in outputs},
    }


def _up_to_date(stage, inputs, outputs, params, seed):
    path = manifest_path(outputs[0])
    if not os.path.exists(path) or not all(os.path.exists(p) for p in outputs):
        return False
    with open(path) as fh:
        try:
            old = json.load(fh)
        except json.JSONDecodeError:
            return False
    fresh = _manifest(stage, inputs, outputs, params, seed)
    return old == json.loads(json.dumps(fresh))


def run_stage(stage, fn, inputs, outputs, params, seed=None, force=True):
    """Run ``fn()`` as pipeline stage ``stage``, with input checks and a manifest.

    Without ``force``, a stage whose manifest matches the current input hashes,
    parameters and outputs is skipped.  Errors leave with ``exc.stage`` set.
    """
    inputs = [str(p) for p in inputs]
    outputs = [str(p) for p in outputs]
    try:
        missing = [p for p in inputs if not os.path.exists(p)]
        if missing:
            raise DataError(f"missing input {missing[0]}")
        if not force and _up_to_date(stage, inputs, outputs, params, seed):
            log.info("[%s] up to date: %s", stage, outputs[0])
            return False
        start = time.perf_counter()
        fn()
        log.info("[%s] done in %.3f s, peak RSS %.1f MB", stage, time.perf_counter() - start, peak_rss_mb())
        with atomic_open(manifest_path(outputs[0]), "w") as fh:
            json.dump(_manifest(stage, inputs, outputs, params, seed), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return True
    except IvpldaError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = stage
        raise


def peak_rss_mb():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def log_utterance(stage, utt, seconds, nbytes):
    timing_log.info("stage=%s utt=%s seconds=%.6f bytes=%d peak_rss_mb=%.1f",
                    stage, utt, seconds, nbytes, peak_rss_mb())


def parallel_map(fn, items, workers=1):
    """Ordered map; results never depend on the worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------------------
# list files
# ---------------------------------------------------------------------------

def read_utterance_list(path):
    """Utterance list TSV: utt_id, wav path, speaker, partition, role.

    Relative wav paths are resolved against the list's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    for utt, wav, spk, part, role in read_tsv(path, ncols=5):
        if not wav:
            raise DataError(f"{path}: utterance {utt!r} has no audio path")
        if role and role not in ROLES:
            raise DataError(f"{path}: utterance {utt!r} has unknown role {role!r}")
        rows.append((utt, os.path.join(base, wav), spk, part, role))
    if not rows:
        raise DataError(f"{path}: empty utterance list")
    return rows


def read_roles(path):
    roles = {}
    for utt, role in read_tsv(path, ncols=2):
        if role not in ROLES:
            raise DataError(f"{path}: utterance {utt!r} has unknown role {role!r}")
        roles[utt] = role
    return roles


def select_role(ivs, roles, role):
    idx = [i for i, u in enumerate(ivs.utt_ids) if roles.get(u) == role]
    return ivs.subset(np.array(idx, dtype=int))


def read_enroll_map(path):
    """Enrollment map TSV: model_id, utt_id (one row per enrollment utterance)."""
    out = {}
    for model, utt in read_tsv(path, ncols=2):
        out.setdefault(model, []).append(utt)
    return out


# ---------------------------------------------------------------------------
# acoustic stages
# ---------------------------------------------------------------------------

def _features_one(kind, config, row):
    utt, wav = row[0], row[1]
    start = time.perf_counter()
    try:
        samples, rate = read_wav(wav)
        feats = fe.extract(fe.AudioSignal(samples, rate), kind, config)
    except (OSError, EOFError) as exc:
        raise DataError(f"{wav}: cannot read audio ({exc})") from exc
    except DataError as exc:
        raise DataError(f"utterance {utt}: {exc}") from exc
    return utt, feats.data.astype(np.float32), time.perf_counter() - start


def extract_features(utt_list, out, kind="mfcc", config=fe.FrontendConfig(), workers=1):
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"feature kind must be one of {FEATURE_KINDS}, got {kind!r}")
    rows = read_utterance_list(utt_list)
    results = parallel_map(partial(_features_one, kind, config), rows, workers)
    for utt, data, sec in results:
        log_utterance("features", utt, sec, data.nbytes)
    write_archive(out, [(utt, data) for utt, data, _ in results])


def apply_vad(features, out, offset=-0.5, window=11):
    items = []
    for utt, X in read_archive(features):
        start = time.perf_counter()
        feats = fe.FeatureMatrix(X)
        try:
            voiced = fe.select_voiced(feats, fe.compute_vad(feats, offset, window))
        except DataError as exc:
            raise DataError(f"utterance {utt}: {exc}") from exc
        log_utterance("vad", utt, time.perf_counter() - start, voiced.data.nbytes)
        items.append((utt, voiced.data))
    write_archive(out, items)


def _archive_subset(path, keep=None):
    items = read_archive(path)
    if keep is not None:
        items = [(u, X) for u, X in items if u in keep]
        if not items:
            raise DataError(f"{path}: no utterances with the training role")
    return items


def train_ubm(features, out, components, iterations=10, split_iterations=2, floor_scale=1e-4,
              seed=0, keep=None):
    frames = [X for _, X in _archive_subset(features, keep)]
    model = gmm.train_gmm_em(frames, components, iterations, seed, split_iterations, floor_scale)
    gmm.save_gmm(out, model)


def couple_ubm(plp_ubm, plp_features, mfcc_features, out, floor_scale=1e-4, keep=None):
    plp = _archive_subset(plp_features, keep)
    mfcc = dict(_archive_subset(mfcc_features, keep))
    missing = [u for u, _ in plp if u not in mfcc]
    if missing:
        raise DataError(f"utterance {missing[0]!r} has PLP but no MFCC features")
    coupled = gmm.couple_ubm(gmm.load_gmm(plp_ubm), [mfcc[u] for u, _ in plp], [X for _, X in plp],
                             floor_scale)
    gmm.save_gmm(out, coupled.mfcc_ubm)


def _stats_one(ubm, prune, item):
    utt, X = item
    start = time.perf_counter()
    post = gmm.gmm_posteriors(ubm, X, prune)
    return iv.accumulate_stats(post, X, utt), time.perf_counter() - start


def _stats_two_feats(plp_ubm, mfcc_ubm, prune, item):
    utt, Xp, Xm = item
    start = time.perf_counter()
    if Xp.shape[0] != Xm.shape[0]:
        raise DataError(f"utterance {utt}: {Xp.shape[0]} PLP frames vs {Xm.shape[0]} MFCC frames")
    post = gmm.combine_posteriors(gmm.gmm_posteriors(plp_ubm, Xp, 0.0),
                                  gmm.gmm_posteriors(mfcc_ubm, Xm, 0.0), prune)
    return iv.accumulate_stats(post, Xm, utt), time.perf_counter() - start


def compute_stats(ubm, features, out_prefix, prune=gmm.DEFAULT_PRUNE, workers=1,
                  plp_ubm=None, plp_features=None, posteriors=None):
    """Baum-Welch statistics of every utterance in ``features``.

    Posteriors come from ``ubm`` alone, from the two-feats product with
    ``plp_ubm`` over ``plp_features``, or from an external frame-aligned
    ``posteriors`` archive.
    """
    items = read_archive(features)
    model = gmm.load_gmm(ubm)
    if posteriors is not None:
        post = dict(read_archive(posteriors))
        results = []
        for utt, X in items:
            if utt not in post:
                raise DataError(f"utterance {utt!r} has no external posteriors")
            start = time.perf_counter()
            P = post[utt]
            if P.shape != (X.shape[0], model.num_components):
                raise DataError(f"utterance {utt}: posteriors {P.shape} do not match "
                                f"{X.shape[0]} frames x {model.num_components} components")
            results.append((iv.accumulate_stats(P, X, utt), time.perf_counter() - start))
    elif plp_ubm is not None:
        plp = dict(read_archive(plp_features))
        missing = [u for u, _ in items if u not in plp]
        if missing:
            raise DataError(f"utterance {missing[0]!r} has no PLP features")
        fn = partial(_stats_two_feats, gmm.load_gmm(plp_ubm), model, prune)
        results = parallel_map(fn, [(u, plp[u], X) for u, X in items], workers)
    else:
        results = parallel_map(partial(_stats_one, model, prune), items, workers)
    for s, sec in results:
        log_utterance("stats", s.utterance_id, sec, s.n.nbytes + s.f.nbytes)
    iv.save_stats(out_prefix, [s for s, _ in results])


def ubm_from_posteriors(posteriors, features, out, floor_scale=1e-4, keep=None):
    """UBM for externally supplied posteriors: one M-step over the aligned frames."""
    feats = dict(_archive_subset(features, keep))
    posts = [(u, P) for u, P in read_archive(posteriors) if u in feats]
    if not posts:
        raise DataError(f"{posteriors}: no posteriors for the training utterances")
    model = gmm.mstep_from_posteriors([P for _, P in posts], [feats[u] for u, _ in posts], floor_scale)
    gmm.save_gmm(out, model)


def stats_paths(prefix):
    return [f"{prefix}.n.ivmx", f"{prefix}.f.ivmx", f"{prefix}.tsv"]


def train_tv(stats_prefix, ubm, out, rank, iterations=5, seed=0, keep=None, diagonal=False):
    stats = iv.load_stats(stats_prefix)
    if keep is not None:
        stats = [s for s in stats if s.utterance_id in keep]
    model = iv.train_tv_em(stats, gmm.load_gmm(ubm), rank, iterations, seed, diagonal=diagonal)
    iv.save_tv(out, model)


def extract_ivectors(tv, stats_prefix, out, labels=None):
    """I-vectors of every utterance; ``labels`` maps utt_id -> (speaker, partition)."""
    model = iv.load_tv(tv)
    stats = iv.load_stats(stats_prefix)
    vectors = []
    for s in stats:
        start = time.perf_counter()
        vectors.append(iv.extract_ivector(s, model))
        log_utterance("ivector", s.utterance_id, time.perf_counter() - start, vectors[-1].nbytes)
    labels = labels or {}
    ids = [s.utterance_id for s in stats]
    iv.save_ivectors(out, iv.IVectorSet(np.array(vectors), ids,
                                        [labels.get(u, ("", ""))[0] for u in ids],
                                        [labels.get(u, ("", ""))[1] for u in ids]))


# ---------------------------------------------------------------------------
# i-vector space stages
# ---------------------------------------------------------------------------

def fit_lw(ivectors, roles, out):
    train = select_role(iv.load_ivectors(ivectors), read_roles(roles), "train")
    es.save_lw(out, es.fit_lw(train.vectors, train.speakers))


def apply_lw(ivectors, lw, out):
    ivs = iv.load_ivectors(ivectors)
    iv.save_ivectors(out, ivs.with_vectors(es.apply_lw(ivs.vectors, es.load_lw(lw))))


def fit_idvc(ivectors, roles, out, max_rank=None):
    ivs = iv.load_ivectors(ivectors)
    r = read_roles(roles)
    model = es.fit_idvc(bk.idvc_subsets(select_role(ivs, r, "train"), select_role(ivs, r, "dev")),
                        max_rank=max_rank)
    log.info("IDVC basis rank %d", model.rank)
    es.save_idvc(out, model)


def apply_idvc(ivectors, idvc, out):
    """Project out the IDVC subspace and length-normalise again."""
    ivs = iv.load_ivectors(ivectors)
    shifted = es.apply_idvc(ivs.vectors, es.load_idvc(idvc))
    iv.save_ivectors(out, ivs.with_vectors(es.length_normalize(shifted)))


def mean_shift(ivectors, roles, out, model_out=None, enroll_too=False):
    """Subtract the development mean from test-role vectors, then length-normalise all."""
    ivs = iv.load_ivectors(ivectors)
    r = read_roles(roles)
    m = es.fit_mean_shift(select_role(ivs, r, "dev").vectors)
    if model_out is not None:
        es.save_mean_shift(model_out, m)
    shifted = ivs.vectors.copy()
    for side in ("enroll", "test"):
        rows = np.array([r.get(u) == side for u in ivs.utt_ids], dtype=bool)
        shifted[rows] = es.apply_mean_shift(shifted[rows], m, side, enroll_too)
    iv.save_ivectors(out, ivs.with_vectors(es.length_normalize(shifted)))


def no_shift(ivectors, out):
    ivs = iv.load_ivectors(ivectors)
    iv.save_ivectors(out, ivs.with_vectors(es.length_normalize(ivs.vectors)))


def train_plda(ivectors, roles, out, iterations=10, within_scatter=True):
    train = select_role(iv.load_ivectors(ivectors), read_roles(roles), "train")
    pl.save_plda_model(out, pl.train_plda(train.vectors, train.speakers, iterations,
                                          include_within_scatter=within_scatter))


def postnorm(plda_model, out, eigenvoice_rank=None):
    t = pl.postnorm_fit(pl.load_plda_model(plda_model))
    if eigenvoice_rank is not None:
        t = pl.truncate_eigenvoices(t, eigenvoice_rank)
    pl.save_plda(out, t)


def read_trials(path):
    """Trial list: the trial key format; label and partition columns may be blank."""
    rows = read_tsv(path, ncols=4)
    if not rows:
        raise DataError(f"{path}: no trials")
    return [tuple(r) for r in rows]


def score(postnorm_path, ivectors, trials, out, enroll_map=None):
    t = pl.load_plda(postnorm_path)
    ivs = iv.load_ivectors(ivectors)
    rows = read_trials(trials)
    emap = read_enroll_map(enroll_map) if enroll_map else None
    start = time.perf_counter()
    scores = bk.score_prepared(t, ivs, ivs, rows, emap)
    elapsed = time.perf_counter() - start
    timing_log.info("stage=score trials=%d seconds=%.6f per_trial=%.3e peak_rss_mb=%.1f",
                    len(rows), elapsed, elapsed / len(rows), peak_rss_mb())
    mt.write_scores(out, scores)


def fuse(score_paths, out):
    mt.write_scores(out, mt.fuse_scores([mt.read_scores(p) for p in score_paths]))


def evaluate(scores, key, out=None):
    rep = mt.report(mt.read_scores(scores, key))
    if out is not None:
        with atomic_open(out, "w") as fh:
            json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return rep


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class SystemConfig:
    name: str
    features: str = "mfcc"
    posteriors: str = "ubm"
    shifting: str = "idvc"
    eigenvoice_rank: int = None
    shift_enroll: bool = False  # mean-shifting: also shift enrollment vectors
    ivectors: str = None  # precomputed i-vectors: skips the acoustic stages

    def validate(self):
        if not self.name or "/" in self.name:
            raise ConfigError(f"bad system name {self.name!r}")
        if self.features not in FEATURE_KINDS:
            raise ConfigError(f"system {self.name}: features must be one of {FEATURE_KINDS}")
        if self.posteriors not in POSTERIOR_KINDS:
            raise ConfigError(f"system {self.name}: posteriors must be one of {POSTERIOR_KINDS}")
        if self.posteriors == "two-feats" and self.features != "mfcc":
            raise ConfigError(f"system {self.name}: two-feats posteriors accumulate MFCC statistics")
        if self.shifting not in bk.SHIFTING:
            raise ConfigError(f"system {self.name}: shifting must be one of {bk.SHIFTING}")
        if self.eigenvoice_rank is not None and self.eigenvoice_rank < 0:
            raise ConfigError(f"system {self.name}: eigenvoice_rank must be >= 0")


@dataclass
class PipelineConfig:
    base_dir: str = "."
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    workdir: str = "work"
    stages: list = field(default_factory=lambda: list(STAGE_ORDER))
    data: dict = field(default_factory=dict)
    frontend: fe.FrontendConfig = field(default_factory=fe.FrontendConfig)
    ubm: dict = field(default_factory=lambda: {"components": 64, "iterations": 10, "split_iterations": 2,
                                               "floor_scale": 1e-4, "prune": gmm.DEFAULT_PRUNE})
    tv: dict = field(default_factory=lambda: {"rank": 50, "iterations": 5, "diagonal": False})
    plda: dict = field(default_factory=lambda: {"iterations": 10, "within_scatter": True})
    idvc: dict = field(default_factory=dict)
    systems: list = field(default_factory=list)
    fusions: list = field(default_factory=list)

    def path(self, p):
        return p if p is None or os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def work(self):
        return self.path(self.workdir)

    @property
    def ivector_mode(self):
        return all(s.ivectors or self.data.get("ivectors") for s in self.systems)


_DATA_KEYS = {"utterances", "ivectors", "roles", "trials", "enroll_map", "posteriors"}
_SECTION_KEYS = {
    "ubm": {"components", "iterations", "split_iterations", "floor_scale", "prune"},
    "tv": {"rank", "iterations", "diagonal"},
    "plda": {"iterations", "within_scatter"},
    "idvc": {"max_rank"},
}


def _check_keys(section, got, allowed):
    extra = set(got) - set(allowed)
    if extra:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(sorted(extra))}")


def parse_config(doc, base_dir="."):
    """Validate a config mapping (the parsed TOML) into a :class:`PipelineConfig`."""
    top = {"schema_version", "seed", "workdir", "stages", "data", "frontend", "systems", "fusions"} | set(_SECTION_KEYS)
    _check_keys("top level", doc, top)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    cfg = PipelineConfig(base_dir=base_dir)
    cfg.seed = int(doc.get("seed", 0))
    cfg.workdir = str(doc.get("workdir", "work"))
    stages = list(doc.get("stages", STAGE_ORDER))
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stages: {', '.join(unknown)}")
    positions = [STAGE_ORDER.index(s) for s in stages]
    if positions != sorted(set(positions)):
        raise ConfigError(f"stages must follow the order {' -> '.join(STAGE_ORDER)}")
    cfg.stages = stages
    data = dict(doc.get("data", {}))
    _check_keys("data", data, _DATA_KEYS)
    cfg.data = data
    fe_keys = {f.name for f in fields(fe.FrontendConfig)}
    fe_doc = dict(doc.get("frontend", {}))
    _check_keys("frontend", fe_doc, fe_keys)
    cfg.frontend = fe.FrontendConfig(**fe_doc)
    for section, allowed in _SECTION_KEYS.items():
        sub = dict(doc.get(section, {}))
        _check_keys(section, sub, allowed)
        getattr(cfg, section).update(sub)
    systems = doc.get("systems", [])
    if not systems:
        raise ConfigError("config needs at least one [[systems]] entry")
    sys_keys = {f.name for f in fields(SystemConfig)}
    for s in systems:
        _check_keys("systems", s, sys_keys)
        sc = SystemConfig(**s)
        sc.validate()
        cfg.systems.append(sc)
    names = [s.name for s in cfg.systems]
    if len(set(names)) != len(names):
        raise ConfigError("system names must be unique")
    for f in doc.get("fusions", []):
        _check_keys("fusions", f, {"name", "members"})
        if not f.get("name") or not f.get("members"):
            raise ConfigError("each fusion needs a name and a non-empty member list")
        bad = [m for m in f["members"] if m not in names]
        if bad:
            raise ConfigError(f"fusion {f['name']}: unknown members {', '.join(bad)}")
        cfg.fusions.append({"name": str(f["name"]), "members": list(f["members"])})
    if not data.get("trials"):
        raise ConfigError("[data] trials is required")
    if cfg.ivector_mode:
        if not data.get("roles"):
            raise ConfigError("[data] roles is required with precomputed i-vectors")
    elif not data.get("utterances"):
        raise ConfigError("[data] needs either utterances (audio) or ivectors")
    if any(s.posteriors == "external" for s in cfg.systems) and not data.get("posteriors"):
        raise ConfigError("external posteriors need [data] posteriors")
    return cfg


def load_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return parse_config(doc, os.path.dirname(os.path.abspath(path)))
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# the whole pipeline
# ---------------------------------------------------------------------------

class _Plan:
    """Stage runner bound to a config: applies the stage filter and the rerun policy."""

    def __init__(self, cfg, only=None, workers=1, force=False):
        if only is not None and only not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {only!r}; stages are {', '.join(STAGE_ORDER)}")
        self.cfg = cfg
        self.only = only
        self.workers = workers
        self.force = force

    def active(self, stage):
        if self.only is not None:
            return stage == self.only
        return stage in self.cfg.stages

    def __call__(self, stage, fn, inputs, outputs, params):
        if not self.active(stage):
            return
        run_stage(stage, fn, inputs, outputs, params, stage_seed(self.cfg.seed, stage),
                  self.force or self.only is not None)


def _w(cfg, *parts):
    return os.path.join(cfg.work, *parts)


def _roles_file(cfg):
    """Roles TSV: given in i-vector mode, derived from the utterance list otherwise."""
    if cfg.data.get("roles"):
        return cfg.path(cfg.data["roles"])
    path = _w(cfg, "roles.tsv")
    rows = read_utterance_list(cfg.path(cfg.data["utterances"]))
    content = [(u, role) for u, _, _, _, role in rows if role]
    if not os.path.exists(path) or read_tsv(path, ncols=2) != [list(r) for r in content]:
        write_tsv(path, content)
    return path


def _acoustic(cfg, plan, system, roles):
    """Front-end through i-vector extraction; returns the i-vector path."""
    utts = cfg.path(cfg.data["utterances"])
    train_ids = {u for u, r in read_roles(roles).items() if r == "train"}
    labels = {u: (spk, part) for u, _, spk, part, _ in read_utterance_list(utts)}
    u = cfg.ubm
    feature_params = asdict(cfg.frontend)
    kinds = {"mfcc", "plp"} if system.posteriors == "two-feats" else {system.features}
    for kind in sorted(kinds):
        plan("features", lambda k=kind: extract_features(utts, _w(cfg, "features", f"{k}.ivmx"), k,
                                                          cfg.frontend, plan.workers),
             [utts], [_w(cfg, "features", f"{kind}.ivmx")], {"kind": kind, **feature_params})
        plan("vad", lambda k=kind: apply_vad(_w(cfg, "features", f"{k}.ivmx"), _w(cfg, "vad", f"{k}.ivmx"),
                                             cfg.frontend.vad_offset, cfg.frontend.vad_window),
             [_w(cfg, "features", f"{kind}.ivmx")], [_w(cfg, "vad", f"{kind}.ivmx")],
             {"offset": cfg.frontend.vad_offset, "window": cfg.frontend.vad_window})
    feats = _w(cfg, "vad", f"{system.features}.ivmx")
    ubm_params = {k: u[k] for k in ("components", "iterations", "split_iterations", "floor_scale")}
    tag = f"{system.features}-{system.posteriors}"
    if system.posteriors == "external":
        post = cfg.path(cfg.data["posteriors"])
        ubm = _w(cfg, "ubm", f"{tag}.gmm")
        plan("ubm", lambda: ubm_from_posteriors(post, feats, ubm, u["floor_scale"], train_ids),
             [post, feats, roles], [ubm], {"floor_scale": u["floor_scale"]})
    else:
        base = "plp" if system.posteriors == "two-feats" else system.features
        ubm = _w(cfg, "ubm", f"{base}.gmm")
        base_feats = _w(cfg, "vad", f"{base}.ivmx")
        plan("ubm", lambda: train_ubm(base_feats, ubm, u["components"], u["iterations"], u["split_iterations"],
                                      u["floor_scale"], stage_seed(cfg.seed, "ubm"), train_ids),
             [base_feats, roles], [ubm], ubm_params)
        if system.posteriors == "two-feats":
            plp_ubm, ubm = ubm, _w(cfg, "ubm", "mfcc-coupled.gmm")
            plan("ubm", lambda: couple_ubm(plp_ubm, base_feats, feats, ubm, u["floor_scale"], train_ids),
                 [plp_ubm, base_feats, feats, roles], [ubm], {"floor_scale": u["floor_scale"]})
    prefix = _w(cfg, "ivec", tag, "stats")
    kwargs = {}
    if system.posteriors == "external":
        kwargs = {"posteriors": cfg.path(cfg.data["posteriors"])}
    elif system.posteriors == "two-feats":
        kwargs = {"plp_ubm": _w(cfg, "ubm", "plp.gmm"), "plp_features": _w(cfg, "vad", "plp.ivmx")}
    plan("stats", lambda: compute_stats(ubm, feats, prefix, u["prune"], plan.workers, **kwargs),
         [ubm, feats] + list(kwargs.values()), stats_paths(prefix), {"prune": u["prune"], "kind": tag})
    tv = _w(cfg, "ivec", tag, "tv.bin")
    t = cfg.tv
    plan("tv", lambda: train_tv(prefix, ubm, tv, t["rank"], t["iterations"], stage_seed(cfg.seed, "tv"),
                                train_ids, bool(t["diagonal"])),
         stats_paths(prefix) + [ubm, roles], [tv], dict(t))
    out = _w(cfg, "ivec", tag, "ivectors.ivmx")
    plan("ivector", lambda: extract_ivectors(tv, prefix, out, labels),
         [tv] + stats_paths(prefix) + [utts], [out], {})
    return out


def _backend(cfg, plan, system, ivectors, roles):
    """LW, shift, PLDA, post-norm and scoring for one sub-system; returns the score path."""
    d = lambda *p: _w(cfg, "systems", system.name, *p)  # noqa: E731
    lw, iv_lw = d("lw.bin"), d("ivectors.lw.ivmx")
    plan("lw", lambda: (fit_lw(ivectors, roles, lw), apply_lw(ivectors, lw, iv_lw)),
         [ivectors, roles], [lw, iv_lw], {})
    iv_shift = d("ivectors.shift.ivmx")
    if system.shifting == "idvc":
        model = d("idvc.bin")
        max_rank = cfg.idvc.get("max_rank")
        plan("shift", lambda: (fit_idvc(iv_lw, roles, model, max_rank), apply_idvc(iv_lw, model, iv_shift)),
             [iv_lw, roles], [model, iv_shift], {"method": "idvc", "max_rank": max_rank})
    elif system.shifting == "mean":
        model = d("mean_shift.bin")
        plan("shift", lambda: mean_shift(iv_lw, roles, iv_shift, model, system.shift_enroll),
             [iv_lw, roles], [iv_shift, model], {"method": "mean", "shift_enroll": system.shift_enroll})
    else:
        plan("shift", lambda: no_shift(iv_lw, iv_shift), [iv_lw], [iv_shift], {"method": "none"})
    plda_model, pn = d("plda.bin"), d("postnorm.bin")
    it, ws = cfg.plda["iterations"], bool(cfg.plda["within_scatter"])
    plan("plda", lambda: train_plda(iv_shift, roles, plda_model, it, ws), [iv_shift, roles], [plda_model],
         {"iterations": it, "within_scatter": ws})
    rank = system.eigenvoice_rank
    plan("postnorm", lambda: postnorm(plda_model, pn, rank), [plda_model], [pn], {"eigenvoice_rank": rank})
    scores = d("scores.tsv")
    trials = cfg.path(cfg.data["trials"])
    emap = cfg.path(cfg.data.get("enroll_map"))
    plan("score", lambda: score(pn, iv_shift, trials, scores, emap),
         [pn, iv_shift, trials] + ([emap] if emap else []), [scores], {})
    return scores


def run_pipeline(cfg, only=None, workers=1, force=False):
    """Run every stage for every sub-system, then fusions and evaluation.

    Returns ``{name: MetricReport}`` for systems and fusions that were
    evaluated; the combined report is also written to ``<workdir>/report.json``.
    """
    plan = _Plan(cfg, only, workers, force)
    os.makedirs(cfg.work, exist_ok=True)
    roles = _roles_file(cfg)
    score_files = {}
    for system in cfg.systems:
        given = system.ivectors or cfg.data.get("ivectors")
        ivectors = cfg.path(given) if given else _acoustic(cfg, plan, system, roles)
        score_files[system.name] = _backend(cfg, plan, system, ivectors, roles)
    for f in cfg.fusions:
        out = _w(cfg, "fusions", f["name"], "scores.tsv")
        members = [score_files[m] for m in f["members"]]
        plan("fuse", lambda o=out, m=members: fuse(m, o), members, [out], {"members": f["members"]})
        score_files[f["name"]] = out
    reports = {}
    if plan.active("evaluate"):
        key = cfg.path(cfg.data["trials"])
        for name, path in score_files.items():
            if not os.path.exists(path):
                raise DataError(f"missing input {path}")
            try:
                reports[name] = evaluate(path, key)
            except IvpldaError as exc:
                exc.stage = "evaluate"
                raise
            log.info("[evaluate] %s: EER %.4f minC_primary %.4f", name, reports[name].eer,
                     reports[name].min_c_primary)
        with atomic_open(_w(cfg, "report.json"), "w") as fh:
            json.dump({k: v.to_dict() for k, v in reports.items()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return reports
