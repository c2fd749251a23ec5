"""Command-line driver: one subcommand per pipeline stage, plus ``run``.

    ivplda [--config FILE] [--stage NAME] [--workers N] [--seed S] [-v] <command> [options]

With ``--config`` and no command the whole configured pipeline runs (or only
``--stage``).  Exit codes: 0 success, 1 usage/config, 2 data, 3 numerical.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import frontend as fe
from . import gmm
from . import pipeline as pp
from . import synth
from .errors import ConfigError, IvpldaError
from .io import atomic_open, write_archive, write_tsv
from .ivector import save_ivectors

log = logging.getLogger("ivplda")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors raised as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _add(sub, name, help_text):
    return sub.add_parser(name, help=help_text, description=help_text)


def build_parser():
    p = _Parser(prog="ivplda", description="i-vector/PLDA speaker verification pipeline")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="pipeline config (TOML); without a command, runs the pipeline")
    p.add_argument("--stage", help=f"run only this stage of the configured pipeline ({', '.join(pp.STAGE_ORDER)})")
    p.add_argument("--workers", type=int, default=1, help="parallel workers for per-utterance stages")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for stage logs, -vv for per-utterance timing")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = _add(sub, "run", "run the configured pipeline (same as --config without a command)")
    s.add_argument("--force", action="store_true", help="rerun stages even when their manifests are current")

    s = _add(sub, "extract-features", "MFCC or PLP features with deltas and sliding CMN")
    s.add_argument("--list", required=True, help="utterance list TSV: utt_id, wav, speaker, partition, role")
    s.add_argument("--kind", choices=pp.FEATURE_KINDS, default="mfcc")
    s.add_argument("--out", required=True, help="feature archive (.ivmx)")

    s = _add(sub, "vad", "energy VAD; keeps voiced frames only")
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--offset", type=float, default=-0.5, help="threshold = mean + offset * std of log-energy")
    s.add_argument("--window", type=int, default=11, help="majority smoothing window (frames)")

    s = _add(sub, "train-ubm", "full-covariance GMM by binary splitting and EM")
    s.add_argument("--features", required=True)
    s.add_argument("--components", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=10)
    s.add_argument("--split-iterations", type=int, default=2)
    s.add_argument("--floor-scale", type=float, default=1e-4)
    s.add_argument("--roles", help="roles TSV; train on role 'train' only")

    s = _add(sub, "couple-ubm", "MFCC UBM from PLP-UBM responsibilities (two-feats)")
    s.add_argument("--plp-ubm", required=True)
    s.add_argument("--plp-features", required=True)
    s.add_argument("--mfcc-features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--floor-scale", type=float, default=1e-4)
    s.add_argument("--roles")

    s = _add(sub, "stats", "zeroth/first-order Baum-Welch statistics")
    s.add_argument("--ubm", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True, help="output prefix")
    s.add_argument("--prune", type=float, default=gmm.DEFAULT_PRUNE)
    s.add_argument("--plp-ubm", help="two-feats: PLP UBM (with --plp-features); --ubm is the coupled MFCC UBM")
    s.add_argument("--plp-features")
    s.add_argument("--posteriors", help="external frame posteriors archive aligned with --features")

    s = _add(sub, "train-tv", "total-variability matrix by EM")
    s.add_argument("--stats", required=True, help="statistics prefix")
    s.add_argument("--ubm", required=True)
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=5)
    s.add_argument("--diagonal", action="store_true", help="use only the UBM covariance diagonals")
    s.add_argument("--roles")

    s = _add(sub, "extract-ivec", "i-vector posterior means")
    s.add_argument("--tv", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--labels", help="utterance list supplying speaker and partition columns")

    for name, help_text in (("fit-lw", "within-class whitening fitted on role 'train'"),
                            ("fit-idvc", "IDVC basis from train partitions and the dev set"),
                            ("train-plda", "PLDA (B, W) by EM on role 'train'")):
        s = _add(sub, name, help_text)
        s.add_argument("--ivectors", required=True)
        s.add_argument("--roles", required=True)
        s.add_argument("--out", required=True)
    sub.choices["fit-idvc"].add_argument("--max-rank", type=int)
    sub.choices["train-plda"].add_argument("--iterations", type=int, default=10)
    sub.choices["train-plda"].add_argument(
        "--means-only", action="store_true",
        help="re-estimate W from speaker means alone, leaving out the session scatter around them")

    s = _add(sub, "apply-lw", "whiten and length-normalise")
    s.add_argument("--ivectors", required=True)
    s.add_argument("--lw", required=True)
    s.add_argument("--out", required=True)

    s = _add(sub, "apply-idvc", "remove the IDVC subspace and length-normalise")
    s.add_argument("--ivectors", required=True)
    s.add_argument("--idvc", required=True)
    s.add_argument("--out", required=True)

    s = _add(sub, "mean-shift", "subtract the dev mean from test vectors and length-normalise")
    s.add_argument("--ivectors", required=True)
    s.add_argument("--roles", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--model-out", help="also save the fitted shift vector")
    s.add_argument("--enroll-too", action="store_true", help="shift enrollment vectors as well")

    s = _add(sub, "postnorm", "diagonalising post-normalisation of a PLDA model")
    s.add_argument("--plda", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--eigenvoice-rank", type=int)

    s = _add(sub, "score", "PLDA log-likelihood ratios for a trial list")
    s.add_argument("--postnorm", required=True)
    s.add_argument("--ivectors", required=True, help="vectors after the shift stage")
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--enroll-map", help="model_id, utt_id TSV; default: each utterance is a model")

    s = _add(sub, "fuse", "mean of scores over sub-systems")
    s.add_argument("--scores", nargs="+", required=True)
    s.add_argument("--out", required=True)

    s = _add(sub, "evaluate", "EER and minC_primary, pooled and per partition")
    s.add_argument("--scores", required=True)
    s.add_argument("--key", required=True, help="trial key TSV: enroll_id, test_id, label, partition")
    s.add_argument("--out", help="write the report as JSON")

    s = _add(sub, "synth", "write a synthetic corpus")
    s.add_argument("--kind", choices=("sre", "plda", "frames"), default="sre")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--dim", type=int, default=10)
    s.add_argument("--b-diag", type=float, default=4.0, help="between-speaker variance per dimension")
    s.add_argument("--w-diag", type=float, default=1.0, help="within-speaker variance per dimension")
    s.add_argument("--speakers", type=int, default=300, help="training speakers (sre) or speakers (plda)")
    s.add_argument("--sessions", type=int, default=8)
    s.add_argument("--eval-speakers", type=int, default=60)
    s.add_argument("--test-shift", type=float, default=0.0,
                   help="sre: offset along the first axis, +value for partition f and -value for m, "
                        "added to test and dev sessions")
    s.add_argument("--components", type=int, default=8, help="frames: GMM components")
    s.add_argument("--frames", type=int, default=2000, help="frames: frames per utterance")
    s.add_argument("--utts", type=int, default=10, help="frames: utterances")
    return p


def _keep(roles):
    if not roles:
        return None
    return {u for u, r in pp.read_roles(roles).items() if r == "train"}


def _labels(path):
    if not path:
        return None
    return {u: (spk, part) for u, _, spk, part, _ in pp.read_utterance_list(path)}


def _synth(a, seed):
    os.makedirs(a.out_dir, exist_ok=True)
    if a.kind == "sre":
        shift = None
        if a.test_shift:
            u = np.zeros(a.dim)
            u[0] = a.test_shift
            shift = {"f": u, "m": -u}
        corpus = synth.gen_sre_corpus(seed, a.dim, a.speakers, a.sessions, a.eval_speakers,
                                      b_diag=a.b_diag, w_diag=a.w_diag, test_shift=shift)
        outputs = synth.write_sre_corpus(corpus, a.out_dir)
        cfg = os.path.join(a.out_dir, "config.toml")
        with atomic_open(cfg, "w") as fh:
            fh.write(synth.demo_config(seed))
        return outputs + [cfg]
    if a.kind == "plda":
        ivs = synth.gen_plda_vectors(synth.SynthSpec(seed, a.speakers, a.sessions, a.dim, a.b_diag, a.w_diag))
        path = os.path.join(a.out_dir, "ivectors.ivmx")
        save_ivectors(path, ivs)
        write_tsv(os.path.join(a.out_dir, "roles.tsv"), [(u, "train") for u in ivs.utt_ids])
        return [path, path + ".tsv", os.path.join(a.out_dir, "roles.tsv")]
    model = synth.random_gmm(a.components, a.dim, seed)
    frames, _ = synth.gen_gmm_frames(model, a.frames * a.utts, seed)
    path = os.path.join(a.out_dir, "frames.ivmx")
    write_archive(path, [(f"utt{i:05d}", frames[i * a.frames:(i + 1) * a.frames]) for i in range(a.utts)])
    gmm.save_gmm(os.path.join(a.out_dir, "true.gmm"), model)
    return [path, path + ".idx.tsv", os.path.join(a.out_dir, "true.gmm")]


def _stage_call(a, seed):
    """(stage name, callable, inputs, outputs, params) for a single-stage subcommand."""
    c = a.command
    if c == "extract-features":
        return ("features", lambda: pp.extract_features(a.list, a.out, a.kind, fe.FrontendConfig(), a.workers),
                [a.list], [a.out], {"kind": a.kind})
    if c == "vad":
        return ("vad", lambda: pp.apply_vad(a.features, a.out, a.offset, a.window),
                [a.features], [a.out], {"offset": a.offset, "window": a.window})
    if c == "train-ubm":
        params = {"components": a.components, "iterations": a.iterations,
                  "split_iterations": a.split_iterations, "floor_scale": a.floor_scale}
        return ("ubm", lambda: pp.train_ubm(a.features, a.out, a.components, a.iterations, a.split_iterations,
                                            a.floor_scale, seed, _keep(a.roles)),
                [a.features] + ([a.roles] if a.roles else []), [a.out], params)
    if c == "couple-ubm":
        return ("ubm", lambda: pp.couple_ubm(a.plp_ubm, a.plp_features, a.mfcc_features, a.out,
                                             a.floor_scale, _keep(a.roles)),
                [a.plp_ubm, a.plp_features, a.mfcc_features] + ([a.roles] if a.roles else []), [a.out],
                {"floor_scale": a.floor_scale})
    if c == "stats":
        if (a.plp_ubm is None) != (a.plp_features is None):
            raise ConfigError("--plp-ubm and --plp-features go together")
        if a.plp_ubm and a.posteriors:
            raise ConfigError("choose either two-feats (--plp-ubm) or --posteriors")
        extra = [x for x in (a.plp_ubm, a.plp_features, a.posteriors) if x]
        return ("stats", lambda: pp.compute_stats(a.ubm, a.features, a.out, a.prune, a.workers,
                                                  a.plp_ubm, a.plp_features, a.posteriors),
                [a.ubm, a.features] + extra, pp.stats_paths(a.out), {"prune": a.prune})
    if c == "train-tv":
        return ("tv", lambda: pp.train_tv(a.stats, a.ubm, a.out, a.rank, a.iterations, seed, _keep(a.roles),
                                          a.diagonal),
                pp.stats_paths(a.stats) + [a.ubm] + ([a.roles] if a.roles else []), [a.out],
                {"rank": a.rank, "iterations": a.iterations, "diagonal": a.diagonal})
    if c == "extract-ivec":
        return ("ivector", lambda: pp.extract_ivectors(a.tv, a.stats, a.out, _labels(a.labels)),
                [a.tv] + pp.stats_paths(a.stats) + ([a.labels] if a.labels else []), [a.out], {})
    if c == "fit-lw":
        return ("lw", lambda: pp.fit_lw(a.ivectors, a.roles, a.out), [a.ivectors, a.roles], [a.out], {})
    if c == "apply-lw":
        return ("lw", lambda: pp.apply_lw(a.ivectors, a.lw, a.out), [a.ivectors, a.lw], [a.out], {})
    if c == "fit-idvc":
        return ("shift", lambda: pp.fit_idvc(a.ivectors, a.roles, a.out, a.max_rank),
                [a.ivectors, a.roles], [a.out], {"max_rank": a.max_rank})
    if c == "apply-idvc":
        return ("shift", lambda: pp.apply_idvc(a.ivectors, a.idvc, a.out), [a.ivectors, a.idvc], [a.out], {})
    if c == "mean-shift":
        return ("shift", lambda: pp.mean_shift(a.ivectors, a.roles, a.out, a.model_out, a.enroll_too),
                [a.ivectors, a.roles], [a.out] + ([a.model_out] if a.model_out else []),
                {"enroll_too": a.enroll_too})
    if c == "train-plda":
        return ("plda", lambda: pp.train_plda(a.ivectors, a.roles, a.out, a.iterations, not a.means_only),
                [a.ivectors, a.roles], [a.out], {"iterations": a.iterations, "within_scatter": not a.means_only})
    if c == "postnorm":
        return ("postnorm", lambda: pp.postnorm(a.plda, a.out, a.eigenvoice_rank), [a.plda], [a.out],
                {"eigenvoice_rank": a.eigenvoice_rank})
    if c == "score":
        return ("score", lambda: pp.score(a.postnorm, a.ivectors, a.trials, a.out, a.enroll_map),
                [a.postnorm, a.ivectors, a.trials] + ([a.enroll_map] if a.enroll_map else []), [a.out], {})
    if c == "fuse":
        return ("fuse", lambda: pp.fuse(a.scores, a.out), a.scores, [a.out], {})
    raise ConfigError(f"unknown command {c!r}")


def _print_report(rep, stream=None):
    stream = stream or sys.stdout
    print(f"EER\t{rep.eer:.6f}", file=stream)
    print(f"minC_primary\t{rep.min_c_primary:.6f}", file=stream)
    for key, row in sorted(rep.partitions.items()):
        print(f"{key}\tEER {row['eer']:.6f}\tminC_primary {row['min_c_primary']:.6f}", file=stream)


def _dispatch(a):
    seed = 0 if a.seed is None else a.seed
    if a.workers < 1:
        raise ConfigError("--workers must be >= 1")
    if a.command in (None, "run"):
        if not a.config:
            raise ConfigError("give a command, or --config to run the pipeline")
        cfg = pp.load_config(a.config)
        if a.seed is not None:
            cfg.seed = a.seed
        reports = pp.run_pipeline(cfg, a.stage, a.workers, getattr(a, "force", False))
        for name, rep in reports.items():
            print(f"{name}\tEER {rep.eer:.6f}\tminC_primary {rep.min_c_primary:.6f}")
        return
    if a.stage is not None:
        raise ConfigError("--stage applies to the configured pipeline only")
    if a.command == "evaluate":
        try:
            rep = pp.evaluate(a.scores, a.key, a.out)
        except IvpldaError as exc:
            exc.stage = "evaluate"
            raise
        _print_report(rep)
        return
    if a.command == "synth":
        outputs = []
        pp.run_stage("synth", lambda: outputs.extend(_synth(a, seed)), [],
                     [os.path.join(a.out_dir, {"sre": "ivectors.ivmx", "plda": "ivectors.ivmx",
                                               "frames": "frames.ivmx"}[a.kind])],
                     {k: v for k, v in vars(a).items() if k not in ("verbose", "workers", "config", "stage")},
                     seed)
        for path in outputs:
            print(path)
        return
    stage, fn, inputs, outputs, params = _stage_call(a, seed)
    pp.run_stage(stage, fn, inputs, outputs, params, seed)


def main(argv=None):
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return ConfigError.exit_code
    level = logging.WARNING if a.verbose == 0 else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("ivplda.timing").setLevel(logging.INFO if a.verbose >= 2 else logging.WARNING)
    try:
        _dispatch(a)
    except IvpldaError as exc:
        where = getattr(exc, "stage", None)
        prefix = f"stage {where}: " if where else ""
        print(f"error: {prefix}{exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
