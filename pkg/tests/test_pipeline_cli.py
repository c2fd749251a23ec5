import filecmp
import json
import logging
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from ivplda import pipeline as pp
from ivplda.cli import main
from ivplda.errors import ConfigError
from ivplda.ivector import load_ivectors
from ivplda.plda import PldaModel, save_plda_model

from audio_corpus import AUDIO_CONFIG, write_audio_corpus


def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def sre_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sre")
    assert main(["--seed", "5", "synth", "--kind", "sre", "--out-dir", str(d), "--speakers", "60",
                 "--eval-speakers", "12", "--test-shift", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def audio_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("audio")
    write_audio_corpus(str(d))
    (d / "cfg.toml").write_text(AUDIO_CONFIG)
    return d


def test_ivector_mode_run_rerun_and_determinism(sre_dir, capsys):
    cfg = str(sre_dir / "config.toml")
    assert main(["--config", cfg]) == 0
    out = capsys.readouterr().out
    for name in ("idvc", "mean", "none"):
        assert name in out
    report = json.loads((sre_dir / "work" / "report.json").read_text())
    assert report["idvc"]["convention"].startswith("EER by linear interpolation")
    first = _tree(sre_dir / "work")
    manifest = json.loads((sre_dir / "work" / "systems" / "idvc" / "plda.bin.manifest.json").read_text())
    assert manifest["stage"] == "plda" and manifest["inputs"] and manifest["outputs"]
    # up-to-date stages are skipped, so nothing changes
    mtime = os.path.getmtime(sre_dir / "work" / "systems" / "idvc" / "plda.bin")
    assert main(["--config", cfg]) == 0
    assert os.path.getmtime(sre_dir / "work" / "systems" / "idvc" / "plda.bin") == mtime
    # a from-scratch rerun is byte-identical
    shutil.rmtree(sre_dir / "work")
    assert main(["--config", cfg, "run", "--force"]) == 0
    assert _tree(sre_dir / "work") == first


def test_stage_filter_and_missing_input(sre_dir, tmp_path, capsys):
    shutil.copytree(sre_dir, tmp_path / "c", ignore=shutil.ignore_patterns("work"))
    cfg = str(tmp_path / "c" / "config.toml")
    # the shift stage alone cannot run before lw has produced its output
    assert main(["--config", cfg, "--stage", "shift"]) == 2
    assert "missing input" in capsys.readouterr().err
    assert main(["--config", cfg, "--stage", "lw"]) == 0
    assert main(["--config", cfg, "--stage", "shift"]) == 0
    assert main(["--config", cfg, "--stage", "nonsense"]) == 1


def test_pipeline_order_invariant(sre_dir):
    order = pp.STAGE_ORDER
    assert order.index("lw") < order.index("shift") < order.index("plda") < order.index("postnorm") \
        < order.index("score") < order.index("fuse") < order.index("evaluate")
    assert order[:6] == ("features", "vad", "ubm", "stats", "tv", "ivector")
    # the PLDA input (after the shift) is length-normalised again
    if not (sre_dir / "work").exists():
        assert main(["--config", str(sre_dir / "config.toml")]) == 0
    for system in ("idvc", "mean", "none"):
        ivs = load_ivectors(sre_dir / "work" / "systems" / system / "ivectors.shift.ivmx")
        np.testing.assert_allclose(np.linalg.norm(ivs.vectors, axis=1), 1.0, atol=1e-5)


def test_config_validation(tmp_path):
    base = {"schema_version": 1, "data": {"ivectors": "x", "roles": "r", "trials": "t"},
            "systems": [{"name": "a"}]}
    pp.parse_config(base)
    for bad in ({**base, "schema_version": 2},
                {**base, "stages": ["lw", "features"]},
                {**base, "stages": ["lw", "bogus"]},
                {**base, "systems": [{"name": "a", "shifting": "covariance"}]},
                {**base, "systems": [{"name": "a"}, {"name": "a"}]},
                {**base, "fusions": [{"name": "F", "members": ["zz"]}]},
                {**base, "tv": {"rnak": 3}},
                {**base, "data": {"trials": "t"}}):
        with pytest.raises(ConfigError):
            pp.parse_config(bad)
    (tmp_path / "bad.toml").write_text("schema_version = [")
    assert main(["--config", str(tmp_path / "bad.toml")]) == 1
    assert main(["--config", str(tmp_path / "absent.toml")]) == 1


def test_usage_exit_codes(capsys):
    assert main([]) == 1
    assert main(["train-ubm", "--features", "x"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["--workers", "0", "--config", "x.toml"]) == 1
    capsys.readouterr()


def test_data_and_numerical_exit_codes(tmp_path, capsys):
    (tmp_path / "junk.ivmx").write_bytes(b"JUNKJUNKJUNKJUNK")
    (tmp_path / "roles.tsv").write_text("a\ttrain\n")
    assert main(["fit-lw", "--ivectors", str(tmp_path / "junk.ivmx"), "--roles", str(tmp_path / "roles.tsv"),
                 "--out", str(tmp_path / "lw.bin")]) == 2
    assert main(["fit-lw", "--ivectors", str(tmp_path / "none.ivmx"), "--roles", str(tmp_path / "roles.tsv"),
                 "--out", str(tmp_path / "lw.bin")]) == 2
    save_plda_model(tmp_path / "bad.plda", PldaModel(np.zeros(2), np.eye(2), -np.eye(2)))
    assert main(["postnorm", "--plda", str(tmp_path / "bad.plda"), "--out", str(tmp_path / "pn.bin")]) == 3
    err = capsys.readouterr().err
    assert "not positive definite" in err


def _fusion_config(n_systems, fusions):
    shifts = ["idvc", "mean", "none"]
    lines = ["schema_version = 1", "seed = 3", 'workdir = "work"', "[data]", 'ivectors = "ivectors.ivmx"',
             'roles = "roles.tsv"', 'trials = "trials.tsv"', 'enroll_map = "enroll.tsv"', "[plda]",
             "iterations = 3"]
    for i in range(n_systems):
        lines += ["[[systems]]", f'name = "s{i + 1}"', f'shifting = "{shifts[i % 3]}"',
                  f"eigenvoice_rank = {10 - i % 4}"]
    for name, members in fusions:
        lines += ["[[fusions]]", f'name = "{name}"', "members = [" + ", ".join(f'"{m}"' for m in members) + "]"]
    return "\n".join(lines) + "\n"


def test_four_and_eight_member_fusions(sre_dir, tmp_path, capsys):
    shutil.copytree(sre_dir, tmp_path / "c", ignore=shutil.ignore_patterns("work", "*.toml"))
    text = _fusion_config(8, [("A", [f"s{i}" for i in range(1, 5)]), ("B", [f"s{i}" for i in range(1, 9)])])
    (tmp_path / "c" / "fusion.toml").write_text(text)
    assert main(["--config", str(tmp_path / "c" / "fusion.toml")]) == 0
    out = capsys.readouterr().out
    assert "A\tEER" in out and "B\tEER" in out
    report = json.loads((tmp_path / "c" / "work" / "report.json").read_text())
    assert set(report) == {f"s{i}" for i in range(1, 9)} | {"A", "B"}


def test_single_stage_commands_chain(sre_dir, tmp_path, capsys):
    iv, roles = str(sre_dir / "ivectors.ivmx"), str(sre_dir / "roles.tsv")
    t = lambda name: str(tmp_path / name)  # noqa: E731
    steps = [
        ["fit-lw", "--ivectors", iv, "--roles", roles, "--out", t("lw.bin")],
        ["apply-lw", "--ivectors", iv, "--lw", t("lw.bin"), "--out", t("iv.lw.ivmx")],
        ["fit-idvc", "--ivectors", t("iv.lw.ivmx"), "--roles", roles, "--out", t("idvc.bin")],
        ["apply-idvc", "--ivectors", t("iv.lw.ivmx"), "--idvc", t("idvc.bin"), "--out", t("iv.idvc.ivmx")],
        ["mean-shift", "--ivectors", t("iv.lw.ivmx"), "--roles", roles, "--out", t("iv.mean.ivmx"),
         "--model-out", t("mean.bin")],
        ["train-plda", "--ivectors", t("iv.idvc.ivmx"), "--roles", roles, "--out", t("plda.bin"),
         "--iterations", "3"],
        ["postnorm", "--plda", t("plda.bin"), "--out", t("pn.bin"), "--eigenvoice-rank", "5"],
        ["score", "--postnorm", t("pn.bin"), "--ivectors", t("iv.idvc.ivmx"), "--trials",
         str(sre_dir / "trials.tsv"), "--enroll-map", str(sre_dir / "enroll.tsv"), "--out", t("s1.tsv")],
        ["fuse", "--scores", t("s1.tsv"), t("s1.tsv"), "--out", t("fused.tsv")],
        ["evaluate", "--scores", t("fused.tsv"), "--key", str(sre_dir / "trials.tsv"), "--out", t("rep.json")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    out = capsys.readouterr().out
    assert out.startswith("EER\t")
    assert filecmp.cmp(t("s1.tsv"), t("fused.tsv"), shallow=False)
    assert json.loads(open(t("rep.json")).read())["num_target"] > 0


def test_synth_frames_and_acoustic_commands(tmp_path):
    d = str(tmp_path)
    assert main(["synth", "--kind", "frames", "--out-dir", d, "--dim", "3", "--components", "4",
                 "--utts", "30", "--frames", "300"]) == 0
    frames = os.path.join(d, "frames.ivmx")
    assert main(["train-ubm", "--features", frames, "--components", "4", "--out", d + "/ubm.gmm",
                 "--iterations", "3"]) == 0
    assert main(["stats", "--ubm", d + "/ubm.gmm", "--features", frames, "--out", d + "/st"]) == 0
    assert main(["train-tv", "--stats", d + "/st", "--ubm", d + "/ubm.gmm", "--rank", "3", "--out",
                 d + "/tv.bin", "--iterations", "2", "--diagonal"]) == 0
    assert main(["extract-ivec", "--tv", d + "/tv.bin", "--stats", d + "/st", "--out", d + "/iv.ivmx"]) == 0
    ivs = load_ivectors(d + "/iv.ivmx")
    assert ivs.vectors.shape == (30, 3)
    assert main(["synth", "--kind", "plda", "--out-dir", d + "/p", "--speakers", "5", "--sessions", "2"]) == 0
    assert len(load_ivectors(d + "/p/ivectors.ivmx")) == 10


@pytest.mark.slow
def test_audio_pipeline_worker_independent(audio_dir, tmp_path, caplog):
    shutil.copytree(audio_dir, tmp_path / "w1", ignore=shutil.ignore_patterns("work"))
    shutil.copytree(audio_dir, tmp_path / "w2", ignore=shutil.ignore_patterns("work"))
    caplog.set_level(logging.INFO, logger="ivplda.timing")
    assert main(["-vv", "--config", str(tmp_path / "w1" / "cfg.toml"), "--workers", "1"]) == 0
    assert any("rss" in r.getMessage().lower() for r in caplog.records if r.name == "ivplda.timing")
    assert main(["--config", str(tmp_path / "w2" / "cfg.toml"), "--workers", "2"]) == 0
    one, two = _tree(tmp_path / "w1" / "work"), _tree(tmp_path / "w2" / "work")
    assert one.keys() == two.keys()
    assert all(one[k] == two[k] for k in one)
    report = json.loads(one["report.json"])
    assert set(report) == {"mfcc", "plp", "two", "A"}


def test_console_script_and_version():
    out = subprocess.run([sys.executable, "-m", "ivplda.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "ivplda" in out.stdout


def test_means_only_plda_switch(sre_dir, tmp_path):
    from ivplda.plda import load_plda_model
    iv, roles = str(sre_dir / "ivectors.ivmx"), str(sre_dir / "roles.tsv")
    base = ["train-plda", "--ivectors", iv, "--roles", roles, "--iterations", "3"]
    assert main(base + ["--out", str(tmp_path / "full.bin")]) == 0
    assert main(base + ["--out", str(tmp_path / "means.bin"), "--means-only"]) == 0
    full, means = load_plda_model(tmp_path / "full.bin"), load_plda_model(tmp_path / "means.bin")
    # without the session scatter W is fitted to speaker means only and comes out much smaller
    assert np.trace(means.W) < 0.5 * np.trace(full.W)
    doc = {"schema_version": 1, "data": {"ivectors": "x", "roles": "r", "trials": "t"},
           "systems": [{"name": "a"}], "plda": {"within_scatter": False}}
    assert pp.parse_config(doc).plda == {"iterations": 10, "within_scatter": False}
