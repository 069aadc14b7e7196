from pathlib import Path

import numpy as np
import pytest

from sacn import data as D
from sacn.cli import main

DATA = Path(__file__).parent / "data"
FAST = ["--set", "model.feature_channels=8", "--set", "model.primary_types=2",
        "--set", "model.decoder_hidden1=16", "--set", "model.decoder_hidden2=16",
        "--set", "data.n_samples=100", "--set", "train.batch_size=16"]


def run(*argv):
    return main([str(a) for a in argv])


def test_train_twice_gives_identical_artifacts(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("train", "--preset", "synthetic-simple", "--seed", 7, "--no-timing",
                   "--set", "train.max_steps=12", "--set", "train.epochs=2", *FAST,
                   "--out", tmp_path / name) == 0
    for f in ("metrics.csv", "resolved-config.txt", "checkpoint.sacn"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    assert "seed = 7" in (tmp_path / "a" / "resolved-config.txt").read_text()
    assert "test accuracy" in capsys.readouterr().out


def test_train_rejects_unknown_key_before_work(tmp_path, capsys):
    assert run("train", "--set", "train.speed=3", "--out", tmp_path / "x") == 1
    assert "unknown config key" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_config_file_and_missing_config(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.max_steps = 2\nmodel.mode = baseline\n")
    assert run("train", "--config", cfg, *FAST, "--out", tmp_path / "o", "--no-timing") == 0
    assert "model.mode = baseline" in (tmp_path / "o" / "resolved-config.txt").read_text()
    assert run("train", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "p") == 2


def test_eval_on_missing_checkpoint_names_path(tmp_path, capsys):
    missing = tmp_path / "gone.sacn"
    assert run("eval", "--checkpoint", missing) == 2
    assert str(missing) in capsys.readouterr().err


def test_eval_golden_checkpoint(tmp_path, capsys):
    g = DATA / "golden"
    assert run("eval", "--checkpoint", g / "checkpoint.sacn", "--data", g / "dataset",
               "--out", tmp_path) == 0
    expected = float((g / "test-accuracy.txt").read_text())
    assert f"accuracy {expected:.4f}" in capsys.readouterr().out
    assert (tmp_path / "eval-metrics.csv").exists()
    assert (tmp_path / "resolved-config.txt").exists()


def test_gradcheck_default_passes(tmp_path, capsys):
    assert run("gradcheck", "--routing-iters", 1, "--routing-iters", 3, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    assert out.count("routing iterations") == 2 and "passed" in out
    assert (tmp_path / "resolved-config.txt").exists()


def test_gradcheck_threshold_failure_exits_three(capsys):
    assert run("gradcheck", "--threshold", 0) == 3


def test_ablate_min_gap(tmp_path, capsys):
    base = ["ablate", "--preset", "synthetic-simple", "--k", 1, *FAST,
            "--set", "train.max_steps=3"]
    assert run(*base, "--out", tmp_path) == 0
    assert "gap" in (tmp_path / "ablation.txt").read_text()
    assert run(*base, "--min-gap", 2.0) == 3


def test_export_attention_maps(tmp_path, capsys):
    g = DATA / "golden"
    assert run("export-attn", "--checkpoint", g / "checkpoint.sacn", "--image",
               g / "query.pgm", "--location", "5,7", "--location", 3, "--out", tmp_path) == 0
    assert (tmp_path / "attn-r5-c7.pgm").read_bytes() == (g / "attn" / "attn-r5-c7.pgm").read_bytes()
    assert (tmp_path / "attn-r0-c3.pgm").exists()
    assert run("export-attn", "--checkpoint", g / "checkpoint.sacn", "--image",
               g / "query.pgm", "--location", "12,0", "--out", tmp_path) == 1
    assert run("export-attn", "--checkpoint", g / "checkpoint.sacn", "--image",
               g / "query.pgm", "--location", "x", "--out", tmp_path) == 1


def test_export_attention_uniform_map_is_flat(tmp_path, capsys):
    from sacn.checkpoint import capture
    from sacn.config import preset
    from sacn.model import SacnModel

    model = SacnModel(preset("synthetic-simple"))
    model.attention.w_f.data[:] = 0  # all scores zero, so every beta column is uniform
    capture(model).save(tmp_path / "flat.sacn")
    D.write_pgm(tmp_path / "img.pgm", np.random.default_rng(0).random((16, 16)))
    assert run("export-attn", "--checkpoint", tmp_path / "flat.sacn", "--image",
               tmp_path / "img.pgm", "--location", 0, "--out", tmp_path / "maps") == 0
    np.testing.assert_array_equal(D.read_pgm(tmp_path / "maps" / "attn-r0-c0.pgm"), 0)
    baseline = SacnModel(preset("synthetic-simple", model__mode="baseline"))
    capture(baseline).save(tmp_path / "base.sacn")
    assert run("export-attn", "--checkpoint", tmp_path / "base.sacn", "--image",
               tmp_path / "img.pgm", "--location", 0, "--out", tmp_path / "maps") == 1


def test_data_synth_gen_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run("data", "synth-gen", "--kind", "complex", "--n", 200, "--seed", 1,
                   "--out", tmp_path / name) == 0
    for f in ("images.idx", "labels.idx", "manifest.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_data_extract_patches_on_fixture(tmp_path, capsys):
    assert run("data", "extract-patches", "--src", DATA / "annotated", "--seed", 2,
               "--out", tmp_path / "p") == 0
    assert "600 patches from 10 images" in capsys.readouterr().out
    rows = D.read_manifest(tmp_path / "p" / "manifest.tsv")
    assert len(rows) == 600 and not D.leaking_sources(rows)
    assert run("data", "inspect", tmp_path / "p") == 0
    out = capsys.readouterr().out
    assert "480 samples ( 80.0%) from 8 sources" in out
    assert "sources in more than one split: 0" in out


def test_data_split_and_inspect(tmp_path, capsys):
    run("data", "synth-annotated", "--n", 10, "--out", tmp_path / "imgs")
    run("data", "extract-patches", "--src", tmp_path / "imgs", "--per-region", 2,
        "--out", tmp_path / "p")
    assert run("data", "split", "--manifest", tmp_path / "p" / "manifest.tsv", "--seed", 9,
               "--out", tmp_path / "m.tsv") == 0
    rows = D.read_manifest(tmp_path / "m.tsv")
    assert D.split_counts(rows)["train"]["sources"] == 8
    assert run("data", "inspect", tmp_path / "p" / "images.idx") == 0
    assert "(40, 16, 16)" in capsys.readouterr().out
    assert run("data", "inspect", tmp_path / "none") == 2


def test_train_from_idx_files(tmp_path, capsys):
    run("data", "synth-gen", "--kind", "simple", "--n", 60, "--out", tmp_path / "d")
    assert run("train", "--images", tmp_path / "d" / "images.idx", "--labels",
               tmp_path / "d" / "labels.idx", *FAST, "--set", "train.max_steps=2",
               "--out", tmp_path / "o") == 0
    assert run("train", "--images", tmp_path / "d" / "images.idx", "--out", tmp_path / "o") == 1
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x08\x03\x00")
    assert run("train", "--images", bad, "--labels", tmp_path / "d" / "labels.idx",
               "--out", tmp_path / "o") == 2
