"""End-to-end command-line checks on a miniature pipeline.

Everything runs in-process through cli.main so coverage and tracebacks
stay usable; the tiny model is deliberately undertrained because exit
codes and file contracts do not depend on accuracy.
"""

from __future__ import annotations

import numpy as np
import pytest

import camforge as cf
from camforge import cli
from camforge.imaging import read_gray_png, write_gray_png


def run0(argv):
    code = cli.main(argv)
    assert code == 0, f"camforge {argv[0]} exited {code}"


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    run0(["train", "--out", str(root / "model.gcf"), "--seed", "3",
          "--train-n", "64", "--epochs", "1", "--val-n", "16"])
    run0(["render", "--seed", "3", "--n", "16", "--index", "0",
          "--out", str(root / "img.png")])
    run0(["render", "--seed", "3", "--n", "16", "--index", "1",
          "--stickers", "--out", str(root / "stickered.png")])
    write_gray_png(cf.SMILEY_8X8, root / "sticker.png")
    model = str(root / "model.gcf")
    run0(["attack", "--model", model, "--technique", "t1",
          "--out", str(root / "t1.gcf")])
    run0(["attack", "--model", model, "--technique", "t2",
          "--target", str(root / "img.png"), "--out", str(root / "t2.gcf")])
    run0(["attack", "--model", model, "--technique", "t3",
          "--branch-seed", "5", "--out", str(root / "t3.gcf")])
    run0(["attack", "--model", model, "--technique", "t4",
          "--sticker", str(root / "sticker.png"),
          "--out", str(root / "t4.gcf")])
    return root


def test_train_prints_validation_accuracy(tmp_path, capsys):
    run0(["train", "--out", str(tmp_path / "m.gcf"), "--seed", "1",
          "--train-n", "32", "--epochs", "1", "--val-n", "8"])
    out = capsys.readouterr().out
    assert "val_accuracy=" in out
    assert (tmp_path / "m.gcf").exists()


def test_attack_outputs_are_loadable_and_tagged(cli_env):
    for tag in ("t1", "t2", "t3", "t4"):
        model = cf.load_model(cli_env / f"{tag}.gcf")
        assert model.attack["technique"] == tag


def test_attack_t2_requires_target(cli_env):
    with pytest.raises(SystemExit) as ei:
        cli.main(["attack", "--model", str(cli_env / "model.gcf"),
                  "--technique", "t2", "--out", str(cli_env / "x.gcf")])
    assert ei.value.code == 2


def test_attack_t4_requires_sticker(cli_env):
    with pytest.raises(SystemExit) as ei:
        cli.main(["attack", "--model", str(cli_env / "model.gcf"),
                  "--technique", "t4", "--out", str(cli_env / "x.gcf")])
    assert ei.value.code == 2


def test_unknown_technique_is_a_usage_error(cli_env):
    with pytest.raises(SystemExit) as ei:
        cli.main(["attack", "--model", str(cli_env / "model.gcf"),
                  "--technique", "t9", "--out", str(cli_env / "x.gcf")])
    assert ei.value.code == 2


def test_missing_subcommand_is_a_usage_error():
    with pytest.raises(SystemExit) as ei:
        cli.main([])
    assert ei.value.code == 2


def test_explain_writes_a_heatmap(cli_env, tmp_path, capsys):
    out = tmp_path / "hm.png"
    run0(["explain", "--model", str(cli_env / "t2.gcf"),
          "--image", str(cli_env / "img.png"), "--out", str(out)])
    assert "class=" in capsys.readouterr().out
    assert read_gray_png(out).shape == (32, 32)


def test_explain_overlay_and_explicit_class(cli_env, tmp_path):
    out = tmp_path / "hm.png"
    run0(["explain", "--model", str(cli_env / "model.gcf"),
          "--image", str(cli_env / "img.png"), "--class", "2",
          "--overlay", "--out", str(out)])
    assert out.stat().st_size > 0


def test_explain_rejects_bad_class_values(cli_env, tmp_path):
    for bad in ("seven", "99"):
        with pytest.raises(SystemExit) as ei:
            cli.main(["explain", "--model", str(cli_env / "model.gcf"),
                      "--image", str(cli_env / "img.png"), "--class", bad,
                      "--out", str(tmp_path / "hm.png")])
        assert ei.value.code == 2


def test_eval_writes_the_report_csv(cli_env, tmp_path):
    report = tmp_path / "report.csv"
    run0(["eval", "--original", str(cli_env / "model.gcf"),
          "--attacked", str(cli_env / "t1.gcf"), str(cli_env / "t2.gcf"),
          str(cli_env / "t3.gcf"), str(cli_env / "t4.gcf"),
          "--seed", "3", "--val-n", "16", "--stickers",
          "--report", str(report)])
    rows = cf.EvalReport.read_csv(report).rows
    tags = [(r.model_tag, r.dataset_tag) for r in rows]
    assert tags == [("original", "val"), ("t1", "val"), ("t2", "val"),
                    ("t3", "val"), ("t4", "val"),
                    ("original", "val+stickers"), ("t4", "val+stickers")]
    assert rows[1].score_drift == 0.0
    assert rows[2].score_drift == 0.0
    assert rows[3].score_drift <= 0.01
    assert rows[4].score_drift == 0.0


def test_eval_disambiguates_duplicate_techniques(cli_env, tmp_path):
    report = tmp_path / "report.csv"
    run0(["eval", "--original", str(cli_env / "model.gcf"),
          "--attacked", str(cli_env / "t1.gcf"), str(cli_env / "t1.gcf"),
          "--seed", "3", "--val-n", "8", "--report", str(report)])
    tags = [r.model_tag for r in cf.EvalReport.read_csv(report).rows]
    assert tags == ["original", "t1", "t1+"]


def test_eval_rejects_an_unedited_model(cli_env):
    with pytest.raises(SystemExit) as ei:
        cli.main(["eval", "--original", str(cli_env / "model.gcf"),
                  "--attacked", str(cli_env / "model.gcf"),
                  "--seed", "3", "--val-n", "8"])
    assert ei.value.code == 2


def test_tampered_model_trips_the_invariant_gate(cli_env, tmp_path, capsys):
    model = cf.load_model(cli_env / "t1.gcf")
    # nudging the planted channel's constant breaks the precomputed
    # compensation, which is exactly what the gate is for
    model.conv_stack[-2].ext_bias = 100.1
    bad = tmp_path / "bad.gcf"
    cf.save_model(model, bad)
    code = cli.main(["eval", "--original", str(cli_env / "model.gcf"),
                     "--attacked", str(bad), "--seed", "3", "--val-n", "8"])
    assert code == 3
    assert "invariant violation" in capsys.readouterr().err


def test_missing_model_file_exits_1(cli_env, tmp_path, capsys):
    code = cli.main(["explain", "--model", str(tmp_path / "absent.gcf"),
                     "--image", str(cli_env / "img.png"),
                     "--out", str(tmp_path / "hm.png")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_render_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        run0(["render", "--seed", "7", "--n", "8", "--index", "3",
              "--stickers", "--out", str(out)])
    assert a.read_bytes() == b.read_bytes()


def test_render_index_out_of_range(tmp_path):
    with pytest.raises(SystemExit) as ei:
        cli.main(["render", "--seed", "7", "--n", "8", "--index", "8",
                  "--out", str(tmp_path / "x.png")])
    assert ei.value.code == 2


def test_sticker_round_trips_through_png(cli_env):
    pattern = cf.StickerPattern(
        (read_gray_png(cli_env / "sticker.png") >= 0.5).astype(np.float64))
    assert np.array_equal(pattern.bitmap, cf.SMILEY_8X8)
