"""End-to-end CLI: pipeline at tiny scale, exit codes, config echo."""

import os

import numpy as np
import pytest

from irisft.cli import echo_to_argv, main
from irisft.data import DatasetManifest
from irisft.errors import MalformedCsv
from irisft.evaluate import EvalReport
from irisft.model import load_checkpoint
from irisft.plotting import plot_loss_curves, read_loss_csv


def _swap_out(argv, new_out):
    argv = list(argv)
    argv[argv.index("--out") + 1] = str(new_out)
    return argv


SYNTH = ["synth", "--count", "8", "--image-size", "32",
         "--images-per-identity", "2", "--seed", "4"]
TRAIN = ["train", "--loss", "focal", "--lr", "1e-3", "--epochs", "2",
         "--batch-size", "4", "--input-size", "32", "--seed", "0"]


def test_full_pipeline_at_tiny_scale(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(SYNTH + ["--out", str(data)]) == 0
    assert (data / "manifest.tsv").exists()
    assert "8 synthetic samples" in capsys.readouterr().out

    run = tmp_path / "run"
    assert main(TRAIN + ["--manifest", str(data / "manifest.tsv"),
                         "--out", str(run)]) == 0
    out = capsys.readouterr().out
    assert "checkpoint:" in out and "final epoch mean loss" in out
    ckpt = run / "checkpoint_final.npz"
    assert ckpt.exists()

    report = tmp_path / "report.json"
    pr = tmp_path / "pr.csv"
    assert main(["eval", "--manifest", str(data / "manifest.tsv"),
                 "--checkpoint", str(ckpt), "--report", str(report),
                 "--pr-csv", str(pr)]) == 0
    assert "mean IoU" in capsys.readouterr().out
    loaded = EvalReport.load(report)
    assert loaded.per_image
    assert pr.exists()

    overlays = tmp_path / "overlays"
    assert main(["overlay", "--manifest", str(data / "manifest.tsv"),
                 "--checkpoint", str(ckpt), "--count", "1",
                 "--out", str(overlays)]) == 0
    pngs = [n for n in os.listdir(overlays) if n.endswith(".png")]
    assert len(pngs) == 1

    figures = tmp_path / "figures"
    assert main(["plot", "--loss-csv", str(run / "train_log.csv"),
                 "--pr-csv", str(pr), "--out", str(figures)]) == 0
    assert (figures / "loss_curves.png").stat().st_size > 0
    assert (figures / "pr_curves.png").stat().st_size > 0


def test_config_echo_reproduces_synth_bit_for_bit(tmp_path):
    a = tmp_path / "a"
    assert main(SYNTH + ["--out", str(a)]) == 0
    argv = echo_to_argv(a / "config_echo.txt")
    assert argv[0] == "synth"
    b = tmp_path / "b"
    assert main(_swap_out(argv, b)) == 0
    ma, mb = DatasetManifest.load(a / "manifest.tsv"), \
        DatasetManifest.load(b / "manifest.tsv")
    assert [os.path.basename(r.image_path) for r in ma.records] == \
        [os.path.basename(r.image_path) for r in mb.records]
    for ra, rb in zip(ma.records, mb.records):
        assert open(ra.image_path, "rb").read() == \
            open(rb.image_path, "rb").read()


def test_config_echo_reproduces_training(tmp_path):
    data = tmp_path / "data"
    assert main(SYNTH + ["--out", str(data)]) == 0
    r1 = tmp_path / "r1"
    assert main(TRAIN + ["--manifest", str(data / "manifest.tsv"),
                         "--out", str(r1)]) == 0
    argv = _swap_out(echo_to_argv(r1 / "config_echo.txt"), tmp_path / "r2")
    assert main(argv) == 0
    m1, _ = load_checkpoint(r1 / "checkpoint_final.npz")
    m2, _ = load_checkpoint(tmp_path / "r2" / "checkpoint_final.npz")
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])
    e1, _ = read_loss_csv(r1 / "train_log.csv")
    e2, _ = read_loss_csv(tmp_path / "r2" / "train_log.csv")
    np.testing.assert_array_equal(e1, e2)


def test_prepare_subcommand(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(SYNTH + ["--out", str(data)]) == 0
    out = tmp_path / "prepared.tsv"
    assert main(["prepare", "--root", str(data), "--layout", "synthetic",
                 "--out", str(out)]) == 0
    assert "train / " in capsys.readouterr().out
    manifest = DatasetManifest.load(out)
    assert len(manifest.records) == 8
    assert (tmp_path / "prepared_config.txt").exists()


def test_sweep_and_compare_subcommands(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(SYNTH + ["--out", str(data)]) == 0
    sweep_out = tmp_path / "sweep"
    assert main(TRAIN + ["--manifest", str(data / "manifest.tsv"),
                         "--epochs", "1", "--gammas", "1,2",
                         "--out", str(sweep_out)]) == 1  # train has no --gammas
    assert main(["sweep", "--manifest", str(data / "manifest.tsv"),
                 "--loss", "focal", "--lr", "1e-3", "--epochs", "1",
                 "--input-size", "32", "--gammas", "1,2",
                 "--out", str(sweep_out)]) == 0
    out = capsys.readouterr().out
    assert "gamma=1" in out and "gamma=2" in out
    assert (sweep_out / "sweep_gamma.csv").exists()

    cmp_out = tmp_path / "cmp"
    assert main(["compare-losses", "--manifest", str(data / "manifest.tsv"),
                 "--lr", "1e-3", "--epochs", "1", "--input-size", "32",
                 "--losses", "focal,ce", "--out", str(cmp_out)]) == 0
    out = capsys.readouterr().out
    assert "loss=focal" in out and "loss=ce" in out
    assert (cmp_out / "compare_losses.csv").exists()


def test_cross_eval_subcommand(tmp_path, capsys):
    for name, seed in (("da", "5"), ("db", "6")):
        assert main(["synth", "--count", "6", "--image-size", "32",
                     "--images-per-identity", "2", "--seed", seed,
                     "--out", str(tmp_path / name)]) == 0
    run = tmp_path / "run"
    assert main(TRAIN + ["--epochs", "1",
                         "--manifest", str(tmp_path / "da" / "manifest.tsv"),
                         "--out", str(run)]) == 0
    ckpt = str(run / "checkpoint_final.npz")
    arms = ["--arm", f"a:{tmp_path / 'da' / 'manifest.tsv'}:{ckpt}",
            "--arm", f"b:{tmp_path / 'db' / 'manifest.tsv'}:{ckpt}"]
    assert main(["cross-eval", *arms, "--out", str(tmp_path / "x")]) == 0
    out = capsys.readouterr().out
    assert "a -> b" in out and "b -> a" in out
    assert (tmp_path / "x" / "cross_eval.csv").exists()
    assert main(["cross-eval", "--arm", "a:m:c", "--arm", "a:m:c",
                 "--out", str(tmp_path / "dup")]) == 1


def test_exit_codes_for_user_errors(tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    assert main(["train"]) == 1  # missing required flags
    assert main(["train", "--manifest", str(tmp_path / "nope.tsv"),
                 "--out", str(tmp_path / "o")]) == 1
    assert main(["eval", "--manifest", str(tmp_path / "nope.tsv"),
                 "--checkpoint", "x.npz",
                 "--report", str(tmp_path / "r.json")]) == 1
    assert main(["plot", "--out", str(tmp_path / "p")]) == 1
    assert main(["sweep", "--manifest", "m", "--gammas", "abc",
                 "--out", "o"]) == 1
    capsys.readouterr()


def test_exit_code_2_for_runtime_failures(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(SYNTH + ["--out", str(data)]) == 0
    run = tmp_path / "run"
    assert main(TRAIN + ["--manifest", str(data / "manifest.tsv"),
                         "--epochs", "1", "--out", str(run)]) == 0
    # report path in a directory that does not exist: an I/O failure after
    # arguments parsed fine
    code = main(["eval", "--manifest", str(data / "manifest.tsv"),
                 "--checkpoint", str(run / "checkpoint_final.npz"),
                 "--report", str(tmp_path / "missing_dir" / "r.json")])
    assert code == 2
    assert "runtime failure" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--help"]) == 0
    capsys.readouterr()


def test_plot_rejects_malformed_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("epoch,mean_loss,seconds\n1,notanumber,0\n")
    with pytest.raises(MalformedCsv):
        plot_loss_curves([str(bad)], str(tmp_path / "o.png"))
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(MalformedCsv):
        plot_loss_curves([str(empty)], str(tmp_path / "o.png"))
    assert main(["plot", "--loss-csv", str(bad),
                 "--out", str(tmp_path / "f")]) == 1
