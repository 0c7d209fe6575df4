"""Test command line interface."""
from __future__ import annotations

import csv
import os

import numpy as np
import pytest
from PIL import Image

from qwsr.common import Stage
from qwsr.config import OUTPUT_ROOT_ENV
from qwsr_cli import _checkpoint_dir, _get_arg_parser, main
from tests.assert_utils import random_rgb, smooth_rgb

TINY_RUN = """[run]
scale_factor = 4
lr_size = 8
hr_size = 32
batch_size = 2
quave_steps = 2
vae_steps = 2
unet_steps = 2
diffusion_steps = 2
cfw_steps = 2
timesteps = 10
sample_steps = 2
base_channels = 8
kernel_size = 3
learning_rate = 0.001
val_fraction = 0.0
eval_limit = 2
progress = no
"""


def _write(path, image):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(path)


def _write_ini(directory, data_dir):
    path = os.path.join(str(directory), "run.ini")
    with open(path, "w", encoding="utf-8") as ini:
        ini.write(TINY_RUN + f"data_dir = {data_dir}\n")
    return path


def _write_corpus(directory, count=3):
    for index in range(count):
        _write(os.path.join(str(directory), f"img{index}.png"), smooth_rgb(40, 40, seed=index))
    return str(directory)


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as csv_file:
        return list(csv.reader(csv_file))


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """(ini path, run directory) of a tiny pipeline trained through the command line."""
    root = tmp_path_factory.mktemp("cli")
    ini = _write_ini(root, _write_corpus(root / "data"))
    run_dir = str(root / "run")
    with pytest.MonkeyPatch.context() as patch:
        patch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert main(["--config", ini, "train", "--pretrain-all", "--out", run_dir]) == 0
    return ini, run_dir


class TestParser:
    """Test argument parsing."""

    def test_config_flags(self):
        """Every run field has a typed flag that defaults to unset."""
        args = _get_arg_parser().parse_args(
            ["--config", "run.ini", "sample", "in", "out", "--base-channels", "16", "--progress", "no"]
        )
        assert args.config_file == "run.ini"
        assert args.command == "sample"
        assert args.base_channels == 16
        assert args.progress is False
        assert args.seed is None

    def test_lists(self):
        """Ablation settings are comma separated."""
        parser = _get_arg_parser()
        assert parser.parse_args(["ablate-steps", "--steps-list", "1,2,5", "--csv", "x.csv"]).steps_list == [1, 2, 5]
        assert parser.parse_args(["ablate-cfw", "--w", "0,0.5", "--csv", "x.csv"]).w_list == [0.0, 0.5]

    def test_unknown_command(self):
        """Unknown commands exit with a usage error."""
        with pytest.raises(SystemExit):
            _get_arg_parser().parse_args(["fly"])


class TestShortFlags:
    """Test the short flag spellings of each command."""

    def test_sample(self):
        """sample --ckpt --lr-image --steps --seed --out."""
        args = _get_arg_parser().parse_args(
            ["sample", "--ckpt", "run/diffusion.ckpt", "--lr-image", "lr.png", "--steps", "5",
             "--seed", "3", "--out", "sr.png"]
        )
        assert (args.ckpt, args.lr_image, args.out_flag) == ("run/diffusion.ckpt", "lr.png", "sr.png")
        assert args.sample_steps == 5
        assert args.seed == 3
        assert args.input is None and args.output is None

    def test_eval(self):
        """eval --pairs --out."""
        args = _get_arg_parser().parse_args(["eval", "--pairs", "pairs", "--out", "report.csv"])
        assert (args.pairs, args.csv, args.hr, args.sr) == ("pairs", "report.csv", None, None)

    def test_ablate_steps(self):
        """ablate-steps --steps."""
        args = _get_arg_parser().parse_args(["ablate-steps", "--steps", "20,50,100,200"])
        assert args.steps_list == [20, 50, 100, 200]

    def test_make_pairs(self):
        """make-pairs --data --scale --sigma-blur --sigma-noise --seed --out."""
        args = _get_arg_parser().parse_args(
            ["make-pairs", "--data", "div2k", "--scale", "4", "--sigma-blur", "1.2",
             "--sigma-noise", "0.01", "--seed", "7", "--out", "pairs"]
        )
        assert (args.data_dir, args.scale_factor, args.seed, args.out_flag) == ("div2k", 4, 7, "pairs")
        assert (args.blur_sigma, args.noise_sigma) == (1.2, 0.01)

    @pytest.mark.parametrize(
        "command, field",
        [
            ("pretrain-quave", "quave_steps"),
            ("pretrain-vae", "vae_steps"),
            ("pretrain-unet", "unet_steps"),
            ("train", "diffusion_steps"),
            ("train-cfw", "cfw_steps"),
        ],
    )
    def test_training(self, command, field):
        """Training commands take --data --steps --out for their own stage."""
        args = _get_arg_parser().parse_args([command, "--data", "d", "--steps", "9", "--out", "run/x.ckpt"])
        assert args.data_dir == "d"
        assert getattr(args, field) == 9
        assert args.checkpoint_out == "run/x.ckpt"

    def test_conditioning_strength(self):
        """The conditioning-strength command takes --ckpt and --out, the image optional."""
        args = _get_arg_parser().parse_args(["probe-conditioning", "--ckpt", "run", "--out", "p.csv"])
        assert (args.ckpt, args.csv, args.image) == ("run", "p.csv", None)


class TestCheckpointDir:
    """Test checkpoint location resolution."""

    @pytest.mark.parametrize(
        "path, expected",
        [("runs/x4", "runs/x4"), ("runs/x4/", "runs/x4/"), ("runs/x4/quave.ckpt", "runs/x4"), ("quave.ckpt", ".")],
    )
    def test_resolved(self, path, expected):
        """Directories pass through; checkpoint files resolve to their directory."""
        assert _checkpoint_dir(path, [Stage.QUAVE]) == expected

    def test_wrong_stage_file(self):
        """A checkpoint file of another stage is rejected."""
        with pytest.raises(ValueError):
            _checkpoint_dir("runs/vae.ckpt", [Stage.QUAVE])


class TestMain:
    """Test command dispatch and exit codes."""

    def test_decompose(self, tmp_path, capsys, monkeypatch):
        """Decomposition writes maps and prints energies."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        image = str(tmp_path / "in.png")
        _write(image, smooth_rgb(16, 16))
        argv = ["decompose", image, str(tmp_path / "out"), "--levels", "2", "--filter-family", "haar"]
        assert main(argv) == 0
        assert os.path.isfile(tmp_path / "out" / "qwt.npz")
        assert os.path.isfile(tmp_path / "out" / "dwt_level2_hh.png")
        assert os.path.isfile(tmp_path / "out" / "level1_psi_d_gg.png")
        output = capsys.readouterr().out
        assert "level2" in output
        assert "dwt_level1" in output

    def test_eval(self, tmp_path, capsys, monkeypatch):
        """Evaluation of identical directories succeeds."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        _write(str(tmp_path / "hr" / "a.png"), smooth_rgb(16, 16))
        assert main(["eval", str(tmp_path / "hr"), str(tmp_path / "hr"), "--csv", str(tmp_path / "e.csv")]) == 0
        assert os.path.isfile(tmp_path / "e.csv")
        assert "PSNR_Y" in capsys.readouterr().out

    def test_eval_pairs(self, tmp_path, monkeypatch):
        """eval --pairs reads hr/ and sr/ of one directory."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        for sub in ("hr", "sr"):
            _write(str(tmp_path / "pairs" / sub / "a.png"), smooth_rgb(16, 16))
        report = str(tmp_path / "report.csv")
        assert main(["eval", "--pairs", str(tmp_path / "pairs"), "--out", report]) == 0
        assert _read_csv(report)[0] == ["filename", "psnr_y", "ssim_y"]

    def test_eval_needs_directories(self, tmp_path, monkeypatch):
        """eval without directories fails with exit code 1."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert main(["eval", str(tmp_path)]) == 1

    def test_make_pairs(self, tmp_path, monkeypatch):
        """make-pairs with the short spellings writes hr/ and lr/."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        data = _write_corpus(tmp_path / "data", count=2)
        ini = _write_ini(tmp_path, str(tmp_path / "elsewhere"))
        argv = [
            "--config", ini, "make-pairs", "--data", data, "--scale", "4", "--sigma-blur", "1.2",
            "--sigma-noise", "0.01", "--seed", "7", "--out", str(tmp_path / "pairs"), "--split", "all",
        ]
        assert main(argv) == 0
        assert sorted(os.listdir(tmp_path / "pairs" / "lr")) == ["img0.png", "img1.png"]
        with Image.open(tmp_path / "pairs" / "lr" / "img0.png") as img:
            assert img.size == (8, 8)

    def test_pretrain_quave(self, tmp_path, monkeypatch):
        """pretrain-quave --data --steps --out writes the named checkpoint."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        data = _write_corpus(tmp_path / "data", count=2)
        ini = _write_ini(tmp_path, str(tmp_path / "elsewhere"))
        checkpoint = tmp_path / "q" / "quave.ckpt"
        argv = ["--config", ini, "pretrain-quave", "--data", data, "--steps", "3", "--out", str(checkpoint)]
        assert main(argv) == 0
        assert os.path.isfile(checkpoint)
        rows = _read_csv(tmp_path / "q" / "losses.csv")
        assert [row[0] for row in rows[1:]] == ["quave"] * 3

    def test_missing_data_dir(self, tmp_path, monkeypatch):
        """A missing data directory fails with exit code 1 before training."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        argv = ["pretrain-vae", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "run")]
        assert main(argv) == 1
        assert not os.path.exists(tmp_path / "run")

    def test_missing_checkpoint_dir(self, tmp_path, monkeypatch):
        """Sampling from a missing checkpoint directory fails with exit code 1."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        _write(str(tmp_path / "lr.png"), random_rgb(8, 8))
        argv = ["sample", "--ckpt", str(tmp_path / "nowhere"), "--lr-image", str(tmp_path / "lr.png"),
                "--out", str(tmp_path / "sr.png")]
        assert main(argv) == 1
        assert not os.path.exists(tmp_path / "sr.png")

    def test_missing_stage(self, tmp_path, monkeypatch):
        """Training without pretrained stages fails with exit code 1."""
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "runs"))
        _write(str(tmp_path / "data" / "a.png"), smooth_rgb(40, 40))
        argv = ["train", "--data-dir", str(tmp_path / "data"), "--val-fraction", "0"]
        assert main(argv) == 1
        assert not os.path.exists(tmp_path / "runs" / "diffusion.ckpt")

    def test_invalid_config(self, tmp_path, monkeypatch):
        """Invalid field values fail with exit code 1."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert main(["eval", str(tmp_path), str(tmp_path), "--hr-size", "100"]) == 1


class TestTrainedRun:
    """Test the sampling and diagnostic commands on a trained run."""

    def test_sample_single_image(self, trained_run, tmp_path, monkeypatch):
        """sample --ckpt --lr-image --steps --seed --out writes one PNG."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        ini, run_dir = trained_run
        _write(str(tmp_path / "lr.png"), random_rgb(8, 8, seed=1))
        out = tmp_path / "sr.png"
        argv = [
            "--config", ini, "sample", "--ckpt", os.path.join(run_dir, "diffusion.ckpt"),
            "--lr-image", str(tmp_path / "lr.png"), "--steps", "2", "--seed", "3", "--out", str(out),
        ]
        assert main(argv) == 0
        with Image.open(out) as img:
            assert img.size == (32, 32)

    def test_conditioning_strength(self, trained_run, tmp_path, monkeypatch):
        """Conditioning strength with --ckpt and --out averages over the data directory."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        ini, run_dir = trained_run
        csv_path = str(tmp_path / "strength.csv")
        argv = ["--config", ini, "probe-conditioning", "--ckpt", run_dir, "--out", csv_path, "--t", "0,5,9"]
        assert main(argv) == 0
        rows = _read_csv(csv_path)
        assert rows[0] == ["t", "strength"]
        assert [row[0] for row in rows[1:]] == ["0", "5", "9"]
        assert all(np.isfinite(float(row[1])) for row in rows[1:])

    def test_ablate_steps(self, trained_run, tmp_path, monkeypatch):
        """ablate-steps --steps writes one row per step count."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        ini, run_dir = trained_run
        csv_path = str(tmp_path / "steps.csv")
        argv = ["--config", ini, "ablate-steps", "--ckpt", run_dir, "--steps", "1,2", "--out", csv_path]
        assert main(argv) == 0
        assert [row[0] for row in _read_csv(csv_path)[1:]] == ["1", "2"]

    def test_ablation_needs_csv(self, trained_run, monkeypatch):
        """Ablations need an output table."""
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        ini, run_dir = trained_run
        assert main(["--config", ini, "ablate-cfw", "--ckpt", run_dir]) == 1
