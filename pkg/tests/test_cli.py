import json

import numpy as np
import pytest
from PIL import Image

from gct.cli import main
from gct.config import ExperimentConfig

TINY = ["--set", "n_train=32", "--set", "n_val=8", "--set", "image_size=16", "--set", "epochs_full=1",
        "--set", "batch_size=8", "--set", "labeled_per_batch=4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    code = main(["train", "--method", "gct", "--task", "synth_seg", "--ratio", "1/4", "--seed", "1",
                 "--output-dir", str(root / "runs"), "--cache-dir", str(root / "cache"), *TINY])
    assert code == 0
    return root, root / "runs" / "gct_synth_seg_r1-4_s1"


def test_train_writes_run_directory(trained, capsys):
    _, run = trained
    for name in ("config.snapshot", "metrics.jsonl", "report.json", "best.ckpt", "split.json"):
        assert (run / name).exists()
    cfg = ExperimentConfig.load(run / "config.snapshot")
    assert cfg.xi == 0.6 and cfg.lambda_dc == 100.0 and cfg.n_train == 32
    assert "n_train" in cfg.overrides


def test_eval_and_report(trained, capsys):
    root, run = trained
    assert main(["eval", "--run", str(run), "--cache-dir", str(root / "cache")]) == 0
    out = capsys.readouterr().out
    assert "t1\t" in out and "t2\t" in out
    assert main(["report", "--runs", str(run), "--out", str(root / "rep")]) == 0
    assert (root / "rep" / "report.txt").exists() and (root / "rep" / "curves.png").exists()


def test_flawmap_from_run(trained):
    root, run = trained
    out = root / "maps"
    assert main(["flawmap", "--run", str(run), "--samples", "0", "1", "--out", str(out),
                 "--cache-dir", str(root / "cache")]) == 0
    assert len(list(out.glob("*.png"))) == 2 * 2 * 2


def test_flawmap_from_images(tmp_path):
    rng = np.random.default_rng(0)
    pred = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
    Image.fromarray(pred).save(tmp_path / "p.png")
    Image.fromarray(pred).save(tmp_path / "l.png")
    assert main(["flawmap", "--pred", str(tmp_path / "p.png"), "--label", str(tmp_path / "l.png"),
                 "--out", str(tmp_path / "f.png")]) == 0
    with Image.open(tmp_path / "f.png") as im:
        assert np.asarray(im).max() == 0


def test_make_split_and_gen_data(tmp_path):
    assert main(["make-split", "--total", "16", "--ratio", "1/8", "--seed", "2", "--out", str(tmp_path / "s.json")]) == 0
    manifest = json.loads((tmp_path / "s.json").read_text())
    assert len(manifest["labeled_ids"]) == 2
    assert main(["gen-data", "--task", "synth_denoise", "--count", "3", "--size", "16",
                 "--out", str(tmp_path / "d.npz")]) == 0
    with np.load(tmp_path / "d.npz") as z:
        assert z["images"].shape == (3, 3, 16, 16)


def test_invalid_xi_names_field(capsys):
    assert main(["train", "--method", "gct", "--task", "synth_seg", "--set", "xi=1.5"]) != 0
    err = capsys.readouterr().err
    assert "xi" in err and "[0, 1]" in err


@pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], ["train", "--method", "nope"]])
def test_usage_errors_exit_nonzero(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code != 0


def test_unknown_config_key_rejected(capsys):
    assert main(["train", "--set", "warp=9"]) == 2
    assert "warp" in capsys.readouterr().err


def test_config_file_layering(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"task": "synth_seg", "xi": 0.4, "lambda_fc": 0.5}))
    from gct.cli import _config_from_args, build_parser

    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--set", "xi=0.3"])
    cfg = _config_from_args(args)
    assert cfg.xi == 0.3 and cfg.lambda_fc == 0.5 and cfg.lambda_dc == 100.0


@pytest.mark.parametrize("task", ["synth_seg", "synth_denoise"])
@pytest.mark.parametrize("preset", ["seg_preset", "denoise_preset", "seg_desk", "denoise_desk"])
def test_every_preset_validates(task, preset):
    from gct.cli import _config_from_args, build_parser

    args = build_parser().parse_args(["train", "--task", task, "--preset", preset, "--set", "xi=0.5"])
    cfg = _config_from_args(args)
    assert cfg.task == task and cfg.xi == 0.5
    if preset == "denoise_desk":
        assert (cfg.n_train, cfg.noise_sigma, cfg.lambda_fc) == (64, 0.2, 0.01)
