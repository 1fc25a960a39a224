import json
import subprocess
import sys
import warnings

import numpy as np
import pytest

from vetocta.cli import main
from vetocta.data import load_volume

SMALL_PHANTOM = ["--nx", "32", "--ny", "4", "--nz", "32", "--radius-max", "2"]
TINY_MODEL = ["--channels", "8", "--vfe-layers", "1", "--heads", "2", "--ffn-hidden", "16"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["phantom", "gen", "--count", "2", "--seed", "4", "--out", str(root / "vols"), *SMALL_PHANTOM]) == 0
    assert main(["dataset", "build", "--phantoms", "2", "--patch", "32", "--out", str(root / "ds"), *SMALL_PHANTOM]) == 0
    return root


def test_phantom_gen_writes_volumes(workdir):
    vol = load_volume(workdir / "vols/vol000.octv")
    assert vol.data.shape == (6, 4, 32, 32)
    meta = json.loads((workdir / "vols/vol001.json").read_text())
    assert meta["seed"] == 5


def test_dataset_from_volume_files(workdir, tmp_path):
    vols = [str(workdir / "vols/vol000.octv"), str(workdir / "vols/vol001.octv")]
    assert main(["dataset", "build", "--volumes", *vols, "--patch", "32", "--out", str(tmp_path)]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert {r["source"] for r in manifest["records"]} == {"vol000", "vol001"}


def test_octa_outputs(workdir, tmp_path, capsys):
    assert main(["octa", str(workdir / "vols/vol000.octv"), "--algo", "sv", "--repeats", "4", "--out", str(tmp_path)]) == 0
    flow = load_volume(tmp_path / "vol000_sv4.octv")
    assert flow.data.shape == (1, 4, 32, 32)
    assert (tmp_path / "vol000_sv4_enface.png").exists()
    assert "vol000_sv4.octv" in capsys.readouterr().out


def test_train_infer_eval_report(workdir, tmp_path):
    run = tmp_path / "run"
    config = tmp_path / "cfg.toml"
    config.write_text("[train]\nmax_steps = 3\nbatch_size = 2\n\n[model]\nchannels = 8\nvfe_layers = 1\nheads = 2\nffn_hidden = 16\n")
    assert main(["train", "--config", str(config), "--manifest", str(workdir / "ds"), "--deterministic", "--out", str(run)]) == 0
    assert len((run / "loss.tsv").read_text().splitlines()) == 3
    ckpt = str(run / "vet.vetw")
    assert main(["infer", "--checkpoint", ckpt, "--input", str(workdir / "vols/vol000.octv"), "--out", str(tmp_path / "pred")]) == 0
    pred = load_volume(tmp_path / "pred/vol000_vet.octv")
    assert pred.data.shape == (1, 4, 32, 32) and pred.data.max() <= 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert main(["eval", "--manifest", str(workdir / "ds"), "--checkpoint", ckpt, "--out", str(tmp_path / "eval.json")]) == 0
    reports = json.loads((tmp_path / "eval.json").read_text())
    assert set(reports) == {"input", "sv4", "ed4", "vet"}
    rc = main(["report", "--loss", str(run / "loss.tsv"), "--eval", str(tmp_path / "eval.json"), "--out", str(tmp_path / "fig")])
    assert rc == 0
    for name in ("loss.png", "metrics.png"):
        assert (tmp_path / "fig" / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = (tmp_path / "fig/metrics.tsv").read_text().splitlines()
    assert rows[0] == "method\tmetric\tmean\tstd\tn" and len(rows) == 1 + 4 * 3


def test_flags_override_config(workdir, tmp_path):
    config = tmp_path / "cfg.toml"
    config.write_text("[train]\nmax_steps = 5\n")
    args = ["train", "--config", str(config), "--steps", "2", "--manifest", str(workdir / "ds"), "--out", str(tmp_path / "r"), *TINY_MODEL]
    assert main(args) == 0
    assert len((tmp_path / "r/loss.tsv").read_text().splitlines()) == 2


@pytest.mark.parametrize(
    "extra,content",
    [
        (TINY_MODEL[:-2] + ["--ffn-hidden", "0"], None),
        (TINY_MODEL, "[train]\nbogus = 1\n"),
        (TINY_MODEL, "[train\n"),
    ],
)
def test_config_errors_exit_2(workdir, tmp_path, extra, content):
    args = ["train", "--manifest", str(workdir / "ds"), "--out", str(tmp_path / "r"), *extra]
    if content is not None:
        (tmp_path / "c.toml").write_text(content)
        args += ["--config", str(tmp_path / "c.toml")]
    assert main(args) == 2


def test_argparse_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["octa", "x.octv", "--algo", "doppler", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_corrupt_volume_exit_3(tmp_path, capsys):
    bad = tmp_path / "bad.octv"
    bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
    assert main(["octa", str(bad), "--out", str(tmp_path / "o")]) == 3
    assert "bad magic" in capsys.readouterr().err
    assert main(["octa", str(tmp_path / "missing.octv"), "--out", str(tmp_path / "o")]) == 3


def test_blank_frame_exit_3(tmp_path):
    from vetocta.data import MultiRepeatVolume, save_volume

    data = np.random.default_rng(0).random((4, 2, 16, 16)).astype(np.float32)
    data[2, 1] = 0
    save_volume(MultiRepeatVolume(data), tmp_path / "v.octv")
    assert main(["octa", str(tmp_path / "v.octv"), "--out", str(tmp_path / "o")]) == 3


def test_non_finite_loss_exit_4(workdir, tmp_path, capsys):
    args = ["train", "--manifest", str(workdir / "ds"), "--steps", "5", "--lr", "1e30", "--out", str(tmp_path / "r"), *TINY_MODEL]
    with np.errstate(all="ignore"):
        assert main(args) == 4
    assert "non-finite loss" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "vetocta.cli", "phantom", "gen", "--out", str(tmp_path), *SMALL_PHANTOM],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "vol000.octv").exists()
