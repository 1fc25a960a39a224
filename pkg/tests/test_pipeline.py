import json

import numpy as np
import pytest

from vetocta.data import MultiRepeatVolume, PhantomConfig, make_phantom
from vetocta.errors import ConfigError, FormatError
from vetocta.model import VetConfig, VetModel, init_weights, vet_forward
from vetocta.nn.tensor import Tensor
from vetocta.pipeline import (
    TrainConfig,
    augment_pair,
    build_dataset,
    evaluate,
    load_split,
    octa_volume,
    phantom_volumes,
    predict_frame,
    predict_volume,
    read_loss_log,
    split_volumes,
    train,
)
from vetocta.preprocess import PatchBox

TINY = VetConfig(channels=8, vfe_layers=1, heads=2, ffn_hidden=16)


@pytest.fixture(scope="module")
def two_volumes():
    return phantom_volumes(PhantomConfig(vessel_count=4, bulk_motion=2, noise_level=0.05, seed=11), 2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, two_volumes):
    out = tmp_path_factory.mktemp("ds")
    manifest = build_dataset(two_volumes, out, patch_size=32, val_fraction=0.28, seed=0)
    return out, manifest


def test_record_count_and_frames(dataset):
    _, manifest = dataset
    assert len(manifest["records"]) == 512
    frames = {(r["source"], r["y"]) for r in manifest["records"]}
    assert len(frames) == 2 * 64
    assert {tuple(r["box"]) for r in manifest["records"]} == {(0, 0, 32), (32, 0, 32), (0, 32, 32), (32, 32, 32)}


def test_split_isolation(dataset):
    _, manifest = dataset
    by_split = {}
    for r in manifest["records"]:
        by_split.setdefault(r["split"], set()).add(r["source"])
    assert by_split["train"].isdisjoint(by_split["val"])
    assert by_split["val"] == set(manifest["splits"]["val"])
    assert len(manifest["splits"]["val"]) == 1


def test_split_volumes_rules():
    ids = [f"v{i}" for i in range(8)]
    train_ids, val_ids = split_volumes(ids, 0.28, seed=5)
    assert len(val_ids) == 2 and set(train_ids) | set(val_ids) == set(ids)
    assert split_volumes(ids, 0.28, seed=5) == (train_ids, val_ids)
    assert split_volumes(["a"], 0.5, 0) == (["a"], [])
    with pytest.raises(ConfigError):
        split_volumes(ids, 1.0, 0)


def test_patches_in_unit_range(dataset):
    out, _ = dataset
    _, arrays = load_split(out, "train")
    for kind, arr in arrays.items():
        assert arr.dtype == np.float32
        assert arr.min() >= 0.0 and arr.max() <= 1.0, kind


def test_octa_volume_matches_dataset_target(dataset, two_volumes):
    out, manifest = dataset
    vid, vol = two_volumes[0]
    ed = octa_volume(vol, "ed")
    sv4 = octa_volume(vol, "sv", 4)
    records, arrays = load_split(out, manifest["records"][0]["split"])
    for r, target, sv in zip(records, arrays["target"], arrays["sv4"]):
        if r["source"] != vid:
            continue
        box = PatchBox(*r["box"])
        assert box.slice(ed[r["y"]]).tobytes() == target.tobytes()
        assert box.slice(sv4[r["y"]]).tobytes() == sv.tobytes()


def test_too_few_repeats_rejected(tmp_path):
    vol, _ = make_phantom(PhantomConfig(nr=3, nx=32, ny=2, nz=32))
    with pytest.raises(ConfigError, match="repeats"):
        build_dataset([("v", vol)], tmp_path, patch_size=32)


def test_sv_two_identical_repeats_zero():
    data = np.repeat(np.random.default_rng(0).random((1, 3, 16, 16)), 2, axis=0)
    flow = octa_volume(MultiRepeatVolume(data), "sv", 2, normalize=False)
    assert not flow.any()


def test_ed_contrast_at_least_sv_contrast():
    cfg = PhantomConfig(nx=32, ny=16, nz=32, vessel_count=4, noise_level=0.05, gain_jitter=0.1, seed=5)
    vol, mask = make_phantom(cfg)
    contrast = {}
    for algo in ("sv", "ed"):
        flow = octa_volume(vol, algo, normalize=False)
        contrast[algo] = flow[mask].mean() / flow[~mask].mean()
    assert contrast["ed"] >= contrast["sv"]


def test_octa_rejects_bad_args(two_volumes):
    _, vol = two_volumes[0]
    with pytest.raises(ConfigError):
        octa_volume(vol, "sv", 7)
    with pytest.raises(ConfigError):
        octa_volume(vol.repeats(2), "doppler")


def test_augment_pair_is_joint():
    x = np.arange(6.0).reshape(2, 3)
    for op in range(6):
        a, b = augment_pair(x, x + 100, op)
        assert np.array_equal(a + 100, b)
    assert np.array_equal(augment_pair(x, x, 1)[0], x[:, ::-1])
    assert np.array_equal(augment_pair(x, x, 3)[0], np.rot90(x))


# training ----------------------------------------------------------------------


def test_training_is_reproducible(dataset, tmp_path):
    out, _ = dataset
    cfg = TrainConfig(max_steps=6, seed=3, deterministic=True)
    a = train(out, cfg, TINY, tmp_path / "a")
    b = train(out, cfg, TINY, tmp_path / "b")
    assert (tmp_path / "a/loss.tsv").read_bytes() == (tmp_path / "b/loss.tsv").read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    log = read_loss_log(tmp_path / "a/loss.tsv")
    assert log.shape == (6, 3) and log[:, 0].tolist() == [1, 2, 3, 4, 5, 6]
    lines = (tmp_path / "a/loss.tsv").read_text().splitlines()
    assert all(len(line.split("\t")) == 3 for line in lines)


def test_each_epoch_visits_every_record_once(tmp_path):
    vols = phantom_volumes(PhantomConfig(nx=32, ny=6, nz=32, radius_max=2.0), 2)
    build_dataset(vols, tmp_path / "ds", patch_size=32, val_fraction=0.0)
    res = train(tmp_path / "ds", TrainConfig(epochs=2, batch_size=5, augment=False, checkpoint_every=1), TINY, tmp_path / "run")
    assert len(res.epoch_visits) == 2
    for counts in res.epoch_visits:
        assert counts.tolist() == [1] * 12
    assert len(res.losses) == 2 * 3
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch0001.vetw", "ckpt_epoch0002.vetw"]
    meta = json.loads((tmp_path / "run/vet.vetw.json").read_text())
    assert meta["patch_size"] == 32 and meta["model"]["channels"] == 8


def test_empty_training_split(tmp_path):
    (tmp_path / "ds").mkdir()
    (tmp_path / "ds/manifest.json").write_text(json.dumps({"format": "vetocta-manifest", "version": 1, "patch_size": 32, "records": []}))
    with pytest.raises(ConfigError):
        train(tmp_path / "ds", TrainConfig(max_steps=1), TINY, tmp_path / "run")


def test_manifest_format_checked(tmp_path):
    (tmp_path / "manifest.json").write_text("{}")
    with pytest.raises(FormatError):
        load_split(tmp_path, "train")
    (tmp_path / "manifest.json").write_text("{nope")
    with pytest.raises(FormatError):
        load_split(tmp_path, "train")


# inference --------------------------------------------------------------------------


def test_zero_model_predicts_zero(two_volumes):
    w = init_weights(TINY)
    for p in w.values():
        p.data[...] = 0
    _, vol = two_volumes[0]
    assert not predict_volume(VetModel(TINY, w), vol.repeats(1), 32).any()


def test_single_patch_frame_equals_direct_forward(rng):
    model = VetModel(TINY, seed=9)
    frame = rng.random((32, 32)).astype(np.float32)
    direct = np.clip(vet_forward(Tensor(frame[None, ..., None]), model.weights, TINY).data[0, ..., 0], 0, 1)
    assert np.allclose(predict_frame(model, frame, 32), direct, atol=1e-6)


def test_overlap_stitching_of_constant_output(rng):
    w = init_weights(TINY)
    for p in w.values():
        p.data[...] = 0
    w["recon.conv2.bias"].data[...] = 0.3
    out = predict_frame(VetModel(TINY, w), rng.random((40, 56)).astype(np.float32), 32)
    assert out.shape == (40, 56)
    assert np.allclose(out, 0.3)


# evaluation -----------------------------------------------------------------------


def test_ground_truth_predictions_score_perfectly(dataset, tmp_path):
    out, manifest = dataset
    for vid in manifest["splits"]["val"]:
        np.save(tmp_path / f"{vid}_vet.npy", np.load(out / f"patches/{vid}_target.npy"))
    reports = evaluate(out, predictions_dir=tmp_path)
    vet = reports["vet"]
    assert vet.psnr.n == 0 and vet.psnr.n_infinite == 256
    assert vet.ssim.mean == pytest.approx(1.0)


def test_baseline_ordering(dataset):
    out, _ = dataset
    reports = evaluate(out)
    assert "vet" not in reports
    assert reports["input"].psnr.mean < reports["sv4"].psnr.mean < reports["ed4"].psnr.mean


def test_missing_predictions_named(dataset, tmp_path):
    out, manifest = dataset
    with pytest.raises(FormatError, match=manifest["splits"]["val"][0]):
        evaluate(out, predictions_dir=tmp_path)
