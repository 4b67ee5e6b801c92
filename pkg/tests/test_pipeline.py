import json

import numpy as np
import pytest

from kneerecon import network
from kneerecon.grid import Image2D, read_image, read_volume, write_volume
from kneerecon.network import ArchSpec
from kneerecon.dwm import DwmParams
from kneerecon.pipeline import (ARTIFACTS, TrainConfig, dataset_build, evaluate_dirs, load_manifest,
                                phantom_specs, reconstruct, reconstruct_arrays, train)
from kneerecon.projection import ViewAxis, render_drr

SMALL = ArchSpec(input_side=16, levels=2, base_channels=4)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    dataset_build(phantom_specs(3, 16, seed=5), 1, out)
    return out


def _config(data, out, **kw):
    base = dict(dataset=str(data), out_dir=str(out), arch=SMALL, epochs=3, seed=2, n_train=2, n_val=1, n_test=0)
    return TrainConfig(**{**base, **kw})


def test_dataset_build_writes_every_artifact(tmp_path):
    m = dataset_build(phantom_specs(1, 16, seed=0), 0, tmp_path)
    assert len(m["cases"]) == 1
    for a in ARTIFACTS:
        assert (tmp_path / m["cases"][0]["files"][a]).exists()
    assert (tmp_path / "manifest.json").exists()


def test_dataset_build_is_deterministic(tmp_path):
    for d in ("a", "b"):
        dataset_build(phantom_specs(2, 16, seed=9), 1, tmp_path / d)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_dataset_drrs_match_recomputed_render(data):
    root, manifest, records = load_manifest(data)
    assert len(records) == 6 and [r.aug_index for r in records] == [0, 1] * 3
    for r in records:
        vol = read_volume(r.path(root, "intensity"))
        for axis, key in ((ViewAxis.AP, "ap"), (ViewAxis.LAT, "lat")):
            assert np.array_equal(read_image(r.path(root, key)).data, render_drr(vol, axis).data)
        if r.aug_index:
            assert any(a != 0 for a in r.angles)


def test_train_lowers_loss_and_writes_models(data, tmp_path):
    params, history = train(_config(data, tmp_path, epochs=6))
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert all(h["val_bone_dice"] is not None for h in history)
    for f in ("model_final.json", "model_best.json", "train_log.json"):
        assert (tmp_path / f).exists()
    spec, loaded = network.load_model(tmp_path / "model_final.json")
    assert spec == SMALL and all(np.array_equal(loaded[k], params[k]) for k in params)


def test_train_is_deterministic(data, tmp_path):
    p1, h1 = train(_config(data, tmp_path / "a"))
    p2, h2 = train(_config(data, tmp_path / "b"))
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert [h["train_loss"] for h in h1] == [h["train_loss"] for h in h2]


def test_train_config_roundtrip_and_validation(tmp_path):
    c = TrainConfig(arch=SMALL, dwm=DwmParams(gamma=2.0), epochs=4)
    c.to_json(tmp_path / "c.json")
    assert TrainConfig.from_json(tmp_path / "c.json") == c
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(n_train=0)


def test_train_rejects_mismatched_side(data, tmp_path):
    with pytest.raises(ValueError):
        train(_config(data, tmp_path, arch=ArchSpec(input_side=32)))


def test_without_dwm_equals_zero_gamma_weights(data, tmp_path):
    """The ablation toggle is the same as training on an all-ones weight map."""
    p1, _ = train(_config(data, tmp_path / "a", epochs=1, use_dwm=False))
    p2, _ = train(_config(data, tmp_path / "b", epochs=1, dwm=DwmParams(gamma=0.0)))
    assert all(np.allclose(p1[k], p2[k], atol=1e-6) for k in p1)


def test_no_reconstruction_loss_logs_ce_only(data, tmp_path):
    _, history = train(_config(data, tmp_path, epochs=1, use_reconstruction_loss=False))
    assert history[0]["train_reconst"] is None
    assert history[0]["train_loss"] == pytest.approx(history[0]["train_ce"])


def test_reconstruct_cli_flow_and_eval(data, tmp_path):
    train(_config(data, tmp_path / "run", epochs=1))
    root, _, records = load_manifest(data)
    rec = records[0]
    outs = []
    for d in ("p1", "p2"):
        out = tmp_path / "pred" / d / f"case_{rec.case_id:04d}"
        labels, meshes, timing = reconstruct(tmp_path / "run" / "model_final.json",
                                             rec.path(root, "ap"), rec.path(root, "lat"), out)
        assert set(timing) == {"epipolar_build", "forward", "argmax", "meshing", "total"}
        outs.append(out)
    assert (outs[0] / "labels.json").read_bytes() == (outs[1] / "labels.json").read_bytes()
    for f in outs[0].glob("*.obj"):
        assert f.read_bytes() == (outs[1] / f.name).read_bytes()
    report = evaluate_dirs(tmp_path / "pred" / "p1", data, tmp_path / "r.json")
    assert list(report["cases"]) == ["case_0000"]
    assert 0 <= report["bones_average"]["dice3d"] <= 1
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_reconstruct_needs_only_the_two_images(data, tmp_path):
    """Inference reads the model and two DRRs; ground-truth files are never touched."""
    train(_config(data, tmp_path / "run", epochs=1))
    root, _, records = load_manifest(data)
    iso = tmp_path / "iso"
    iso.mkdir()
    for key in ("ap", "lat"):
        write_volume(read_image(records[0].path(root, key)), iso / f"{key}.json")
    expected = reconstruct(tmp_path / "run" / "model_final.json", records[0].path(root, "ap"),
                           records[0].path(root, "lat"), tmp_path / "o1")[0]
    got = reconstruct(tmp_path / "run" / "model_final.json", iso / "ap.json", iso / "lat.json", tmp_path / "o2")[0]
    assert np.array_equal(got.data, expected.data)


def test_reconstruct_constant_images_and_side_mismatch():
    params = network.init_params(SMALL, 0)
    zeros = Image2D(np.zeros((16, 16), dtype=np.float32))
    labels, meshes, _ = reconstruct_arrays(SMALL, params, zeros, zeros)
    assert labels.dims == (16, 16, 16) and len(meshes) == 4
    with pytest.raises(ValueError):
        reconstruct_arrays(SMALL, params, zeros, Image2D(np.zeros((8, 8), dtype=np.float32)))


def test_evaluate_dirs_without_predictions(data, tmp_path):
    assert evaluate_dirs(tmp_path, data)["cases"] == {}
