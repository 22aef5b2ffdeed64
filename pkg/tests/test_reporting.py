import json

import numpy as np
import pytest

from segxray.reporting import (Band, ExpectedResults, RunManifest, SpecError, list_outputs,
                               load_data, load_image, read_config, resolve_workers, write_manifest)


def test_data_spec_parsing():
    d = load_data("seed=3,count=4,size=32")
    assert d.images.shape == (4, 4, 32, 32) and d.targets.shape == (4, 32, 32)
    assert set(d.masks) >= {"wt", "tc", "et", "brain"}
    assert np.array_equal(load_data("seed=3, count=4, size=32").images, d.images)
    for bad in ("seed=3,count=x", "seed=1,colour=red", "seed=1,count"):
        with pytest.raises(SpecError):
            load_data(bad)
    with pytest.raises(FileNotFoundError):
        load_data("/nonexistent/data.npz")


def test_data_from_npz(tmp_path):
    images = np.random.default_rng(0).random((2, 4, 8, 8)).astype(np.float32)
    targets = np.zeros((2, 8, 8), int)
    targets[0, 2:4, 2:4] = 1
    np.savez(tmp_path / "d.npz", images=images, targets=targets)
    d = load_data(str(tmp_path / "d.npz"))
    assert d.masks["wt"].sum() == 4 and d.masks["brain"].all()


def test_image_spec_matches_dataset():
    img, target, masks = load_image("seed=5,index=2,size=32")
    data = load_data("seed=5,count=3,size=32")
    assert np.array_equal(img, data.images[2]) and np.array_equal(target, data.targets[2])
    _, t0, _ = load_image("seed=5,index=0,size=32,tumor=0")
    assert not t0.any()


def test_read_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nepochs = 3\nclip-norm=1.5  # trailing\n\n")
    assert read_config(p) == {"epochs": "3", "clip_norm": "1.5"}
    p.write_text("nonsense\n")
    with pytest.raises(SpecError):
        read_config(p)


def test_resolve_workers(monkeypatch):
    monkeypatch.delenv("SEGXRAY_WORKERS", raising=False)
    assert resolve_workers(3) == 3
    assert resolve_workers(None) >= 1
    monkeypatch.setenv("SEGXRAY_WORKERS", "2")
    assert resolve_workers(5) == 2
    monkeypatch.setenv("SEGXRAY_WORKERS", "many")
    with pytest.raises(SpecError):
        resolve_workers(None)


def test_manifest_lists_every_output(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "b.bin").write_bytes(b"\0\1")
    m = write_manifest(tmp_path, "train", {"seed": 0}, {"init": 0}, "abc", "0.1", 1.25)
    assert set(m.files) == {"a.txt", "sub/b.bin"} == set(list_outputs(tmp_path))
    loaded = RunManifest.load(tmp_path / "manifest.json")
    assert loaded.files == m.files and loaded.checkpoint_hash == "abc"
    json.loads((tmp_path / "manifest.json").read_text())


def test_expected_results_roundtrip(tmp_path):
    er = ExpectedResults({"dice_wt": Band(0.97, 0.9, 1.0)}, "note")
    er.save(tmp_path / "e.json")
    back = ExpectedResults.load(tmp_path / "e.json")
    rows = back.compare({"dice_wt": 0.5, "other": 1.0})
    assert rows == [("dice_wt", 0.5, Band(0.97, 0.9, 1.0), False)]
    assert back.metrics["dice_wt"].contains(0.95)
