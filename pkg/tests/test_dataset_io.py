import json

import numpy as np
import pandas as pd
import pytest
import torch

from mixattack.attacks import AttackResult
from mixattack.config import Task
from mixattack.dataset_io import (
    export_adversarial_set,
    load_dataset,
    reassemble,
    save_dataset,
    save_image,
    tile_image,
)
from mixattack.errors import ArgumentError, ExportError, LoadError


def _results(dataset, delta=0.0):
    return [AttackResult.from_iterate(x, torch.clamp(x + delta, 0, 255)) for x in dataset.images]


def test_manifest_rows_load_in_order(tmp_path):
    save_image(torch.full((4, 4, 3), 10.0), tmp_path / "a.png")
    save_image(torch.full((4, 4, 3), 250.0), tmp_path / "b.png")
    (tmp_path / "m.csv").write_text("path,label\nb.png,river\na.png,forest\n")
    dataset = load_dataset(tmp_path / "m.csv")
    assert dataset.task == Task.classification
    assert dataset.names == ["b.png", "a.png"]
    assert dataset.class_names == ["forest", "river"]
    assert dataset.labels == [1, 0]
    assert float(dataset.images[0].max()) == 250.0 and float(dataset.images[1].min()) == 10.0


def test_unknown_class_names_the_row(tmp_path):
    save_image(torch.zeros((4, 4, 3)), tmp_path / "a.png")
    (tmp_path / "m.csv").write_text("path,label\na.png,forest\na.png,desert\n")
    (tmp_path / "m.json").write_text(json.dumps({"class_names": ["forest"]}))
    with pytest.raises(LoadError, match="row 2"):
        load_dataset(tmp_path / "m.csv")


def test_missing_file_and_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("path,label\nmissing.png,forest\n")
    with pytest.raises(LoadError, match="row 1"):
        load_dataset(tmp_path / "m.csv")
    (tmp_path / "bad.csv").write_text("file,class\nx.png,a\n")
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "bad.csv")
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "nope.csv")


def test_dataset_round_trip(tmp_path, small_set):
    manifest = save_dataset(small_set, tmp_path / "set")
    loaded = load_dataset(manifest)
    assert loaded.names == small_set.names
    assert loaded.labels == small_set.labels
    for a, b in zip(loaded.images, small_set.images):
        assert torch.equal(a, b)


def test_segmentation_round_trip(tmp_path, scenes):
    loaded = load_dataset(save_dataset(scenes, tmp_path / "seg"))
    assert loaded.task == Task.segmentation
    assert loaded.background_class == scenes.background_class
    for a, b in zip(loaded.labels, scenes.labels):
        assert torch.equal(a, b)
    assert torch.equal(loaded.valid_mask(0), scenes.valid_mask(0))


def test_tiles_single_and_flush():
    tiles, geometry = tile_image(torch.zeros((64, 64, 3)), 64, 0)
    assert len(tiles) == 1
    tiles, geometry = tile_image(torch.zeros((100, 64, 3)), 64, 0)
    assert [box[:2] for box in geometry.boxes] == [(0, 0), (36, 0)]
    tiles, _ = tile_image(torch.zeros((30, 20, 3)), 64, 8)
    assert len(tiles) == 1 and tiles[0].shape == (30, 20, 3)


def test_tile_arguments():
    with pytest.raises(ArgumentError):
        tile_image(torch.zeros((8, 8)), 4, 4)
    with pytest.raises(ArgumentError):
        tile_image(torch.zeros((8, 8)), 4, -1)


def test_reassemble_identity_and_overlap_average():
    gen = torch.Generator().manual_seed(0)
    image = torch.rand((70, 50, 3), generator=gen, dtype=torch.float64)
    tiles, geometry = tile_image(image, 32, 8)
    assert torch.equal(reassemble(tiles, geometry), image)

    constant = [torch.full_like(t, 7.0) for t in tiles]
    assert torch.equal(reassemble(constant, geometry), torch.full_like(image, 7.0))

    noisy = [torch.rand(t.shape, generator=gen, dtype=torch.float64) for t in tiles]
    total = torch.zeros_like(image)
    count = torch.zeros((70, 50, 1), dtype=torch.float64)
    for t, (top, left, rows, cols) in zip(noisy, geometry.boxes):
        total[top : top + rows, left : left + cols] += t
        count[top : top + rows, left : left + cols] += 1
    assert torch.allclose(reassemble(noisy, geometry), total / count, atol=1e-9)


def test_reassemble_geometry_mismatch():
    tiles, geometry = tile_image(torch.zeros((40, 40)), 32, 0)
    with pytest.raises(ArgumentError):
        reassemble(tiles[:-1], geometry)
    with pytest.raises(ArgumentError):
        reassemble([t[:-1] for t in tiles], geometry)


def test_export_zero_perturbation_round_trips(tmp_path, small_set):
    bundle = export_adversarial_set(_results(small_set), tmp_path / "bundle", small_set, config={"method": "ifgsm"})
    assert bundle.max_linf == 0.0
    reloaded = load_dataset(bundle.manifest_path)
    for a, b in zip(reloaded.images, small_set.images):
        assert torch.equal(a, b)
    assert [p.split("/")[-1] for p in bundle.images] == small_set.names
    assert json.loads((tmp_path / "bundle" / "attack_config.json").read_text()) == {"method": "ifgsm"}


def test_export_logs_linf(tmp_path, small_set):
    bundle = export_adversarial_set(_results(small_set, 1.0), tmp_path / "bundle", small_set)
    log = pd.read_csv(bundle.delta_log_path)
    assert list(log.columns) == ["file", "linf", "linf_rounded", "error"]
    assert log["linf"].max() == 1.0
    assert bundle.max_linf_rounded <= 5.0 + 0.5


def test_export_rounding_budget(tmp_path, small_set):
    gen = torch.Generator().manual_seed(1)
    results = [
        AttackResult.from_iterate(x, torch.clamp(x + 5.0 * (2 * torch.rand(x.shape, generator=gen, dtype=torch.float64) - 1), 0, 255))
        for x in small_set.images
    ]
    bundle = export_adversarial_set(results, tmp_path / "bundle", small_set)
    assert bundle.max_linf <= 5.0 + 1e-9
    assert bundle.max_linf_rounded <= 5.5


def test_export_is_deterministic(tmp_path, small_set):
    a = export_adversarial_set(_results(small_set, 2.0), tmp_path / "a", small_set, config={"seed": 42})
    b = export_adversarial_set(_results(small_set, 2.0), tmp_path / "b", small_set, config={"seed": 42})
    for pa, pb in zip(a.images, b.images):
        assert open(pa, "rb").read() == open(pb, "rb").read()
    assert open(a.delta_log_path).read() == open(b.delta_log_path).read()


def test_export_refuses_and_leaves_no_partial_bundle(tmp_path, small_set):
    out = tmp_path / "bundle"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    with pytest.raises(ExportError):
        export_adversarial_set(_results(small_set), out, small_set)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["bundle"]
    assert (out / "keep.txt").exists()
    with pytest.raises(ArgumentError):
        export_adversarial_set(_results(small_set)[:-1], tmp_path / "other", small_set)


def test_export_segmentation_bundle_carries_labels(tmp_path, scenes):
    bundle = export_adversarial_set(_results(scenes), tmp_path / "seg", scenes)
    assert (tmp_path / "seg" / "labels").is_dir()
    reloaded = load_dataset(bundle.manifest_path)
    assert all(torch.equal(a, b) for a, b in zip(reloaded.labels, scenes.labels))
    assert np.isclose(bundle.max_linf, 0.0)


def test_export_failure_outside_io_removes_temporary_dir(tmp_path, small_set):
    with pytest.raises(ExportError, match="not JSON serializable"):
        export_adversarial_set(_results(small_set), tmp_path / "bundle", small_set, config={"bad": object()})
    assert list(tmp_path.iterdir()) == []
