import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image, ImageDraw

from mrvg_bridge.backbones import BridgeConfig, BuiltinFeatures, BuiltinProposer
from mrvg_bridge.extract import extract
from mrvg_bridge.tensorio import mask_to_rle, write_tensor

# conformance is checked through the primary package's public reader
featio = pytest.importorskip("mrvg.featio")
from mrvg.refdb import RasterMask  # noqa: E402


def _draw_scene(path: Path, boxes, size=(320, 240)):
    img = Image.new("RGB", size, (255, 255, 255))
    draw = ImageDraw.Draw(img)
    colors = [(200, 30, 30), (30, 160, 40), (40, 40, 210)]
    for i, (x, y, w, h) in enumerate(boxes):
        draw.rectangle([x, y, x + w - 1, y + h - 1], fill=colors[i % 3])
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


@pytest.fixture()
def smoke_images(tmp_path):
    images = tmp_path / "images"
    _draw_scene(images / "one.png", [(40, 40, 80, 60)])
    _draw_scene(images / "two.png", [(20, 30, 60, 90), (180, 100, 70, 70)])
    _draw_scene(images / "blank.png", [])
    return images


def test_smoke_set_conformance(smoke_images, tmp_path):
    out = tmp_path / "out"
    manifest = extract(smoke_images, out, BridgeConfig(feature_dim=16))

    # validates against the schema published by the primary package
    featio.validate_manifest(manifest, out)

    # every tensor opens through the primary reader and shapes are consistent
    grid_entries = []
    for entry in manifest["images"].values():
        grid_entries.extend(entry["proposals"])
    assert grid_entries, "smoke set produced no proposals"
    for raw in grid_entries:
        grid = featio.PatchGrid.load(out / raw["grid"])
        assert grid.rows * grid.cols * grid.dim == grid.data.size
        assert grid.dim == 16

    # pooled embedding of an all-foreground mask equals the grid mean
    raw = grid_entries[0]
    grid = featio.PatchGrid.load(out / raw["grid"])
    full = RasterMask.full(raw["mask"]["width"], raw["mask"]["height"])
    pooled = featio.pool_foreground(grid, full)
    mean = grid.data.reshape(-1, grid.dim).astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(pooled.values, mean, atol=1e-6)


def test_proposals_cover_the_drawn_rectangles(smoke_images, tmp_path):
    manifest = extract(smoke_images, tmp_path / "out", BridgeConfig(feature_dim=8))
    assert len(manifest["images"]["one.png"]["proposals"]) == 1
    assert len(manifest["images"]["two.png"]["proposals"]) == 2
    box = manifest["images"]["one.png"]["proposals"][0]["box"]
    assert box == [40, 40, 80, 60]


def test_blank_image_yields_empty_proposal_list(smoke_images, tmp_path):
    manifest = extract(smoke_images, tmp_path / "out", BridgeConfig(feature_dim=8))
    assert manifest["images"]["blank.png"]["proposals"] == []
    assert "error" not in manifest["images"]["blank.png"]


def test_rerun_is_byte_identical(smoke_images, tmp_path):
    config = BridgeConfig(feature_dim=8)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    extract(smoke_images, out_a, config)
    extract(smoke_images, out_b, config)
    files_a = sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(out_b) for p in out_b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


def test_template_masks_pass_through_without_segmentation(tmp_path):
    root = tmp_path / "root"
    obj = root / "objects" / "001_synth_box"
    obj.mkdir(parents=True)
    _draw_scene(obj / "view_1.png", [(8, 8, 32, 32)], size=(64, 64))
    mask = np.zeros((64, 64), dtype=bool)
    mask[8:40, 8:40] = True
    (obj / "view_1_mask.json").write_text(json.dumps(mask_to_rle(mask)))

    out = tmp_path / "out"
    manifest = extract(root, out, BridgeConfig(feature_dim=8, resize=32, patch_size=16))
    entry = manifest["templates"]["001_synth_box"]["1"]
    rle = RasterMask.from_json(entry["mask"])
    # the dataset mask, resized to the analyzed size, not a recomputed one
    expected = np.zeros((32, 32), dtype=bool)
    expected[4:20, 4:20] = True
    assert np.array_equal(rle.to_array(), expected)
    grid = featio.PatchGrid.load(out / entry["grid"])
    assert (grid.rows, grid.cols) == (2, 2)


def test_missing_template_mask_is_an_error(tmp_path):
    from mrvg_bridge import BridgeError

    root = tmp_path / "root"
    obj = root / "objects" / "001_synth_box"
    obj.mkdir(parents=True)
    _draw_scene(obj / "view_1.png", [(8, 8, 16, 16)], size=(64, 64))
    with pytest.raises(BridgeError, match="mask"):
        extract(root, tmp_path / "out", BridgeConfig(feature_dim=8))


def test_config_rejects_unknown_keys_and_bad_lattice():
    from mrvg_bridge import BridgeError

    with pytest.raises(BridgeError, match="unknown config"):
        BridgeConfig.from_dict({"nonsense": 1})
    with pytest.raises(BridgeError, match="multiple"):
        BridgeConfig(resize=225, patch_size=16)


def test_builtin_features_are_deterministic():
    config = BridgeConfig(feature_dim=8)
    rng = np.random.default_rng(0)
    crop = rng.integers(0, 255, size=(50, 70, 3)).astype(np.uint8)
    a = BuiltinFeatures(config).extract(crop)
    b = BuiltinFeatures(config).extract(crop)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (14, 14, 8)


def test_proposer_threshold_filters_low_coverage(tmp_path):
    # a thin diagonal line covers little of its bounding box
    images = tmp_path / "images"
    img = Image.new("RGB", (100, 100), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    draw.line([0, 0, 99, 99], fill=(200, 0, 0), width=2)
    images.mkdir()
    img.save(images / "line.png")
    config = BridgeConfig(feature_dim=8, box_threshold=0.3)
    proposals = BuiltinProposer(config).propose(np.asarray(img))
    assert proposals == []


def test_written_tensor_opens_via_primary_reader(tmp_path):
    data = np.arange(24, dtype=np.float32)
    path = write_tensor((2, 3, 4), data, tmp_path / "t.mrvgt")
    shape, back = featio.read_tensor(path)
    assert shape == (2, 3, 4)
    assert back.tobytes() == data.tobytes()
