import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cfrg.config import TileSpec
from cfrg.dataset import (
    DatasetEntry,
    axis_offsets,
    load_sample,
    preprocess_tree,
    resize_mask,
    scan_layout,
    tile_image,
)
from cfrg.errors import DataError, MalformedTreeError, MissingMaskError
from conftest import FIXTURES


def _png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _tree(root, n_train=10, n_good=2, n_bad=3, masks=True):
    img = np.full((16, 16, 3), 128, np.uint8)
    for i in range(n_train):
        _png(root / "cat" / "train" / "good" / f"{i:03d}.png", img)
    for i in range(n_good):
        _png(root / "cat" / "test" / "good" / f"{i:03d}.png", img)
    for i in range(n_bad):
        _png(root / "cat" / "test" / "scratch" / f"{i:03d}.png", img)
        if masks:
            _png(root / "cat" / "ground_truth" / "scratch" / f"{i:03d}_mask.png", np.zeros((16, 16), np.uint8))
    return root


def test_scan_counts(tmp_path):
    index = scan_layout(_tree(tmp_path), "cat")
    assert len(index) == 15
    assert sum(e.mask_path is not None for e in index) == 3
    assert len(index.split("train")) == 10
    assert all(e.defect_type == "good" for e in index.split("train"))


def test_scan_is_lexicographic(tmp_path):
    index = scan_layout(_tree(tmp_path), "cat")
    paths = [e.image_path.as_posix() for e in index]
    assert paths == sorted(paths)


def test_missing_mask(tmp_path):
    with pytest.raises(MissingMaskError):
        scan_layout(_tree(tmp_path, masks=False), "cat")


def test_empty_category(tmp_path):
    (tmp_path / "cat").mkdir()
    with pytest.raises(MalformedTreeError):
        scan_layout(tmp_path, "cat")


def test_train_with_defect_folder(tmp_path):
    _tree(tmp_path)
    _png(tmp_path / "cat" / "train" / "crack" / "x.png", np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(MalformedTreeError):
        scan_layout(tmp_path, "cat")


def test_same_stem_mask_accepted(tmp_path):
    _tree(tmp_path, n_bad=0)
    _png(tmp_path / "cat" / "test" / "dent" / "a.png", np.zeros((8, 8, 3), np.uint8))
    _png(tmp_path / "cat" / "ground_truth" / "dent" / "a.png", np.zeros((8, 8), np.uint8))
    index = scan_layout(tmp_path, "cat")
    assert [e.mask_path.name for e in index if e.mask_path] == ["a.png"]


def test_mini_dataset_matches_golden_manifest(mini_index):
    golden = json.loads((FIXTURES / "mini_manifest.json").read_text())
    assert mini_index.manifest() == golden


def test_mini_dataset_shape(mini_index):
    assert len(mini_index.split("train")) >= 50
    test = mini_index.split("test")
    assert sum(e.is_anomalous for e in test) == 20
    assert sum(not e.is_anomalous for e in test) == 20


# --------------------------------------------------------------------------- tiling


def test_small_image_passes_through():
    img = np.zeros((800, 800), np.uint8)
    tiles = tile_image(img)
    assert len(tiles) == 1 and tiles[0].array is img and (tiles[0].x, tiles[0].y) == (0, 0)


def test_wide_image_offsets():
    img = np.zeros((1024, 2048), np.uint8)
    tiles = tile_image(img, TileSpec(1024, 0.2))
    assert sorted({t.x for t in tiles}) == [0, 819, 1024]
    assert {t.y for t in tiles} == {0}
    assert all(t.width == 1024 and t.height == 1024 for t in tiles)


def test_tall_remainder_is_edge_clamped_and_kept():
    img = np.zeros((1100, 1024), np.uint8)
    tiles = tile_image(img, TileSpec(1024, 0.2))
    assert [t.y for t in tiles] == [0, 76]
    assert tiles[1].height == 1024


def test_thin_strip_discarded():
    img = np.zeros((150, 2048), np.uint8)
    assert tile_image(img, TileSpec(1024, 0.2, 0.2)) == []


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(1, 300),
    w=st.integers(1, 300),
    side=st.integers(16, 128),
    overlap=st.floats(0.0, 0.9),
)
def test_tiles_cover_every_pixel(h, w, side, overlap):
    spec = TileSpec(side, overlap, 0.2)
    img = np.zeros((h, w), np.uint8)
    tiles = tile_image(img, spec)
    if min(h, w) < 0.2 * side and max(h, w) > side:
        return  # strips below the keep fraction are dropped by design
    cover = np.zeros((h, w), int)
    for t in tiles:
        assert t.height <= side and t.width <= side
        cover[t.y : t.y + t.height, t.x : t.x + t.width] += 1
    assert cover.min() >= 1
    assert [(t.x, t.y) for t in tile_image(img, spec)] == [(t.x, t.y) for t in tiles]


def test_axis_offsets_stride():
    assert axis_offsets(3000, 1024, 0.2) == [0, 819, 1638, 1976]


def test_preprocess_writes_manifest(tmp_path):
    src = tmp_path / "in"
    _png(src / "a" / "big.png", np.zeros((50, 120, 3), np.uint8))
    _png(src / "a" / "big_mask.png", np.zeros((50, 120), np.uint8))
    _png(src / "small.jpg", np.zeros((20, 20, 3), np.uint8))
    manifest = preprocess_tree(src, tmp_path / "out", TileSpec(64, 0.2, 0.2))
    on_disk = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert on_disk == manifest
    big = [m for m in manifest if m["source"] == "a/big.png"]
    assert [m["offset"] for m in big] == [[0, 0], [51, 0], [56, 0]]
    assert all(m["size"] == [64, 50] for m in big)
    masks = [m["tile"] for m in manifest if m["source"] == "a/big_mask.png"]
    assert masks[0] == "a/big_x0_y0_mask.png"
    for m in manifest:
        assert (tmp_path / "out" / m["tile"]).is_file()


# --------------------------------------------------------------------------- loading


def _entry(tmp_path, img, mask=None):
    ip = tmp_path / "img.png"
    Image.fromarray(img).save(ip)
    mp = None
    if mask is not None:
        mp = tmp_path / "img_mask.png"
        Image.fromarray(mask).save(mp)
    return DatasetEntry(ip, mp, "test", "scratch" if mask is not None else "good", "x")


def test_load_resizes_to_training_resolution(tmp_path, rng):
    img = rng.integers(0, 256, (1024, 1024, 3), dtype=np.uint8)
    s = load_sample(_entry(tmp_path, img))
    assert s.image.shape == (256, 256, 3)
    assert np.isfinite(s.image).all()
    assert s.mask is None and s.label == 0


def test_zero_mask_resizes_to_zero(tmp_path):
    s = load_sample(_entry(tmp_path, np.zeros((512, 512, 3), np.uint8), np.zeros((512, 512), np.uint8)))
    assert s.mask.shape == (256, 256) and not s.mask.any() and s.label == 1


def test_checkerboard_nearest_neighbour():
    board = (np.indices((4, 4)).sum(0) % 2 * 255).astype(np.uint8)
    out = resize_mask(board, 2)
    # pixel-centre sampling: output (i, j) reads source (2i + 1, 2j + 1)
    expected = (np.indices((2, 2)).sum(0) * 2 + 2) % 2
    assert set(np.unique(out)) <= {0, 1}
    np.testing.assert_array_equal(out, expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 80), st.integers(4, 80), st.integers(2, 64), st.integers(0, 2**31))
def test_resized_masks_stay_binary(h, w, size, seed):
    mask = (np.random.default_rng(seed).random((h, w)) > 0.5).astype(np.uint8) * 255
    out = resize_mask(mask, size)
    assert out.shape == (size, size)
    assert set(np.unique(out)) <= {0, 1}


def test_normalization_uses_teacher_statistics(tmp_path):
    s = load_sample(_entry(tmp_path, np.full((32, 32, 3), 255, np.uint8)), resolution=32)
    np.testing.assert_allclose(s.image[0, 0], (1 - np.array([0.485, 0.456, 0.406])) / np.array([0.229, 0.224, 0.225]), rtol=1e-5)
    raw = load_sample(_entry(tmp_path, np.full((32, 32, 3), 255, np.uint8)), resolution=32, normalize=False)
    assert raw.image.max() == 1.0


def test_decode_failure_names_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DataError, match="broken.png"):
        load_sample(DatasetEntry(bad, None, "train", "good", "b"))
