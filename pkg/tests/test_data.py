"""Dataset indexing, splits, manifests, decoding, and the bilinear resizer."""

import os

import numpy as np
import pytest
from PIL import Image

from emergencynet.data import (
    DEFAULT_RATIOS,
    SPLIT_NAMES,
    DatasetIndex,
    decode_image,
    decode_resize,
    index_dataset,
    load_arrays,
    read_manifest,
    resize_bilinear,
    stratified_split,
    synthetic_dataset,
    to_chw,
    write_manifest,
)


@pytest.fixture
def image_tree(tmp_path):
    rng = np.random.default_rng(0)
    counts = {"calm": 10, "event": 7, "haze": 5}
    for cname, n in counts.items():
        d = tmp_path / cname
        d.mkdir()
        for i in range(n):
            arr = rng.integers(0, 256, size=(12, 16, 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img{i:02d}.png")
    return tmp_path, counts


def test_index_dataset_scans_sorted_classes(image_tree):
    root, counts = image_tree
    index = index_dataset(str(root))
    assert index.class_names == ["calm", "event", "haze"]
    assert len(index) == sum(counts.values())
    assert list(index.class_counts()) == [10, 7, 5]
    assert all("/" in p for p in index.paths)


def test_index_dataset_attaches_splits_by_default(image_tree):
    root, _ = image_tree
    index = index_dataset(str(root), seed=5)
    assert set(index.splits) == set(SPLIT_NAMES)
    joined = np.concatenate([index.splits[s] for s in SPLIT_NAMES])
    assert sorted(joined) == list(range(len(index)))
    assert index.split_ids("train").size > 0
    assert index_dataset(str(root), ratios=None).splits is None
    with pytest.raises(ValueError):
        index_dataset(str(root), ratios=None).split_ids("train")
    with pytest.raises(ValueError):
        index_dataset(str(root)).split_ids("holdout")


def test_index_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        index_dataset(str(tmp_path / "missing"))
    with pytest.raises(ValueError):
        index_dataset(str(tmp_path))  # no class subdirectories
    empty = tmp_path / "empty_class"
    empty.mkdir()
    with pytest.raises(ValueError):
        index_dataset(str(tmp_path))


def _fake_index(class_sizes):
    paths, labels = [], []
    for c, n in enumerate(class_sizes):
        for i in range(n):
            paths.append(f"c{c}/{i}.png")
            labels.append(c)
    return DatasetIndex("/nowhere", [f"c{c}" for c in range(len(class_sizes))],
                        paths, np.asarray(labels, dtype=np.int64))


def test_stratified_split_ratio_arithmetic():
    splits = stratified_split(_fake_index([700]), DEFAULT_RATIOS, seed=0)
    assert [splits[s].size for s in SPLIT_NAMES] == [350, 140, 210]


def test_stratified_split_remainder_goes_train_first():
    # 7 samples at (0.5, 0.2, 0.3) floor to 3/1/2 with one leftover
    splits = stratified_split(_fake_index([7]), DEFAULT_RATIOS, seed=0)
    assert [splits[s].size for s in SPLIT_NAMES] == [4, 1, 2]


def test_stratified_split_partitions_every_class(image_tree):
    root, counts = image_tree
    index = index_dataset(str(root), ratios=None)
    splits = stratified_split(index, seed=3)
    joined = np.concatenate([splits[s] for s in SPLIT_NAMES])
    assert sorted(joined) == list(range(len(index)))
    # per class, split sizes differ from the exact ratio by < 1 sample
    for c, n in enumerate(index.class_counts()):
        for s, r in zip(SPLIT_NAMES, DEFAULT_RATIOS):
            got = np.sum(index.labels[splits[s]] == c)
            assert abs(got - n * r) < 1.0


def test_stratified_split_deterministic():
    a = stratified_split(_fake_index([13, 9]), seed=11)
    b = stratified_split(_fake_index([13, 9]), seed=11)
    c = stratified_split(_fake_index([13, 9]), seed=12)
    for s in SPLIT_NAMES:
        np.testing.assert_array_equal(a[s], b[s])
    assert any(not np.array_equal(a[s], c[s]) for s in SPLIT_NAMES)


def test_stratified_split_validates_ratios():
    with pytest.raises(ValueError):
        stratified_split(_fake_index([5]), (0.5, 0.2))
    with pytest.raises(ValueError):
        stratified_split(_fake_index([5]), (0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        stratified_split(_fake_index([5]), (1.2, -0.1, -0.1))


def test_manifest_roundtrip(image_tree, tmp_path):
    root, _ = image_tree
    index = index_dataset(str(root), ratios=None)
    splits = stratified_split(index, seed=1)
    path = str(tmp_path / "manifest.tsv")
    write_manifest(index, splits, path)
    loaded = read_manifest(index, path)
    for s in SPLIT_NAMES:
        np.testing.assert_array_equal(loaded[s], splits[s])
    assert not os.path.exists(path + ".tmp")


def test_manifest_rejects_gaps_and_junk(image_tree, tmp_path):
    root, _ = image_tree
    index = index_dataset(str(root), ratios=None)
    splits = stratified_split(index, seed=1)
    path = str(tmp_path / "manifest.tsv")
    write_manifest(index, splits, path)

    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines[1:])  # drop one sample
    with pytest.raises(ValueError):
        read_manifest(index, path)

    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines + ["calm/img00.png\tcanary\n"])
    with pytest.raises(ValueError):
        read_manifest(index, path)

    incomplete = {s: v for s, v in splits.items()}
    incomplete["train"] = incomplete["train"][1:]
    with pytest.raises(ValueError):
        write_manifest(index, incomplete, path)


def test_decode_image_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 256, size=(9, 11, 3), dtype=np.uint8)
    p = str(tmp_path / "x.png")
    Image.fromarray(arr).save(p)
    np.testing.assert_array_equal(decode_image(p), arr)


def test_resize_bilinear_identity_and_constants():
    rng = np.random.default_rng(1)
    img = rng.random((10, 12, 3)).astype(np.float32) * 255
    np.testing.assert_array_equal(resize_bilinear(img, (10, 12)), img)
    solid = np.full((20, 20, 3), 37.0, dtype=np.float32)
    np.testing.assert_allclose(resize_bilinear(solid, (240, 240)), 37.0, atol=1e-4)


def test_resize_bilinear_matches_reference_within_one():
    # independent reference: PIL's bilinear resampler on the same pattern
    rng = np.random.default_rng(5)
    src = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    ours = resize_bilinear(src.astype(np.float32), (240, 240))
    ref = np.asarray(Image.fromarray(src).resize((240, 240), Image.BILINEAR), dtype=np.float32)
    assert np.abs(ours - ref).max() <= 1.0


def test_resize_bilinear_validation():
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((4, 4, 3)), (0, 10))
    with pytest.raises(ValueError):
        resize_bilinear(np.zeros((4, 4, 3, 1)), (8, 8))


def test_to_chw_layout():
    img = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    chw = to_chw(img)
    assert chw.shape == (3, 2, 4)
    assert chw.flags["C_CONTIGUOUS"]
    assert chw[1, 0, 2] == img[0, 2, 1]
    with pytest.raises(ValueError):
        to_chw(np.zeros((2, 4, 4)))


def test_decode_resize_contract(tmp_path):
    rng = np.random.default_rng(2)
    arr = rng.integers(0, 256, size=(64, 48, 3), dtype=np.uint8)
    p = str(tmp_path / "y.png")
    Image.fromarray(arr).save(p)
    x = decode_resize(p)  # defaults to 240
    assert x.shape == (1, 3, 240, 240)
    assert x.dtype == np.float32
    assert x.min() >= 0.0 and x.max() <= 255.0
    # exact-size decode is a pure layout change
    same = decode_resize(p, (64, 48))
    np.testing.assert_array_equal(same[0], to_chw(arr.astype(np.float32)))


def test_load_arrays_batches(image_tree):
    root, _ = image_tree
    index = index_dataset(str(root), seed=0)
    ids = index.split_ids("val")
    x, y = load_arrays(index, ids, target=(12, 16))
    assert x.shape == (ids.size, 3, 12, 16)
    np.testing.assert_array_equal(y, index.labels[ids])
    with pytest.raises(ValueError):
        load_arrays(index, np.empty(0, dtype=np.int64))


def test_synthetic_dataset_contract():
    x, y = synthetic_dataset(num_classes=5, per_class=8, hw=(32, 32), seed=4)
    assert x.shape == (40, 3, 32, 32)
    assert x.dtype == np.float32
    assert x.min() >= 0.0 and x.max() <= 255.0
    assert list(np.bincount(y)) == [8] * 5
    x2, y2 = synthetic_dataset(num_classes=5, per_class=8, hw=(32, 32), seed=4)
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)
    with pytest.raises(ValueError):
        synthetic_dataset(num_classes=1)
