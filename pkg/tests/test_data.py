"""Dataset ingestion, rescaling, splits, and the batch stream."""

import gzip

import numpy as np
import pytest

from dataset_factory import (build_cifar_binary, write_idx_images,
                             write_idx_labels)
from novelty_ae.data import (BatchStream, IngestError, LabeledImages,
                             ShapeError, SplitError, content_hashes, descale,
                             load_dataset, load_manifest, make_split, rescale,
                             save_manifest)


def _idx_dir(tmp_path, n_train=40, n_test=20, classes=4, size=32, seed=0):
    rng = np.random.default_rng(seed)
    root = tmp_path / "idx"
    root.mkdir()
    write_idx_images(root / "train-images-idx3-ubyte",
                     rng.integers(0, 256, (n_train, size, size), dtype=np.uint8))
    write_idx_labels(root / "train-labels-idx1-ubyte",
                     rng.integers(0, classes, n_train).astype(np.uint8))
    if n_test:
        write_idx_images(root / "t10k-images-idx3-ubyte",
                         rng.integers(0, 256, (n_test, size, size), dtype=np.uint8))
        write_idx_labels(root / "t10k-labels-idx1-ubyte",
                         rng.integers(0, classes, n_test).astype(np.uint8))
    return root


# -- value scaling -------------------------------------------------------

def test_rescale_maps_uint8_range_to_unit_interval():
    raw = np.array([0, 127.5, 255], dtype=np.float64)
    assert rescale(raw) == pytest.approx([-1.0, 0.0, 1.0])


def test_descale_inverts_rescale():
    raw = np.arange(256, dtype=np.float64)
    assert np.array_equal(descale(rescale(raw)), raw.astype(np.uint8))


# -- IDX ingestion -------------------------------------------------------

def test_idx_round_trip_and_official_split(tmp_path):
    root = _idx_dir(tmp_path)
    col = load_dataset(root, "idx")
    assert len(col) == 60
    assert col.pixels.shape == (60, 32, 32, 1)
    assert col.channels == 1
    assert col.test_mask.sum() == 20
    assert col.pixels.min() >= -1.0 and col.pixels.max() <= 1.0


def test_idx_pixels_match_source_bytes(tmp_path):
    rng = np.random.default_rng(7)
    imgs = rng.integers(0, 256, (5, 32, 32), dtype=np.uint8)
    root = tmp_path / "d"
    root.mkdir()
    write_idx_images(root / "train-images-idx3-ubyte", imgs)
    write_idx_labels(root / "train-labels-idx1-ubyte", np.zeros(5, dtype=np.uint8))
    col = load_dataset(root, "idx")
    assert np.array_equal(descale(col.pixels[..., 0]), imgs)


def test_idx_small_images_are_upscaled(tmp_path):
    rng = np.random.default_rng(3)
    root = tmp_path / "d"
    root.mkdir()
    write_idx_images(root / "train-images-idx3-ubyte",
                     rng.integers(0, 256, (4, 8, 8), dtype=np.uint8))
    write_idx_labels(root / "train-labels-idx1-ubyte", np.arange(4, dtype=np.uint8))
    col = load_dataset(root, "idx")
    assert col.pixels.shape == (4, 32, 32, 1)


def test_idx_gzip_supported(tmp_path):
    rng = np.random.default_rng(5)
    imgs = rng.integers(0, 256, (3, 32, 32), dtype=np.uint8)
    root = tmp_path / "d"
    root.mkdir()
    plain = write_idx_images(tmp_path / "scratch", imgs)
    (root / "train-images-idx3-ubyte.gz").write_bytes(
        gzip.compress(plain.read_bytes()))
    lbl = write_idx_labels(tmp_path / "scratch2", np.zeros(3, dtype=np.uint8))
    (root / "train-labels-idx1-ubyte.gz").write_bytes(
        gzip.compress(lbl.read_bytes()))
    col = load_dataset(root, "idx")
    assert np.array_equal(descale(col.pixels[..., 0]), imgs)


def test_idx_truncated_file_rejected(tmp_path):
    root = _idx_dir(tmp_path)
    img_file = root / "train-images-idx3-ubyte"
    img_file.write_bytes(img_file.read_bytes()[:-10])
    with pytest.raises(IngestError):
        load_dataset(root, "idx")


def test_idx_count_mismatch_rejected(tmp_path):
    root = tmp_path / "d"
    root.mkdir()
    rng = np.random.default_rng(0)
    write_idx_images(root / "train-images-idx3-ubyte",
                     rng.integers(0, 256, (4, 32, 32), dtype=np.uint8))
    write_idx_labels(root / "train-labels-idx1-ubyte", np.zeros(5, dtype=np.uint8))
    with pytest.raises(IngestError, match="4 images vs 5 labels"):
        load_dataset(root, "idx")


def test_idx_missing_labels_rejected(tmp_path):
    root = tmp_path / "d"
    root.mkdir()
    write_idx_images(root / "train-images-idx3-ubyte",
                     np.zeros((2, 32, 32), dtype=np.uint8))
    with pytest.raises(IngestError, match="label"):
        load_dataset(root, "idx")


def test_empty_directory_rejected(tmp_path):
    with pytest.raises(IngestError):
        load_dataset(tmp_path, "idx")


# -- CIFAR binary ingestion ------------------------------------------------

def test_cifar_binary_layout(tmp_path):
    root = build_cifar_binary(tmp_path / "cifar", n_train=40, n_test=20)
    col = load_dataset(root, "cifar-binary")
    assert col.pixels.shape == (60, 32, 32, 3)
    assert col.channels == 3
    assert col.test_mask.sum() == 20


def test_cifar_channel_order_is_planar_rgb(tmp_path):
    root = tmp_path / "c"
    root.mkdir()
    img = np.zeros((3, 32, 32), dtype=np.uint8)
    img[0] += 255  # all-red image in planar layout
    (root / "data_batch_1.bin").write_bytes(bytes([2]) + img.tobytes())
    (root / "test_batch.bin").write_bytes(bytes([2]) + img.tobytes())
    col = load_dataset(root, "cifar-binary")
    rgb = descale(col.pixels[0])
    assert rgb[..., 0].min() == 255
    assert rgb[..., 1].max() == 0 and rgb[..., 2].max() == 0
    assert col.labels[0] == 2


def test_cifar_truncated_record_rejected(tmp_path):
    root = build_cifar_binary(tmp_path / "cifar")
    f = root / "data_batch_1.bin"
    f.write_bytes(f.read_bytes()[:-7])
    with pytest.raises(IngestError):
        load_dataset(root, "cifar-binary")


# -- image-directory ingestion ---------------------------------------------

def test_image_directory_class_folders(tmp_path):
    from PIL import Image

    root = tmp_path / "imgs"
    rng = np.random.default_rng(11)
    for split in ("train", "test"):
        for cls in ("0", "1"):
            d = root / split / cls
            d.mkdir(parents=True)
            for i in range(3):
                arr = rng.integers(0, 256, (48, 48), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"im_{i}.png")
    col = load_dataset(root, "image-directory")
    assert col.pixels.shape == (12, 32, 32, 1)
    assert col.test_mask.sum() == 6
    assert set(np.unique(col.labels)) == {0, 1}


# -- protocol splits ---------------------------------------------------------

def test_protocol_a_sizes_and_leakage(tmp_path):
    root = _idx_dir(tmp_path, n_train=80, n_test=0, classes=4)
    col = load_dataset(root, "idx")
    split = make_split(col, 0, "A", seed=123)
    n_in = int((col.labels == 0).sum())
    assert split.train_in.shape[0] == int(round(0.8 * n_in))
    assert split.test_in.shape[0] == n_in - split.train_in.shape[0]
    # matched out-class sample size
    assert split.test_out.shape[0] == split.test_in.shape[0]
    # no index appears on both sides
    assert not set(split.train_in_idx) & set(split.test_in_idx)
    assert not set(split.train_in_idx) & set(split.test_out_idx)
    # content-level leakage check
    assert not content_hashes(split.train_in) & content_hashes(split.test_in)


def test_protocol_a_is_seed_deterministic(tmp_path):
    root = _idx_dir(tmp_path, n_train=60, n_test=0)
    col = load_dataset(root, "idx")
    a = make_split(col, 1, "A", seed=9)
    b = make_split(col, 1, "A", seed=9)
    c = make_split(col, 1, "A", seed=10)
    assert np.array_equal(a.train_in_idx, b.train_in_idx)
    assert np.array_equal(a.test_out_idx, b.test_out_idx)
    assert not np.array_equal(a.train_in_idx, c.train_in_idx)


def test_protocol_a_out_samples_never_in_class(tmp_path):
    root = _idx_dir(tmp_path, n_train=80, n_test=0)
    col = load_dataset(root, "idx")
    split = make_split(col, 2, "A", seed=4)
    assert (col.labels[split.test_out_idx] != 2).all()


def test_protocol_b_uses_official_partition(tmp_path):
    root = _idx_dir(tmp_path)
    col = load_dataset(root, "idx")
    split = make_split(col, 1, "B", seed=0)
    assert (~col.test_mask[split.train_in_idx]).all()
    assert col.test_mask[split.test_in_idx].all()
    assert col.test_mask[split.test_out_idx].all()
    assert (col.labels[split.train_in_idx] == 1).all()
    assert (col.labels[split.test_out_idx] != 1).all()
    # every official test sample is used exactly once
    assert len(split.test_in_idx) + len(split.test_out_idx) == col.test_mask.sum()


def test_protocol_b_requires_official_split():
    rng = np.random.default_rng(0)
    col = LabeledImages(
        pixels=rescale(rng.integers(0, 256, (10, 32, 32, 1)).astype(np.float32)),
        labels=np.repeat([0, 1], 5), test_mask=None, source="mem")
    with pytest.raises(SplitError):
        make_split(col, 0, "B", seed=0)


def test_missing_class_rejected(tmp_path):
    root = _idx_dir(tmp_path, classes=3)
    col = load_dataset(root, "idx")
    with pytest.raises(SplitError):
        make_split(col, 9, "A", seed=0)


def test_split_manifest_round_trip(tmp_path):
    root = _idx_dir(tmp_path)
    col = load_dataset(root, "idx")
    split = make_split(col, 1, "B", seed=0)
    save_manifest(split, tmp_path / "m.json", seed=0)
    m = load_manifest(tmp_path / "m.json")
    assert m["known_class"] == 1 and m["protocol"] == "B"
    assert m["train_in"] == split.train_in_idx.tolist()
    assert m["test_out"] == split.test_out_idx.tolist()


def test_labeled_images_shape_checked():
    with pytest.raises(ShapeError):
        LabeledImages(pixels=np.zeros((4, 16, 16, 1), dtype=np.float32),
                      labels=np.zeros(4, dtype=np.int64), test_mask=None,
                      source="mem")


# -- batch stream -----------------------------------------------------------

def _images(n, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 32, 32, 1)).astype(np.float32)


def test_stream_batches_are_exact_size_and_cover_epoch():
    stream = BatchStream(_images(10), batch_size=3, seed=0)
    seen = np.concatenate([stream.next_indices() for _ in range(10)])
    assert all(len(stream.next_indices()) == 3 for _ in range(5))
    # each of the first 10 draws (30 indices = 3 epochs) hits every image 3x
    counts = np.bincount(seen, minlength=10)
    assert (counts == 3).all()


def test_stream_wraps_partial_epochs_without_repeats_within_epoch():
    stream = BatchStream(_images(5), batch_size=2, seed=1)
    seen = np.concatenate([stream.next_indices() for _ in range(5)])
    counts = np.bincount(seen, minlength=5)
    assert (counts == 2).all()  # two full epochs, no image over/under-drawn


def test_stream_state_round_trip_resumes_identically():
    a = BatchStream(_images(7), batch_size=3, seed=2)
    for _ in range(4):
        a.next_indices()
    state = a.state()
    upcoming = [a.next_indices() for _ in range(6)]

    b = BatchStream(_images(7), batch_size=3, seed=999)
    b.load_state(state)
    resumed = [b.next_indices() for _ in range(6)]
    for x, y in zip(upcoming, resumed):
        assert np.array_equal(x, y)


def test_stream_is_seed_deterministic():
    a = BatchStream(_images(9), 4, seed=5)
    b = BatchStream(_images(9), 4, seed=5)
    for _ in range(7):
        assert np.array_equal(a.next_indices(), b.next_indices())


def test_stream_rejects_empty_or_bad_sizes():
    with pytest.raises(ValueError):
        BatchStream(_images(4), 0, seed=0)
    with pytest.raises(ShapeError):
        BatchStream(np.zeros((0, 32, 32, 1), dtype=np.float32), 2, seed=0)
