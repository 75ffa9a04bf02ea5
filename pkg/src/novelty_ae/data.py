"""Dataset ingestion, one-class split construction, and batch streaming.

Three on-disk formats are accepted: IDX (ubyte magic 0x801/0x803), the
CIFAR-10 binary layout (1 label byte + 3072 pixel bytes per record), and a
directory of images with one subdirectory per class. All pixels are decoded
to 32x32 float32 scaled to [-1, 1].
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SIZE = 32

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803


class IngestError(Exception):
    """A dataset file is missing, unreadable, or malformed."""


class ShapeError(Exception):
    """Decoded data has an unexpected shape."""


class SplitError(Exception):
    """A one-class split cannot be built as requested."""


def rescale(raw: np.ndarray) -> np.ndarray:
    """Map uint8-range pixels [0, 255] to [-1, 1]."""
    return np.asarray(raw, dtype=np.float32) / 127.5 - 1.0


def descale(pixels: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rescale`, back to uint8 pixels."""
    raw = (np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.round(raw), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class LabeledImages:
    """A decoded dataset: images, integer labels, optional official split.

    ``test_mask`` marks the dataset's official test partition; it is None
    for sources that do not ship one (flat image directories).
    """

    pixels: np.ndarray  # (n, 32, 32, c) float32 in [-1, 1]
    labels: np.ndarray  # (n,) int64
    test_mask: np.ndarray | None
    source: str

    def __post_init__(self):
        _check_batch(self.pixels)
        if self.labels.shape != (self.pixels.shape[0],):
            raise ShapeError(
                f"{self.pixels.shape[0]} images but {self.labels.shape} labels")
        if self.test_mask is not None and self.test_mask.shape != self.labels.shape:
            raise ShapeError("test mask length does not match the label count")
        self.pixels.setflags(write=False)
        self.labels.setflags(write=False)
        if self.test_mask is not None:
            self.test_mask.setflags(write=False)

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[-1])

    def __len__(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True)
class OneClassSplit:
    """Train/test partitions for a single known class."""

    train_in: np.ndarray
    test_in: np.ndarray
    test_out: np.ndarray
    protocol: str
    known_class: int
    train_in_idx: np.ndarray
    test_in_idx: np.ndarray
    test_out_idx: np.ndarray

    def __post_init__(self):
        for name in ("train_in", "test_in", "test_out",
                     "train_in_idx", "test_in_idx", "test_out_idx"):
            getattr(self, name).setflags(write=False)


def _check_batch(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim != 4:
        raise ShapeError(f"expected rank-4 image batch, got shape {pixels.shape}")
    n, h, w, c = pixels.shape
    if n < 1:
        raise ShapeError("image batch is empty")
    if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) or c not in (1, 3):
        raise ShapeError(f"expected (n, 32, 32, 1|3), got shape {pixels.shape}")
    return pixels


def _resize_to_32(img: np.ndarray) -> np.ndarray:
    """Bilinear-resize an HxW or HxWxC uint8 image to 32x32."""
    if img.shape[0] == IMAGE_SIZE and img.shape[1] == IMAGE_SIZE:
        return img
    pil = Image.fromarray(img)
    pil = pil.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
    return np.asarray(pil)


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path) -> np.ndarray:
    try:
        with _open_maybe_gz(path) as fh:
            data = fh.read()
    except OSError as exc:
        raise IngestError(f"unreadable IDX file {path}: {exc}")
    if len(data) < 8:
        raise IngestError(f"IDX file {path} is truncated")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_MAGIC_LABELS:
        (count,) = struct.unpack(">I", data[4:8])
        body = np.frombuffer(data, dtype=np.uint8, offset=8)
        if body.size != count:
            raise IngestError(f"IDX label file {path}: expected {count} entries, got {body.size}")
        return body.astype(np.int64)
    if magic == IDX_MAGIC_IMAGES:
        count, rows, cols = struct.unpack(">III", data[4:16])
        body = np.frombuffer(data, dtype=np.uint8, offset=16)
        if body.size != count * rows * cols:
            raise IngestError(f"IDX image file {path}: payload size mismatch")
        return body.reshape(count, rows, cols)
    raise IngestError(f"IDX file {path}: unknown magic 0x{magic:08x}")


def _load_idx_dir(root: Path) -> LabeledImages:
    image_files = sorted(p for p in root.iterdir()
                         if "images" in p.name and "idx" in p.name)
    if not image_files:
        raise IngestError(f"no IDX image files (*images*idx*) under {root}")
    pixels, labels, test_flags = [], [], []
    for img_path in image_files:
        lbl_name = img_path.name.replace("images", "labels").replace("idx3", "idx1")
        lbl_path = img_path.with_name(lbl_name)
        if not lbl_path.exists():
            raise IngestError(f"no label file for {img_path} (expected {lbl_path.name})")
        imgs = _read_idx(img_path)
        lbls = _read_idx(lbl_path)
        if imgs.ndim != 3:
            raise ShapeError(f"{img_path} does not hold rank-3 image data")
        if imgs.shape[0] == 0:
            raise IngestError(f"{img_path} holds no images")
        if imgs.shape[0] != lbls.shape[0]:
            raise IngestError(f"{img_path}: {imgs.shape[0]} images vs {lbls.shape[0]} labels")
        resized = np.stack([_resize_to_32(im) for im in imgs])
        pixels.append(resized[..., None])
        labels.append(lbls)
        name = img_path.name.lower()
        is_test = name.startswith("t10k") or "test" in name
        test_flags.append(np.full(lbls.shape[0], is_test, dtype=bool))
    return LabeledImages(
        pixels=rescale(np.concatenate(pixels)),
        labels=np.concatenate(labels),
        test_mask=np.concatenate(test_flags),
        source=str(root),
    )


CIFAR_RECORD = 1 + 3 * 32 * 32


def _read_cifar_bin(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IngestError(f"unreadable CIFAR file {path}: {exc}")
    if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
        raise IngestError(f"CIFAR file {path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    # stored channel-major (R plane, G plane, B plane)
    imgs = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return imgs, labels


def _load_cifar_dir(root: Path) -> LabeledImages:
    train_files = sorted(root.glob("data_batch_*"))
    test_files = sorted(root.glob("test_batch*"))
    if not train_files and not test_files:
        raise IngestError(f"no CIFAR binary batches (data_batch_*/test_batch*) under {root}")
    pixels, labels, test_flags = [], [], []
    for path, is_test in [(p, False) for p in train_files] + [(p, True) for p in test_files]:
        imgs, lbls = _read_cifar_bin(path)
        pixels.append(imgs)
        labels.append(lbls)
        test_flags.append(np.full(lbls.shape[0], is_test, dtype=bool))
    return LabeledImages(
        pixels=rescale(np.concatenate(pixels)),
        labels=np.concatenate(labels),
        test_mask=np.concatenate(test_flags),
        source=str(root),
    )


def _load_image_class_dirs(root: Path) -> tuple[list[np.ndarray], list[int], list[str]]:
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestError(f"no class subdirectories under {root}")
    names = [p.name for p in class_dirs]
    if all(n.lstrip("-").isdigit() for n in names):
        class_ids = {n: int(n) for n in names}
    else:
        class_ids = {n: i for i, n in enumerate(sorted(names))}
    arrays, labels = [], []
    for cdir in class_dirs:
        files = sorted(p for p in cdir.iterdir() if p.is_file())
        for f in files:
            try:
                with Image.open(f) as im:
                    gray = im.mode in ("L", "1", "I;16")
                    im = im.convert("L" if gray else "RGB")
                    arr = np.asarray(im.resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR))
            except Exception as exc:
                raise IngestError(f"unreadable image file {f}: {exc}")
            if arr.ndim == 2:
                arr = arr[..., None]
            arrays.append(arr)
            labels.append(class_ids[cdir.name])
    if not arrays:
        raise IngestError(f"no image files under {root}")
    return arrays, labels, names


def _load_image_dir(root: Path) -> LabeledImages:
    sub = {p.name for p in root.iterdir() if p.is_dir()}
    if {"train", "test"} <= sub:
        tr_arrays, tr_labels, _ = _load_image_class_dirs(root / "train")
        te_arrays, te_labels, _ = _load_image_class_dirs(root / "test")
        arrays = tr_arrays + te_arrays
        labels = tr_labels + te_labels
        test_mask = np.array([False] * len(tr_labels) + [True] * len(te_labels))
    else:
        arrays, labels, _ = _load_image_class_dirs(root)
        test_mask = None
    channels = {a.shape[-1] for a in arrays}
    if len(channels) > 1:  # mixed grayscale/color: promote everything to RGB
        arrays = [np.repeat(a, 3, axis=-1) if a.shape[-1] == 1 else a for a in arrays]
    return LabeledImages(
        pixels=rescale(np.stack(arrays)),
        labels=np.asarray(labels, dtype=np.int64),
        test_mask=test_mask,
        source=str(root),
    )


def load_dataset(source: str | Path, data_format: str) -> LabeledImages:
    """Decode a dataset directory into a :class:`LabeledImages` collection."""
    root = Path(source)
    if not root.exists():
        raise IngestError(f"dataset path does not exist: {root}")
    if data_format == "idx":
        col = _load_idx_dir(root)
    elif data_format == "cifar-binary":
        col = _load_cifar_dir(root)
    elif data_format == "image-directory":
        col = _load_image_dir(root)
    else:
        raise IngestError(f"unknown data format {data_format!r}")
    _check_batch(col.pixels)
    return col


def make_split(collection: LabeledImages, known_class: int, protocol: str,
               seed: int) -> OneClassSplit:
    """Build the one-class train/test partitions for ``known_class``.

    Protocol A: 80% of the in-class samples train, the rest test; an equal
    number of out-class test samples is drawn uniformly (without
    replacement) from all other classes pooled. Protocol B: the official
    train split restricted to the class trains; the full official test
    split tests.
    """
    labels = collection.labels
    in_idx = np.flatnonzero(labels == known_class)
    if in_idx.size == 0:
        raise SplitError(f"class {known_class} not present in dataset labels")
    if in_idx.size < 2:
        raise SplitError(f"class {known_class} has fewer than 2 samples")

    if protocol == "A":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(in_idx)
        n_train = int(round(0.8 * perm.size))
        train_idx = np.sort(perm[:n_train])
        test_in_idx = np.sort(perm[n_train:])
        out_pool = np.flatnonzero(labels != known_class)
        if out_pool.size < test_in_idx.size:
            raise SplitError(
                f"not enough out-class samples: need {test_in_idx.size}, have {out_pool.size}")
        test_out_idx = np.sort(rng.choice(out_pool, size=test_in_idx.size, replace=False))
    elif protocol == "B":
        if collection.test_mask is None:
            raise SplitError("protocol B needs a dataset with an official train/test split")
        test = collection.test_mask
        train_idx = np.flatnonzero((labels == known_class) & ~test)
        test_in_idx = np.flatnonzero((labels == known_class) & test)
        test_out_idx = np.flatnonzero((labels != known_class) & test)
        if train_idx.size < 2:
            raise SplitError(f"class {known_class} has fewer than 2 official training samples")
        if test_in_idx.size == 0 or test_out_idx.size == 0:
            raise SplitError("official test split lacks in-class or out-class samples")
    else:
        raise SplitError(f"unknown protocol {protocol!r}")

    return OneClassSplit(
        train_in=collection.pixels[train_idx],
        test_in=collection.pixels[test_in_idx],
        test_out=collection.pixels[test_out_idx],
        protocol=protocol,
        known_class=int(known_class),
        train_in_idx=train_idx.astype(np.int64),
        test_in_idx=test_in_idx.astype(np.int64),
        test_out_idx=test_out_idx.astype(np.int64),
    )


def save_manifest(split: OneClassSplit, path: str | Path, seed: int | None = None) -> None:
    """Persist the split's record indices for reproducibility."""
    payload = {
        "protocol": split.protocol,
        "known_class": split.known_class,
        "seed": seed,
        "train_in": split.train_in_idx.tolist(),
        "test_in": split.test_in_idx.tolist(),
        "test_out": split.test_out_idx.tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def content_hashes(pixels: np.ndarray) -> set[str]:
    """Per-image content hashes, for leakage checks between partitions."""
    return {hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()
            for img in pixels}


class BatchStream:
    """Infinite uniformly shuffled batch stream over a training set.

    Every yielded batch is exactly ``batch_size`` images; the tail of each
    epoch's permutation wraps into the next reshuffled epoch. The stream's
    RNG position is serializable so an interrupted run can resume exactly.
    """

    def __init__(self, images: np.ndarray, batch_size: int, seed: int):
        images = _check_batch(images)
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if images.shape[0] < 1:
            raise ValueError("empty training set")
        self.images = images
        self.batch_size = int(batch_size)
        self._rng = np.random.default_rng(seed)
        self._queue = np.empty(0, dtype=np.int64)

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        return self.images[self.next_indices()]

    def next_indices(self) -> np.ndarray:
        while self._queue.size < self.batch_size:
            perm = self._rng.permutation(self.images.shape[0])
            self._queue = np.concatenate([self._queue, perm])
        batch, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return batch

    def state(self) -> dict:
        return {
            "rng": self._rng.bit_generator.state,
            "queue": self._queue.tolist(),
        }

    def load_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state["rng"]
        self._queue = np.asarray(state["queue"], dtype=np.int64)


def batches(images: np.ndarray, batch_size: int, seed: int) -> BatchStream:
    """Stream full batches of images, reshuffling every epoch."""
    return BatchStream(images, batch_size, seed)
