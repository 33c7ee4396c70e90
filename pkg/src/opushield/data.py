"""Dataset ingestion: IDX image/label files, desk data export, toy blobs.

The desk-scale default dataset is the bundled scikit-learn handwritten
digits corpus (8x8 images, 10 classes), exported once into standard IDX
files so every production run flows through the same parser that would read
full MNIST. Pixels normalize to [0,1]; labels validate against the class
count; provenance (paths + SHA-256) rides along for reproducibility.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IdxParseError
from .rng import keyed_generator

__all__ = [
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "export_digits_idx",
    "make_two_blobs",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, d) float64 in [0,1]
    labels: np.ndarray  # (n,) int64, < num_classes
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise DataError("inputs fall outside the [0,1] box")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = int(self.labels.max() if self.labels.max() >= self.num_classes else self.labels.min())
            raise DataError(f"label {bad} out of range for {self.num_classes} classes")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def limit(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(
            self.inputs[:n], self.labels[:n], self.num_classes, self.split, self.provenance
        )


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _resolve(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    gz = p.with_name(p.name + ".gz")
    if gz.exists():
        return gz
    raise DataError(f"no such file: {p} (also tried {gz.name})")


class _Reader:
    """Byte reader that reports the offset of any truncation."""

    def __init__(self, f):
        self.f = f
        self.offset = 0

    def exact(self, n: int) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise IdxParseError("unexpected end of file", self.offset + len(data))
        self.offset += n
        return data

    def be32(self) -> int:
        return struct.unpack(">i", self.exact(4))[0]


def load_idx_images(path) -> np.ndarray:
    """Images as (count, rows, cols) uint8; big-endian headers per the format."""
    path = _resolve(path)
    with _open_maybe_gz(path) as f:
        r = _Reader(f)
        magic = r.be32()
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(f"bad image magic 0x{magic:08x}", 0)
        count, rows, cols = r.be32(), r.be32(), r.be32()
        raw = r.exact(count * rows * cols)
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    path = _resolve(path)
    with _open_maybe_gz(path) as f:
        r = _Reader(f)
        magic = r.be32()
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(f"bad label magic 0x{magic:08x}", 0)
        count = r.be32()
        raw = r.exact(count)
    return np.frombuffer(raw, dtype=np.uint8)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_idx(directory, split: str = "train", num_classes: int = 10) -> Dataset:
    """Read one split from a directory of standard-named IDX files."""
    if split not in SPLIT_FILES:
        raise DataError(f"unknown split {split!r}")
    directory = Path(directory)
    img_path = _resolve(directory / SPLIT_FILES[split][0])
    lbl_path = _resolve(directory / SPLIT_FILES[split][1])
    images = load_idx_images(img_path)
    labels = load_idx_labels(lbl_path)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels in {directory}")
    inputs = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(
        inputs,
        labels.astype(np.int64),
        num_classes=num_classes,
        split=split,
        provenance={
            "images": str(img_path),
            "labels": str(lbl_path),
            "images_sha256": _sha256(img_path),
            "labels_sha256": _sha256(lbl_path),
        },
    )


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise DataError("images must be (count, rows, cols)")
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def export_digits_idx(out_dir, train_count: int = 760, seed: int = 0) -> dict:
    """Write the bundled 8x8 digits corpus as IDX train/test splits.

    Pixel values 0..16 rescale to the full uint8 range so the normalized
    inputs span [0,1]. The split is a seeded permutation.
    """
    from sklearn.datasets import load_digits  # bundled data, no download

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bunch = load_digits()
    x = np.round(bunch.data / 16.0 * 255.0).astype(np.uint8).reshape(-1, 8, 8)
    y = bunch.target.astype(np.uint8)
    n = len(x)
    if not (0 < train_count < n):
        raise DataError(f"train_count must be in (0,{n}), got {train_count}")
    perm = keyed_generator(seed, 7).permutation(n)
    x, y = x[perm], y[perm]
    paths = {}
    for split, (img_name, lbl_name) in SPLIT_FILES.items():
        sel = slice(0, train_count) if split == "train" else slice(train_count, n)
        write_idx_images(out_dir / img_name, x[sel])
        write_idx_labels(out_dir / lbl_name, y[sel])
        paths[split] = (str(out_dir / img_name), str(out_dir / lbl_name))
    return paths


def make_two_blobs(
    n: int,
    dim: int,
    seed: int,
    center_low: float = 0.35,
    center_high: float = 0.65,
    std: float = 0.05,
) -> tuple[np.ndarray, np.ndarray]:
    """Linearly separable two-class Gaussian blobs inside the unit box.

    Default centers sit 6 sigma apart per coordinate, so a linear oracle
    reaches >=99% accuracy.
    """
    gen = keyed_generator(seed, 8)
    labels = np.arange(n) % 2
    centers = np.where(labels[:, None] == 0, center_low, center_high)
    x = np.clip(centers + std * gen.standard_normal((n, dim)), 0.0, 1.0)
    return x, labels.astype(np.int64)
