"""FER2013-format data pipeline.

The source format is a CSV with header ``emotion,pixels``: an integer label
0..6 and 2304 space-separated grayscale values 0..255 per row (48x48,
row-major). A trailing ``Usage`` column, if present, is ignored.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .tensor import Rng

IMAGE_SIDE = 48
PIXELS_PER_IMAGE = IMAGE_SIDE * IMAGE_SIDE  # 2304
NUM_CLASSES = 7
EMOTIONS = ("angry", "disgusted", "fearful", "happy", "sad", "surprised",
            "neutral")


class DataError(ValueError):
    """Malformed dataset file; message carries the offending row number."""


@dataclass
class Example:
    label: int
    pixels: np.ndarray  # 2304 floats in [0,1]


class Dataset:
    """Ordered, immutable collection of labeled images.

    Pixels are stored as float32 in [0,1] (source values divided by 255);
    order is preserved from the source file.
    """

    def __init__(self, labels: np.ndarray, pixels: np.ndarray,
                 provenance: str = ""):
        labels = np.asarray(labels, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=np.float32)
        if pixels.ndim != 2 or pixels.shape[1] != PIXELS_PER_IMAGE:
            raise DataError(f"pixels must be [N,{PIXELS_PER_IMAGE}], got {pixels.shape}")
        if labels.shape != (pixels.shape[0],):
            raise DataError("labels/pixels length mismatch")
        self.labels = labels
        self.pixels = pixels
        self.provenance = provenance

    def __len__(self) -> int:
        return len(self.labels)

    def example(self, i: int) -> Example:
        return Example(int(self.labels[i]), self.pixels[i])

    def slice(self, start: int, stop: int, note: str = "") -> "Dataset":
        return Dataset(self.labels[start:stop], self.pixels[start:stop],
                       note or f"{self.provenance}[{start}:{stop}]")

    def head(self, n: int) -> "Dataset":
        return self.slice(0, min(n, len(self)))


def _parse_pixel_field(field: str, row_num: int) -> np.ndarray:
    parts = field.split()
    if len(parts) != PIXELS_PER_IMAGE:
        raise DataError(
            f"row {row_num}: expected {PIXELS_PER_IMAGE} pixel values, got {len(parts)}")
    try:
        vals = np.array(parts, dtype=np.int64)
    except ValueError:
        raise DataError(f"row {row_num}: malformed pixel integer") from None
    if vals.min() < 0 or vals.max() > 255:
        raise DataError(f"row {row_num}: pixel value outside 0..255")
    return vals


def _parse_label(field: str, row_num: int) -> int:
    try:
        label = int(field)
    except ValueError:
        raise DataError(f"row {row_num}: malformed label {field!r}") from None
    if not 0 <= label < NUM_CLASSES:
        raise DataError(f"row {row_num}: label {label} outside 0..{NUM_CLASSES - 1}")
    return label


def parse_fer_csv(path) -> Dataset:
    """Parse a FER2013-format CSV into a Dataset (pixels scaled to [0,1])."""
    labels = []
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file: missing header") from None
        if len(header) < 2 or header[0].strip().lower() != "emotion" \
                or header[1].strip().lower() != "pixels":
            raise DataError(f"bad header {header!r}, expected emotion,pixels")
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise DataError(f"row {row_num}: expected 2 columns, got {len(row)}")
            labels.append(_parse_label(row[0], row_num))
            rows.append(_parse_pixel_field(row[1], row_num))
    if rows:
        pixels = np.stack(rows).astype(np.float32) / 255.0
    else:
        pixels = np.zeros((0, PIXELS_PER_IMAGE), dtype=np.float32)
    return Dataset(np.array(labels, dtype=np.int64), pixels, provenance=str(path))


def write_fer_csv(dataset: Dataset, path):
    """Inverse of parse_fer_csv (pixels rescaled to 0..255 and rounded)."""
    raw = np.rint(dataset.pixels * 255.0).astype(np.int64)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("emotion,pixels\n")
        for label, row in zip(dataset.labels, raw):
            f.write(f"{label},{' '.join(map(str, row))}\n")


def split_label_pixel_files(dataset: Dataset, labels_path, pixels_path):
    """Write a one-label-per-line file and a one-image-per-line pixel file;
    line i of each corresponds to example i."""
    raw = np.rint(dataset.pixels * 255.0).astype(np.int64)
    with open(labels_path, "w", newline="", encoding="utf-8") as f:
        f.write("emotion\n")
        for label in dataset.labels:
            f.write(f"{label}\n")
    with open(pixels_path, "w", newline="", encoding="utf-8") as f:
        f.write("pixels\n")
        for row in raw:
            f.write(" ".join(map(str, row)) + "\n")


def recombine_label_pixel_files(labels_path, pixels_path) -> Dataset:
    """Rejoin the two files written by split_label_pixel_files."""
    with open(labels_path, newline="", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip().lower() != "emotion":
        raise DataError(f"bad labels header in {labels_path}")
    labels = [_parse_label(s, i) for i, s in enumerate(lines[1:], start=2)]
    with open(pixels_path, newline="", encoding="utf-8") as f:
        plines = f.read().splitlines()
    if not plines or plines[0].strip().lower() != "pixels":
        raise DataError(f"bad pixels header in {pixels_path}")
    rows = [_parse_pixel_field(s, i) for i, s in enumerate(plines[1:], start=2)]
    if len(labels) != len(rows):
        raise DataError("labels and pixels files have different lengths")
    if rows:
        pixels = np.stack(rows).astype(np.float32) / 255.0
    else:
        pixels = np.zeros((0, PIXELS_PER_IMAGE), dtype=np.float32)
    return Dataset(np.array(labels, dtype=np.int64), pixels,
                   provenance=f"{labels_path}+{pixels_path}")


# 15-byte header (comment line included) so every file is exactly 2319 bytes.
PGM_HEADER = b"P5\n#\n48 48\n255\n"


def export_images(dataset: Dataset, out_dir, limit: int | None = None) -> int:
    """Write one binary PGM per example, named ``{index:05}_{label}.pgm``.

    Returns the number of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    raw = np.rint(dataset.pixels[:n] * 255.0).astype(np.uint8)
    for i in range(n):
        name = f"{i:05}_{int(dataset.labels[i])}.pgm"
        with open(os.path.join(out_dir, name), "wb") as f:
            f.write(PGM_HEADER)
            f.write(raw[i].tobytes())
    return n


def read_pgm(path) -> np.ndarray:
    """Read back a 48x48 maxval-255 binary PGM written by export_images."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(PGM_HEADER):
        raise DataError(f"unexpected PGM header in {path}")
    payload = blob[len(PGM_HEADER):]
    if len(payload) != PIXELS_PER_IMAGE:
        raise DataError(f"PGM payload is {len(payload)} bytes, expected {PIXELS_PER_IMAGE}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE)


def train_val_split(dataset: Dataset, train_count: int = 24000):
    """Positional split: the first train_count examples are the training
    set, the rest the validation set. No shuffling."""
    if not 0 < train_count < len(dataset):
        raise DataError(
            f"train_count must be in (0, {len(dataset)}), got {train_count}")
    return (dataset.slice(0, train_count, f"{dataset.provenance}[train]"),
            dataset.slice(train_count, len(dataset), f"{dataset.provenance}[val]"))


def class_histogram(dataset: Dataset) -> np.ndarray:
    """Per-class example counts; counts sum to len(dataset)."""
    return np.bincount(dataset.labels, minlength=NUM_CLASSES).astype(np.int64)


def batches(dataset: Dataset, batch_size: int, shuffle: bool = False,
            rng: Rng | None = None):
    """Yield (images [B,1,48,48] float32, labels [B] int64) batches.

    Shuffling draws one Fisher-Yates permutation per call from the given
    Rng; the final partial batch is kept.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True requires an Rng")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        images = dataset.pixels[idx].reshape(len(idx), 1, IMAGE_SIDE, IMAGE_SIDE)
        yield images, dataset.labels[idx]
