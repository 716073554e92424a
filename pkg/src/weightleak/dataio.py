"""Datasets, image export and run persistence.

Loaders return images as float64 in [0, 1] with shape [N, C, H, W]; no mean or
std standardisation is applied, so PSNR always uses peak 1.0.
"""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .exceptions import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0]} labels for {images.shape[0]} images")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("images must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        images.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


# -- IDX (MNIST) -------------------------------------------------------------


def _read_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{what}: file too short for an IDX header", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated IDX dimension table", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = math.prod(dims)
    if len(raw) < header + count:
        raise FormatError(f"{what}: truncated payload, need {count} bytes after header", len(raw))
    if len(raw) > header + count:
        raise FormatError(f"{what}: {len(raw) - header - count} trailing bytes", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None, channels: int = 1, num_classes: int = 10) -> Dataset:
    """Read an MNIST-style IDX image file (and optional label file).

    ``channels=3`` replicates the grey channel for RGB models. Without a label
    file every label is 0.
    """
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    pixels = _read_idx(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, "images")
    if pixels.ndim != 3:
        raise FormatError(f"images: expected 3 dimensions, got {pixels.ndim}", 3)
    images = (pixels.astype(np.float64) / 255.0)[:, None, :, :]
    if channels == 3:
        images = np.repeat(images, 3, axis=1)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = _read_idx(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, "labels").astype(np.int64)
        if labels.shape != (len(images),):
            raise FormatError(f"labels: {labels.size} labels for {len(images)} images", 4)
        if labels.size and labels.max() >= num_classes:
            raise FormatError(f"labels: value {labels.max()} outside [0, {num_classes})", 8)
    return Dataset(images, labels, num_classes)


# -- CIFAR binary ------------------------------------------------------------


_CIFAR = {"cifar10": (1, 0, 10), "cifar100": (2, 1, 100)}


def load_cifar_binary(path, variant: str = "cifar10") -> Dataset:
    """Read CIFAR-10 (3073-byte) or CIFAR-100 (3074-byte, fine label) records."""
    try:
        n_label_bytes, fine_offset, n_classes = _CIFAR[variant]
    except KeyError:
        raise ValueError(f"unknown CIFAR variant {variant!r}") from None
    raw = Path(path).read_bytes()
    record = n_label_bytes + 3 * 32 * 32
    if len(raw) == 0 or len(raw) % record:
        raise FormatError(
            f"{variant}: size {len(raw)} is not a positive multiple of record length {record}",
            len(raw) - len(raw) % record,
        )
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, fine_offset].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        raise FormatError(
            f"{variant}: label {labels[bad[0]]} outside [0, {n_classes})", int(bad[0]) * record + fine_offset
        )
    images = rows[:, n_label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, n_classes)


# -- synthetic ---------------------------------------------------------------


def synthetic_dataset(n: int, shape=(3, 8, 8), num_classes: int = 10, seed: int = 0,
                      noise: float = 0.05) -> Dataset:
    """Class-conditional smooth images: a per-class low-frequency pattern plus
    per-sample jitter and pixel noise. Label of sample i is ``i % num_classes``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    coarse = (3, 3)
    zoom = (1, h / coarse[0], w / coarse[1])
    patterns = np.stack([
        ndimage.zoom(rng.uniform(0.1, 0.9, size=(c, *coarse)), zoom, order=1, mode="nearest", grid_mode=True)
        for _ in range(num_classes)
    ])
    labels = np.arange(n) % num_classes
    images = np.empty((n, c, h, w))
    for i, label in enumerate(labels):
        jitter = ndimage.zoom(rng.normal(0, 0.08, size=(c, *coarse)), zoom, order=1, mode="nearest", grid_mode=True)
        images[i] = patterns[label] + jitter + rng.normal(0, noise, size=(c, h, w))
    return Dataset(np.clip(images, 0.0, 1.0), labels, num_classes)


# -- image export ------------------------------------------------------------


def quantize(image) -> np.ndarray:
    """[0, 1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_image(image, path, format: str | None = None) -> None:
    """Write a [C, H, W] (C in {1, 3}) image as binary PGM (P5) or PPM (P6)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"export_image expects [1|3, H, W], got {image.shape}")
    fmt = format or ("pgm" if image.shape[0] == 1 else "ppm")
    if fmt == "pgm" and image.shape[0] != 1 or fmt == "ppm" and image.shape[0] != 3 or fmt not in ("pgm", "ppm"):
        raise ValueError(f"format {fmt!r} does not fit a {image.shape[0]}-channel image")
    _, h, w = image.shape
    magic = b"P5" if fmt == "pgm" else b"P6"
    body = quantize(image).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode() + body)


def read_pnm(path) -> np.ndarray:
    """Parse a P5/P6 file written by :func:`export_image`; returns uint8 [C, H, W]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"unsupported PNM header {fields}", 0)
    c = 1 if magic == b"P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=pos)
    return data.reshape(h, w, c).transpose(2, 0, 1)


# -- results -----------------------------------------------------------------


def write_results(records: Iterable[dict], path) -> None:
    """Append one JSON object per line; each line is flushed as written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


def read_results(path) -> list[dict]:
    """Read a JSONL file, skipping a torn final line left by a crash."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    out = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break  # partial last write
            raise
    return out


SUMMARY_FIELDS = ["algorithm", "acc", "psnr", "ssim", "n_trials", "seed_base"]


def write_summary_csv(rows: Iterable[dict], path, fields=SUMMARY_FIELDS) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
