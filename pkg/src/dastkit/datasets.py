"""Labeled datasets: a procedural synthetic task and the IDX binary format.

The synthetic task draws one soft-edged oriented bar per image; class k means
orientation pi*k/K. It exists so full training runs finish in minutes while
exercising every code path that MNIST-scale data would.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """An IDX file does not follow the format (bad magic, truncation)."""


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


def _bar_image(size: int, angle: float, offset: float, sigma: float,
               rng: np.random.Generator, noise: float) -> np.ndarray:
    center = (size - 1) / 2.0
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    # signed distance of each pixel from the bar's center line
    normal = (-np.sin(angle), np.cos(angle))
    dist = (ii - center) * normal[0] + (jj - center) * normal[1] - offset
    img = np.exp(-(dist ** 2) / (2.0 * sigma ** 2))
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_bars(classes: int, size: int, n_train: int, n_test: int,
                   seed: int = 0, noise: float = 0.08) -> Dataset:
    """Oriented-bar dataset; labels round-robin so class counts differ by <= 1."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    total = n_train + n_test
    labels = np.arange(total) % classes
    images = np.empty((total, 1, size, size), dtype=np.float32)
    max_offset = size / 4.0
    for i, k in enumerate(labels):
        angle = np.pi * k / classes
        offset = rng.uniform(-max_offset, max_offset)
        sigma = rng.uniform(1.0, 1.5)
        images[i, 0] = _bar_image(size, angle, offset, sigma, rng, noise)
    return Dataset(
        train_x=images[:n_train],
        train_y=labels[:n_train].astype(np.int64),
        test_x=images[n_train:],
        test_y=labels[n_train:].astype(np.int64),
        num_classes=classes,
    )


def _read_exact(fh, count: int, path: str) -> bytes:
    offset = fh.tell()
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(
            f"{path}: truncated, wanted {count} bytes at offset {offset} "
            f"but got {len(data)}")
    return data


def load_idx_images(path: str) -> np.ndarray:
    """Parse an IDX image file into float32 [n,1,h,w] scaled to [0,1]."""
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{path}: bad image magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_IMAGE_MAGIC:08x})")
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, path))
        raw = _read_exact(fh, n * h * w, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} images")
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255.0
    return pixels.reshape(n, 1, h, w)


def load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{path}: bad label magic 0x{magic:08x} at offset 0 "
                f"(expected 0x{IDX_LABEL_MAGIC:08x})")
        n, = struct.unpack(">I", _read_exact(fh, 4, path))
        raw = _read_exact(fh, n, path)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {n} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(train_images: str, train_labels: str, test_images: str,
             test_labels: str) -> Dataset:
    tx = load_idx_images(train_images)
    ty = load_idx_labels(train_labels)
    vx = load_idx_images(test_images)
    vy = load_idx_labels(test_labels)
    if tx.shape[0] != ty.shape[0] or vx.shape[0] != vy.shape[0]:
        raise FormatError(
            f"image/label counts disagree: train {tx.shape[0]}/{ty.shape[0]}, "
            f"test {vx.shape[0]}/{vy.shape[0]}")
    classes = int(max(ty.max(), vy.max())) + 1
    return Dataset(tx, ty, vx, vy, classes)


def load_dataset(spec: dict) -> Dataset:
    """Build a dataset from a config table: kind 'synthetic' or 'idx'."""
    kind = spec.get("kind")
    if kind == "synthetic":
        return synthetic_bars(
            classes=int(spec.get("classes", 3)),
            size=int(spec.get("size", 12)),
            n_train=int(spec.get("train", 2000)),
            n_test=int(spec.get("test", 500)),
            seed=int(spec.get("seed", 0)),
            noise=float(spec.get("noise", 0.08)),
        )
    if kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if key not in spec:
                raise ValueError(f"idx dataset spec is missing {key!r}")
        return load_idx(spec["train_images"], spec["train_labels"],
                        spec["test_images"], spec["test_labels"])
    raise ValueError(f"unknown dataset kind {kind!r} (expected synthetic or idx)")
