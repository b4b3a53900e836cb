"""Synthetic class-structured images and the raw ``LCIM`` image file format.

Raw files are little-endian::

    magic "LCIM" | version u32 | count u32 | H u16 | W u16 | C u8 | labels u8
    count * H * W * C bytes (HWC order per image)
    count u16 labels (only when the labels flag is 1)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["ImageDataset", "PATTERNS", "make_synthetic", "write_raw", "read_raw", "RAW_MAGIC", "RAW_VERSION"]

RAW_MAGIC = b"LCIM"
RAW_VERSION = 1
_HEADER = struct.Struct("<4sIIHHBB")


@dataclass
class ImageDataset:
    """Images ``(N, C, H, W)`` as uint8 and optional integer labels."""

    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("need one label per image")

    def __len__(self):
        return len(self.images)

    def as_float(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        if imgs.dtype == np.uint8:
            return imgs.astype(np.float64) / 255.0
        return imgs.astype(np.float64)

    def split(self, fraction: float, seed: int = 0):
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(len(self) * fraction))
        a, b = order[:cut], order[cut:]
        labels = self.labels
        return (ImageDataset(self.images[a], None if labels is None else labels[a]),
                ImageDataset(self.images[b], None if labels is None else labels[b]))


def _grid(h, w):
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return yy / h - 0.5, xx / w - 0.5


_TINTS = np.array([[1.0, 1.0, 1.0], [1.0, 0.8, 0.6], [0.6, 0.8, 1.0], [0.8, 1.0, 0.7]])
PATTERNS = ("hstripes", "vstripes", "checker", "rings", "dots")


def _pattern(kind, yy, xx, period, phase, center):
    def wave(u):
        return np.mod(u / period + phase, 1.0) < 0.5
    if kind == "hstripes":
        return wave(yy)
    if kind == "vstripes":
        return wave(xx)
    if kind == "checker":
        return wave(yy) ^ wave(xx)
    if kind == "rings":
        return wave(np.hypot(yy - center[0], xx - center[1]))
    return wave(yy) & wave(xx)


def make_synthetic(n: int, seed: int = 0, hw=(32, 32), n_classes: int = 10) -> ImageDataset:
    """Seeded class-structured images.

    A class fixes a binary texture (horizontal or vertical stripes, checker,
    rings, dots) and its scale (coarse or fine period, 3x apart). Contrast,
    phase, a distractor blob and pixel noise vary per image; color is a gray
    level under one of a few shared tints. The class is
    unchanged by flips, moderate crops and color jitter, so contrastive
    views of one image share its label.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= n_classes <= 2 * len(PATTERNS):
        raise ValueError(f"n_classes must lie in [2, {2 * len(PATTERNS)}]")
    h, w = hw
    rng = np.random.default_rng(seed)
    yy, xx = _grid(h, w)
    labels = rng.integers(0, n_classes, size=n)
    images = np.empty((n, 3, h, w), dtype=np.uint8)
    for i, c in enumerate(labels):
        kind = PATTERNS[c % len(PATTERNS)]
        period = (0.6 if c < len(PATTERNS) else 0.2) * rng.uniform(0.9, 1.1)
        center = rng.uniform(-0.3, 0.3, size=2)
        tex = _pattern(kind, yy, xx, period, rng.uniform(0, 1), center).astype(np.float64)
        lo, hi = np.sort(rng.uniform(0, 1, size=2))
        if hi - lo < 0.3:
            lo, hi = max(lo - 0.15, 0.0), min(hi + 0.15, 1.0)
        fg, bg = (hi, lo) if rng.random() < 0.5 else (lo, hi)
        tint = _TINTS[rng.integers(len(_TINTS))]
        bc = rng.uniform(0, 1) * tint
        img = (tex * fg + (1 - tex) * bg)[None] * tint[:, None, None]
        cy, cx = rng.uniform(-0.4, 0.4, size=2)
        r = rng.uniform(0.05, 0.12)
        blob = (((yy - cy) ** 2 + (xx - cx) ** 2) < r * r).astype(np.float64)
        img = img * (1 - blob[None]) + blob[None] * bc[:, None, None]
        img = img + rng.normal(0, 0.05, size=img.shape)
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels)


def write_raw(path, dataset: ImageDataset) -> None:
    images = np.asarray(dataset.images)
    if images.dtype != np.uint8:
        raise ValueError("raw format stores uint8 images")
    n, c, h, w = images.shape
    has_labels = dataset.labels is not None
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, h, w, c, int(has_labels)))
        f.write(np.ascontiguousarray(images.transpose(0, 2, 3, 1)).tobytes())
        if has_labels:
            f.write(np.asarray(dataset.labels, dtype="<u2").tobytes())


def read_raw(path) -> ImageDataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError("file too short for an LCIM header")
    magic, version, n, h, w, c, has_labels = _HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != RAW_VERSION:
        raise ValueError(f"unsupported LCIM version {version}")
    body = n * h * w * c
    expected = _HEADER.size + body + (2 * n if has_labels else 0)
    if len(data) != expected:
        raise ValueError(f"file length {len(data)} does not match header ({expected} bytes)")
    off = _HEADER.size
    images = np.frombuffer(data, dtype=np.uint8, count=body, offset=off)
    images = images.reshape(n, h, w, c).transpose(0, 3, 1, 2).copy()
    labels = None
    if has_labels:
        labels = np.frombuffer(data, dtype="<u2", count=n, offset=off + body).astype(np.int64)
    return ImageDataset(images, labels)
