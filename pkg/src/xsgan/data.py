"""Synthetic class-conditional toy dataset plus PNG grid emission.

Two procedural families, both with pixel values in [-1, 1]:

* ``blobs``: each class is a mixture of Gaussian bumps; the class index
  controls the blob count (1 + c % 4), the blob ring placement, the blob
  width, and the base color. Per-sample jitter moves positions and
  amplitudes.
* ``two_tone``: each class is a foreground shape on a contrasting
  background; the class index selects the shape family (disk, square,
  horizontal stripes, vertical stripes) and the fg/bg tones; position,
  size and phase jitter per sample.

Identical spec + seed yields bitwise-identical arrays.
"""

import math
from dataclasses import dataclass

import numpy as np

from .config import ToyDatasetSpec
from .errors import ConfigError

# eight well-separated base colors in [-1, 1]
_PALETTE = np.array([
    [0.9, -0.6, -0.6],
    [-0.6, 0.9, -0.6],
    [-0.6, -0.6, 0.9],
    [0.9, 0.9, -0.7],
    [0.9, -0.7, 0.9],
    [-0.7, 0.9, 0.9],
    [0.9, 0.4, -0.2],
    [-0.2, 0.4, 0.9],
], dtype=np.float64)


@dataclass
class ToyDataset:
    images: np.ndarray  # [N, H, W, C] float32 in [-1, 1]
    labels: np.ndarray  # [N] int64
    spec: ToyDatasetSpec

    def __len__(self) -> int:
        return self.images.shape[0]


def _class_color(c: int) -> np.ndarray:
    return _PALETTE[c % len(_PALETTE)]


def _blob_class(spec: ToyDatasetSpec, c: int, rng: np.random.Generator) -> np.ndarray:
    res, ch = spec.resolution, spec.channels
    n = spec.samples_per_class
    num_blobs = 1 + c % 4
    sigma = res * (0.10 + 0.05 * ((c // 4) % 2))
    color = np.resize(_class_color(c), ch)
    # fixed per-class anchor ring, jittered per sample
    angles = 2 * math.pi * (np.arange(num_blobs) / num_blobs + c / 16.0)
    anchors = np.stack([res / 2 + 0.3 * res * np.cos(angles),
                        res / 2 + 0.3 * res * np.sin(angles)], axis=1)
    yy, xx = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5, indexing="ij")

    jitter = rng.uniform(-0.12 * res, 0.12 * res, size=(n, num_blobs, 2))
    amps = rng.uniform(0.7, 1.0, size=(n, num_blobs))
    color_jitter = rng.uniform(-0.08, 0.08, size=(n, ch))

    images = np.full((n, res, res, ch), -1.0, dtype=np.float64)
    for i in range(n):
        bump = np.zeros((res, res))
        for b in range(num_blobs):
            cy, cx = anchors[b] + jitter[i, b]
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            bump += amps[i, b] * np.exp(-d2 / (2.0 * sigma ** 2))
        bump = np.clip(bump, 0.0, 1.0)
        images[i] += bump[:, :, None] * (color + color_jitter[i] + 1.0)
    return np.clip(images, -1.0, 1.0)


def _two_tone_class(spec: ToyDatasetSpec, c: int, rng: np.random.Generator) -> np.ndarray:
    res, ch = spec.resolution, spec.channels
    n = spec.samples_per_class
    kind = c % 4
    fg = np.resize(_class_color(c), ch)
    bg = -0.75 * fg
    yy, xx = np.meshgrid(np.arange(res) + 0.5, np.arange(res) + 0.5, indexing="ij")

    images = np.empty((n, res, res, ch), dtype=np.float64)
    for i in range(n):
        if kind == 0:  # disk
            cy, cx = res / 2 + rng.uniform(-0.15 * res, 0.15 * res, size=2)
            radius = res * rng.uniform(0.20, 0.32)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        elif kind == 1:  # axis-aligned square
            cy, cx = res / 2 + rng.uniform(-0.15 * res, 0.15 * res, size=2)
            half = res * rng.uniform(0.18, 0.30)
            mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        elif kind == 2:  # horizontal stripes
            period = 2 + (c // 4) % 3
            phase = rng.integers(0, period)
            mask = ((np.arange(res) + phase) // period % 2 == 0)[:, None] \
                & np.ones(res, dtype=bool)[None, :]
        else:  # vertical stripes
            period = 2 + (c // 4) % 3
            phase = rng.integers(0, period)
            mask = np.ones(res, dtype=bool)[:, None] \
                & (((np.arange(res) + phase) // period % 2 == 0))[None, :]
        gain = rng.uniform(0.85, 1.0)
        images[i] = np.where(mask[:, :, None], fg * gain, bg * gain)
    return np.clip(images, -1.0, 1.0)


def synth_dataset(spec: ToyDatasetSpec) -> ToyDataset:
    """Deterministic, class-balanced procedural image set."""
    spec.validate()
    builders = {"blobs": _blob_class, "two_tone": _two_tone_class}
    if spec.recipe not in builders:
        raise ConfigError(f"unknown dataset recipe {spec.recipe!r}")
    build = builders[spec.recipe]
    children = np.random.SeedSequence(spec.seed).spawn(spec.num_classes)
    per_class, labels = [], []
    for c in range(spec.num_classes):
        rng = np.random.Generator(np.random.PCG64(children[c]))
        per_class.append(build(spec, c, rng).astype(np.float32))
        labels.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return ToyDataset(images=np.concatenate(per_class, axis=0),
                      labels=np.concatenate(labels, axis=0), spec=spec)


def to_uint8(images) -> np.ndarray:
    """Affine map from [-1, 1] to 8-bit, clipping out-of-range values."""
    arr = np.asarray(images, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image_grid(images, path, ncol: int = 8, pad: int = 2) -> None:
    """Save [N, H, W, C] images in [-1, 1] as one padded PNG grid."""
    from PIL import Image

    if hasattr(images, "detach"):
        images = images.detach().cpu().numpy()
    arr = to_uint8(images)
    if arr.ndim != 4:
        raise ConfigError(f"expected [N,H,W,C] images, got shape {arr.shape}")
    n, h, w, ch = arr.shape
    ncol = max(1, min(ncol, n))
    nrow = (n + ncol - 1) // ncol
    canvas = np.full((nrow * (h + pad) + pad, ncol * (w + pad) + pad, ch), 255,
                     dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, ncol)
        top = pad + r * (h + pad)
        left = pad + c * (w + pad)
        canvas[top:top + h, left:left + w] = arr[i]
    if ch == 1:
        canvas = canvas[:, :, 0]
    Image.fromarray(canvas).save(path)
