"""Procedural desk-scale image datasets and the raw ``IMGR`` image container.

Three generators, all labelled with two balanced classes and pixels in [-1, 1]:

* ``shapes-A``: anti-aliased circles (0) and squares (1)
* ``shapes-B``: crosses (0) and triangles (1), a shifted downstream task
* ``gauss-mix``: blurred two-blob heatmaps, blob pair horizontal (0) or vertical (1)
"""

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError
from .rng import Rng

DATASETS = ("shapes-A", "shapes-B", "gauss-mix")
SUPPORTED_SIDES = (8, 16)
MIN_SAMPLES = 256
_SUPERSAMPLE = 4
IMGR_MAGIC = b"IMGR"


@dataclass
class DeskDataset:
    name: str
    images: np.ndarray
    labels: np.ndarray
    seed: int
    num_classes: int = 2

    @property
    def n_samples(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[-1]

    @property
    def channels(self):
        return self.images.shape[1]

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return DeskDataset(
            name or self.name, self.images[idx], self.labels[idx], self.seed, self.num_classes
        )

    def split(self, n_first):
        """Deterministic head/tail split (samples are already in random order)."""
        n = self.n_samples
        if not 0 < n_first < n:
            raise ContractError(f"split point {n_first} must lie inside (0, {n})")
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, n))


def _grid(h):
    k = h * _SUPERSAMPLE
    c = (np.arange(k) + 0.5) / _SUPERSAMPLE
    return np.meshgrid(c, c, indexing="ij")


def _downsample(mask, h):
    k = _SUPERSAMPLE
    return mask.reshape(h, k, h, k).mean(axis=(1, 3))


def _render_shapes(kind, h, rng):
    yy, xx = _grid(h)
    size = rng.uniform(0.22, 0.36) * h
    cy, cx = rng.uniform(size, h - size, size=2)
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        mask = dy * dy + dx * dx <= size * size
    elif kind == "square":
        half = size * 0.85
        mask = (np.abs(dy) <= half) & (np.abs(dx) <= half)
    elif kind == "cross":
        arm = size * 0.32
        mask = ((np.abs(dy) <= arm) & (np.abs(dx) <= size)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= size)
        )
    elif kind == "triangle":
        # Upward triangle: apex at top, base at bottom.
        rel = (dy + size) / (2 * size)
        mask = (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * size)
    else:
        raise ValueError(kind)
    brightness = rng.uniform(0.6, 1.0)
    return -1.0 + 2.0 * brightness * _downsample(mask.astype(np.float64), h)


def _render_gauss_mix(label, h, rng):
    yy, xx = _grid(h)
    sep = rng.uniform(0.3, 0.45) * h
    cy, cx = rng.uniform(0.4 * h, 0.6 * h, size=2)
    off = np.array([0.0, sep / 2]) if label == 0 else np.array([sep / 2, 0.0])
    heat = np.zeros_like(yy)
    for sign in (-1.0, 1.0):
        py, px = cy + sign * off[0], cx + sign * off[1]
        width = rng.uniform(0.07, 0.12) * h
        amp = rng.uniform(0.6, 1.0)
        heat += amp * np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * width * width))
    heat = np.clip(_downsample(heat, h), 0.0, 1.0)
    return -1.0 + 2.0 * heat


def make_dataset(name, n, h=8, seed=0):
    """Render ``n`` labelled ``1 x h x h`` images; fully determined by the arguments."""
    if name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if h not in SUPPORTED_SIDES:
        raise ConfigurationError(f"image side {h} unsupported; choose from {SUPPORTED_SIDES}")
    if n < MIN_SAMPLES:
        raise ConfigurationError(f"need at least {MIN_SAMPLES} samples, got {n}")
    rng = Rng(seed, ("dataset", name, str(n), str(h)))
    labels = rng.split("labels").permutation(np.arange(n) % 2)
    draw = rng.split("render")
    kinds = {"shapes-A": ("circle", "square"), "shapes-B": ("cross", "triangle")}
    images = np.empty((n, 1, h, h))
    for i, lab in enumerate(labels):
        if name == "gauss-mix":
            images[i, 0] = _render_gauss_mix(lab, h, draw)
        else:
            images[i, 0] = _render_shapes(kinds[name][lab], h, draw)
    return DeskDataset(name, np.clip(images, -1.0, 1.0), labels.astype(np.int64), seed)


def index_stream(n, batch, seed):
    """Endless batches of indices drawn from consecutive seeded permutations."""
    if not 1 <= batch <= n:
        raise ContractError(f"batch size {batch} must lie in [1, {n}]")
    rng = Rng(seed, ("stream",))
    epoch = 0
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch:
            buf = np.concatenate([buf, rng.split(str(epoch)).permutation(n)])
            epoch += 1
        yield buf[:batch]
        buf = buf[batch:]


def batch_stream(ds, batch, seed):
    """Endless ``(images, labels)`` batches; same arguments, same sequence."""
    for idx in index_stream(ds.n_samples, batch, seed):
        yield ds.images[idx], ds.labels[idx]


def write_imgr(path, images):
    """Write ``[n,c,h,h]`` images in [-1, 1] as 8-bit raw ``IMGR``."""
    images = np.asarray(images, dtype=np.float64)
    n, c, h, w = images.shape
    if h != w:
        raise ContractError(f"IMGR holds square images, got {h}x{w}")
    pix = np.rint((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(IMGR_MAGIC + struct.pack("<III", n, c, h) + pix.tobytes())
    os.replace(tmp, path)


def read_imgr(path):
    """Read an ``IMGR`` file into ``[n,c,h,h]`` floats in [-1, 1]."""
    raw = Path(path).read_bytes()
    if raw[:4] != IMGR_MAGIC:
        raise FormatError(f"{path}: not an IMGR file (magic {raw[:4]!r})")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated IMGR header")
    n, c, h = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != n * c * h * h:
        raise FormatError(f"{path}: expected {n * c * h * h} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(n, c, h, h)
    return pix.astype(np.float64) / 127.5 - 1.0


def load_image_dir(path, seed=0):
    """Dataset from a directory of ``*.imgr`` files, one class per file (sorted)."""
    files = sorted(Path(path).glob("*.imgr"))
    if not files:
        raise FormatError(f"{path}: no .imgr files found")
    blocks = [read_imgr(f) for f in files]
    if len({b.shape[1:] for b in blocks}) != 1:
        raise FormatError(f"{path}: images differ in size across files")
    images = np.concatenate(blocks)
    labels = np.concatenate([np.full(len(b), i) for i, b in enumerate(blocks)])
    perm = Rng(seed, ("image-dir",)).permutation(len(images))
    return DeskDataset(Path(path).name, images[perm], labels[perm], seed, len(files))
