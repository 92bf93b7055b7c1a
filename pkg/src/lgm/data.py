"""IDX dataset files, train/validation split and observation masks."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clamping import ClampSpec, binarize, quantize

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, 28, 28) floats in [0, 1]
    labels: np.ndarray   # (N,) ints
    ids: np.ndarray | None = None   # stable per-sample ids used for mask seeding

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.ids[idx])


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic=None):
    """Parse an IDX file (optionally gzip-compressed) into a uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: bad magic (file too short)")
    magic, = struct.unpack(">I", raw[:4])
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} (only unsigned byte data supported)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: truncated file ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array, compress=None):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("only uint8 arrays can be written")
    payload = struct.pack(">I", 0x0800 | array.ndim) + \
        struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    Path(path).write_bytes(gzip.compress(payload, mtime=0) if compress else payload)


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def save_idx(dataset: Dataset, images_path, labels_path):
    write_idx(images_path, np.round(dataset.images * 255).astype(np.uint8))
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def split(dataset: Dataset, seed=0, val_fraction=0.2):
    """Seeded permutation into (train, validation); 60k -> 48k/12k."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    n_val = int(round(len(dataset) * val_fraction))
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def observation_mask(shape, p_obs, seed, sample_ids, stream=0):
    """I.i.d. Bernoulli(p_obs) visibility per pixel.

    Each sample's mask depends only on ``(seed, stream, sample id)``.
    """
    if not 0.0 <= p_obs <= 1.0:
        raise ValueError("p_obs must lie in [0, 1]")
    out = np.empty((len(sample_ids),) + tuple(shape), dtype=bool)
    for k, sid in enumerate(sample_ids):
        out[k] = np.random.default_rng([seed, stream, int(sid)]).random(shape) < p_obs
    return out


def mask(images, p_obs, seed=0, sample_ids=None, layer="v", node_shape=None, mode="soft",
         n_colors=2, stream=0) -> ClampSpec:
    """Clamp visible pixels (soft by intensity, or hard after binarize/quantize)."""
    if not 0.0 <= p_obs <= 1.0:
        raise ValueError("p_obs must lie in [0, 1]")
    images = np.asarray(images, dtype=np.float64)
    if sample_ids is None:
        sample_ids = np.arange(len(images))
    node_shape = tuple(node_shape) if node_shape is not None else images.shape[1:]
    visible = observation_mask(images.shape[1:], p_obs, seed, sample_ids, stream) if p_obs < 1 \
        else np.ones(images.shape, dtype=bool)
    flat = images.reshape((len(images),) + node_shape)
    visible = visible.reshape(flat.shape)
    if mode == "soft":
        return ClampSpec.soft_values(flat, layer, observed=visible)
    if mode == "binarize":
        return ClampSpec.hard_labels(binarize(flat), layer, observed=visible)
    if mode == "quantize":
        return ClampSpec.hard_labels(quantize(flat, n_colors), layer, observed=visible)
    raise ValueError(f"unknown clamping mode {mode!r}")


# ------------------------------------------------------------------ PGM images

def write_pgm(path, image):
    """Write an 8-bit binary (P5) greymap."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def _pgm_tokens(raw, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) greymap with maxval <= 255 into a uint8 array."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pgm_tokens(raw, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = raw[pos:pos + w * h]
    if len(data) < w * h:
        raise ValueError(f"{path}: truncated PGM data")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * 255 / maxval).astype(np.uint8)
    return img
