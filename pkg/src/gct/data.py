"""Synthetic pixel-wise datasets, labeled/unlabeled splits and mixed batches."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InvalidInputError

SUPERSAMPLE = 4
STRIPE_HALF_PERIOD = 2.5  # pixels
TEXTURE_AMPLITUDE = 0.08


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: np.ndarray | None  # (H, W) int64 class ids or (O, H, W) float
    id: int


@dataclass
class PixelDataset:
    """In-memory dataset; ``images`` is ``(N, C, H, W)`` float32."""

    kind: str  # "classification" or "regression"
    images: np.ndarray
    labels: np.ndarray
    params: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return Sample(self.images[i], self.labels[i], int(i))

    def subset(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return PixelDataset(self.kind, self.images[ids], self.labels[ids], dict(self.params))


# ---------------------------------------------------------------- splits


def parse_ratio(ratio) -> Fraction:
    try:
        r = Fraction(str(ratio))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"ratio {ratio!r} is not a number or fraction") from exc
    if not 0 < r <= 1:
        raise ConfigError(f"ratio must satisfy 0 < ratio <= 1, got {ratio}")
    return r


@dataclass
class SplitManifest:
    dataset_id: str
    ratio: str
    seed: int
    labeled_ids: list
    unlabeled_ids: list

    def save(self, path):
        Path(path).write_text(json.dumps(self.__dict__, indent=1) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def make_split(total: int, ratio, seed: int, dataset_id: str = "") -> SplitManifest:
    r = parse_ratio(ratio)
    n_labeled = math.floor(r * total + Fraction(1, 2))
    if n_labeled < 1:
        raise ConfigError(f"ratio {r} of {total} samples leaves no labeled data")
    perm = np.random.default_rng(seed).permutation(total)
    labeled = sorted(int(i) for i in perm[:n_labeled])
    unlabeled = sorted(int(i) for i in perm[n_labeled:])
    return SplitManifest(dataset_id, str(r), int(seed), labeled, unlabeled)


# ---------------------------------------------------------------- batches


@dataclass
class SslBatch:
    labeled_ids: list
    unlabeled_ids: list


def compose_batches(manifest: SplitManifest, b_l: int, b_u: int, epoch_seed: int):
    """One epoch of mixed batches.

    The unlabeled subset is visited exactly once in ``ceil(|U| / b_u)``
    batches; labeled ids are drawn from a reshuffled stream that wraps
    around as often as needed.
    """
    if b_l < 1 or b_u < 1:
        raise ConfigError("b_l and b_u must both be >= 1 in SSL mode")
    if not manifest.unlabeled_ids:
        raise ConfigError("SSL training needs a non-empty unlabeled subset")
    if not manifest.labeled_ids:
        raise ConfigError("SSL training needs a non-empty labeled subset")
    rng = np.random.default_rng(epoch_seed)
    unlabeled = rng.permutation(manifest.unlabeled_ids)
    labeled = np.asarray(manifest.labeled_ids)
    stream, pos = rng.permutation(labeled), 0
    batches = []
    for start in range(0, len(unlabeled), b_u):
        picked = []
        while len(picked) < b_l:
            if pos == len(stream):
                stream, pos = rng.permutation(labeled), 0
            take = min(b_l - len(picked), len(stream) - pos)
            picked.extend(stream[pos:pos + take])
            pos += take
        batches.append(SslBatch([int(i) for i in picked], [int(i) for i in unlabeled[start:start + b_u]]))
    return batches


def labeled_batches(ids, batch_size: int, epoch_seed: int):
    """Shuffled supervised-only epoch over ``ids``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(np.asarray(ids))
    return [[int(i) for i in order[s:s + batch_size]] for s in range(0, len(order), batch_size)]


def sample_budget(S: int, T: int, b: int) -> int:
    """Total number of trained samples N = S * T * b."""
    if min(S, T, b) < 1:
        raise ConfigError("S, T and b must be positive")
    return S * T * b


# ---------------------------------------------------------------- augmentation


def hflip(sample: Sample) -> Sample:
    label = None if sample.label is None else np.ascontiguousarray(sample.label[..., ::-1])
    return Sample(np.ascontiguousarray(sample.image[..., ::-1]), label, sample.id)


def _resize(arr, size, order):
    """Resize the trailing two axes of ``arr`` to ``size``."""
    h, w = arr.shape[-2:]
    zoom = [1.0] * (arr.ndim - 2) + [size[0] / h, size[1] / w]
    return ndimage.zoom(arr, zoom, order=order, mode="nearest", grid_mode=True)


def augment(sample: Sample, ops, seed: int, classification: bool | None = None) -> Sample:
    """Apply ``ops`` (``"hflip"`` with p=0.5, ``("random_crop", size)``) identically to image and label.

    Crops are resized back to the original resolution: nearest neighbour for
    class-id labels, bilinear for regression targets.
    """
    rng = np.random.default_rng(seed)
    if classification is None:
        classification = sample.label is not None and sample.label.ndim == 2
    out = Sample(sample.image, sample.label, sample.id)
    for op in ops:
        name, arg = (op, None) if isinstance(op, str) else (op[0], op[1])
        if name == "hflip":
            if rng.random() < 0.5:
                out = hflip(out)
        elif name == "random_crop":
            h, w = out.image.shape[-2:]
            ch, cw = (arg, arg) if isinstance(arg, int) else arg
            if ch > h or cw > w or ch < 1 or cw < 1:
                raise ConfigError(f"crop {(ch, cw)} does not fit image {(h, w)}")
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            image = _resize(out.image[..., top:top + ch, left:left + cw], (h, w), order=1)
            label = out.label
            if label is not None:
                label = _resize(label[..., top:top + ch, left:left + cw], (h, w), order=0 if classification else 1)
            out = Sample(image.astype(out.image.dtype), label, out.id)
        else:
            raise ConfigError(f"unknown augmentation {name!r}")
    return out


def hflip_batch(images, labels, flags):
    """Flip the samples selected by boolean ``flags`` (batch-level fast path for training)."""
    images, labels = images.copy(), labels.copy()
    images[flags] = images[flags][..., ::-1]
    labels[flags] = labels[flags][..., ::-1]
    return images, labels


# ---------------------------------------------------------------- generators


def _grid(size):
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / SUPERSAMPLE
    return np.meshgrid(c, c, indexing="ij")


def _shape_mask(kind, yy, xx, cy, cx, r, angle):
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    if kind == 0:  # disk
        return dx * dx + dy * dy <= r * r
    if kind == 1:  # rotated square
        s = r * 0.85
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if kind == 2:  # triangle
        t = r * 1.2
        return (v >= -0.5 * t) & (v <= t - math.sqrt(3) * np.abs(u))
    # thin bar / cross for classes beyond three shape families
    s = r * 1.1
    return ((np.abs(u) <= s) & (np.abs(v) <= 0.3 * r)) | ((np.abs(v) <= s) & (np.abs(u) <= 0.3 * r))


def _texture(k, xx, yy, phase):
    """Class-specific +-1 pattern: horizontal stripes, vertical stripes or a checkerboard.

    All three are symmetric under horizontal flips. Classes beyond the third
    reuse the families at a coarser period.
    """
    family, scale = (k - 1) % 3, 1 + (k - 1) // 3
    w = math.pi / (STRIPE_HALF_PERIOD * scale)
    if family == 0:
        return np.sign(np.sin(yy * w + phase))
    if family == 1:
        return np.sign(np.sin(xx * w + phase))
    return np.sign(np.sin(xx * w + phase) * np.sin(yy * w + phase))


def _downsample(arr):
    n = arr.shape[-1] // SUPERSAMPLE
    return arr.reshape(*arr.shape[:-2], n, SUPERSAMPLE, n, SUPERSAMPLE).mean(axis=(-3, -1))


def _smooth_field(rng, size, channels, scale=4):
    """Bicubic upsampling of a coarse random grid, repeated to the supersampled resolution."""
    coarse = rng.random((channels, scale, scale))
    field_ = ndimage.zoom(coarse, (1, size / scale, size / scale), order=3, mode="nearest", grid_mode=True)
    field_ = np.repeat(np.repeat(field_, SUPERSAMPLE, axis=1), SUPERSAMPLE, axis=2)
    return np.clip(field_, 0.0, 1.0)


def synth_segmentation(count: int, size: int, classes: int, seed: int, min_size: int = 16) -> PixelDataset:
    """Random antialiased shapes on smooth backgrounds. Label 0 is background.

    Each foreground class has its own shape family and texture pattern; colors
    are random, so the class has to be read from shape and texture.
    """
    if classes < 2:
        raise ConfigError("classes must be >= 2 (background plus at least one shape family)")
    if size < min_size:
        raise ConfigError(f"size must be >= {min_size} to fit the shapes")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty((count, size, size), dtype=np.int64)
    for n in range(count):
        img = 0.25 + 0.5 * _smooth_field(rng, size, 3)
        lab = np.zeros((size * SUPERSAMPLE,) * 2, dtype=np.int64)
        n_shapes = int(rng.integers(1, 4))
        kinds = rng.permutation(np.arange(1, classes))[:n_shapes].tolist()
        while len(kinds) < n_shapes:
            kinds.append(int(rng.integers(1, classes)))
        for k in kinds:
            r = rng.uniform(0.18, 0.28) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            mask = _shape_mask(k - 1, yy, xx, cy, cx, r, rng.uniform(0, 2 * math.pi))
            color = rng.uniform(0.2, 0.8, size=3)
            img[:, mask] = color[:, None] + TEXTURE_AMPLITUDE * _texture(k, xx[mask], yy[mask], rng.uniform(0, 2 * math.pi))
            lab[mask] = k
        img = _downsample(img) + rng.normal(0, 0.03, size=(3, size, size))
        images[n] = np.clip(img, 0, 1)
        # label = class covering most of the pixel
        cover = np.stack([_downsample((lab == k).astype(np.float64)) for k in range(classes)])
        labels[n] = cover.argmax(axis=0)
    return PixelDataset("classification", images, labels,
                        {"generator": "synth_segmentation", "count": count, "size": size, "classes": classes, "seed": seed})


def noise_std(clean, noise_sigma):
    """Per-pixel standard deviation of the heteroscedastic noise."""
    return noise_sigma * np.sqrt(0.25 + 0.75 * clean)


def synth_denoising(count: int, size: int, noise_sigma: float, seed: int) -> PixelDataset:
    """Clean images are smooth fields plus flat shapes in [0.1, 0.9]; inputs add signal-dependent noise."""
    if not noise_sigma > 0:
        raise ConfigError("noise_sigma must be > 0")
    if size < 8:
        raise ConfigError("size must be >= 8")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    clean = np.empty((count, 3, size, size), dtype=np.float64)
    for n in range(count):
        img = _smooth_field(rng, size, 3, scale=int(rng.integers(3, 7)))
        for _ in range(int(rng.integers(1, 4))):
            r = rng.uniform(0.12, 0.25) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            mask = _shape_mask(int(rng.integers(0, 4)), yy, xx, cy, cx, r, rng.uniform(0, 2 * math.pi))
            img[:, mask] = rng.random(3)[:, None]
        clean[n] = 0.1 + 0.8 * _downsample(img)
    noisy = clean + rng.normal(size=clean.shape) * noise_std(clean, noise_sigma)
    return PixelDataset("regression", np.clip(noisy, 0, 1).astype(np.float32), clean.astype(np.float32),
                        {"generator": "synth_denoising", "count": count, "size": size,
                         "noise_sigma": noise_sigma, "seed": seed})


GENERATORS = {"synth_segmentation": synth_segmentation, "synth_denoising": synth_denoising}


def cached_dataset(cache_dir, generator: str, **params) -> PixelDataset:
    """Generate a dataset or reload it from ``cache_dir`` keyed by its parameters."""
    if generator not in GENERATORS:
        raise ConfigError(f"unknown generator {generator!r}")
    if cache_dir is None:
        return GENERATORS[generator](**params)
    key = hashlib.sha1(json.dumps([generator, params], sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cache_dir) / f"{generator}_{key}.npz"
    if path.exists():
        with np.load(path) as z:
            kind = "classification" if generator == "synth_segmentation" else "regression"
            return PixelDataset(kind, z["images"], z["labels"], {"generator": generator, **params})
    ds = GENERATORS[generator](**params)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, images=ds.images, labels=ds.labels)
    return ds


def check_label_range(labels, classes):
    if labels.min() < 0 or labels.max() >= classes:
        raise InvalidInputError(f"labels must lie in [0, {classes})")
