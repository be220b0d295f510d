"""Dataset ingestion, synthetic task generation, batching, augmentation.

CIFAR binaries are parsed record by record (cifar10: 1 label byte + 3072
pixel bytes; cifar100: coarse + fine label bytes + 3072 pixel bytes, fine
label kept). Pixels are scaled to [0,1] and standardized per channel with
statistics computed on the train split actually used. A writer for the
same byte format exists so fixtures and generated corpora go through the
real parser.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR100_TRAIN_FILE = "train.bin"
CIFAR100_TEST_FILE = "test.bin"

SYNTHETIC_KINDS = ("gaussian_blobs", "two_moons_grid")


class DataError(ValueError):
    pass


@dataclass
class Split:
    x: np.ndarray  # N x C x H x W or N x D, float32
    y: np.ndarray  # N, int64

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    kind: str
    channel_stats: tuple[np.ndarray, np.ndarray] | None = None  # (mean, std) per channel

    def __post_init__(self):
        for split in (self.train, self.test):
            if len(split.x) != len(split.y):
                raise DataError("sample/label count mismatch")
            if split.y.size and (split.y.min() < 0 or split.y.max() >= self.num_classes):
                raise DataError(f"labels outside [0, {self.num_classes})")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train.x.shape[1:])

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.train.x, self.train.y, self.test.x, self.test.y):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str
    n_samples: int = 200
    num_classes: int = 2
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise DataError(f"unknown synthetic kind {self.kind!r}; choose from {SYNTHETIC_KINDS}")
        if self.n_samples < self.num_classes:
            raise DataError("need at least one sample per class")


# -- CIFAR binary format -------------------------------------------------------


def _record_len(variant: str) -> int:
    if variant == "cifar10":
        return 3073
    if variant == "cifar100":
        return 3074
    raise DataError(f"unknown variant {variant!r}; choose cifar10 or cifar100")


def _parse_file(path: str, variant: str) -> tuple[np.ndarray, np.ndarray]:
    rec = _record_len(variant)
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % rec != 0:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the "
                        f"{rec}-byte {variant} record length (corrupt file)")
    n = raw.size // rec
    records = raw.reshape(n, rec)
    labels = records[:, 1] if variant == "cifar100" else records[:, 0]
    pixels = records[:, rec - 3072:]
    images = pixels.reshape(n, 3, 32, 32)
    return images, labels.astype(np.int64)


def _split_files(path: str, variant: str) -> tuple[list[str], str]:
    if variant == "cifar10":
        return [os.path.join(path, f) for f in CIFAR10_TRAIN_FILES], os.path.join(path, CIFAR10_TEST_FILE)
    return [os.path.join(path, CIFAR100_TRAIN_FILE)], os.path.join(path, CIFAR100_TEST_FILE)


def _stratified_cap(labels: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    keep = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep.append(np.sort(idx))
    return np.concatenate(keep)


def load_cifar(path: str, variant: str = "cifar10", subset=None, seed: int = 0) -> Dataset:
    """Load CIFAR binaries from a directory.

    `subset` caps samples per class: an int caps both splits, a (train, test)
    pair caps them separately, None keeps everything. Capping is stratified
    with its own seeded generator so desk-scale subsets stay class-balanced.
    """
    train_files, test_file = _split_files(path, variant)
    for f in train_files + [test_file]:
        if not os.path.exists(f):
            raise DataError(f"missing dataset file: {f}")
    parts = [_parse_file(f, variant) for f in train_files]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _parse_file(test_file, variant)

    if subset is not None:
        train_cap, test_cap = (subset, subset) if isinstance(subset, int) else subset
        rng = np.random.default_rng(seed)
        keep = _stratified_cap(train_y, train_cap, rng)
        train_x, train_y = train_x[keep], train_y[keep]
        keep = _stratified_cap(test_y, test_cap, rng)
        test_x, test_y = test_x[keep], test_y[keep]

    num_classes = 100 if variant == "cifar100" else 10
    return _standardized(train_x, train_y, test_x, test_y, num_classes, variant)


def _standardized(train_x, train_y, test_x, test_y, num_classes: int, kind: str) -> Dataset:
    train_f = train_x.astype(np.float32) / 255.0
    test_f = test_x.astype(np.float32) / 255.0
    mean = train_f.mean(axis=(0, 2, 3))
    std = train_f.std(axis=(0, 2, 3))
    std = np.where(std < 1e-8, 1.0, std)
    train_f = (train_f - mean[None, :, None, None]) / std[None, :, None, None]
    test_f = (test_f - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(Split(train_f, train_y), Split(test_f, test_y), num_classes, kind,
                   channel_stats=(mean, std))


def write_cifar(path: str, variant: str, train_images: np.ndarray, train_labels: np.ndarray,
                test_images: np.ndarray, test_labels: np.ndarray) -> None:
    """Write uint8 images (N x 3 x 32 x 32) in the CIFAR binary layout.

    cifar10 directories get the canonical five train batch files (records
    split evenly, remainder to the leading files); cifar100 gets train.bin
    and test.bin with the coarse label byte set to zero.
    """
    os.makedirs(path, exist_ok=True)
    _record_len(variant)

    def encode(images, labels):
        images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3072)
        labels = np.asarray(labels, dtype=np.uint8)
        if variant == "cifar10":
            return np.concatenate([labels[:, None], images], axis=1)
        coarse = np.zeros_like(labels)
        return np.concatenate([coarse[:, None], labels[:, None], images], axis=1)

    train_rec = encode(train_images, train_labels)
    test_rec = encode(test_images, test_labels)
    if variant == "cifar10":
        chunks = np.array_split(train_rec, 5)
        for fname, chunk in zip(CIFAR10_TRAIN_FILES, chunks):
            chunk.tofile(os.path.join(path, fname))
        test_rec.tofile(os.path.join(path, CIFAR10_TEST_FILE))
    else:
        train_rec.tofile(os.path.join(path, CIFAR100_TRAIN_FILE))
        test_rec.tofile(os.path.join(path, CIFAR100_TEST_FILE))


# -- synthetic vector tasks ----------------------------------------------------


def _balanced_labels(n: int, m: int) -> np.ndarray:
    # n // m per class, remainder spread over the leading classes
    reps = np.full(m, n // m)
    reps[: n % m] += 1
    return np.repeat(np.arange(m), reps).astype(np.int64)


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    # Task geometry (centroids / moon arcs) is fixed by the seed; train and
    # test draw their noise from independent substreams.
    centroid_rng, train_rng, test_rng = (
        np.random.default_rng(c) for c in np.random.SeedSequence(spec.seed).spawn(3))
    centroids = None
    if spec.kind == "gaussian_blobs":
        m = spec.num_classes
        centroids = centroid_rng.standard_normal((m, 2 * m)).astype(np.float32)
        centroids *= 4.0 / np.linalg.norm(centroids, axis=1, keepdims=True)
    train = _synthetic_split(spec, spec.n_samples, centroids, train_rng)
    test = _synthetic_split(spec, max(spec.num_classes, spec.n_samples // 5), centroids, test_rng)
    return Dataset(train, test, spec.num_classes, spec.kind)


def _synthetic_split(spec: SyntheticSpec, n: int, centroids, rng: np.random.Generator) -> Split:
    if spec.kind == "gaussian_blobs":
        y = _balanced_labels(n, spec.num_classes)
        x = centroids[y] + spec.noise * rng.standard_normal((n, centroids.shape[1])).astype(np.float32)
        return Split(x.astype(np.float32), y)
    if spec.num_classes != 2:
        raise DataError("two_moons_grid is a 2-class task")
    y = _balanced_labels(n, 2)
    n0 = int((y == 0).sum())
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]).astype(np.float32)
    x += spec.noise * rng.standard_normal(x.shape).astype(np.float32)
    return Split(x, y)


# -- procedural image task -----------------------------------------------------

# Ten classes: five shape families x {solid fill, striped fill}. Foreground
# color, position, scale, rotation, stripe phase/orientation, background
# ramp, and pixel noise all vary per sample, so geometry and texture are the
# only class signal. Used as the desk-scale image corpus; written through
# write_cifar so the consumer path is identical to real CIFAR binaries.

_SHAPES = ("disk", "square", "triangle", "ring", "cross")


def _shape_mask(shape: str, size: int, cx, cy, radius, angle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    u = xx - cx
    v = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    ur = ca * u + sa * v
    vr = -sa * u + ca * v
    if shape == "disk":
        return u * u + v * v <= radius * radius
    if shape == "square":
        return np.maximum(np.abs(ur), np.abs(vr)) <= radius * 0.9
    if shape == "triangle":
        # equilateral: intersection of three rotated half planes
        m = np.ones((size, size), dtype=bool)
        for k in range(3):
            th = angle + 2.0 * np.pi * k / 3.0
            m &= (np.cos(th) * u + np.sin(th) * v) <= radius * 0.62
        return m
    if shape == "ring":
        r2 = u * u + v * v
        return (r2 <= radius * radius) & (r2 >= (0.55 * radius) ** 2)
    if shape == "cross":
        arm = radius * 0.38
        return ((np.abs(ur) <= arm) & (np.abs(vr) <= radius)) | \
               ((np.abs(vr) <= arm) & (np.abs(ur) <= radius))
    raise DataError(f"unknown shape {shape}")


def _paint_shape(img, shape, striped, cx, cy, radius, angle, bg, rng, size, xx, yy):
    mask = _shape_mask(shape, size, cx, cy, radius, angle)
    fg = rng.uniform(25, 230, size=3).astype(np.float32)
    while np.abs(fg - bg).sum() < 120:  # keep the figure visible
        fg = rng.uniform(25, 230, size=3).astype(np.float32)
    fill = np.broadcast_to(fg[:, None, None], (3, size, size)).copy()
    if striped:
        th = rng.uniform(0, np.pi)
        freq = rng.uniform(1.6, 2.6)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (np.cos(th) * xx + np.sin(th) * yy) + phase) >= 0
        fill[:, wave] = 0.35 * fill[:, wave] + 0.65 * img[:, wave]
    return np.where(mask[None], fill, img)


def _render_image(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    # Class = dominant (largest) figure's shape x texture. One or two smaller
    # distractor figures of random shape/texture force global comparison, so
    # local evidence alone cannot settle the class.
    shape = _SHAPES[cls % len(_SHAPES)]
    striped = cls >= len(_SHAPES)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    bg = rng.uniform(40, 215, size=3).astype(np.float32)
    gx, gy = rng.uniform(-2.2, 2.2, size=2)
    img = bg[:, None, None] + gx * (xx - size / 2) + gy * (yy - size / 2)

    radius = rng.uniform(size * 0.18, size * 0.28)
    if rng.random() < 0.75:
        d_shape = _SHAPES[rng.integers(0, len(_SHAPES))]
        d_striped = bool(rng.integers(0, 2))
        d_radius = radius * rng.uniform(0.35, 0.5)
        dx, dy = rng.uniform(size * 0.15, size * 0.85, size=2)
        img = _paint_shape(img, d_shape, d_striped, dx, dy, d_radius,
                           rng.uniform(0, 2 * np.pi), bg, rng, size, xx, yy)

    cx, cy = rng.uniform(size * 0.32, size * 0.68, size=2)
    img = _paint_shape(img, shape, striped, cx, cy, radius,
                       rng.uniform(0, 2 * np.pi), bg, rng, size, xx, yy)
    img += rng.normal(0.0, 14.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def make_shape_images(n_train_per_class: int, n_test_per_class: int, num_classes: int = 10,
                      size: int = 32, seed: int = 0):
    """Deterministic image corpus: (train_x, train_y, test_x, test_y) as uint8/int64."""
    if not 2 <= num_classes <= 2 * len(_SHAPES):
        raise DataError(f"num_classes must be in [2, {2 * len(_SHAPES)}]")
    ss = np.random.SeedSequence(seed)
    out = []
    for child, per_class in zip(ss.spawn(2), (n_train_per_class, n_test_per_class)):
        rng = np.random.default_rng(child)
        labels = _balanced_labels(per_class * num_classes, num_classes)
        images = np.stack([_render_image(int(c), size, rng) for c in labels])
        out += [images, labels]
    return tuple(out)


# -- batching / augmentation ---------------------------------------------------


def augmentation_plan(n: int, height: int, width: int, seed: int, epoch: int):
    """Per-sample crop offsets and flip flags, keyed by (seed, epoch, sample index)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, epoch, 0xA6)))
    offsets = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    return offsets, flips


def _augment_batch(x: np.ndarray, idx: np.ndarray, offsets, flips) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    padded = np.pad(x[idx], ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(x[idx])
    for j, i in enumerate(idx):
        oy, ox = offsets[i]
        crop = padded[j, :, oy:oy + h, ox:ox + w]
        out[j] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(split: Split, batch_size: int, shuffle_seed=None, augment: str = "none",
            epoch: int = 0):
    """Yield (x, y) numpy batches in a deterministic order.

    shuffle_seed None keeps storage order; otherwise the order comes from a
    generator keyed by (seed, epoch). Augmentation draws are keyed by sample
    index so they are independent of batch order. The last partial batch is
    kept.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=(shuffle_seed, epoch))).permutation(n)
    use_aug = augment == "crop_flip" and split.x.ndim == 4
    if augment not in ("none", "crop_flip"):
        raise DataError(f"unknown augment mode {augment!r}")
    if use_aug:
        offsets, flips = augmentation_plan(n, split.x.shape[2], split.x.shape[3],
                                           shuffle_seed or 0, epoch)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        xb = _augment_batch(split.x, idx, offsets, flips) if use_aug else split.x[idx]
        yield xb, split.y[idx]
