"""Datasets (CIFAR-10 binary, synthetic blobs), resizing and the data-side regularizers."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORDS = 10000
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
MINIVAL_FRACTION = 0.02


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    """Images as (n, c, h, w) arrays (uint8 or real in [0, 1]) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    templates: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def subset(self, index, split: Optional[str] = None) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes, split or self.split)


@dataclass
class Splits:
    train: Dataset
    minival: Dataset
    eval: Dataset

    def __iter__(self):
        return iter((self.train, self.minival, self.eval))


def split_minival(ds: Dataset, fraction: float = MINIVAL_FRACTION, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then hold out ``round(fraction * n)`` images as minival."""
    order = np.random.default_rng(seed).permutation(len(ds))
    k = int(round(fraction * len(ds)))
    return ds.subset(np.sort(order[k:]), "train"), ds.subset(np.sort(order[:k]), "minival")


# -- CIFAR-10 -------------------------------------------------------------


def _read_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    expected = CIFAR_RECORDS * CIFAR_RECORD_BYTES
    if not path.is_file():
        raise DatasetError(f"{path.name}: file missing (expected {expected} bytes)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != expected:
        raise DatasetError(f"{path.name}: has {raw.size} bytes, expected {expected}")
    records = raw.reshape(CIFAR_RECORDS, CIFAR_RECORD_BYTES)
    return records[:, 1:].reshape(-1, 3, 32, 32), records[:, 0].astype(np.int64)


def load_cifar10(path, seed: int = 0) -> Splits:
    """Read the CIFAR-10 binary batches and split train 98/2 into train/minival.

    All six files are validated before anything is returned, so a bad archive never yields a
    partial dataset.
    """
    root = Path(path)
    parts = [_read_batch(root / name) for name in CIFAR_TRAIN_FILES]
    test_x, test_y = _read_batch(root / CIFAR_TEST_FILE)
    for name, (_, y) in zip(CIFAR_TRAIN_FILES + [CIFAR_TEST_FILE], parts + [(test_x, test_y)]):
        if y.max() >= CIFAR_CLASSES:
            raise DatasetError(f"{name}: label byte {int(y.max())} out of range")
    full = Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), CIFAR_CLASSES)
    train, minival = split_minival(full, seed=seed)
    return Splits(train, minival, Dataset(test_x, test_y, CIFAR_CLASSES, "eval"))


def write_cifar10_binary(path, train: Dataset, test: Dataset) -> None:
    """Write two datasets of 32x32 uint8 images in the CIFAR-10 batch layout (50k + 10k)."""
    if len(train) != 5 * CIFAR_RECORDS or len(test) != CIFAR_RECORDS:
        raise DatasetError(f"need {5 * CIFAR_RECORDS} train and {CIFAR_RECORDS} test images")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    def dump(name, ds, lo):
        x = np.asarray(ds.images[lo:lo + CIFAR_RECORDS], dtype=np.uint8).reshape(CIFAR_RECORDS, -1)
        y = np.asarray(ds.labels[lo:lo + CIFAR_RECORDS], dtype=np.uint8)[:, None]
        (root / name).write_bytes(np.concatenate([y, x], axis=1).tobytes())

    for i, name in enumerate(CIFAR_TRAIN_FILES):
        dump(name, train, i * CIFAR_RECORDS)
    dump(CIFAR_TEST_FILE, test, 0)


# -- synthetic data -------------------------------------------------------


def _class_templates(num_classes, image_size, rng, blobs=2):
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    out = np.zeros((num_classes, 3, image_size, image_size))
    for k in range(num_classes):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15, 0.85, 2)
            width = rng.uniform(0.08, 0.25)
            colour = rng.uniform(-1, 1, 3)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            out[k] += colour[:, None, None] * bump
    return out


def synthetic_dataset(num_classes: int, n: int, image_size: int, rng, snr: float = 4.0,
                      max_shift: int = 0, templates: Optional[np.ndarray] = None) -> Dataset:
    """Class-conditional Gaussian-blob images stored as uint8.

    Each class owns a fixed colour-blob template. An image is its template scaled by ``snr``
    relative to unit pixel noise, optionally translated by up to ``max_shift`` pixels, then
    mapped to bytes around mid-gray. Labels are balanced. Pass ``templates`` to draw more
    samples of the same task (e.g. a matching test split).
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if templates is None:
        templates = _class_templates(num_classes, image_size, rng)
    labels = rng.permutation(np.arange(n) % num_classes) if n else np.zeros(0, dtype=np.int64)
    x = snr * templates[labels] + rng.normal(size=(n, 3, image_size, image_size))
    if max_shift and n:
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (int(dy), int(dx)), axis=(1, 2))
    scale = 127.5 / (snr + 3.0)
    images = np.clip(np.rint(127.5 + scale * x), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), num_classes, templates=templates)


# -- preprocessing --------------------------------------------------------


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Bytes to [0, 1]; real images pass through unchanged (cast to ``dtype``)."""
    if images.dtype == np.uint8:
        return images.astype(dtype) / dtype(255.0)
    return images.astype(dtype, copy=False)


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    x = to_float(ds.images, np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=x.dtype)[:, None, None]
    std = np.asarray(std, dtype=x.dtype)[:, None, None]
    return (x - mean) / std


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights, half-pixel centres, edge-clamped."""
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    np.add.at(m, (np.arange(dst), lo), 1 - frac)
    np.add.at(m, (np.arange(dst), hi), frac)
    return m


def resize(image: np.ndarray, target_size: int) -> np.ndarray:
    """Bilinear resize of a (c, h, w) or (n, c, h, w) real image to (target, target)."""
    if target_size < 8:
        raise ValueError(f"target size must be >= 8, got {target_size}")
    h, w = image.shape[-2:]
    if h == target_size and w == target_size:
        return image.copy()
    x = image if image.dtype.kind == "f" else image.astype(np.float64)
    my = _bilinear_matrix(h, target_size).astype(x.dtype)
    mx = _bilinear_matrix(w, target_size).astype(x.dtype)
    return my @ x @ mx.T


# -- RandAugment-lite -----------------------------------------------------

# Strength at the top of the magnitude scale (epsilon = 30).
RANDAUG_MAX = {
    "rotate": 30.0,  # degrees
    "translate_x": 0.3,  # fraction of width
    "translate_y": 0.3,
    "shear_x": 0.3,
    "shear_y": 0.3,
    "brightness": 0.9,  # factor 1 +/- s
    "contrast": 0.9,
    "posterize": 4.0,  # bits dropped from 8
}
RANDAUG_OPS = tuple(RANDAUG_MAX)
MAX_MAGNITUDE = 30.0
FILL = 0.5


def op_strength(op: str, magnitude: float) -> float:
    """Unsigned strength of ``op`` at magnitude epsilon, linear in epsilon."""
    if not 0 <= magnitude <= MAX_MAGNITUDE:
        raise ValueError(f"magnitude must be in [0, {MAX_MAGNITUDE}], got {magnitude}")
    return magnitude / MAX_MAGNITUDE * RANDAUG_MAX[op]


def _affine(img, inverse, fill=FILL):
    """Warp (c, h, w) with a 2x2 inverse map about the image centre; bilinear, constant fill."""
    c, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    sy = inverse[0][0] * dy + inverse[0][1] * dx + inverse[0][2] + cy
    sx = inverse[1][0] * dy + inverse[1][1] * dx + inverse[1][2] + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), constant_values=fill)
    out = np.zeros_like(img)
    for oy, ox, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ry = np.clip(y0 + oy + 1, 0, h + 1)
        rx = np.clip(x0 + ox + 1, 0, w + 1)
        out += padded[:, ry, rx] * wt
    return out.astype(img.dtype, copy=False)


def apply_op(img: np.ndarray, op: str, strength: float) -> np.ndarray:
    """One signed op on a (c, h, w) image in [0, 1]; strength 0 returns the input."""
    if strength == 0:
        return img
    h, w = img.shape[-2:]
    if op == "rotate":
        t = math.radians(strength)
        return _affine(img, [[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0]])
    if op == "translate_x":
        return _affine(img, [[1, 0, 0], [0, 1, -strength * w]])
    if op == "translate_y":
        return _affine(img, [[1, 0, -strength * h], [0, 1, 0]])
    if op == "shear_x":
        return _affine(img, [[1, 0, 0], [-strength, 1, 0]])
    if op == "shear_y":
        return _affine(img, [[1, -strength, 0], [0, 1, 0]])
    if op == "brightness":
        return img * img.dtype.type(1 + strength)
    if op == "contrast":
        mean = img.mean()
        return mean + (img - mean) * img.dtype.type(1 + strength)
    if op == "posterize":
        bits = int(round(abs(strength)))
        if bits == 0:
            return img
        step = 2 ** bits
        q = np.floor(np.clip(img, 0, 1) * 255 / step) * step / 255
        return q.astype(img.dtype, copy=False)
    raise ValueError(f"unknown op {op!r}")


def randaugment(image: np.ndarray, magnitude: float, num_ops: int, rng, trace: Optional[list] = None) -> np.ndarray:
    """Apply ``num_ops`` ops drawn uniformly (with replacement) at magnitude epsilon.

    Geometric and colour ops get a random sign; posterize does not. The result is clamped to
    [0, 1]. When ``trace`` is given, (op, signed strength) pairs are appended to it.
    """
    out = image
    for _ in range(num_ops):
        op = RANDAUG_OPS[int(rng.integers(len(RANDAUG_OPS)))]
        s = op_strength(op, magnitude)
        if op != "posterize" and rng.random() < 0.5:
            s = -s
        if trace is not None:
            trace.append((op, s))
        out = apply_op(out, op, s)
    if out is image:
        return image
    return np.clip(out, 0, 1)


# -- mixup / cutout -------------------------------------------------------


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def mixup(batch_x: np.ndarray, batch_y: np.ndarray, alpha: float, rng, lam: Optional[float] = None,
          perm: Optional[np.ndarray] = None):
    """Mix each example with a permuted partner: x~_i = lam * x_j + (1 - lam) * x_i.

    ``lam`` is drawn once per batch from Beta(alpha, alpha), or 0 when alpha is 0. Labels must be
    one-hot or soft rows; they are mixed with the same weights.
    """
    if alpha < 0:
        raise ValueError(f"mixup alpha must be >= 0, got {alpha}")
    n = len(batch_x)
    if n < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if batch_y.ndim != 2:
        raise ValueError("mixup labels must be one-hot or soft (n, k) rows")
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 0.0
    if perm is None:
        perm = rng.permutation(n)
    if lam == 0:
        return batch_x, batch_y, 0.0
    lx = batch_x.dtype.type(lam) if batch_x.dtype.kind == "f" else lam
    ly = batch_y.dtype.type(lam)
    mixed_x = lx * batch_x[perm] + (1 - lx) * batch_x
    mixed_y = ly * batch_y[perm] + (1 - ly) * batch_y
    return mixed_x, mixed_y, lam


def cutout(image: np.ndarray, size: int, rng) -> np.ndarray:
    """Zero one size x size square centred uniformly in the image, clipped at the borders."""
    h, w = image.shape[-2:]
    if size < 0 or size > min(h, w):
        raise ValueError(f"cutout size {size} outside [0, {min(h, w)}]")
    if size == 0:
        return image
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, x0 = max(cy - size // 2, 0), max(cx - size // 2, 0)
    y1, x1 = min(cy - size // 2 + size, h), min(cx - size // 2 + size, w)
    out = image.copy()
    out[..., y0:y1, x0:x1] = 0
    return out


@dataclass
class AugmentConfig:
    randaug_magnitude: float = 0.0
    randaug_num_ops: int = 2
    mixup_alpha: float = 0.0
    cutout_size: int = 0

    def __post_init__(self):
        problems = []
        if not (math.isfinite(self.randaug_magnitude) and 0 <= self.randaug_magnitude <= MAX_MAGNITUDE):
            problems.append(f"randaug_magnitude must be in [0, 30], got {self.randaug_magnitude}")
        if self.randaug_num_ops < 0:
            problems.append(f"randaug_num_ops must be >= 0, got {self.randaug_num_ops}")
        if not (math.isfinite(self.mixup_alpha) and self.mixup_alpha >= 0):
            problems.append(f"mixup_alpha must be finite and >= 0, got {self.mixup_alpha}")
        if self.cutout_size < 0:
            problems.append(f"cutout_size must be >= 0, got {self.cutout_size}")
        if problems:
            raise ValueError("; ".join(problems))


def cifar10_dir_from_env() -> Optional[Path]:
    value = os.environ.get("EFFV2_CIFAR10_DIR")
    return Path(value) if value else None
