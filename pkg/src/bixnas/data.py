"""Synthetic multi-class segmentation data, augmentation and overlap metrics."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

MAGIC = b"BXDS"
VERSION = 1
_HEADER = struct.Struct("<4sI6IqdI")


@dataclass
class Dataset:
    images: np.ndarray  # n x C x H x W, float32 in [0, 1]
    masks: np.ndarray  # n x H x W, int64 class indices
    num_classes: int
    seed: int = 0
    noise_level: float = 0.0

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.masks[idx], self.num_classes, self.seed, self.noise_level)

    def sample(self, i: int) -> "Sample":
        return Sample(self.images[i], self.masks[i])


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray


def class_intensity(k: int, K: int) -> float:
    """Distinct grey levels: background darkest, classes evenly spaced above it."""
    return 0.1 + 0.8 * k / (K - 1)


def _paint(mask: np.ndarray, k: int, rng: np.random.Generator) -> None:
    H, W = mask.shape
    yy, xx = np.mgrid[0:H, 0:W]
    side = min(H, W)
    cy, cx = rng.uniform(0.1, 0.9) * H, rng.uniform(0.1, 0.9) * W
    ry, rx = rng.uniform(0.06, 0.2, size=2) * side
    if rng.random() < 0.5:
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        region = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    else:
        region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    mask[region] = k


def generate_sample(index: int, H: int, W: int, K: int, noise_level: float, seed: int,
                    channels: int = 3, fg_band=(0.05, 0.6), max_tries: int = 200):
    """One (image, mask) pair, fully determined by (seed, index)."""
    rng = np.random.default_rng([seed, index])
    lo, hi = fg_band
    mask = np.zeros((H, W), dtype=np.int64)
    for _ in range(max_tries):
        mask[:] = 0
        for k in range(1, K):
            for _ in range(rng.integers(1, 6)):
                _paint(mask, k, rng)
        frac = float((mask > 0).mean())
        if lo <= frac <= hi:
            break
    else:
        raise DomainError(f"could not hit foreground band {fg_band} for sample {index}")
    levels = np.array([class_intensity(k, K) for k in range(K)])
    image = np.repeat(levels[mask][None], channels, axis=0)
    if noise_level > 0:
        texture = ndimage.gaussian_filter(rng.standard_normal((channels, H, W)), sigma=(0, 2.5, 2.5))
        texture /= texture.std() + 1e-12
        jitter = rng.uniform(-0.1, 0.1, size=K)[mask][None]
        image = image + noise_level * (0.35 * texture + jitter + 0.5 * rng.standard_normal((channels, H, W)))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_dataset(n: int, H: int = 64, W: int = 64, K: int = 3, noise_level: float = 0.1,
                     seed: int = 0, channels: int = 3, fg_band=(0.05, 0.6), divisor: int = 1,
                     start: int = 0) -> Dataset:
    """``n`` samples with indices ``start .. start + n - 1``."""
    if n < 0 or H < 1 or W < 1 or channels < 1:
        raise DomainError("n must be >= 0 and H, W, channels >= 1")
    if K < 2:
        raise DomainError(f"K must be >= 2, got {K}")
    if H % divisor or W % divisor:
        raise DomainError(f"{H}x{W} not divisible by {divisor}")
    if noise_level < 0:
        raise DomainError("noise_level must be >= 0")
    pairs = [generate_sample(start + i, H, W, K, noise_level, seed, channels, fg_band) for i in range(n)]
    images = np.stack([p[0] for p in pairs]) if pairs else np.zeros((0, channels, H, W), np.float32)
    masks = np.stack([p[1] for p in pairs]) if pairs else np.zeros((0, H, W), np.int64)
    return Dataset(images, masks, K, seed, noise_level)


def make_splits(n_train: int, n_val: int, **kw) -> tuple[Dataset, Dataset]:
    """Train and validation sets drawn from disjoint sample indices."""
    train = generate_dataset(n_train, **kw)
    val = generate_dataset(n_val, start=n_train, **kw)
    return train, val


# -- metrics ------------------------------------------------------------------

def confusion(pred: np.ndarray, true: np.ndarray, K: int) -> np.ndarray:
    """K x K counts, rows = true class, columns = predicted class."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {true.shape}")
    for name, m in (("prediction", pred), ("target", true)):
        if m.size and (m.min() < 0 or m.max() >= K):
            raise DomainError(f"{name} has classes outside [0, {K})")
    idx = true.reshape(-1).astype(np.int64) * K + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=K * K).reshape(K, K)


def _ratio(num: float, den: float) -> float:
    return 1.0 if den == 0 else num / den


def metrics_from_confusion(cm: np.ndarray) -> dict:
    """Per-class IoU, DICE, sensitivity, specificity and their foreground means.

    A class absent from both prediction and target scores 1 on every metric
    and is left out of the means (listed under ``empty_classes``).
    """
    cm = np.asarray(cm, dtype=np.int64)
    K = cm.shape[0]
    total = int(cm.sum())
    per = {"IoU": [], "DICE": [], "sensitivity": [], "specificity": []}
    empty = []
    for k in range(K):
        tp = int(cm[k, k])
        fn = int(cm[k].sum()) - tp
        fp = int(cm[:, k].sum()) - tp
        tn = total - tp - fn - fp
        per["IoU"].append(_ratio(tp, tp + fp + fn))
        per["DICE"].append(_ratio(2 * tp, 2 * tp + fp + fn))
        per["sensitivity"].append(_ratio(tp, tp + fn))
        per["specificity"].append(_ratio(tn, tn + fp))
        if k > 0 and tp + fp + fn == 0:
            empty.append(k)
    counted = [k for k in range(1, K) if k not in empty]
    out = {"per_class": per, "empty_classes": empty}
    for name, vals in per.items():
        out[name] = float(np.mean([vals[k] for k in counted])) if counted else 1.0
    out["mIoU"] = out["IoU"]
    return out


def metrics(pred_mask: np.ndarray, true_mask: np.ndarray, K: int) -> dict:
    return metrics_from_confusion(confusion(pred_mask, true_mask, K))


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    rotate_deg: float = 0.0
    translate_frac: float = 0.0
    hflip: float = 0.0
    vflip: float = 0.0

    @property
    def is_identity(self) -> bool:
        return not (self.rotate_deg or self.translate_frac or self.hflip or self.vflip)


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[..., ::-1].copy(), sample.mask[..., ::-1].copy())


def vflip(sample: Sample) -> Sample:
    return Sample(sample.image[..., ::-1, :].copy(), sample.mask[..., ::-1, :].copy())


def rotate(sample: Sample, degrees: float) -> Sample:
    img = ndimage.rotate(sample.image, degrees, axes=(2, 1), reshape=False, order=1, mode="reflect")
    msk = ndimage.rotate(sample.mask, degrees, axes=(1, 0), reshape=False, order=0, mode="reflect")
    return Sample(img.astype(sample.image.dtype), msk.astype(sample.mask.dtype))


def translate(sample: Sample, dy: int, dx: int) -> Sample:
    img = ndimage.shift(sample.image, (0, dy, dx), order=0, mode="reflect")
    msk = ndimage.shift(sample.mask, (dy, dx), order=0, mode="reflect")
    return Sample(img, msk)


def augment(sample: Sample, policy: AugmentPolicy, rng: np.random.Generator) -> Sample:
    """Random rotation, translation and flips applied identically to image and mask."""
    if policy.is_identity:
        return Sample(sample.image.copy(), sample.mask.copy())
    out = sample
    if policy.rotate_deg:
        out = rotate(out, float(rng.uniform(-policy.rotate_deg, policy.rotate_deg)))
    if policy.translate_frac:
        H, W = out.mask.shape
        dy = int(rng.integers(-int(policy.translate_frac * H), int(policy.translate_frac * H) + 1))
        dx = int(rng.integers(-int(policy.translate_frac * W), int(policy.translate_frac * W) + 1))
        out = translate(out, dy, dx)
    if policy.hflip and rng.random() < policy.hflip:
        out = hflip(out)
    if policy.vflip and rng.random() < policy.vflip:
        out = vflip(out)
    return out


def augment_batch(images: np.ndarray, masks: np.ndarray, policy: AugmentPolicy | None,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if policy is None or policy.is_identity:
        return images, masks
    outs = [augment(Sample(i, m), policy, rng) for i, m in zip(images, masks)]
    return np.stack([o.image for o in outs]), np.stack([o.mask for o in outs])


# -- binary export ------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    n, C, H, W = ds.images.shape
    if ds.num_classes > 255:
        raise DomainError("binary export stores classes as uint8")
    header = _HEADER.pack(MAGIC, VERSION, n, C, H, W, ds.num_classes, 0, ds.seed, ds.noise_level, 0)
    with path.open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.masks, dtype=np.uint8).tobytes())
    return path


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DomainError("dataset file truncated")
    magic, version, n, C, H, W, K, _, seed, noise, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise DomainError(f"not a dataset file (magic {magic!r}, version {version})")
    off = _HEADER.size
    n_img = n * C * H * W
    expected = off + 4 * n_img + n * H * W
    if len(raw) != expected:
        raise DomainError(f"dataset file has {len(raw)} bytes, expected {expected}")
    images = np.frombuffer(raw, dtype="<f4", count=n_img, offset=off).reshape(n, C, H, W).astype(np.float32)
    masks = np.frombuffer(raw, dtype=np.uint8, count=n * H * W, offset=off + 4 * n_img)
    return Dataset(images, masks.reshape(n, H, W).astype(np.int64), K, seed, noise)
