"""Synthetic multi-task datasets with planted ground-truth informativeness,
the CIFAR-100 binary reader, and parameterized image corruptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import checkpoint

F32 = np.float32


class DataError(ValueError):
    pass


def _splits(n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """70/15/15 train/val/test split by seeded shuffle."""
    order = rng.permutation(n)
    n_train = int(n * 0.70)
    n_val = int(n * 0.15)
    return {
        "train": order[:n_train],
        "val": order[n_train:n_train + n_val],
        "test": order[n_train + n_val:],
    }


@dataclass
class AttributeDataset:
    """Images with K binary attributes, each determined by a planted patch."""

    images: np.ndarray              # (N, 1, H, W)
    labels: np.ndarray              # (N, K) in {0,1}
    planted_map: list[np.ndarray]   # per attribute: flat pixel indices of its patch
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    def subset(self, split: str):
        idx = self.splits[split]
        return self.images[idx], self.labels[idx]


@dataclass
class HierarchyDataset:
    """Images with coarse/fine class labels; every fine class maps to exactly
    one superclass."""

    images: np.ndarray          # (N, C, H, W)
    coarse_labels: np.ndarray   # (N,) in [0, S)
    fine_labels: np.ndarray     # (N,) in [0, F)
    fine_to_coarse: np.ndarray  # (F,)
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_coarse(self) -> int:
        return len(np.unique(self.fine_to_coarse))

    @property
    def n_fine(self) -> int:
        return len(self.fine_to_coarse)

    def subset(self, split: str):
        idx = self.splits[split]
        return self.images[idx], self.coarse_labels[idx], self.fine_labels[idx]


def _smooth_background(rng: np.random.Generator, shape, sigma=2.0, amp=0.15):
    sig = (0,) * (len(shape) - 2) + (sigma, sigma)
    bg = gaussian_filter(rng.normal(size=shape), sigma=sig)
    scale = bg.std() or 1.0
    return 0.5 + amp * bg / scale


def gen_attribute_dataset(n_tasks: int, n_samples: int, image_size: int = 16,
                          patch_size: int = 4, noise_rate: float = 0.0,
                          seed: int = 0, pattern_amp: float = 0.35) -> AttributeDataset:
    """Smooth random backgrounds plus per-attribute localized patterns.

    Attribute k is 1 iff pattern k was added; recorded labels are flipped at
    noise_rate. planted_map holds the flat pixel indices of each pattern.
    """
    if not 0 <= noise_rate < 0.5:
        raise DataError(f"noise rate must be in [0, 0.5), got {noise_rate}")
    per_row = image_size // patch_size
    if n_tasks > per_row * per_row:
        raise DataError(
            f"{n_tasks} patterns of size {patch_size} do not fit in a "
            f"{image_size}x{image_size} image")
    rng = np.random.default_rng(seed)

    # fixed per-attribute pattern and location, on a non-overlapping grid
    cells = rng.permutation(per_row * per_row)[:n_tasks]
    patterns = rng.normal(size=(n_tasks, patch_size, patch_size))
    patterns /= np.abs(patterns).max(axis=(1, 2), keepdims=True)
    planted = []
    slices = []
    for k in range(n_tasks):
        r, c = divmod(int(cells[k]), per_row)
        rs, cs = r * patch_size, c * patch_size
        slices.append((slice(rs, rs + patch_size), slice(cs, cs + patch_size)))
        grid_r, grid_c = np.mgrid[rs:rs + patch_size, cs:cs + patch_size]
        planted.append((grid_r * image_size + grid_c).ravel())

    # exactly balanced labels per attribute, then a seeded shuffle per task
    half = n_samples // 2
    true_labels = np.zeros((n_samples, n_tasks), dtype=np.int64)
    for k in range(n_tasks):
        col = np.concatenate([np.ones(half, np.int64),
                              np.zeros(n_samples - half, np.int64)])
        true_labels[:, k] = rng.permutation(col)

    images = _smooth_background(rng, (n_samples, 1, image_size, image_size))
    for k in range(n_tasks):
        on = true_labels[:, k] == 1
        images[on, 0, slices[k][0], slices[k][1]] += pattern_amp * patterns[k]
    images = np.clip(images, 0.0, 1.0).astype(F32)

    labels = true_labels.copy()
    if noise_rate > 0:
        flips = rng.random((n_samples, n_tasks)) < noise_rate
        labels[flips] = 1 - labels[flips]

    return AttributeDataset(images=images, labels=labels, planted_map=planted,
                            splits=_splits(n_samples, rng))


def gen_hierarchy_dataset(n_coarse: int, n_fine: int, n_samples: int,
                          image_size: int = 32, channels: int = 3, seed: int = 0,
                          coarse_amp: float = 0.30, fine_amp: float = 0.18,
                          noise_amp: float = 0.10) -> HierarchyDataset:
    """Superclass-shared base pattern plus a class-specific perturbation."""
    if n_fine % n_coarse:
        raise DataError(f"{n_fine} fine classes not divisible by {n_coarse} superclasses")
    rng = np.random.default_rng(seed)
    fine_to_coarse = np.repeat(np.arange(n_coarse), n_fine // n_coarse)

    shape = (channels, image_size, image_size)
    base = gaussian_filter(rng.normal(size=(n_coarse,) + shape), sigma=(0, 0, 2, 2))
    base /= np.abs(base).max(axis=(1, 2, 3), keepdims=True)
    pert = gaussian_filter(rng.normal(size=(n_fine,) + shape), sigma=(0, 0, 1, 1))
    pert /= np.abs(pert).max(axis=(1, 2, 3), keepdims=True)

    fine_labels = rng.permutation(np.arange(n_samples) % n_fine)
    coarse_labels = fine_to_coarse[fine_labels]
    images = (0.5
              + coarse_amp * base[coarse_labels]
              + fine_amp * pert[fine_labels]
              + noise_amp * rng.normal(size=(n_samples,) + shape))
    images = np.clip(images, 0.0, 1.0).astype(F32)
    return HierarchyDataset(images=images, coarse_labels=coarse_labels,
                            fine_labels=fine_labels, fine_to_coarse=fine_to_coarse,
                            splits=_splits(n_samples, rng))


CIFAR_RECORD = 3074  # 1 coarse byte + 1 fine byte + 3072 pixels


def load_cifar100_binary(path, seed: int = 0) -> HierarchyDataset:
    """Parse the CIFAR-100 binary format (coarse byte, fine byte, 3072 pixels)."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD:
        raise DataError(f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD}")
    n = len(data) // CIFAR_RECORD
    rec = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    bad = np.nonzero((coarse > 19) | (fine > 99))[0]
    if bad.size:
        raise DataError(f"{path}: record {bad[0]} has out-of-range label bytes")
    images = (rec[:, 2:].reshape(n, 3, 32, 32).astype(F32) / 255.0)
    fine_to_coarse = np.full(100, -1, dtype=np.int64)
    fine_to_coarse[fine] = coarse
    rng = np.random.default_rng(seed)
    return HierarchyDataset(images=images, coarse_labels=coarse, fine_labels=fine,
                            fine_to_coarse=fine_to_coarse, splits=_splits(n, rng))


# --- corruptions ------------------------------------------------------------

CORRUPTION_KINDS = ("gaussian_noise", "blur", "contrast", "brightness",
                    "pixel_dropout", "saturate")

# severity-indexed parameter tables; index 0 is the identity
SEVERITY_TABLES = {
    "gaussian_noise": [0.0, 0.04, 0.08, 0.12, 0.18, 0.26],    # added noise sigma
    "blur": [0.0, 0.4, 0.6, 0.9, 1.3, 1.8],                   # gaussian sigma
    "contrast": [1.0, 0.75, 0.6, 0.45, 0.3, 0.2],             # scale around mean
    "brightness": [0.0, 0.05, 0.1, 0.16, 0.22, 0.3],          # additive shift
    "pixel_dropout": [0.0, 0.02, 0.05, 0.10, 0.17, 0.25],     # zeroed fraction
    "saturate": [1.0, 1.5, 2.0, 2.8, 0.4, 0.15],              # channel spread scale
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise DataError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise DataError(f"severity must be in 0..5, got {self.severity}")


def corrupt(image: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply a corruption; accepts (C,H,W) or (N,C,H,W), output clamped to [0,1]."""
    if spec.severity == 0:
        return image.astype(F32)
    x = image.astype(np.float64)
    batched = x.ndim == 4
    p = SEVERITY_TABLES[spec.kind][spec.severity]
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0.0, p, size=x.shape)
    elif spec.kind == "blur":
        sig = (0, 0, p, p) if batched else (0, p, p)
        x = gaussian_filter(x, sigma=sig)
    elif spec.kind == "contrast":
        axes = tuple(range(1, x.ndim)) if batched else None
        mean = x.mean(axis=axes, keepdims=True) if batched else x.mean()
        x = (x - mean) * p + mean
    elif spec.kind == "brightness":
        x = x + p
    elif spec.kind == "pixel_dropout":
        ch_axis = 1 if batched else 0
        spatial = x.shape[:1] + x.shape[2:] if batched else x.shape[1:]
        mask = rng.random(spatial) < p
        x = x * ~np.expand_dims(mask, ch_axis)
    elif spec.kind == "saturate":
        ch_axis = 1 if batched else 0
        gray = x.mean(axis=ch_axis, keepdims=True)
        x = gray + (x - gray) * p
    return np.clip(x, 0.0, 1.0).astype(F32)


# --- container import/export ------------------------------------------------

def save_dataset(path, ds) -> None:
    arrays: dict[str, np.ndarray] = {"images": ds.images}
    if isinstance(ds, AttributeDataset):
        arrays["labels"] = ds.labels
        for k, idx in enumerate(ds.planted_map):
            arrays[f"planted/{k}"] = idx
    else:
        arrays["coarse_labels"] = ds.coarse_labels
        arrays["fine_labels"] = ds.fine_labels
        arrays["fine_to_coarse"] = ds.fine_to_coarse
    for name, idx in ds.splits.items():
        arrays[f"split/{name}"] = idx
    checkpoint.save_arrays(path, arrays)


def load_dataset(path):
    arrays = checkpoint.load_arrays(path)
    splits = {name.split("/", 1)[1]: arr for name, arr in arrays.items()
              if name.startswith("split/")}
    if "labels" in arrays:
        planted = [arrays[f"planted/{k}"]
                   for k in range(sum(1 for n in arrays if n.startswith("planted/")))]
        return AttributeDataset(images=arrays["images"], labels=arrays["labels"],
                                planted_map=planted, splits=splits)
    return HierarchyDataset(images=arrays["images"],
                            coarse_labels=arrays["coarse_labels"],
                            fine_labels=arrays["fine_labels"],
                            fine_to_coarse=arrays["fine_to_coarse"], splits=splits)
