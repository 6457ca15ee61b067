"""Dataset ingestion (IDX containers plus a difficulty-stratified synthetic
generator) and the train-time augmentation pipeline.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray            # [N, C, H, W], values in [0, 1] pre-normalization
    labels: np.ndarray            # [N] int64
    groups: np.ndarray | None     # [N] int64 (synthetic difficulty group), optional
    split: str = "unspecified"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels")
        if self.groups is not None and self.groups.shape[0] != self.labels.shape[0]:
            raise ValueError("group ids must align with labels")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass(frozen=True)
class AugmentConfig:
    crop_padding: int = 4
    flip_prob: float = 0.5
    cutout_side: int = 8
    channel_mean: tuple[float, ...] = (0.0,)
    channel_std: tuple[float, ...] = (1.0,)

    def validate_for(self, h: int, w: int) -> None:
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.cutout_side > min(h, w):
            raise ValueError(f"cutout side {self.cutout_side} exceeds image side {min(h, w)}")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")


# ---------------------------------------------------------------------------
# IDX container


def _read_exact(fh, n, path, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated {what} at byte offset {fh.tell() - len(buf)}")
    return buf


def load_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image (magic 0x803) and label (magic 0x801) files."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, images_path, "dimensions"))
        raw = _read_exact(fh, n * h * w, images_path, "pixel payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float64) / 255.0
    with open(labels_path, "rb") as fh:
        (magic,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: magic 0x{magic:08x} at byte offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (ln,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count"))
        if ln != n:
            raise IdxFormatError(f"{labels_path}: {ln} labels for {n} images")
        labels = np.frombuffer(_read_exact(fh, ln, labels_path, "label payload"), dtype=np.uint8)
    return Dataset(images, labels.astype(np.int64), groups=None)


def save_idx(dataset: Dataset, images_path, labels_path, groups_path=None) -> None:
    """Write the dataset back to IDX (pixels quantized to u8) plus an optional
    sidecar group-id file, one u8 per sample in the same order."""
    imgs = np.round(dataset.images * 255.0).astype(np.uint8)
    n, c, h, w = imgs.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(imgs.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())
    if groups_path is not None and dataset.groups is not None:
        Path(groups_path).write_bytes(dataset.groups.astype(np.uint8).tobytes())


def load_group_ids(path, n: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != n:
        raise IdxFormatError(f"{path}: expected {n} group ids, found {len(raw)} bytes")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


# ---------------------------------------------------------------------------
# synthetic difficulty-stratified generator


def _class_template(k: int, num_classes: int, side: int) -> np.ndarray:
    """Low-frequency class signal: two gaussian bumps at class-specific spots."""
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    angle = 2 * np.pi * k / num_classes
    cy1, cx1 = 0.5 + 0.28 * np.sin(angle), 0.5 + 0.28 * np.cos(angle)
    cy2, cx2 = 0.5 - 0.22 * np.sin(angle + 0.9), 0.5 - 0.22 * np.cos(angle + 0.9)
    sig1, sig2 = 0.14, 0.10
    t = np.exp(-((yy - cy1) ** 2 + (xx - cx1) ** 2) / (2 * sig1 ** 2))
    t += 0.8 * np.exp(-((yy - cy2) ** 2 + (xx - cx2) ** 2) / (2 * sig2 ** 2))
    return t / t.max()


def _clutter(rng: np.random.Generator, side: int) -> np.ndarray:
    """High-frequency distractor: random 2px checkered blocks."""
    coarse = rng.integers(0, 2, size=(side // 2, side // 2)).astype(np.float64)
    return np.kron(coarse, np.ones((2, 2)))


def synth_dataset(n: int, num_classes: int, hard_fraction: float, seed: int,
                  side: int = 32, split: str = "unspecified") -> Dataset:
    """32x32 grayscale images in two difficulty groups.

    Group 0 ("easy"): the class signal at high SNR. Group 1 ("hard"): the
    same signal attenuated and composited over high-frequency clutter.
    Classes are balanced within each group.
    """
    if not 0.0 <= hard_fraction <= 1.0:
        raise ValueError(f"hard_fraction must be in [0, 1], got {hard_fraction}")
    rng = np.random.default_rng(seed)
    templates = np.stack([_class_template(k, num_classes, side) for k in range(num_classes)])
    n_hard = int(round(n * hard_fraction))
    groups = np.zeros(n, dtype=np.int64)
    groups[:n_hard] = 1
    rng.shuffle(groups)
    labels = np.empty(n, dtype=np.int64)
    # balance classes within each group by cycling
    for g in (0, 1):
        idx = np.flatnonzero(groups == g)
        labels[idx] = np.arange(len(idx)) % num_classes
    images = np.empty((n, 1, side, side), dtype=np.float64)
    for i in range(n):
        t = templates[labels[i]]
        if groups[i] == 0:
            img = 0.1 + 0.85 * t + rng.normal(0.0, 0.04, size=(side, side))
        else:
            img = 0.1 + 0.22 * t + 0.5 * _clutter(rng, side) + rng.normal(0.0, 0.08, size=(side, side))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, groups, split=split)


def make_splits(n_train: int, n_val: int, n_test: int, num_classes: int,
                hard_fraction: float, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """One generated pool sliced into disjoint, seed-stable splits."""
    total = synth_dataset(n_train + n_val + n_test, num_classes, hard_fraction, seed)

    def slice_ds(lo, hi, name):
        return Dataset(total.images[lo:hi], total.labels[lo:hi], total.groups[lo:hi], split=name)

    return (
        slice_ds(0, n_train, "train"),
        slice_ds(n_train, n_train + n_val, "val"),
        slice_ds(n_train + n_val, n_train + n_val + n_test, "test"),
    )


# ---------------------------------------------------------------------------
# augmentation


def channel_stats(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std computed once from the training split."""
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    return mean, np.maximum(std, 1e-6)


def normalize(batch: np.ndarray, config: AugmentConfig) -> np.ndarray:
    mean = np.asarray(config.channel_mean, dtype=batch.dtype)[None, :, None, None]
    std = np.asarray(config.channel_std, dtype=batch.dtype)[None, :, None, None]
    return (batch - mean) / std


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Pad-and-random-crop, random horizontal flip, cutout, then normalize.

    The cutout square is placed fully inside the image, so a side equal to
    the image side zeroes the whole image.
    """
    n, c, h, w = batch.shape
    config.validate_for(h, w)
    out = np.empty_like(batch)
    p = config.crop_padding
    padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p))) if p else batch
    for i in range(n):
        if p:
            dy, dx = rng.integers(0, 2 * p + 1, size=2)
            img = padded[i, :, dy:dy + h, dx:dx + w]
        else:
            img = batch[i]
        if config.flip_prob and rng.random() < config.flip_prob:
            img = img[:, :, ::-1]
        img = np.ascontiguousarray(img)
        side = config.cutout_side
        if side:
            cy = int(rng.integers(0, h - side + 1))
            cx = int(rng.integers(0, w - side + 1))
            img[:, cy:cy + side, cx:cx + side] = 0.0
        out[i] = img
    return normalize(out, config)
