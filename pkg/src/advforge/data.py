"""Dataset ingestion, balanced splitting, and the image-superimposition mixer.

Pixels stay in [0, 255] throughout so perturbation budgets keep their raw
magnitudes; standardization happens inside the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes


class DataError(RuntimeError):
    """Malformed dataset files or invalid dataset operations."""


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32, values in [0, 255]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise DataError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 255):
            raise DataError("pixel outside [0, 255]")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> LabeledDataset:
    """Read the big-endian IDX image/label pair used by the classic digit sets."""
    img_bytes = Path(images_path).read_bytes()
    if len(img_bytes) < 16:
        raise DataError(f"{images_path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", img_bytes[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad magic 0x{magic:08x}")
    if len(img_bytes) != 16 + n * h * w:
        raise DataError(f"{images_path}: expected {n * h * w} pixel bytes, "
                        f"got {len(img_bytes) - 16}")
    images = np.frombuffer(img_bytes, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    lbl_bytes = Path(labels_path).read_bytes()
    if len(lbl_bytes) < 8:
        raise DataError(f"{labels_path}: truncated IDX header")
    lmagic, ln = struct.unpack(">II", lbl_bytes[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad magic 0x{lmagic:08x}")
    if ln != n:
        raise DataError(f"label count {ln} != image count {n}")
    if len(lbl_bytes) != 8 + ln:
        raise DataError(f"{labels_path}: expected {ln} label bytes, got {len(lbl_bytes) - 8}")
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(images.astype(np.float32), labels, classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Inverse of load_idx; pixels are rounded into uint8."""
    n, c, h, w = images.shape
    if c != 1:
        raise DataError("IDX files store single-channel images")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(np.clip(np.rint(images), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar_binary(paths) -> LabeledDataset:
    """Read CIFAR-10 binary batches: 3073-byte records, R/G/B planes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks, labels = [], []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataError(f"{path}: length {len(raw)} not a multiple of {CIFAR_RECORD_BYTES}")
        n = len(raw) // CIFAR_RECORD_BYTES
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
        lab = rec[:, 0].astype(np.int64)
        if len(lab) and lab.max() > 9:
            raise DataError(f"{path}: label byte {int(lab.max())} > 9")
        chunks.append(rec[:, 1:].reshape(n, 3, 32, 32).astype(np.float32))
        labels.append(lab)
    return LabeledDataset(np.concatenate(chunks), np.concatenate(labels), 10)


def holdout_split(ds: LabeledDataset, fraction: float = 0.8,
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified train/val split; each class contributes floor(fraction * n_c)."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must lie strictly in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == cls)
        if len(members) == 0:
            raise DataError(f"class {cls} is empty")
        members = members[rng.permutation(len(members))]
        cut = int(np.floor(fraction * len(members)))
        train_idx.append(members[:cut])
        val_idx.append(members[cut:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return ds.subset(train_idx), ds.subset(val_idx)


def balance_classes(ds: LabeledDataset, per_class: int, seed: int = 0) -> LabeledDataset:
    """Deterministically keep exactly per_class examples of every class."""
    rng = np.random.default_rng(seed)
    keep = []
    for cls in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == cls)
        if len(members) < per_class:
            raise DataError(f"class {cls} has only {len(members)} images, need {per_class}")
        members = members[rng.permutation(len(members))]
        keep.append(members[:per_class])
    return ds.subset(np.sort(np.concatenate(keep)))


@dataclass
class MixConfig:
    """Superimposition settings: fixed weight or Beta-distributed weight."""
    mode: str = "beta"  # "fixed" | "beta"
    alpha: float = 0.4
    p: float = 2.0
    q: float = 4.0
    kl_weight: float = 10.0

    def __post_init__(self):
        if self.mode not in ("fixed", "beta"):
            raise DataError(f"unknown mix mode {self.mode!r}")
        if self.mode == "fixed" and not 0.0 < self.alpha < 0.5:
            raise DataError(f"fixed alpha must lie in (0, 0.5), got {self.alpha}")
        if self.mode == "beta" and (self.p <= 0 or self.q <= 0):
            raise DataError(f"beta parameters must be positive, got p={self.p}, q={self.q}")
        if self.kl_weight < 0:
            raise DataError("kl_weight must be non-negative")


MAX_ALPHA_RETRIES = 1000


def sample_alpha(cfg: MixConfig, rng: np.random.Generator) -> float:
    """Fixed value, or a Beta(p, q) draw rejection-resampled into (0, 0.5)."""
    if cfg.mode == "fixed":
        return cfg.alpha
    for _ in range(MAX_ALPHA_RETRIES):
        a = float(rng.beta(cfg.p, cfg.q))
        if 0.0 < a < 0.5:
            return a
    raise DataError(f"no Beta({cfg.p}, {cfg.q}) draw below 0.5 in {MAX_ALPHA_RETRIES} tries")


def mix_images(x_i: np.ndarray, x_r: np.ndarray, alpha: float) -> np.ndarray:
    """Superimpose a partner image: (1 - alpha) * x_i + alpha * x_r.

    The result inherits the label of x_i; alpha below one half keeps the
    original image dominant.
    """
    if not 0.0 < alpha < 0.5:
        raise DataError(f"alpha must lie in (0, 0.5), got {alpha}")
    if x_i.shape != x_r.shape:
        raise DataError(f"shape mismatch: {x_i.shape} vs {x_r.shape}")
    a = np.float32(alpha)
    return (np.float32(1.0) - a) * x_i + a * x_r


# ---------------------------------------------------------------------------
# Self-contained sample data: procedurally rendered digit glyphs. Used by the
# test-suite and by configs with dataset format "synthetic", so experiments
# run without downloading anything.
# ---------------------------------------------------------------------------

_GLYPHS = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],  # 0
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],  # 1
    ["01110", "10001", "00001", "00110", "01000", "10000", "11111"],  # 2
    ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],  # 3
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],  # 4
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],  # 5
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],  # 6
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],  # 7
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],  # 8
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],  # 9
]


def _glyph_templates(size: int) -> np.ndarray:
    """Upscale the 5x7 bitmaps onto size x size canvases, centered."""
    out = np.zeros((10, size, size), dtype=np.float32)
    scale = max(1, (size - 6) // 7)
    for k, rows in enumerate(_GLYPHS):
        bitmap = np.array([[ch == "1" for ch in row] for row in rows], dtype=np.float32)
        big = np.kron(bitmap, np.ones((scale, scale), dtype=np.float32))
        oh = (size - big.shape[0]) // 2
        ow = (size - big.shape[1]) // 2
        out[k, oh:oh + big.shape[0], ow:ow + big.shape[1]] = big
    return out


def synthetic_glyphs(per_class: int, size: int = 28, seed: int = 0,
                     jitter: float = 1.0) -> LabeledDataset:
    """Render a balanced 10-class digit-glyph dataset with random similarity
    transforms, contrast variation and pixel noise. ``jitter`` scales the
    distortion strength."""
    rng = np.random.default_rng(seed)
    templates = _glyph_templates(size)
    n = per_class * 10
    labels = np.repeat(np.arange(10, dtype=np.int64), per_class)

    # inverse-warp sampling grid, batched over all images
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    center = (size - 1) / 2.0
    grid = np.stack([ys.ravel() - center, xs.ravel() - center], axis=1)  # (P, 2)

    theta = rng.uniform(-0.30, 0.30, size=n).astype(np.float32) * jitter
    scl = (1.0 + rng.uniform(-0.20, 0.20, size=n).astype(np.float32) * jitter)
    shift = rng.uniform(-3.0, 3.0, size=(n, 2)).astype(np.float32) * jitter
    cos, sin = np.cos(theta) / scl, np.sin(theta) / scl
    rot = np.stack([np.stack([cos, -sin], axis=1),
                    np.stack([sin, cos], axis=1)], axis=1)  # (n, 2, 2)
    src = grid[None, :, :] @ rot.transpose(0, 2, 1) + center - shift[:, None, :]

    y0 = np.clip(np.floor(src[:, :, 0]), 0, size - 2).astype(np.int32)
    x0 = np.clip(np.floor(src[:, :, 1]), 0, size - 2).astype(np.int32)
    fy = np.clip(src[:, :, 0] - y0, 0.0, 1.0).astype(np.float32)
    fx = np.clip(src[:, :, 1] - x0, 0.0, 1.0).astype(np.float32)

    tpl = templates[labels]  # (n, size, size)
    flat = tpl.reshape(n, -1)
    pitch = size
    idx00 = y0 * pitch + x0
    g00 = np.take_along_axis(flat, idx00, axis=1)
    g01 = np.take_along_axis(flat, idx00 + 1, axis=1)
    g10 = np.take_along_axis(flat, idx00 + pitch, axis=1)
    g11 = np.take_along_axis(flat, idx00 + pitch + 1, axis=1)
    warped = ((1 - fy) * ((1 - fx) * g00 + fx * g01)
              + fy * ((1 - fx) * g10 + fx * g11)).reshape(n, size, size)

    fg = rng.uniform(150.0, 255.0, size=(n, 1, 1)).astype(np.float32)
    bg = rng.uniform(0.0, 50.0, size=(n, 1, 1)).astype(np.float32)
    img = bg + warped * (fg - bg)
    img += rng.normal(0.0, 14.0 * jitter, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 255.0)

    order = rng.permutation(n)
    return LabeledDataset(img[order][:, None, :, :], labels[order], 10)
