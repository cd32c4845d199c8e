"""Dataset readers (IDX, CIFAR-10 binary), a synthetic segmentation set,
deterministic batching, and evaluation metrics."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DatasetError(ValueError):
    pass


class BadMagicError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class CountMismatchError(DatasetError):
    pass


@dataclass
class LabeledImageSet:
    images: np.ndarray      # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray      # (N,) int64
    split: str = "train"


@dataclass
class SegmentationSet:
    images: np.ndarray      # (N, 3, H, W) float32
    masks: np.ndarray       # (N, H, W) int64
    classes: int = 4


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, split: str = "train") -> LabeledImageSet:
    """Read an IDX image/label file pair (plain or gzipped)."""
    img_raw = _read_bytes(images_path)
    lab_raw = _read_bytes(labels_path)
    if len(img_raw) < 16:
        raise TruncatedFileError(f"{images_path}: too short for an IDX image header")
    if len(lab_raw) < 8:
        raise TruncatedFileError(f"{labels_path}: too short for an IDX label header")
    magic, n, rows, cols = struct.unpack(">iiii", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise BadMagicError(f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    lmagic, ln = struct.unpack(">ii", lab_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise BadMagicError(f"{labels_path}: magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(img_raw) != 16 + n * rows * cols:
        raise TruncatedFileError(
            f"{images_path}: {len(img_raw)} bytes, expected {16 + n * rows * cols}")
    if len(lab_raw) != 8 + ln:
        raise TruncatedFileError(f"{labels_path}: {len(lab_raw)} bytes, expected {8 + ln}")
    if n != ln:
        raise CountMismatchError(f"image count {n} != label count {ln}")
    images = np.frombuffer(img_raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return LabeledImageSet(images.astype(np.float32) / 255.0, labels, split)


def write_idx(images_path, labels_path, dataset: LabeledImageSet):
    """Write a (single-channel) LabeledImageSet as an IDX file pair."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DatasetError("write_idx supports single-channel images only")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10(batch_files, split: str = "train") -> LabeledImageSet:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 planar RGB bytes."""
    images, labels = [], []
    for path in batch_files:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise TruncatedFileError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0].astype(np.int64)
        if lab.max() > 9:
            raise DatasetError(f"{path}: label {lab.max()} out of range 0-9")
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    images = np.concatenate(images).astype(np.float32) / 255.0
    return LabeledImageSet(images, np.concatenate(labels), split)


# ---------------------------------------------------------------------------
# synthetic segmentation data
# ---------------------------------------------------------------------------


def _shape_mask(kind: int, h: int, w: int, y0: int, x0: int, sh: int, sw: int) -> np.ndarray:
    """Boolean raster of one shape inside its bounding box."""
    m = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:          # rectangle
        m[y0:y0 + sh, x0:x0 + sw] = True
    elif kind == 1:        # ellipse inscribed in the box
        cy, cx = y0 + (sh - 1) / 2.0, x0 + (sw - 1) / 2.0
        m = (((yy - cy) / (sh / 2.0)) ** 2 + ((xx - cx) / (sw / 2.0)) ** 2) <= 1.0
    else:                  # isoceles triangle, apex at the top of the box
        cx = x0 + (sw - 1) / 2.0
        rel = (yy - y0) / max(sh - 1, 1)
        inside_y = (yy >= y0) & (yy < y0 + sh)
        m = inside_y & (np.abs(xx - cx) <= rel * (sw / 2.0))
    return m


def synth_shapes(n: int, h: int, w: int, classes: int = 4, seed: int = 0,
                 return_meta: bool = False):
    """Images of 1-3 non-overlapping shapes on a noise background.

    Class c in [1, classes) is shape kind c-1 (rectangle, ellipse,
    triangle); 0 is background.  Masks are pixel-exact by construction and
    the whole set is a pure function of the seed.
    """
    if h % 2 or w % 2:
        raise DatasetError(f"synth_shapes: H and W must be even, got {h}x{w}")
    if classes < 2:
        raise DatasetError(f"synth_shapes: need >= 2 classes, got {classes}")
    if min(h, w) < 16:
        raise DatasetError("synth_shapes: image too small to place shapes")
    kinds = min(classes - 1, 3)
    base_colors = np.array([[0.9, 0.2, 0.2], [0.2, 0.9, 0.2], [0.25, 0.35, 0.95]])
    images = np.empty((n, 3, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.int64)
    meta = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img = rng.uniform(0.0, 0.35, size=(3, h, w))
        used = np.zeros((h, w), dtype=bool)
        shapes = []
        n_shapes = rng.integers(1, 4)
        attempts = 0
        while len(shapes) < n_shapes and attempts < 50:
            attempts += 1
            kind = int(rng.integers(0, kinds))
            sh = int(rng.integers(h // 6, h // 2))
            sw = int(rng.integers(w // 6, w // 2))
            y0 = int(rng.integers(0, h - sh))
            x0 = int(rng.integers(0, w - sw))
            if used[y0:y0 + sh, x0:x0 + sw].any():
                continue
            m = _shape_mask(kind, h, w, y0, x0, sh, sw)
            color = np.clip(base_colors[kind] + rng.uniform(-0.1, 0.1, 3), 0.5 * base_colors[kind], 1.0)
            img[:, m] = color[:, None] + rng.uniform(-0.05, 0.05, size=(3, int(m.sum())))
            masks[i][m] = kind + 1
            used[y0:y0 + sh, x0:x0 + sw] = True
            shapes.append({"kind": kind, "bbox": (y0, x0, sh, sw), "area": int(m.sum())})
        images[i] = np.clip(img, 0.0, 1.0)
        meta.append(shapes)
    ds = SegmentationSet(images, masks, classes)
    return (ds, meta) if return_meta else ds


# ---------------------------------------------------------------------------
# batching and metrics
# ---------------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle: a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Yield index arrays covering every sample exactly once per epoch."""
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label (ties -> lower index)."""
    logits = np.asarray(logits)
    pred = logits.reshape(logits.shape[0], -1).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def mean_iou(pred_mask: np.ndarray, true_mask: np.ndarray, classes: int) -> float:
    """Mean per-class IoU; classes absent from both masks are excluded."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise DatasetError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    ious = []
    for c in range(classes):
        p = pred == c
        t = true == c
        union = np.logical_or(p, t).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, t).sum() / union)
    return float(np.mean(ious)) if ious else 0.0
