"""Dataset ingestion and sequence conversion.

Two binary readers (IDX image/label pairs, CIFAR-10 batch files), pixel
sequence conversion with an optional fixed step permutation, block-mean
downsampling for desk-scale runs, and two synthetic sequence generators
whose Bayes accuracy is 1.0 by construction.
"""
import os
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-planar bytes


@dataclass(frozen=True)
class ImageSet:
    """Raw images, float64 in [0,1]: (num, H, W) grayscale or (num, H, W, 3)."""
    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        imgs = np.asarray(self.images, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if imgs.ndim not in (3, 4) or (imgs.ndim == 4 and imgs.shape[3] != 3):
            raise ValueError(f"images must be (num,H,W) or (num,H,W,3), "
                             f"got {imgs.shape}")
        if labs.shape != (imgs.shape[0],):
            raise ValueError("labels must be one integer per image")
        if labs.size and (labs.min() < 0 or labs.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")
        imgs.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "images", imgs)
        object.__setattr__(self, "labels", labs)

    @classmethod
    def from_list(cls, images, labels, classes):
        shapes = {np.asarray(im).shape for im in images}
        if len(shapes) > 1:
            raise DataFormatError(f"mixed image shapes: {sorted(shapes)}")
        return cls(np.asarray(images, dtype=np.float64),
                   np.asarray(labels, dtype=np.int64), classes)


@dataclass(frozen=True)
class SequenceDataset:
    sequences: np.ndarray  # (num, T, input_dim), uniform T enforced by shape
    labels: np.ndarray     # (num,)
    classes: int

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.float64)
        labs = np.asarray(self.labels, dtype=np.int64)
        if seqs.ndim != 3:
            raise ValueError(f"sequences must be (num, T, input_dim), "
                             f"got {seqs.shape}")
        if labs.shape != (seqs.shape[0],):
            raise ValueError("labels must be one integer per sequence")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if labs.size and (labs.min() < 0 or labs.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")
        seqs.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "labels", labs)

    @property
    def num(self):
        return self.sequences.shape[0]

    @property
    def seq_len(self):
        return self.sequences.shape[1]

    @property
    def input_dim(self):
        return self.sequences.shape[2]

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.sequences[idx], self.labels[idx],
                               self.classes)


def _read_be_u32(buf: bytes, offset: int, path: str) -> int:
    if len(buf) < offset + 4:
        raise DataFormatError(
            f"{path}: truncated, needed 4 bytes at offset {offset}, "
            f"file has {len(buf)}")
    return int.from_bytes(buf[offset:offset + 4], "big")


def load_idx(images_path: str, labels_path: str) -> ImageSet:
    """Read an IDX image/label file pair into grayscale images in [0,1].

    Images: big-endian magic 0x00000803, then count, rows, cols, then
    count*rows*cols unsigned bytes. Labels: magic 0x00000801, count, bytes.
    Class count is inferred as max label + 1.
    """
    with open(images_path, "rb") as f:
        buf = f.read()
    magic = _read_be_u32(buf, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_IMAGES_MAGIC:08x}")
    count = _read_be_u32(buf, 4, images_path)
    rows = _read_be_u32(buf, 8, images_path)
    cols = _read_be_u32(buf, 12, images_path)
    want = count * rows * cols
    got = len(buf) - 16
    if got != want:
        kind = "truncated" if got < want else "oversized"
        raise DataFormatError(
            f"{images_path}: {kind}, expected {want} data bytes, got {got}")
    images = np.frombuffer(buf, dtype=np.uint8, offset=16)
    images = images.reshape(count, rows, cols).astype(np.float64) / 255.0

    with open(labels_path, "rb") as f:
        lbuf = f.read()
    magic = _read_be_u32(lbuf, 0, labels_path)
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
            f"expected 0x{IDX_LABELS_MAGIC:08x}")
    lcount = _read_be_u32(lbuf, 4, labels_path)
    if len(lbuf) - 8 != lcount:
        kind = "truncated" if len(lbuf) - 8 < lcount else "oversized"
        raise DataFormatError(
            f"{labels_path}: {kind}, expected {lcount} label bytes, "
            f"got {len(lbuf) - 8}")
    if lcount != count:
        raise DataFormatError(
            f"count mismatch: {count} images vs {lcount} labels")
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=8).astype(np.int64)
    classes = int(labels.max()) + 1 if count else 0
    return ImageSet(images, labels, classes)


def load_cifar10_binary(paths) -> ImageSet:
    """Read CIFAR-10 batch files (3073-byte records, channel-planar RGB)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    all_images, all_labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            buf = f.read()
        if len(buf) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: length {len(buf)} is not a multiple of "
                f"{CIFAR_RECORD}")
        raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = raw[:, 0].astype(np.int64)
        if labels.size and labels.max() > 9:
            bad = int(np.argmax(labels > 9))
            raise DataFormatError(
                f"{path}: record {bad} has label byte {labels[bad]}, "
                f"valid range is 0..9")
        # planar layout: 1024 red bytes, 1024 green, 1024 blue per record
        pixels = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        all_images.append(pixels.astype(np.float64) / 255.0)
        all_labels.append(labels)
    return ImageSet(np.concatenate(all_images), np.concatenate(all_labels), 10)


def to_pixel_sequence(images: ImageSet, order: str = "raster",
                      seed=None) -> SequenceDataset:
    """Flatten each image into a pixel sequence.

    Grayscale H x W becomes T = H*W steps of one intensity; RGB becomes the
    same T with three channels per step. order "fixed_permutation" applies a
    single seed-derived permutation of the step order to every image.
    """
    imgs = images.images
    num = imgs.shape[0]
    if imgs.ndim == 3:
        seqs = imgs.reshape(num, -1, 1)
    else:
        seqs = imgs.reshape(num, -1, 3)
    if order == "fixed_permutation":
        if seed is None:
            raise ValueError("fixed_permutation needs a seed")
        perm = seeding.stream(seed, seeding.DATA).permutation(seqs.shape[1])
        seqs = seqs[:, perm, :]
    elif order != "raster":
        raise ValueError(f"unknown order {order!r}, "
                         f"use 'raster' or 'fixed_permutation'")
    return SequenceDataset(np.ascontiguousarray(seqs), images.labels,
                           images.classes)


def downsample(images: ImageSet, factor: int) -> ImageSet:
    """Block-mean pooling by an integer factor along both image axes."""
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    if factor == 1:
        return images
    imgs = images.images
    h, w = imgs.shape[1], imgs.shape[2]
    if h % factor or w % factor:
        raise ValueError(f"image shape {h}x{w} not divisible by {factor}")
    if imgs.ndim == 3:
        pooled = imgs.reshape(-1, h // factor, factor, w // factor,
                              factor).mean(axis=(2, 4))
    else:
        pooled = imgs.reshape(-1, h // factor, factor, w // factor, factor,
                              3).mean(axis=(2, 4))
    return ImageSet(pooled, images.labels, images.classes)


def _balanced_labels(num, classes, rng):
    # quotas num//classes each, remainder spread over the lowest classes,
    # so every count is within one of num/classes
    counts = np.full(classes, num // classes, dtype=np.int64)
    counts[:num % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    return rng.permutation(labels)


def synthetic_task(kind: str, num: int, seed: int, classes: int = 4,
                   seq_len: int = 50, input_dim=None, noise: float = 1.0,
                   template_density: float = 0.25) -> SequenceDataset:
    """Generate a labeled sequence set whose Bayes accuracy is 1.0.

    delayed_class: step 0 carries a clean one-hot class token (input_dim
    defaults to classes), every later step is noise * N(0,1); the label is
    recoverable only by retaining the first step across the sequence.

    sparse_pattern: C fixed unit-norm sparse templates are drawn once; each
    sequence is pure noise and its label is whichever template has the
    largest dot product with the summed input. Sequences are drawn with
    rejection until each class quota is filled, so the set is balanced to
    within one item per class.
    """
    if num < 1:
        raise ValueError("num must be positive")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    rng = seeding.stream(seed, seeding.DATA)
    if kind == "delayed_class":
        dim = classes if input_dim is None else int(input_dim)
        if dim < classes:
            raise ValueError("delayed_class needs input_dim >= classes")
        labels = _balanced_labels(num, classes, rng)
        seqs = np.zeros((num, seq_len, dim))
        if seq_len > 1:
            seqs[:, 1:, :] = noise * rng.standard_normal(
                (num, seq_len - 1, dim))
        seqs[np.arange(num), 0, labels] = 1.0
        return SequenceDataset(seqs, labels, classes)
    if kind == "sparse_pattern":
        dim = 2 * classes if input_dim is None else int(input_dim)
        templates = np.zeros((classes, dim))
        for c in range(classes):
            row = np.zeros(dim)
            while not row.any():
                mask = rng.random(dim) < template_density
                row = np.where(mask, rng.standard_normal(dim), 0.0)
            templates[c] = row / np.sqrt(row @ row)
        quota = np.full(classes, num // classes, dtype=np.int64)
        quota[:num % classes] += 1
        seqs = np.zeros((num, seq_len, dim))
        labels = np.zeros(num, dtype=np.int64)
        filled = 0
        attempts = 0
        while filled < num:
            attempts += 1
            if attempts > 1000 * num:
                raise RuntimeError("sparse_pattern rejection did not fill "
                                   "the class quotas; widen the templates")
            s = rng.standard_normal((seq_len, dim)) / np.sqrt(seq_len)
            label = int(np.argmax(templates @ s.sum(axis=0)))
            if quota[label] == 0:
                continue
            quota[label] -= 1
            seqs[filled] = s
            labels[filled] = label
            filled += 1
        perm = rng.permutation(num)
        return SequenceDataset(seqs[perm], labels[perm], classes)
    raise ValueError(f"unknown synthetic task kind {kind!r}")
