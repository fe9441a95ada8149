"""Image datasets: IDX-style binary files, a synthetic generator and batching.

File layout (all integers unsigned 32-bit big-endian)::

    images:  b"FCFDIMG1" count channels height width  <count*channels*height*width uint8, row-major>
    labels:  b"FCFDLBL1" count                         <count uint8>
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

IMAGE_MAGIC = b"FCFDIMG1"
LABEL_MAGIC = b"FCFDLBL1"


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageDataset:
    images: np.ndarray          # uint8 (count, channels, height, width)
    labels: np.ndarray          # int64 (count,)
    num_classes: int
    split: str = "train"
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape (count, channels, height, width)")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def channel_stats(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        x = self.images.astype(np.float64) / 255.0
        return tuple(x.mean(axis=(0, 2, 3)).tolist()), tuple(x.std(axis=(0, 2, 3)).tolist())

    def with_normalization(self, mean, std) -> "ImageDataset":
        return replace(self, mean=tuple(mean), std=tuple(std))

    def with_labels(self, labels: np.ndarray) -> "ImageDataset":
        return replace(self, labels=np.asarray(labels, dtype=np.int64))


@dataclass
class DataBatch:
    x: torch.Tensor
    y: torch.Tensor


def write_idx_dataset(ds: ImageDataset, images_path, labels_path) -> None:
    n, c, h, w = ds.images.shape
    with open(images_path, "wb") as f:
        f.write(IMAGE_MAGIC + struct.pack(">4I", n, c, h, w))
        f.write(np.ascontiguousarray(ds.images).tobytes())
    if ds.labels.max(initial=0) > 255:
        raise ValueError("labels must fit in one byte")
    with open(labels_path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack(">I", n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None,
                     split: str = "train") -> ImageDataset:
    raw = Path(images_path).read_bytes()
    if raw[:8] != IMAGE_MAGIC:
        raise ParseError(f"bad image magic {raw[:8]!r}, expected {IMAGE_MAGIC!r}", 0)
    if len(raw) < 24:
        raise ParseError("truncated image header", len(raw))
    n, c, h, w = struct.unpack(">4I", raw[8:24])
    size = n * c * h * w
    if len(raw) - 24 < size:
        raise ParseError(f"truncated image payload: header declares {n} images of {c}x{h}x{w} "
                         f"({size} bytes) but only {len(raw) - 24} follow", len(raw))
    if len(raw) - 24 > size:
        raise ParseError(f"{len(raw) - 24 - size} trailing bytes after image payload", 24 + size)
    images = np.frombuffer(raw, dtype=np.uint8, offset=24).reshape(n, c, h, w).copy()

    raw = Path(labels_path).read_bytes()
    if raw[:8] != LABEL_MAGIC:
        raise ParseError(f"bad label magic {raw[:8]!r}, expected {LABEL_MAGIC!r}", 0)
    if len(raw) < 12:
        raise ParseError("truncated label header", len(raw))
    (m,) = struct.unpack(">I", raw[8:12])
    if len(raw) - 12 != m:
        raise ParseError(f"label payload has {len(raw) - 12} bytes, header declares {m}", min(len(raw), 12 + m))
    if m != n:
        raise ParseError(f"label count {m} does not match image count {n}", 8)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=12).astype(np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if m else 1
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise ParseError(f"label {labels[bad[0]]} out of range [0, {num_classes})", 12 + int(bad[0]))
    return ImageDataset(images, labels, num_classes, split)


def read_cifar_binary(paths: Sequence, cifar100: bool = False, coarse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Parse CIFAR binary batches.

    CIFAR-10 records are ``<label><3072 pixels>``; CIFAR-100 records are
    ``<coarse><fine><3072 pixels>`` and yield fine labels unless ``coarse``.
    """
    if coarse and not cifar100:
        raise ValueError("coarse labels exist only in CIFAR-100 records")
    label_bytes = 2 if cifar100 else 1
    column = 0 if coarse else label_bytes - 1
    rec = label_bytes + 3072
    images, labels = [], []
    for p in paths:
        raw = np.fromfile(p, dtype=np.uint8)
        if raw.size % rec:
            raise ParseError(f"{p}: size {raw.size} is not a multiple of the {rec}-byte record", raw.size)
        raw = raw.reshape(-1, rec)
        labels.append(raw[:, column].astype(np.int64))
        images.append(raw[:, label_bytes:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def _sphere_points(n: int, radius: float) -> np.ndarray:
    """``n`` near-uniform points on a sphere (Fibonacci lattice)."""
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azimuth = math.pi * (1 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], 1)


def make_synthetic(num_classes: int = 10, per_class: int = 600, image_size: int = 32, seed: int = 0,
                   split: str = "train", noise: float = 1.0) -> ImageDataset:
    """Class-conditional oriented gratings with random phase, colour and distractors.

    The class is carried by the orientation and spatial frequency of a grating
    whose phase is uniformly random, so the class-conditional pixel means are
    nearly identical and a linear read-out fails, while oriented-energy
    detectors (a small CNN) succeed.  A weak per-class tint, spread evenly over
    a sphere in RGB so that no two classes share it, separates the class means.  Class structure depends only on ``seed``; ``split`` selects an
    independent sample stream.
    """
    if num_classes < 1 or per_class < 1 or image_size < 2:
        raise ValueError("num_classes, per_class and image_size must be positive (image_size >= 2)")
    cls_rng = np.random.default_rng([seed, 0])
    angles = (np.arange(num_classes) * math.pi / num_classes) + cls_rng.uniform(0, math.pi / num_classes)
    freqs = np.where(np.arange(num_classes) % 2 == 0, 3.0, 4.5) / image_size
    tints = _sphere_points(num_classes, 0.1)

    stream = {"train": 1, "eval": 2, "test": 2}.get(split, 3)
    rng = np.random.default_rng([seed, stream])
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    yy, xx = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    yy = yy[None].astype(np.float64)
    xx = xx[None].astype(np.float64)

    theta = angles[labels] + rng.normal(0, 0.06, n)
    freq = freqs[labels] * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0, 2 * math.pi, n)
    contrast = rng.uniform(0.6, 1.0, n)
    proj = xx * np.cos(theta)[:, None, None] + yy * np.sin(theta)[:, None, None]
    grating = np.sin(2 * math.pi * freq[:, None, None] * proj + phase[:, None, None]) * contrast[:, None, None]

    d_theta = rng.uniform(0, math.pi, n)
    d_freq = rng.uniform(1.5, 6.0, n) / image_size
    d_proj = xx * np.cos(d_theta)[:, None, None] + yy * np.sin(d_theta)[:, None, None]
    distractor = 0.35 * np.sin(2 * math.pi * d_freq[:, None, None] * d_proj + rng.uniform(0, 2 * math.pi, n)[:, None, None])

    colour = 1.0 + 0.3 * rng.normal(size=(n, 3))
    offset = rng.normal(0, 0.12, size=(n, 3)) + tints[labels]
    img = (0.5 + 0.25 * (colour[:, :, None, None] * grating[:, None] + distractor[:, None])
           + offset[:, :, None, None] + noise * rng.normal(size=(n, 3, image_size, image_size)))
    images = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels, num_classes, split)


def desk_datasets(seed: int = 0, num_classes: int = 10, per_class: int = 300, eval_per_class: int = 300,
                  image_size: int = 32, noise: float = 1.0) -> tuple[ImageDataset, ImageDataset]:
    """Default desk-scale train/eval pair, normalized with train statistics."""
    train = make_synthetic(num_classes, per_class, image_size, seed, "train", noise)
    held = make_synthetic(num_classes, eval_per_class, image_size, seed, "eval", noise)
    mean, std = train.channel_stats()
    return train.with_normalization(mean, std), held.with_normalization(mean, std)


def to_tensor(ds: ImageDataset, index=None, dtype=torch.float32) -> torch.Tensor:
    imgs = ds.images if index is None else ds.images[index]
    x = torch.from_numpy(np.ascontiguousarray(imgs)).to(dtype) / 255.0
    if ds.mean is not None:
        mean = torch.tensor(ds.mean, dtype=dtype).view(1, -1, 1, 1)
        std = torch.tensor(ds.std, dtype=dtype).view(1, -1, 1, 1)
        x = (x - mean) / std
    return x


def augment(x: torch.Tensor, generator: torch.Generator | None = None, enabled: bool = True,
            flip: torch.Tensor | bool | None = None, offsets: torch.Tensor | tuple[int, int] | None = None,
            pad: int = 4) -> torch.Tensor:
    """Zero-pad by ``pad``, random crop back to size, random horizontal flip (p = 0.5).

    ``flip`` and ``offsets`` force the otherwise random choices: a bool or a
    per-sample bool tensor, and a ``(dy, dx)`` pair or a ``(batch, 2)`` tensor.
    """
    if not enabled:
        return x
    b, _, h, w = x.shape
    if offsets is None:
        offsets = torch.randint(0, 2 * pad + 1, (b, 2), generator=generator)
    elif isinstance(offsets, tuple):
        offsets = torch.tensor([offsets] * b)
    if flip is None:
        flip = torch.rand(b, generator=generator) < 0.5
    elif isinstance(flip, bool):
        flip = torch.full((b,), flip)
    padded = F.pad(x, (pad, pad, pad, pad))
    out = torch.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets.tolist())])
    return torch.where(flip.view(b, 1, 1, 1), out.flip(3), out)


def iterate_batches(ds: ImageDataset, batch_size: int, shuffle: bool = False,
                    generator: torch.Generator | None = None, train_augment: bool = False,
                    drop_last: bool = False, dtype=torch.float32) -> Iterator[DataBatch]:
    if train_augment and ds.split != "train":
        raise ValueError("augmentation applies to the train split only")
    n = len(ds)
    order = torch.randperm(n, generator=generator).numpy() if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        x = to_tensor(ds, idx, dtype)
        if train_augment:
            x = augment(x, generator)
        yield DataBatch(x, torch.from_numpy(ds.labels[idx]))


SPLIT_FILES = {"train": ("train-images.idx", "train-labels.idx"), "eval": ("eval-images.idx", "eval-labels.idx")}


def write_data_dir(directory, train: ImageDataset, held: ImageDataset) -> list[Path]:
    """Write a train/eval pair in the directory layout read by :func:`load_data_dir`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for split, ds in (("train", train), ("eval", held)):
        paths = [directory / name for name in SPLIT_FILES[split]]
        write_idx_dataset(ds, *paths)
        written += paths
    return written


def load_data_dir(directory, num_classes: int | None = None) -> tuple[ImageDataset, ImageDataset]:
    """Load ``{train,eval}-{images,labels}.idx``, normalized with train statistics."""
    directory = Path(directory)
    train = load_idx_dataset(*(directory / n for n in SPLIT_FILES["train"]), num_classes, "train")
    held = load_idx_dataset(*(directory / n for n in SPLIT_FILES["eval"]), num_classes or train.num_classes, "eval")
    mean, std = train.channel_stats()
    return train.with_normalization(mean, std), held.with_normalization(mean, std)
