"""Seeded data sources: a synthetic grating task and the CIFAR-10 binary format."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SyntheticSpec",
    "DataError",
    "gen_synthetic",
    "CIFAR_RECORD_BYTES",
    "CIFAR_MEAN",
    "CIFAR_STD",
    "parse_cifar10_records",
    "encode_cifar10_records",
    "load_cifar10",
    "batches",
    "augment_flip_crop",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.train_images) != len(self.train_labels) or len(self.test_images) != len(self.test_labels):
            raise DataError("label count differs from image count")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_images.shape[1:])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_images, self.train_labels
        if name == "test":
            return self.test_images, self.test_labels
        raise DataError(f"unknown split {name!r}")

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.train_images.astype(dtype), self.train_labels, self.test_images.astype(dtype),
                       self.test_labels, self.num_classes, self.meta)


@dataclass(frozen=True)
class SyntheticSpec:
    """Oriented-grating classification task.

    Class ``k`` is a sinusoidal grating with a class-specific spatial
    frequency and per-channel colour weighting.  Within-class variation is
    Gaussian and scales with ``noise``: a phase offset with standard
    deviation ``2*pi*noise`` radians plus additive pixel noise with standard
    deviation ``noise``.  At ``noise=0`` every image of a class is identical;
    at the default the random phase averages the class mean image towards
    zero, so raw-pixel linear models do poorly while convolutional features
    (local orientation/frequency energy) do well.
    """

    classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 50
    image_size: int = 16
    channels: int = 3
    noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise DataError("classes must be >= 2")
        for name in ("train_per_class", "test_per_class", "image_size", "channels"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if self.classes > len(_frequencies(self.image_size)):
            raise DataError(f"at most {len(_frequencies(self.image_size))} classes fit a {self.image_size}px image")

    def to_dict(self) -> dict:
        return asdict(self)


def _frequencies(size: int) -> list[tuple[int, int]]:
    """Distinct grating wave vectors (up to sign), low frequencies first."""
    top = max(1, size // 4)
    out = []
    for fy in range(0, top + 1):
        for fx in range(-top, top + 1):
            if (fy, fx) == (0, 0) or (fy == 0 and fx < 0):
                continue
            out.append((fy, fx))
    out.sort(key=lambda f: (f[0] ** 2 + f[1] ** 2, f))
    return out


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    freqs = _frequencies(spec.image_size)
    pick = rng.permutation(len(freqs))[: spec.classes]
    waves = [freqs[i] for i in pick]
    colours = rng.uniform(0.2, 1.0, size=(spec.classes, spec.channels))
    colours /= np.linalg.norm(colours, axis=1, keepdims=True) / np.sqrt(spec.channels)
    yy, xx = np.meshgrid(np.arange(spec.image_size), np.arange(spec.image_size), indexing="ij")

    def make(n_per_class: int, stream: int):
        r = np.random.default_rng([spec.seed, stream])
        n = n_per_class * spec.classes
        labels = np.repeat(np.arange(spec.classes), n_per_class)
        phase = r.standard_normal(n) * (2 * np.pi * spec.noise)
        noise = r.standard_normal((n, spec.channels, spec.image_size, spec.image_size)) * spec.noise
        images = np.empty_like(noise)
        for k, (fy, fx) in enumerate(waves):
            idx = labels == k
            arg = 2 * np.pi * (fy * yy + fx * xx) / spec.image_size
            grating = np.cos(arg[None] + phase[idx, None, None])
            images[idx] = colours[k][None, :, None, None] * grating[:, None]
        images += noise
        return images, labels

    tr_x, tr_y = make(spec.train_per_class, 1)
    te_x, te_y = make(spec.test_per_class, 2)
    return Dataset(tr_x, tr_y, te_x, te_y, spec.classes, {"source": "synthetic", **spec.to_dict()})


# --------------------------------------------------------------------------
# CIFAR-10 binary batches

CIFAR_RECORD_BYTES = 3073
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_TEST_FILE = "test_batch.bin"


def parse_cifar10_records(buf: bytes, name: str = "<buffer>") -> tuple[np.ndarray, np.ndarray]:
    """Labels (N,) uint8 and pixels (N, 3, 32, 32) uint8 from raw record bytes."""
    n, rem = divmod(len(buf), CIFAR_RECORD_BYTES)
    if rem:
        raise DataError(f"{name}: truncated record at byte offset {n * CIFAR_RECORD_BYTES} "
                        f"({rem} of {CIFAR_RECORD_BYTES} bytes)")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].copy()
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        raise DataError(f"{name}: label byte {labels[bad[0]]} >= 10 at byte offset {bad[0] * CIFAR_RECORD_BYTES}")
    return labels, raw[:, 1:].reshape(n, 3, 32, 32).copy()


def encode_cifar10_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), 3 * 1024)
    return np.concatenate([labels[:, None], pixels], axis=1).tobytes()


def _subset(labels: np.ndarray, per_class: int | None) -> np.ndarray:
    if per_class is None:
        return np.arange(len(labels))
    keep = []
    for k in range(10):
        keep.extend(np.nonzero(labels == k)[0][:per_class].tolist())
    return np.sort(np.asarray(keep, dtype=np.int64))


def _normalize(pixels: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    return (x - np.asarray(mean)[None, :, None, None]) / np.asarray(std)[None, :, None, None]


def load_cifar10(directory: str | os.PathLike, subset_per_class: int | None = None,
                 test_subset_per_class: int | None = None, mean: Sequence[float] = CIFAR_MEAN,
                 std: Sequence[float] = CIFAR_STD) -> Dataset:
    """Read the standard binary batches from ``directory``.

    Missing training batch files are skipped (at least one is required);
    the subset takes the first ``k`` images of each class in file order.
    """
    directory = os.fspath(directory)
    train_l, train_p = [], []
    for fname in _TRAIN_FILES:
        path = os.path.join(directory, fname)
        if not os.path.exists(path):
            continue
        with open(path, "rb") as fh:
            l, p = parse_cifar10_records(fh.read(), path)
        train_l.append(l)
        train_p.append(p)
    if not train_l:
        raise DataError(f"no CIFAR-10 training batches in {directory}")
    tl, tp = np.concatenate(train_l), np.concatenate(train_p)
    test_path = os.path.join(directory, _TEST_FILE)
    if os.path.exists(test_path):
        with open(test_path, "rb") as fh:
            vl, vp = parse_cifar10_records(fh.read(), test_path)
    else:
        vl, vp = np.zeros(0, np.uint8), np.zeros((0, 3, 32, 32), np.uint8)
    ti, vi = _subset(tl, subset_per_class), _subset(vl, test_subset_per_class)
    return Dataset(_normalize(tp[ti], mean, std), tl[ti].astype(np.int64), _normalize(vp[vi], mean, std),
                   vl[vi].astype(np.int64), 10,
                   {"source": "cifar10", "mean": list(mean), "std": list(std)})


# --------------------------------------------------------------------------
# iteration


def batches(dataset: Dataset, batch_size: int, epoch_seed: int, split: str = "train"
            ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the last partial batch is kept."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    images, labels = dataset.split(split)
    order = np.random.default_rng(epoch_seed).permutation(len(labels))
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        yield images[idx], labels[idx]


def augment_flip_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop, per image."""
    n, c, h, w = images.shape
    out = images.copy()
    flip = rng.random(n) < 0.5
    out[flip] = out[flip, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out
