"""
Dataset loaders, the synthetic desk-scale generator and file exporters.

Images are float64 arrays of shape H x W x C with values in [0, 1].
"""

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import DatasetFormatError, EmptyDatasetError
from src.utils import clamp_unit

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_SIDE = 28
CIFAR_SIDE = 32
CIFAR_RECORD = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR_CLASSES = 10


@dataclass(frozen=True)
class Dataset:
    name: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) == 0:
            raise EmptyDatasetError(f"dataset {self.name!r} has no samples")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def sample(self, index: int) -> Tuple[np.ndarray, int]:
        return self.images[index], int(self.labels[index])

    def select(self, count: int, seed: int) -> List[int]:
        """Seed-driven random subset of sample indices (without replacement)."""
        if count < 1:
            raise ValueError("count must be at least 1")
        if count > len(self):
            logger.warning(f"Requested {count} samples but {self.name} holds {len(self)}; using all")
            count = len(self)
        rng = np.random.default_rng(seed)
        return [int(index) for index in rng.choice(len(self), size=count, replace=False)]


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as handle:
            return handle.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DatasetFormatError(f"{what}: truncated IDX header", len(raw))
    found = int.from_bytes(raw[:4], "big")
    if found != magic:
        raise DatasetFormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetFormatError(f"{what}: truncated IDX dimensions", len(raw))
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    payload = int(np.prod(dims))
    if len(raw) < header_end + payload:
        raise DatasetFormatError(
            f"{what}: truncated data, expected {payload} bytes after the header, found {len(raw) - header_end}",
            len(raw),
        )
    if len(raw) > header_end + payload:
        raise DatasetFormatError(f"{what}: unexpected trailing bytes", header_end + payload)
    return np.frombuffer(raw, dtype=np.uint8, count=payload, offset=header_end).reshape(dims)


def load_mnist(images_path: PathLike, labels_path: PathLike, name: str = "mnist") -> Dataset:
    """Parse an IDX image/label file pair (optionally gzip-compressed)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[1:] != (MNIST_SIDE, MNIST_SIDE):
        raise DatasetFormatError(f"images: expected {MNIST_SIDE}x{MNIST_SIDE} images, header says {images.shape[1:]}", 8)
    if len(images) != len(labels):
        raise DatasetFormatError(f"labels: count {len(labels)} does not match {len(images)} images", 4)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"labels: invalid label {labels[bad[0]]}", 8 + int(bad[0]))
    scaled = images.astype(np.float64)[..., None] / 255.0
    logger.info(f"Loaded {len(labels)} MNIST samples from {images_path}")
    return Dataset(name, scaled, labels.astype(np.int64), 10)


def load_cifar10(batch_paths: Sequence[PathLike], name: str = "cifar10") -> Dataset:
    """Parse CIFAR-10 binary batches: 1 label byte + 3072 channel-planar pixel bytes per record."""
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in batch_paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DatasetFormatError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD}",
                len(raw) - len(raw) % CIFAR_RECORD,
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(records[:, 0] >= CIFAR_CLASSES)
        if bad.size:
            raise DatasetFormatError(f"{path}: invalid label {records[bad[0], 0]}", int(bad[0]) * CIFAR_RECORD)
        labels.append(records[:, 0].astype(np.int64))
        planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        images.append(planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0)
    if not images:
        raise EmptyDatasetError("no CIFAR-10 batch files given")
    dataset = Dataset(name, np.concatenate(images), np.concatenate(labels), CIFAR_CLASSES)
    logger.info(f"Loaded {len(dataset)} CIFAR-10 samples from {len(images)} batch file(s)")
    return dataset


def synth_dataset(
    shape: Tuple[int, int, int] = (8, 8, 1),
    class_count: int = 10,
    sample_count: int = 100,
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Class-indexed sinusoid gratings.

    Sample i has label ``i % class_count``. The grating's orientation and
    frequency come from the label; its phase (and a per-channel offset) from
    the seeded generator.
    """
    if class_count < 1 or sample_count < 1:
        raise ValueError("class_count and sample_count must be at least 1")
    height, width, channels = shape
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    images = np.empty((sample_count, height, width, channels), dtype=np.float64)
    labels = np.arange(sample_count, dtype=np.int64) % class_count
    for index, label in enumerate(labels):
        angle = np.pi * label / class_count
        frequency = 1.0 + (label % 3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = rows * np.cos(angle) + cols * np.sin(angle)
        for channel in range(channels):
            shift = phase + channel * np.pi / 3.0
            images[index, :, :, channel] = 0.5 + 0.45 * np.sin(2.0 * np.pi * frequency * wave + shift)
    return Dataset(name, clamp_unit(images), labels, class_count)


def write_image(image, path: PathLike) -> Path:
    """Write a 1- or 3-channel image as binary PGM (P5) or PPM (P6)."""
    array = clamp_unit(getattr(image, "data", image))
    if array.ndim == 2:
        array = array[..., None]
    if array.ndim != 3 or array.shape[2] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel image, got shape {array.shape}")
    height, width, channels = array.shape
    pixels = np.round(array * 255.0).astype(np.uint8)
    magic = "P5" if channels == 1 else "P6"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(f"{magic} {width} {height} 255\n".encode("ascii"))
        handle.write(pixels.tobytes())
    return path


def _header_tokens(raw: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    position = 0
    while len(tokens) < count:
        while position < len(raw) and raw[position : position + 1].isspace():
            position += 1
        if raw[position : position + 1] == b"#":
            while position < len(raw) and raw[position : position + 1] != b"\n":
                position += 1
            continue
        start = position
        while position < len(raw) and not raw[position : position + 1].isspace():
            position += 1
        if start == position:
            raise DatasetFormatError("truncated PNM header", position)
        tokens.append(raw[start:position])
    # exactly one whitespace byte separates the header from the pixels
    return tokens, position + 1


def read_image(path: PathLike) -> np.ndarray:
    """Parse a binary P5/P6 file into an H x W x C uint8 array."""
    raw = Path(path).read_bytes()
    (magic, width, height, maxval), offset = _header_tokens(raw, 4)
    if magic not in (b"P5", b"P6"):
        raise DatasetFormatError(f"unsupported PNM magic {magic!r}", 0)
    if int(maxval) != 255:
        raise DatasetFormatError(f"unsupported maxval {int(maxval)}", offset - 1)
    channels = 1 if magic == b"P5" else 3
    shape = (int(height), int(width), channels)
    expected = int(np.prod(shape))
    if len(raw) - offset != expected:
        raise DatasetFormatError(f"expected {expected} pixel bytes, found {len(raw) - offset}", offset)
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(shape).copy()


def write_loss_curve(history: Iterable[float], path: PathLike) -> Path:
    """One ``iteration,loss`` line per executed iteration, no header."""
    losses = list(history)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not losses:
        path.write_text("")
        return path
    frame = pd.DataFrame({"iteration": np.arange(1, len(losses) + 1), "loss": losses})
    frame.to_csv(path, header=False, index=False, float_format="%.17g")
    return path


def read_loss_curve(path: PathLike) -> List[float]:
    path = Path(path)
    if path.stat().st_size == 0:
        return []
    frame = pd.read_csv(path, header=None, names=["iteration", "loss"])
    return [float(value) for value in frame["loss"]]
