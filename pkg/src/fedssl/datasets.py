"""Dataset containers, MedMNIST conversion, synthetic data and Dirichlet splits.

Container file layout (little-endian)::

    magic "FSSLD1" | u8 version | u16 name length | name (utf-8, "<name>:<split>")
    | u32 N | u8 C | u8 H | u8 W | u16 n_classes
    | N*C*H*W image bytes (0-255) | N x u16 labels
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, PartitionError

log = logging.getLogger(__name__)

DATA_MAGIC = b"FSSLD1"
DATA_VERSION = 1
MAX_PARTITION_ATTEMPTS = 100

# Published MedMNIST (v2, 28x28) split sizes: train, val, test.
MEDMNIST_SPLITS = {
    "pneumoniamnist": (4708, 524, 624),
    "breastmnist": (546, 78, 156),
    "retinamnist": (1080, 120, 400),
    "organamnist": (34581, 6491, 17778),
    "organcmnist": (13000, 2392, 8268),
    "organsmnist": (13940, 2452, 8829),
}
MEDMNIST_CLASSES = {
    "pneumoniamnist": 2,
    "breastmnist": 2,
    "retinamnist": 5,
    "organamnist": 11,
    "organcmnist": 11,
    "organsmnist": 11,
}
MEDMNIST_ALIASES = {
    "pneumonia": "pneumoniamnist",
    "breast": "breastmnist",
    "retina": "retinamnist",
    "organ-a": "organamnist",
    "organ-c": "organcmnist",
    "organ-s": "organsmnist",
}


@dataclass
class DatasetContainer:
    images: np.ndarray  # uint8, N x C x H x W
    labels: np.ndarray  # int64, N
    n_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise IntegrityError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.labels) != len(self.images) or len(self.labels) == 0:
            raise IntegrityError("container needs N > 0 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise IntegrityError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def floats(self, indices=None) -> np.ndarray:
        imgs = self.images if indices is None else self.images[indices]
        return imgs.astype(np.float64) / 255.0

    def subset(self, indices) -> "DatasetContainer":
        idx = np.asarray(indices, dtype=np.int64)
        return DatasetContainer(self.images[idx], self.labels[idx], self.n_classes, self.split, self.name)

    def to_bytes(self) -> bytes:
        N, C, H, W = self.images.shape
        raw = f"{self.name}:{self.split}".encode("utf-8")
        head = DATA_MAGIC + struct.pack("<BH", DATA_VERSION, len(raw)) + raw
        head += struct.pack("<IBBBH", N, C, H, W, self.n_classes)
        return head + self.images.tobytes() + self.labels.astype("<u2").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DatasetContainer":
        if blob[:6] != DATA_MAGIC:
            raise IntegrityError("not a dataset container (bad magic)")
        version, nlen = struct.unpack_from("<BH", blob, 6)
        if version != DATA_VERSION:
            raise IntegrityError(f"unsupported container version {version}")
        pos = 9
        full = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        name, _, split = full.rpartition(":")
        if not name:
            name, split = full, "train"
        N, C, H, W, n_classes = struct.unpack_from("<IBBBH", blob, pos)
        pos += 9
        n_px = N * C * H * W
        expected = pos + n_px + 2 * N
        if len(blob) != expected:
            raise IntegrityError(f"container size {len(blob)} does not match header ({expected})")
        images = np.frombuffer(blob, dtype=np.uint8, count=n_px, offset=pos).reshape(N, C, H, W).copy()
        labels = np.frombuffer(blob, dtype="<u2", count=N, offset=pos + n_px).astype(np.int64)
        return cls(images, labels, n_classes, split, name)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DatasetContainer":
        return cls.from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# MedMNIST conversion


def _to_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:
        return images[:, None, :, :]
    if images.ndim == 4 and images.shape[-1] in (1, 3):
        return images.transpose(0, 3, 1, 2)
    raise IntegrityError(f"unexpected image array shape {images.shape}")


def convert_medmnist(source, name: str, out_dir=None, check_counts: bool = True) -> tuple[DatasetContainer, DatasetContainer]:
    """Convert a MedMNIST ``.npz`` archive into train and test containers.

    The archive holds ``{train,val,test}_images`` (N x 28 x 28 or N x 28 x 28 x 3,
    uint8) and ``{train,val,test}_labels`` (N x 1). Train and val are merged
    into the train container. With ``out_dir`` the two containers are written
    as ``<name>_train.fssld`` and ``<name>_test.fssld``.
    """
    key = MEDMNIST_ALIASES.get(name.lower(), name.lower())
    with np.load(source) as archive:
        parts = {}
        for split in ("train", "val", "test"):
            imgs, labs = f"{split}_images", f"{split}_labels"
            if imgs not in archive or labs not in archive:
                raise IntegrityError(f"archive is missing {imgs!r} or {labs!r}")
            parts[split] = (_to_nchw(np.asarray(archive[imgs])), np.asarray(archive[labs]).reshape(-1))

    counts = tuple(len(parts[s][1]) for s in ("train", "val", "test"))
    if check_counts:
        if key not in MEDMNIST_SPLITS:
            raise IntegrityError(f"no published split sizes for {name!r}; pass check_counts=False")
        if counts != MEDMNIST_SPLITS[key]:
            raise IntegrityError(f"{key}: split sizes {counts} differ from published {MEDMNIST_SPLITS[key]}")
    labels_all = np.concatenate([p[1] for p in parts.values()])
    n_classes = MEDMNIST_CLASSES.get(key, int(labels_all.max()) + 1)

    train = DatasetContainer(
        np.concatenate([parts["train"][0], parts["val"][0]]),
        np.concatenate([parts["train"][1], parts["val"][1]]),
        n_classes, "train", key,
    )
    test = DatasetContainer(parts["test"][0], parts["test"][1], n_classes, "test", key)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        train.save(out / f"{key}_train.fssld")
        test.save(out / f"{key}_test.fssld")
    return train, test


# ---------------------------------------------------------------------------
# synthetic data


def _blob_image(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # class picks the blob's angular position around the centre
    angle = 2 * np.pi * label / n_classes + rng.normal(0, 0.15)
    radius = size * 0.25 + rng.normal(0, 1.0)
    cy = size / 2 - 0.5 + radius * np.sin(angle)
    cx = size / 2 - 0.5 + radius * np.cos(angle)
    width = size * 0.12 * rng.uniform(0.8, 1.2)
    img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return img * rng.uniform(0.7, 1.0)


def _stripe_image(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # class picks stripe orientation in [0, pi); frequency and phase are nuisance
    theta = np.pi * label / n_classes + rng.normal(0, 0.05)
    freq = rng.uniform(0.25, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.5 + 0.5 * np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return wave * rng.uniform(0.6, 1.0) + rng.uniform(0.0, 0.2)


def _smooth_field(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    """Unit-variance Gaussian-smoothed white noise."""
    radius = int(2 * scale)
    kernel = np.exp(-0.5 * (np.arange(-radius, radius + 1) / scale) ** 2)
    kernel /= kernel.sum()
    field = rng.normal(size=(size, size))
    field = np.apply_along_axis(np.convolve, 0, field, kernel, "same")
    field = np.apply_along_axis(np.convolve, 1, field, kernel, "same")
    return field / field.std()


def _texture_image(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # faint oriented grating under a stronger smooth background field
    background = 0.15 * _smooth_field(rng, size, 4.0)
    theta = np.pi * label / n_classes + rng.normal(0, 0.05)
    freq = rng.uniform(0.8, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    grating = 0.1 * np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return 0.5 + background + grating


def _grating_image(rng: np.random.Generator, label: int, n_classes: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # faint oriented grating buried in strong white pixel noise
    theta = np.pi * label / n_classes + rng.normal(0, 0.05)
    freq = rng.uniform(0.8, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    grating = 0.1 * np.cos(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return 0.5 + grating + rng.normal(0, 0.15, size=(size, size))


PATTERNS = {
    "blobs": _blob_image,
    "stripes": _stripe_image,
    "texture": _texture_image,
    "grating": _grating_image,
}


def synth_generate(
    n: int,
    classes: int = 2,
    pattern: str = "blobs",
    seed: int = 0,
    size: int = 28,
    noise: float = 0.05,
    split: str = "train",
    name: str | None = None,
) -> DatasetContainer:
    """Deterministic grayscale images with class-dependent structure plus pixel noise.

    Labels cycle ``0, 1, ..., classes-1`` and are then shuffled, so class counts
    differ by at most one.
    """
    if n < 2 * classes:
        raise ConfigError(f"synthetic data needs n >= 2 * classes, got n={n}, classes={classes}")
    if pattern not in PATTERNS:
        raise ConfigError(f"unknown pattern {pattern!r}; choose from {', '.join(PATTERNS)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n, classes, size]))
    labels = rng.permutation(np.arange(n) % classes)
    draw = PATTERNS[pattern]
    images = np.empty((n, 1, size, size), dtype=np.uint8)
    for i, label in enumerate(labels):
        img = draw(rng, int(label), classes, size) + rng.normal(0, noise, size=(size, size))
        images[i, 0] = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    return DatasetContainer(images, labels, classes, split, name or f"synth-{pattern}")


def synth_train_test(n_train: int, n_test: int, classes: int = 2, pattern: str = "blobs",
                     seed: int = 0) -> tuple[DatasetContainer, DatasetContainer]:
    """One generated pool split into disjoint train and test containers."""
    pool = synth_generate(n_train + n_test, classes, pattern, seed)
    train = pool.subset(np.arange(n_train))
    test = pool.subset(np.arange(n_train, n_train + n_test))
    test.split = "test"
    return train, test


# ---------------------------------------------------------------------------
# Dirichlet label-skew partition


@dataclass(frozen=True)
class PartitionConfig:
    n_clients: int = 5
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigError("partition needs at least 2 clients")
        if self.alpha <= 0:
            raise ConfigError("Dirichlet concentration alpha must be positive")


def _draw_partition(labels: np.ndarray, k: int, alpha: float, rng: np.random.Generator) -> list[np.ndarray]:
    shards: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        p = rng.dirichlet(np.full(k, alpha))
        counts = rng.multinomial(len(idx), p)
        for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            shards[client].append(chunk)
    return [np.sort(np.concatenate(parts)) for parts in shards]


def dirichlet_partition(labels: Sequence[int], cfg: PartitionConfig) -> list[np.ndarray]:
    """Per-class Dirichlet(alpha) allocation of sample indices to clients.

    Draws that leave a client empty are discarded and redrawn from the same
    stream, up to 100 attempts.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise PartitionError("cannot partition an empty label set")
    if labels.size < cfg.n_clients:
        raise PartitionError(f"{labels.size} samples cannot cover {cfg.n_clients} clients")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, cfg.n_clients]))
    for attempt in range(MAX_PARTITION_ATTEMPTS):
        shards = _draw_partition(labels, cfg.n_clients, cfg.alpha, rng)
        if all(len(s) > 0 for s in shards):
            if attempt:
                log.info("dirichlet partition succeeded after %d redraws", attempt)
            return shards
    raise PartitionError(
        f"every one of {MAX_PARTITION_ATTEMPTS} Dirichlet draws left a client empty "
        f"(n={labels.size}, clients={cfg.n_clients}, alpha={cfg.alpha})"
    )


def label_entropy(labels: np.ndarray, n_classes: int) -> float:
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0  # no negative zero


def partition_stats(labels: Sequence[int], shards: Sequence[np.ndarray], n_classes: int) -> list[dict]:
    labels = np.asarray(labels)
    rows = []
    for k, shard in enumerate(shards):
        counts = np.bincount(labels[shard], minlength=n_classes)
        rows.append({
            "client": k,
            "size": int(len(shard)),
            "class_counts": [int(c) for c in counts],
            "entropy": label_entropy(labels[shard], n_classes),
        })
    return rows
