"""Datasets: a procedural blob-prototype generator, IDX and CIFAR binary
readers, class-balanced splitting, and training-time augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    images: np.ndarray            # [N, C, H, W] float32
    labels: np.ndarray            # [N] int
    num_classes: int
    coarse_map: np.ndarray | None = None   # fine class -> coarse class
    atypicality: np.ndarray | None = None  # per-instance distortion, synthetic only

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.coarse_map,
                       None if self.atypicality is None else self.atypicality[idx])

    def one_hot(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.eye(self.num_classes)[labels]


# ----------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 16
    n_coarse: int = 4
    fine_per_coarse: int = 2
    shared_blobs: int = 2
    class_blobs: int = 2
    sigma_range: tuple[float, float] = (1.5, 3.0)
    jitter: float = 2.0
    amp_jitter: float = 0.3
    pixel_noise: float = 0.35
    clutter: float = 0.8
    prototype_seed: int = 1234
    variant: str = "in"

    @property
    def num_classes(self) -> int:
        return self.n_coarse * self.fine_per_coarse


def _blob_params(rng, n, size, sigma_range):
    centers = rng.uniform(0.2 * size, 0.8 * size, size=(n, 2))
    sigmas = rng.uniform(*sigma_range, size=n)
    amps = rng.choice([-1.0, 1.0], size=n) * rng.uniform(0.6, 1.0, size=n)
    return centers, sigmas, amps


def _render(centers, sigmas, amps, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for (cy, cx), s, a in zip(centers, sigmas, amps):
        img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return img


def synthetic_prototypes(spec: SyntheticSpec):
    """Blob lists per fine class; classes in one coarse group share blobs."""
    seed = spec.prototype_seed + (7919 if spec.variant == "ood" else 0)
    rng = np.random.default_rng(seed)
    sigma_range = spec.sigma_range if spec.variant == "in" else (0.8, 1.6)
    protos = []
    for _ in range(spec.n_coarse):
        shared = _blob_params(rng, spec.shared_blobs, spec.size, sigma_range)
        for _ in range(spec.fine_per_coarse):
            own = _blob_params(rng, spec.class_blobs, spec.size, sigma_range)
            protos.append(tuple(np.concatenate([a, b]) for a, b in zip(shared, own)))
    return protos


def make_synthetic(spec: SyntheticSpec, n: int, seed: int) -> Dataset:
    """Instances are prototype blobs displaced, rescaled and cluttered in
    proportion to a per-instance distortion level drawn from U(0, 1)."""
    rng = np.random.default_rng(seed)
    protos = synthetic_prototypes(spec)
    k = spec.num_classes
    labels = np.arange(n) % k
    rng.shuffle(labels)
    u = rng.uniform(0.0, 1.0, size=n)
    images = np.empty((n, 1, spec.size, spec.size), dtype=np.float32)
    for i in range(n):
        centers, sigmas, amps = protos[labels[i]]
        c = centers + rng.normal(0.0, spec.jitter * u[i], size=centers.shape)
        a = amps * (1.0 + rng.normal(0.0, spec.amp_jitter * u[i], size=amps.shape))
        img = _render(c, sigmas, a, spec.size)
        cc, cs, ca = _blob_params(rng, 1, spec.size, spec.sigma_range)
        img += _render(cc, cs, ca * spec.clutter * u[i], spec.size)
        img += rng.normal(0.0, spec.pixel_noise * (0.5 + u[i]), size=img.shape)
        images[i, 0] = img
    coarse = np.repeat(np.arange(spec.n_coarse), spec.fine_per_coarse)
    return Dataset(images, labels, k, coarse, u)


# ------------------------------------------------------------------ file io


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped): magic ``00 00 <type> <ndim>``,
    then ``ndim`` big-endian uint32 dimensions, then the data."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic number")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims)) if ndim else 1
    body = raw[4 + 4 * ndim:]
    if len(body) != count * dtype.itemsize:
        raise ValueError(f"{path}: expected {count * dtype.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray) -> None:
    codes = {v: k for k, v in _IDX_DTYPES.items()}
    dt = np.dtype(arr.dtype).newbyteorder(">")
    key = dt.str if dt.itemsize > 1 else dt.str.replace("|", ">")
    header = bytes([0, 0, codes[key], arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(dt).tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    raw = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise ValueError("IDX image and label counts differ")
    images = raw.astype(np.float32)
    if np.issubdtype(raw.dtype, np.integer):
        images /= 255.0
    if images.ndim == 3:
        images = images[:, None]
    k = num_classes or int(labels.max()) + 1
    return Dataset(images, labels, k)


def read_cifar_binary(paths) -> Dataset:
    """CIFAR binary batches: 3073-byte records (label, 3072 pixels) or the
    3074-byte CIFAR-100 layout (coarse label, fine label, pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = [Path(p).read_bytes() for p in paths]
    raw = b"".join(chunks)
    if all(len(c) % 3073 == 0 for c in chunks) and len(raw) > 0:
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
        labels, coarse, pixels = rec[:, 0].astype(np.int64), None, rec[:, 1:]
    elif all(len(c) % 3074 == 0 for c in chunks) and len(raw) > 0:
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3074)
        coarse, labels, pixels = rec[:, 0].astype(np.int64), rec[:, 1].astype(np.int64), rec[:, 2:]
    else:
        raise ValueError("CIFAR binary files must hold whole 3073- or 3074-byte records")
    images = pixels.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    k = 10 if coarse is None else 100
    coarse_map = None
    if coarse is not None:
        coarse_map = np.zeros(k, dtype=np.int64)
        coarse_map[labels] = coarse
    return Dataset(images, labels, max(k, int(labels.max()) + 1), coarse_map)


# -------------------------------------------------------------- splitting


def balanced_split(labels: np.ndarray, val_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Hold out ``round(val_fraction * N)`` items spread as evenly over
    classes as availability allows."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    n_val = int(round(val_fraction * len(labels)))
    base, extra = divmod(n_val, len(classes))
    val = []
    for j, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        val.extend(idx[:min(len(idx), base + (1 if j < extra else 0))])
    val = np.sort(np.asarray(val, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), val)
    return train, val


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentFlags:
    crop: bool = False
    flip: bool = False
    cutout: bool = False
    pad: int = 4
    cutout_size: int = 8


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    shape = (1, -1, 1, 1) if images.ndim == 4 else (-1, 1, 1)
    return ((images - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(np.float32)


def augment(image: np.ndarray, flags: AugmentFlags, rng, mean, std) -> np.ndarray:
    """Reflection-pad and random-crop, random horizontal flip, standardize
    with training-set statistics, then zero a random square block."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    _, h, w = img.shape
    if flags.crop:
        p = flags.pad
        padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="reflect")
        dy, dx = rng.integers(0, 2 * p + 1, size=2)
        img = padded[:, dy:dy + h, dx:dx + w]
    if flags.flip and rng.random() < 0.5:
        img = img[:, :, ::-1]
    img = standardize(img, mean, std)
    if flags.cutout:
        s = flags.cutout_size
        y0 = rng.integers(0, h - s + 1)
        x0 = rng.integers(0, w - s + 1)
        img = img.copy()
        img[:, y0:y0 + s, x0:x0 + s] = 0.0
    return np.ascontiguousarray(img)
