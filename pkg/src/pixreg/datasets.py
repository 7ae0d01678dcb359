"""Image dataset ingestion: IDX (MNIST family), CIFAR binary, raw image stacks.

All loaders return a :class:`LabeledImageSet` with float32 pixels in [0, 1]
laid out as (N, C, H, W).
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR10_RECORD = 1 + 3072
CIFAR100_RECORD = 2 + 3072
BT601 = (0.299, 0.587, 0.114)
STACK_MAGIC = b"RIMS"
STACK_VERSION = 1


class DatasetError(ValueError):
    pass


class BadMagic(DatasetError):
    pass


class CountMismatch(DatasetError):
    pass


class Truncated(DatasetError):
    pass


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    provenance: tuple = field(default=())

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {self.images.shape}")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, index, note=None):
        index = np.asarray(index)
        prov = self.provenance + ((note,) if note else ())
        return LabeledImageSet(self.images[index], self.labels[index], prov)


def _read(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def parse_idx_images(data):
    if len(data) < 16:
        raise Truncated("IDX image header is 16 bytes")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagic(f"IDX images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise Truncated(f"IDX images: {len(data)} bytes, header promises {need}")
    if len(data) > need:
        raise DatasetError(f"IDX images: {len(data) - need} trailing bytes")
    return np.frombuffer(data, np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(data):
    if len(data) < 8:
        raise Truncated("IDX label header is 8 bytes")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != IDX_LABELS_MAGIC:
        raise BadMagic(f"IDX labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")
    if len(data) < 8 + n:
        raise Truncated(f"IDX labels: {len(data)} bytes, header promises {8 + n}")
    if len(data) > 8 + n:
        raise DatasetError(f"IDX labels: {len(data) - 8 - n} trailing bytes")
    return np.frombuffer(data, np.uint8, offset=8)


def encode_idx_images(pixels):
    pixels = np.asarray(pixels, np.uint8)
    n, rows, cols = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes()


def encode_idx_labels(labels):
    labels = np.asarray(labels, np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair (optionally gzip-compressed)."""
    raw = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(raw) != len(labels):
        raise CountMismatch(f"{len(raw)} images vs {len(labels)} labels")
    images = (raw.astype(np.float32) / np.float32(255))[:, None]
    prov = (f"idx:{os.path.basename(images_path)}", "scale:1/255")
    return LabeledImageSet(images, labels.astype(np.int64), prov)


def parse_cifar(data, fine=None):
    """Parse CIFAR binary records. ``fine`` selects CIFAR-100 (label pair) layout."""
    rec = CIFAR100_RECORD if fine is not None else CIFAR10_RECORD
    if len(data) % rec:
        raise Truncated(f"CIFAR file length {len(data)} is not a multiple of {rec}")
    arr = np.frombuffer(data, np.uint8).reshape(-1, rec)
    if fine is None:
        labels = arr[:, 0]
    else:
        labels = arr[:, 1] if fine else arr[:, 0]
    pixels = arr[:, rec - 3072:].reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar_binary(paths, fine=None):
    """Load one or more CIFAR-10 (``fine=None``) or CIFAR-100 batch files."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    pix, lab = zip(*(parse_cifar(_read(p), fine) for p in paths))
    images = np.concatenate(pix).astype(np.float32) / np.float32(255)
    variant = "cifar10" if fine is None else ("cifar100-fine" if fine else "cifar100-coarse")
    prov = (f"{variant}:" + ",".join(os.path.basename(str(p)) for p in paths), "scale:1/255")
    return LabeledImageSet(images, np.concatenate(lab).astype(np.int64), prov)


def encode_cifar(pixels, labels, coarse=None):
    pixels = np.asarray(pixels, np.uint8).reshape(len(labels), 3072)
    cols = [np.asarray(labels, np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, np.uint8)[:, None])
    return np.concatenate(cols + [pixels], axis=1).tobytes()


def to_grayscale(ds):
    """BT.601 luma."""
    if ds.images.shape[1] != 3:
        raise DatasetError(f"grayscale conversion needs 3 channels, got {ds.images.shape[1]}")
    r, g, b = BT601
    x = ds.images.astype(np.float64)
    y = r * x[:, 0] + g * x[:, 1] + b * x[:, 2]
    y = np.clip(y, 0.0, 1.0).astype(np.float32)[:, None]
    return LabeledImageSet(y, ds.labels.copy(), ds.provenance + (f"gray:bt601{BT601}",))


def resize(ds, size):
    """Center-crop to square, then bilinear resize to ``size`` x ``size``."""
    n, c, h, w = ds.images.shape
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = ds.images[:, :, top:top + s, left:left + s]
    if s == size:
        out = np.ascontiguousarray(crop)
    else:
        z = size / s
        out = ndimage.zoom(crop, (1, 1, z, z), order=1, mode="nearest", grid_mode=True)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return LabeledImageSet(out, ds.labels.copy(), ds.provenance + (f"crop:{s}", f"bilinear:{size}"))


def select_regularization_images(ds, n, seed):
    """Uniform sample of ``n`` images without replacement."""
    if n > len(ds):
        raise DatasetError(f"asked for {n} regularization images from a set of {len(ds)}")
    idx = np.random.default_rng(seed).choice(len(ds), size=n, replace=False)
    return ds.subset(idx, f"regsel:n={n},seed={seed}")


# --- raw image stack --------------------------------------------------------
# b"RIMS" | u32 version | u32 N, C, H, W | float32 LE pixels | int32 LE labels

def save_stack(ds):
    n, c, h, w = ds.images.shape
    return (STACK_MAGIC + struct.pack("<IIIII", STACK_VERSION, n, c, h, w)
            + np.ascontiguousarray(ds.images, "<f4").tobytes()
            + np.ascontiguousarray(ds.labels, "<i4").tobytes())


def load_stack(data):
    if len(data) < 24:
        raise Truncated("image stack header is 24 bytes")
    if data[:4] != STACK_MAGIC:
        raise BadMagic(f"image stack magic {data[:4]!r}")
    version, n, c, h, w = struct.unpack_from("<IIIII", data, 4)
    if version != STACK_VERSION:
        raise DatasetError(f"unsupported image stack version {version}")
    npx = n * c * h * w
    if len(data) != 24 + 4 * npx + 4 * n:
        raise Truncated(f"image stack: {len(data)} bytes, expected {24 + 4 * npx + 4 * n}")
    images = np.frombuffer(data, "<f4", npx, 24).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(data, "<i4", n, 24 + 4 * npx).astype(np.int64)
    return LabeledImageSet(images, labels, ("stack",))


# --- named datasets ---------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def _find(directory, name):
    for cand in (name, name[:-3] if name.endswith(".gz") else name + ".gz"):
        p = os.path.join(directory, cand)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(os.path.join(directory, name))


def synthetic_digits(n, seed=0, size=12, num_classes=10, noise=0.15):
    """Seeded toy dataset: one fixed blob prototype per class plus pixel noise.

    Small and fast; used by tests and demos that must not depend on real data.
    """
    proto_rng = np.random.default_rng(12345)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    protos = []
    for _ in range(num_classes):
        img = np.zeros((size, size))
        for _ in range(3):
            cy, cx = proto_rng.uniform(0.15, 0.85, 2)
            img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02)
        protos.append(img / img.max())
    protos = np.array(protos)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    shift = rng.integers(-1, 2, (n, 2))
    images = np.empty((n, 1, size, size), np.float32)
    for i, (lab, (dy, dx)) in enumerate(zip(labels, shift)):
        base = np.roll(protos[lab], (dy, dx), axis=(0, 1))
        images[i, 0] = np.clip(base + noise * rng.standard_normal((size, size)), 0, 1)
    return LabeledImageSet(images, labels.astype(np.int64), (f"synthetic:n={n},seed={seed}",))


def load_dataset(name, split="train", data_dir="data"):
    """Resolve a dataset id.

    ``mnist``/``fashion_mnist`` read IDX files from ``data_dir/<name>/``;
    ``synthetic`` builds the toy set (train seed 0, test seed 1);
    a path ending in ``.rims`` loads a raw image stack.
    """
    if name == "synthetic":
        return synthetic_digits(2000 if split == "train" else 500, seed=0 if split == "train" else 1)
    if name.endswith(".rims"):
        with open(name, "rb") as fh:
            return load_stack(fh.read())
    if name in ("mnist", "fashion_mnist"):
        d = os.path.join(data_dir, name)
        imgs, labs = MNIST_FILES[split]
        return load_idx(_find(d, imgs), _find(d, labs))
    if name in ("cifar10", "cifar10_gray"):
        d = os.path.join(data_dir, "cifar10")
        files = ([f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                 else ["test_batch.bin"])
        ds = load_cifar_binary([os.path.join(d, f) for f in files])
        return to_grayscale(ds) if name.endswith("_gray") else ds
    raise DatasetError(f"unknown dataset {name!r}")
