"""Dataset loading, verification, preprocessing and augmentation.

Images are returned as float32 NHWC arrays in [0, 1]; labels as int64.
"""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import shutil
import struct
import urllib.request
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073

DATASET_FILES = {
    "mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "fmnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "cifar10": {
        "train": tuple(f"cifar-10-batches-bin/data_batch_{i}.bin" for i in range(1, 6)),
        "test": ("cifar-10-batches-bin/test_batch.bin",),
    },
}


class DataFormatError(ValueError):
    """A dataset file is malformed; the message names the byte offset."""


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    pixels: np.ndarray
    label: int
    num_classes: int = 10

    def __post_init__(self):
        if not 0 <= self.label < self.num_classes:
            raise ValueError(f"label {self.label} outside [0, {self.num_classes - 1}]")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixels outside [0, 1]")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.num_classes, dtype=np.float32)
        v[self.label] = 1.0
        return v


@dataclass
class DatasetSplit:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        for x, y in ((self.x_train, self.y_train), (self.x_test, self.y_test)):
            if len(x) != len(y):
                raise ValueError(f"{len(x)} images but {len(y)} labels")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"labels outside [0, {self.num_classes - 1}]")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])

    def example(self, i: int, split: str = "train") -> LabeledExample:
        x, y = (self.x_train, self.y_train) if split == "train" else (self.x_test, self.y_test)
        return LabeledExample(x[i], int(y[i]), self.num_classes)

    def one_hot(self, labels: np.ndarray) -> np.ndarray:
        out = np.zeros((len(labels), self.num_classes), dtype=np.float32)
        out[np.arange(len(labels)), labels] = 1.0
        return out


# ----------------------------------------------------------------------
# raw formats


def _read_bytes(path_or_bytes) -> bytes:
    if isinstance(path_or_bytes, (bytes, bytearray)):
        return bytes(path_or_bytes)
    with open(path_or_bytes, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int) -> np.ndarray:
    if len(buf) < 8:
        raise DataFormatError(f"truncated IDX header at offset 0 ({len(buf)} bytes)")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"bad IDX magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"truncated IDX dimensions at offset 4 ({len(buf)} bytes)")
    dims = struct.unpack(">" + "I" * ndim, buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise DataFormatError(
            f"truncated IDX payload at offset {len(buf)}: need {header + count} bytes")
    if len(buf) > header + count:
        raise DataFormatError(f"trailing bytes after IDX payload at offset {header + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, H, W) and labels (N,) from an IDX pair."""
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch at offset 4: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def load_cifar_bin(paths: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 32, 32, 3) and labels from CIFAR-10 binary batches."""
    xs, ys = [], []
    for path in paths:
        buf = _read_bytes(path)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise DataFormatError(
                f"record misalignment at offset {len(buf) - len(buf) % CIFAR_RECORD}: "
                f"{len(buf)} bytes is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = rec[:, 0]
        bad = np.nonzero(labels > 9)[0]
        if bad.size:
            raise DataFormatError(
                f"label {labels[bad[0]]} out of range at offset {int(bad[0]) * CIFAR_RECORD}")
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        ys.append(labels)
    return np.concatenate(xs), np.concatenate(ys)


def scale_pixels(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float32) / np.float32(255.0)


def unscale_pixels(x) -> np.ndarray:
    return np.rint(np.asarray(x, dtype=np.float64) * 255.0).astype(np.uint8)


# ----------------------------------------------------------------------
# checksums and acquisition


def data_dir() -> Path:
    return Path(os.environ.get("ATLAB_DATA_DIR", Path.home() / ".cache" / "atlab"))


def read_manifest(text: Optional[str] = None) -> list[tuple[str, str, str]]:
    """Entries ``(name, sha256, url)`` from a manifest, one per line."""
    if text is None:
        text = resources.files("atlab").joinpath("checksums.txt").read_text()
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"manifest line {lineno}: expected 'name  sha256  url'")
        entries.append((parts[0], parts[1].lower(), parts[2]))
    return entries


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify(root: Optional[Path] = None, names: Optional[Iterable[str]] = None) -> dict[str, bool]:
    """Check pre-placed files against the manifest; missing files map to False."""
    root = Path(root) if root else data_dir()
    result = {}
    for name, digest, _ in read_manifest():
        if names is not None and not any(name.startswith(n + "/") for n in names):
            continue
        path = root / name
        result[name] = path.exists() and sha256_file(path) == digest
    return result


def fetch(dataset: str, root: Optional[Path] = None, timeout: float = 60.0) -> list[Path]:
    """Download missing files for ``dataset`` and verify every checksum."""
    root = Path(root) if root else data_dir()
    done = []
    for name, digest, url in read_manifest():
        if not name.startswith(dataset + "/"):
            continue
        path = root / name
        if not (path.exists() and sha256_file(path) == digest):
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(path.suffix + ".part")
            logger.info("downloading %s", url)
            with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
                src = gzip.GzipFile(fileobj=resp) if url.endswith(".gz") else resp
                shutil.copyfileobj(src, fh)
            if sha256_file(tmp) != digest:
                tmp.unlink()
                raise ChecksumError(f"checksum mismatch for {name}")
            tmp.replace(path)
        done.append(path)
    if not done:
        raise KeyError(f"no manifest entries for dataset {dataset!r}")
    return done


# ----------------------------------------------------------------------
# datasets


def stratified_subsample(y: np.ndarray, n: int, num_classes: int = 10) -> np.ndarray:
    """Indices of the first ``n`` examples taken round-robin across classes."""
    if n >= len(y):
        return np.arange(len(y))
    per_class = [np.nonzero(y == c)[0] for c in range(num_classes)]
    quota = np.zeros(num_classes, dtype=np.int64)
    # water-filling: one example per class per pass until n are taken
    while quota.sum() < n:
        open_ = [c for c in range(num_classes) if quota[c] < len(per_class[c])]
        for c in open_[: n - quota.sum()]:
            quota[c] += 1
    idx = np.concatenate([per_class[c][: quota[c]] for c in range(num_classes)])
    return np.sort(idx)


def load_dataset(name: str, root: Optional[Path] = None, subsample: Optional[int] = None,
                 test_subsample: Optional[int] = None) -> DatasetSplit:
    root = Path(root) if root else data_dir()
    name = name.lower()
    if name in ("mnist", "fmnist"):
        tr = [root / name / f for f in DATASET_FILES[name]["train"]]
        te = [root / name / f for f in DATASET_FILES[name]["test"]]
        xtr, ytr = load_idx(*tr)
        xte, yte = load_idx(*te)
        xtr, xte = xtr[..., None], xte[..., None]
    elif name == "cifar10":
        xtr, ytr = load_cifar_bin([root / name / f for f in DATASET_FILES[name]["train"]])
        xte, yte = load_cifar_bin([root / name / f for f in DATASET_FILES[name]["test"]])
    else:
        raise KeyError(f"unknown dataset {name!r}")
    ytr = ytr.astype(np.int64)
    yte = yte.astype(np.int64)
    if subsample:
        idx = stratified_subsample(ytr, subsample)
        xtr, ytr = xtr[idx], ytr[idx]
    if test_subsample:
        idx = stratified_subsample(yte, test_subsample)
        xte, yte = xte[idx], yte[idx]
    return DatasetSplit(name, scale_pixels(xtr), ytr, scale_pixels(xte), yte)


def augment_cifar(x: np.ndarray, rng: np.random.Generator, pad: int = 4,
                  offset: Optional[tuple[int, int]] = None, flip: Optional[bool] = None) -> np.ndarray:
    """Zero-pad, random crop back to the input size, and random horizontal flip.

    ``offset``/``flip`` override the random draws (used to pin the transform).
    """
    if x.ndim != 3 or x.shape != (32, 32, 3):
        raise ValueError(f"augment_cifar expects a 32x32x3 image, got {x.shape}")
    h, w, _ = x.shape
    if offset is None:
        offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    i, j = offset
    out = padded[i:i + h, j:j + w]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def synth_blobs(num_classes: int = 2, per_class: int = 50, dim: int = 16, seed: int = 0,
                separation: float = 6.0, sigma: float = 0.05,
                test_per_class: Optional[int] = None, image_side: Optional[int] = None) -> DatasetSplit:
    """Gaussian class clusters clipped to [0, 1].

    Class means sit at distance ``separation * sigma`` from each other along
    orthogonal directions around the cube centre.  With ``image_side`` the
    vectors are laid out as side x side x 1 images (dim must be side**2).
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    test_per_class = per_class if test_per_class is None else test_per_class
    # orthonormal directions so every pair of means is separation*sigma apart
    basis = np.linalg.qr(rng.standard_normal((dim, max(num_classes, 1))))[0][:, :num_classes].T
    means = 0.5 + basis * (separation * sigma / np.sqrt(2.0))

    def draw(n):
        x = means[:, None, :] + sigma * rng.standard_normal((num_classes, n, dim))
        y = np.repeat(np.arange(num_classes), n)
        x = np.clip(x.reshape(-1, dim), 0.0, 1.0).astype(np.float32)
        return x, y.astype(np.int64)

    xtr, ytr = draw(per_class)
    xte, yte = draw(test_per_class)
    if image_side is not None:
        if image_side * image_side != dim:
            raise ValueError("dim must equal image_side**2")
        xtr = xtr.reshape(-1, image_side, image_side, 1)
        xte = xte.reshape(-1, image_side, image_side, 1)
    return DatasetSplit("synth", xtr, ytr, xte, yte, num_classes=num_classes)


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
