"""Dataset ingestion and preparation.

Pixel datasets live in [0, 1] per dimension.  Feature datasets (outputs of a
feature extractor) record their own observed per-dimension range, padded by
5% on each side, which later serves as the integration domain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset", "Baseline", "DataFormatError",
    "load_idx_images", "load_idx_labels", "load_mnist", "load_cifar10",
    "compute_baseline", "to_features", "subset",
    "save_dataset", "load_dataset",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073
DATASET_MAGIC = b"UPKD"
FEATURE_PAD = 0.05


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Images (N, ...) float64 plus integer labels; immutable by convention."""
    images: np.ndarray
    labels: np.ndarray
    kind: str = "pixel"                 # "pixel" | "feature"
    lo: np.ndarray | float = 0.0        # per-dimension or scalar domain bounds
    hi: np.ndarray | float = 1.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.kind == "pixel":
            if self.images.size and (self.images.min() < float(np.min(self.lo))
                                     or self.images.max() > float(np.max(self.hi))):
                raise DataFormatError("pixel values outside the declared domain")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return int(np.prod(self.images.shape[1:]))

    def domain_for(self, i):
        """(lo, hi) of flattened input dimension i."""
        lo = self.lo if np.isscalar(self.lo) else self.lo.reshape(-1)[i]
        hi = self.hi if np.isscalar(self.hi) else self.hi.reshape(-1)[i]
        return float(lo), float(hi)

    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0


@dataclass
class Baseline:
    """Per-dimension mean of the training images; same shape as one input."""
    x_base: np.ndarray


# ---------------------------------------------------------------- IDX / MNIST

def _read_be32(f, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise DataFormatError(f"truncated {what}")
    return struct.unpack(">I", raw)[0]


def load_idx_images(path):
    with open(path, "rb") as f:
        magic = _read_be32(f, "IDX header")
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(f"bad image magic 0x{magic:08x}")
        count = _read_be32(f, "count")
        rows = _read_be32(f, "rows")
        cols = _read_be32(f, "cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise DataFormatError("truncated IDX image data")
        return np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path):
    with open(path, "rb") as f:
        magic = _read_be32(f, "IDX header")
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(f"bad label magic 0x{magic:08x}")
        count = _read_be32(f, "count")
        raw = f.read(count)
        if len(raw) != count:
            raise DataFormatError("truncated IDX label data")
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(path, part="train"):
    """Load one MNIST-style IDX pair from a directory; pixels scaled to [0,1]."""
    root = Path(path)
    img_name, lbl_name = _MNIST_FILES[part]
    images = load_idx_images(root / img_name)
    labels = load_idx_labels(root / lbl_name)
    if len(images) != len(labels):
        raise DataFormatError("image/label count mismatch")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels)


# ---------------------------------------------------------------- CIFAR-10

def load_cifar10(path):
    """Load CIFAR-10 binary batches (label byte + 3072 channel-major pixels).

    Accepts a single .bin file or a directory of data_batch_*.bin files.
    """
    root = Path(path)
    files = [root] if root.is_file() else sorted(root.glob("*.bin"))
    if not files:
        raise DataFormatError(f"no CIFAR batch files under {path}")
    images, labels = [], []
    for fp in files:
        raw = fp.read_bytes()
        if len(raw) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{fp}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels))


# ---------------------------------------------------------------- operations

def compute_baseline(dataset, scalar_mean=False):
    """Per-dimension mean image; scalar_mean broadcasts one global mean."""
    if len(dataset) == 0:
        raise ValueError("baseline of an empty dataset is undefined")
    mean = dataset.images.mean(axis=0)
    if scalar_mean:
        mean = np.full_like(mean, dataset.images.mean())
    return Baseline(mean)


def to_features(dataset, extractor, batch_size=256):
    """Map every image through the extractor; record the observed range.

    The resulting feature dataset is flat (N, D) with a per-dimension
    [min, max] domain padded by 5% on each side.
    """
    feats = []
    for s in range(0, len(dataset), batch_size):
        out = extractor.features(dataset.images[s:s + batch_size])
        feats.append(np.asarray(out, dtype=np.float64))
    x = np.concatenate(feats)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    # flat dimensions get a token span so the domain stays a box
    span = np.where(span > 0, span, 1e-6)
    return Dataset(x, dataset.labels.copy(), kind="feature",
                   lo=lo - FEATURE_PAD * span, hi=hi + FEATURE_PAD * span)


def subset(dataset, n, seed):
    """Deterministic class-stratified sample without replacement."""
    total = len(dataset)
    if n > total:
        raise ValueError(f"requested {n} of {total} samples")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 613)))
    classes = np.unique(dataset.labels)
    counts = {int(c): int((dataset.labels == c).sum()) for c in classes}
    # largest-remainder allocation proportional to class frequency
    quota = {c: n * cnt / total for c, cnt in counts.items()}
    take = {c: int(np.floor(q)) for c, q in quota.items()}
    short = n - sum(take.values())
    for c in sorted(quota, key=lambda c: (quota[c] - take[c], -c), reverse=True):
        if short == 0:
            break
        if take[c] < counts[c]:
            take[c] += 1
            short -= 1
    picked = []
    for c in sorted(take):
        idx = np.flatnonzero(dataset.labels == c)
        picked.append(rng.permutation(idx)[:take[c]])
    order = rng.permutation(np.concatenate(picked))
    return Dataset(dataset.images[order], dataset.labels[order],
                   kind=dataset.kind, lo=dataset.lo, hi=dataset.hi)


# ---------------------------------------------------------------- checkpoint

def save_dataset(dataset, path):
    """Binary container mirroring the model checkpoint layout."""
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", 1))
        kind = dataset.kind.encode()
        f.write(struct.pack("<I", len(kind)))
        f.write(kind)
        img = dataset.images
        f.write(struct.pack("<I", img.ndim))
        f.write(struct.pack(f"<{img.ndim}I", *img.shape))
        f.write(img.astype("<f8").tobytes())
        f.write(dataset.labels.astype("<i8").tobytes())
        for bound in (dataset.lo, dataset.hi):
            arr = np.atleast_1d(np.asarray(bound, dtype=np.float64))
            f.write(struct.pack("<I", arr.size))
            f.write(arr.astype("<f8").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        if f.read(4) != DATASET_MAGIC:
            raise DataFormatError("bad dataset magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise DataFormatError(f"unsupported dataset version {version}")
        (klen,) = struct.unpack("<I", f.read(4))
        kind = f.read(klen).decode()
        (ndim,) = struct.unpack("<I", f.read(4))
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        count = int(np.prod(shape))
        images = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
        labels = np.frombuffer(f.read(8 * shape[0]), dtype="<i8")
        bounds = []
        for _ in range(2):
            (m,) = struct.unpack("<I", f.read(4))
            arr = np.frombuffer(f.read(8 * m), dtype="<f8")
            bounds.append(float(arr[0]) if m == 1 else arr.copy())
        return Dataset(images.copy(), labels.copy(), kind=kind,
                       lo=bounds[0], hi=bounds[1])
