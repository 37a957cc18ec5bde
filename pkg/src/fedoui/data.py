"""CIFAR-10 binary loader, seeded subsets and a synthetic dataset.

Images are float64 arrays in NCHW layout, scaled to [0, 1] and standardized
per channel with fixed CIFAR-10 constants.  Datasets read from disk keep the
raw uint8 pixels and standardize lazily, so the 50k-image training set never
has to exist as float64 in memory.
"""

import os
from pathlib import Path

import numpy as np

from ._validation import as_label_array
from .exceptions import DataError, InputError

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
DATA_DIR_ENV = "FEDOUI_DATA_DIR"


class Dataset:
    """Images, integer labels and a name.

    Pass either ``images`` (float64, already standardized) or ``pixels``
    (uint8 raw CIFAR layout).
    """

    def __init__(self, labels, images=None, pixels=None, name="", n_classes=10):
        self.labels = as_label_array(labels, n_classes=n_classes)
        if (images is None) == (pixels is None):
            raise InputError("pass exactly one of images or pixels")
        self._pixels = None if pixels is None else np.asarray(pixels, dtype=np.uint8)
        self._images = None if images is None else np.asarray(images, dtype=np.float64)
        n = len(self._pixels if images is None else self._images)
        if n != len(self.labels):
            raise InputError(f"{n} images but {len(self.labels)} labels")
        if self._images is not None and not np.all(np.isfinite(self._images)):
            raise InputError("images contain NaN or Inf")
        self.name = name
        self.n_classes = n_classes

    @property
    def images(self):
        if self._images is None:
            self._images = standardize(self._pixels)
        return self._images

    @property
    def pixels(self):
        return self._pixels

    @property
    def image_shape(self):
        arr = self._images if self._images is not None else self._pixels
        return tuple(arr.shape[1:])

    def __len__(self):
        return len(self.labels)

    def take(self, indices, name=None):
        idx = np.asarray(indices, dtype=np.int64)
        kw = {"pixels": self._pixels[idx]} if self._pixels is not None else {"images": self._images[idx]}
        return Dataset(self.labels[idx], name=name or self.name, n_classes=self.n_classes, **kw)

    def with_labels(self, labels):
        kw = {"pixels": self._pixels} if self._pixels is not None else {"images": self._images}
        return Dataset(labels, name=self.name, n_classes=self.n_classes, **kw)

    def __repr__(self):
        return f"Dataset(name={self.name!r}, n={len(self)}, shape={self.image_shape})"


def standardize(pixels):
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    return (x - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]


def unstandardize(images):
    """Inverse of :func:`standardize` up to the [0, 1] scaling."""
    return np.asarray(images) * CIFAR_STD[:, None, None] + CIFAR_MEAN[:, None, None]


def to_pixels(images):
    return np.rint(unstandardize(images) * 255.0).astype(np.uint8)


def read_cifar10_batch(path):
    """Parse one CIFAR-10 binary batch file into ``(pixels, labels)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing CIFAR-10 file: {path}") from None
    n, rem = divmod(len(raw), RECORD_BYTES)
    if rem:
        raise DataError(f"{path}: record at offset {n * RECORD_BYTES} incomplete "
                        f"({rem} of {RECORD_BYTES} bytes)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label byte {labels[bad[0]]} > 9 at offset {bad[0] * RECORD_BYTES}")
    return rec[:, 1:].reshape((n,) + IMAGE_SHAPE).copy(), labels


def write_cifar10_batch(path, pixels, labels):
    """Serialize records in the CIFAR-10 binary layout (inverse of the reader)."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


def resolve_data_dir(directory=None):
    """``directory`` or ``$FEDOUI_DATA_DIR`` (or ``./data``), descending into
    ``cifar-10-batches-bin`` when the batch files live there."""
    d = Path(directory or os.environ.get(DATA_DIR_ENV, "data"))
    nested = d / "cifar-10-batches-bin"
    if not (d / TEST_FILE).exists() and (nested / TEST_FILE).exists():
        return nested
    return d


def load_cifar10(directory=None):
    """Load the five training batches and the test batch."""
    d = resolve_data_dir(directory)
    parts = [read_cifar10_batch(d / name) for name in TRAIN_FILES]
    train = Dataset(np.concatenate([p[1] for p in parts]),
                    pixels=np.concatenate([p[0] for p in parts]), name="cifar10-train")
    px, lab = read_cifar10_batch(d / TEST_FILE)
    return train, Dataset(lab, pixels=px, name="cifar10-test")


def subset(dataset, n, rng):
    """Uniform sample of ``n`` items without replacement, in draw order."""
    if n < 0 or n > len(dataset):
        raise InputError(f"cannot draw {n} samples from a dataset of {len(dataset)}")
    idx = rng.permutation(len(dataset))[:n]
    return dataset.take(idx)


def synthetic_blobs(n_classes, n_per_class, image_side, channels, spread, rng):
    """Gaussian noise (std ``spread``) around one random template per class.

    Samples are ordered class by class.
    """
    if min(n_classes, n_per_class, image_side, channels) < 1 or spread < 0:
        raise InputError("synthetic_blobs needs positive sizes and spread >= 0")
    shape = (channels, image_side, image_side)
    templates = rng.normal(size=(n_classes,) + shape)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    images = templates[labels] + spread * rng.normal(size=(len(labels),) + shape)
    return Dataset(labels, images=images, name="synthetic", n_classes=n_classes)


def label_histogram(labels, n_classes=10):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
