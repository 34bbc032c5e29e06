"""Dataset containers, IDX file parsing and synthetic data generation.

Two synthetic families are provided. ``synth_blobs`` builds Gaussian
clusters for fast property tests. ``synth_digits`` renders ten
segment-display glyphs with per-sample jitter and noise, giving an
image-shaped classification task at (1, 28, 28) that small networks
learn to high accuracy.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .gradnet import Batch
from .seeding import spawn_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(Exception):
    """Raised when a file is not structurally valid IDX."""


class BadMagicError(IdxFormatError):
    """Raised when the 4-byte magic does not match the expected kind."""


class TruncatedPayloadError(IdxFormatError):
    """Raised when the file ends before the header-declared payload."""


class CountMismatchError(Exception):
    """Raised when paired image and label files disagree on item count."""


@dataclass(frozen=True)
class Dataset:
    """Named train/val/test splits sharing one input shape and class count.

    Splits are disjoint by construction in the builders below; the
    container itself only checks shape and label agreement.
    """

    name: str
    train: Batch
    val: Batch
    test: Batch
    num_classes: int
    input_shape: tuple

    def __post_init__(self):
        if not self.name:
            raise ValueError("dataset name must be non-empty")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        for split, batch in self.splits().items():
            if batch.inputs.shape[1:] != tuple(self.input_shape):
                raise ValueError(
                    f"{split} split shape {batch.inputs.shape[1:]} does not "
                    f"match input_shape {tuple(self.input_shape)}"
                )
            if batch.labels.max() >= self.num_classes:
                raise ValueError(f"{split} split has a label >= num_classes")

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) < n:
        raise TruncatedPayloadError(
            f"file ended inside {what}: wanted {n} bytes, got {len(data)}"
        )
    return data


def _read_header(fh, expected_magic, ndim, kind):
    magic = struct.unpack(">I", _read_exact(fh, 4, "magic"))[0]
    if magic != expected_magic:
        raise BadMagicError(
            f"bad {kind} magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{ndim}I", _read_exact(fh, 4 * ndim, "dimension header"))
    return dims


def load_idx_images(path):
    """Parse an IDX image file into float64 pixels in [0, 1].

    Returns an array of shape (count, rows, cols). The ubyte payload is
    scaled by 1/255.
    """
    with open(path, "rb") as fh:
        count, rows, cols = _read_header(fh, IMAGES_MAGIC, 3, "image")
        payload = _read_exact(fh, count * rows * cols, "pixel payload")
        if fh.read(1):
            raise IdxFormatError("trailing bytes after pixel payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(count, rows, cols)


def load_idx_labels(path):
    """Parse an IDX label file into an int64 vector."""
    with open(path, "rb") as fh:
        (count,) = _read_header(fh, LABELS_MAGIC, 1, "label")
        payload = _read_exact(fh, count, "label payload")
        if fh.read(1):
            raise IdxFormatError("trailing bytes after label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path):
    """Load a paired IDX image/label split as a Batch.

    Images gain a leading channel axis, giving inputs of shape
    (count, 1, rows, cols).
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if images.shape[0] == 0:
        raise IdxFormatError("split contains zero items")
    return Batch(images[:, None, :, :], labels)


def _split_shuffled(inputs, labels, sizes, rng):
    # sizes must sum to the sample count; a global shuffle keeps the
    # splits disjoint while mixing classes into each of them.
    order = rng.permutation(inputs.shape[0])
    batches = []
    start = 0
    for n in sizes:
        take = order[start:start + n]
        batches.append(Batch(inputs[take], labels[take]))
        start += n
    return batches


def synth_blobs(num_classes, dim=8, per_class=200, spread=0.08, seed=0,
                val_fraction=0.15, test_fraction=0.15):
    """Seeded Gaussian clusters clipped to [0, 1]^dim.

    Class means are drawn inside [0.15, 0.85]^dim and re-drawn until all
    pairwise distances reach max(4*spread, 1e-6), so distinct classes
    stay separated even as spread shrinks.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if dim < 1 or per_class < 7:
        raise ValueError("dim must be >= 1 and per_class >= 7")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = spawn_rng(seed, "synth-blobs")
    min_sep = max(4.0 * spread, 1e-6)
    for _ in range(500):
        means = rng.uniform(0.15, 0.85, (num_classes, dim))
        gaps = np.linalg.norm(means[:, None] - means[None, :], axis=-1)
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() >= min_sep:
            break
    else:
        raise ValueError(
            f"could not place {num_classes} means with separation {min_sep}"
        )
    inputs = np.clip(
        np.repeat(means, per_class, axis=0)
        + rng.normal(0.0, spread, (num_classes * per_class, dim)),
        0.0, 1.0,
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    total = inputs.shape[0]
    n_val = max(1, int(round(total * val_fraction)))
    n_test = max(1, int(round(total * test_fraction)))
    n_train = total - n_val - n_test
    if n_train < 1:
        raise ValueError("fractions leave no training data")
    train, val, test = _split_shuffled(inputs, labels, (n_train, n_val, n_test), rng)
    return Dataset("blobs", train, val, test, num_classes, (dim,))


# Segment endpoints on a 28x28 canvas. Horizontal segments (a, g, d) and
# vertical segments (f, b, e, c) of a classic display layout. The glyph
# box spans rows 5..20 and cols 9..18, leaving >= 5 pixels of margin on
# every side so integer rolls up to max_shift=4 never wrap content.
_SEGMENTS = {
    "a": ((5, 9), (5, 17)),
    "b": ((5, 17), (12, 17)),
    "c": ((12, 17), (19, 17)),
    "d": ((19, 9), (19, 17)),
    "e": ((12, 9), (19, 9)),
    "f": ((5, 9), (12, 9)),
    "g": ((12, 9), (12, 17)),
}

_DIGIT_SEGMENTS = (
    "abcdef", "bc", "abged", "abgcd", "fgbc",
    "afgcd", "afgecd", "abc", "abcdefg", "abfgcd",
)


def glyph(digit):
    """Render digit's segment set as a float image of shape (28, 28).

    Strokes are 2 pixels wide with unit intensity; this is the noise-free
    template that synth_digits jitters.
    """
    if not 0 <= digit <= 9:
        raise ValueError("digit must be in 0..9")
    canvas = np.zeros((28, 28))
    for name in _DIGIT_SEGMENTS[digit]:
        (r0, c0), (r1, c1) = _SEGMENTS[name]
        canvas[r0:r1 + 2, c0:c1 + 2] = 1.0
    return canvas


def _render_digit(digit, rng, noise, max_shift):
    img = np.zeros((28, 28))
    for name in _DIGIT_SEGMENTS[digit]:
        (r0, c0), (r1, c1) = _SEGMENTS[name]
        img[r0:r1 + 2, c0:c1 + 2] = rng.uniform(0.65, 1.0)
    if max_shift > 0:
        dy, dx = rng.integers(-max_shift, max_shift + 1, 2)
        img = np.roll(img, (dy, dx), axis=(0, 1))
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_digits(train_per_class=400, val_per_class=50, test_per_class=100,
                 seed=0, noise=0.08, max_shift=3):
    """Procedural ten-class digit images at (1, 28, 28).

    Each sample is a segment-display glyph with randomized stroke
    intensity, an integer translation of up to max_shift pixels and
    additive Gaussian noise, clipped to [0, 1]. Splits are exactly
    class-balanced and generated disjointly.
    """
    if min(train_per_class, val_per_class, test_per_class) < 1:
        raise ValueError("every split needs at least one sample per class")
    if not 0 <= max_shift <= 4:
        raise ValueError("max_shift must be in 0..4")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = spawn_rng(seed, "synth-digits")
    sizes = (train_per_class, val_per_class, test_per_class)
    batches = []
    for n in sizes:
        imgs = np.empty((10 * n, 1, 28, 28))
        labels = np.repeat(np.arange(10), n)
        for i, digit in enumerate(labels):
            imgs[i, 0] = _render_digit(digit, rng, noise, max_shift)
        order = rng.permutation(10 * n)
        batches.append(Batch(imgs[order], labels[order]))
    train, val, test = batches
    return Dataset("segdigits", train, val, test, 10, (1, 28, 28))
