"""Dataset ingestion, synthesis, batching and resampling draws.

Images live in [0,1] as (n, C, H, W) float arrays; labels are int64.
All randomness goes through numpy's seedable PCG64 generator
(np.random.default_rng), which has a stable cross-platform stream.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (n, C, H, W) in [0,1]
    labels: np.ndarray          # (n,) int64 in [0, classes)
    classes: int
    ids: np.ndarray = field(default=None)  # stable per-example identity

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images/labels length mismatch")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0,1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError("label outside [0, classes)")

    def __len__(self):
        return self.images.shape[0]

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.classes, self.ids[idx])


@dataclass
class BatchPlan:
    """Index sequence for one epoch; length always equals the dataset size."""
    ordering: np.ndarray
    batch_size: int

    def __post_init__(self):
        self.ordering = np.asarray(self.ordering, dtype=np.int64)
        if self.batch_size < 1:
            raise DataError("batch_size must be positive")

    def batches(self):
        n = len(self.ordering)
        for start in range(0, n, self.batch_size):
            yield self.ordering[start:start + self.batch_size]


# ---- IDX file format ----------------------------------------------------------

def _read_u32s(f, count, path):
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise DataError(f"truncated IDX header in {path}")
    return struct.unpack(f">{count}I", raw)


def load_idx(images_path, labels_path):
    """Load an IDX image/label file pair into a Dataset (pixels scaled by 1/255)."""
    with open(images_path, "rb") as f:
        magic, n, h, w = _read_u32s(f, 4, images_path)
        if magic != IDX_IMAGES_MAGIC:
            raise DataError(f"bad image magic 0x{magic:08x} in {images_path}")
        if n * h * w > 2**31:
            raise DataError("IDX dimensions overflow")
        raw = f.read(n * h * w)
        if len(raw) != n * h * w:
            raise DataError(f"truncated IDX image data in {images_path}")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)
    with open(labels_path, "rb") as f:
        magic, nl = _read_u32s(f, 2, labels_path)
        if magic != IDX_LABELS_MAGIC:
            raise DataError(f"bad label magic 0x{magic:08x} in {labels_path}")
        raw = f.read(nl)
        if len(raw) != nl:
            raise DataError(f"truncated IDX label data in {labels_path}")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if nl != n:
        raise DataError("image/label counts differ")
    classes = int(labels.max()) + 1 if n else 0
    return Dataset(images.astype(np.float64) / 255.0, labels, classes)


def write_idx(dataset, images_path, labels_path):
    """Write a Dataset as an IDX pair; pixels are quantized to round(p*255)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DataError("IDX export supports single-channel images only")
    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# ---- synthetic data -------------------------------------------------------------

def synth_dataset(seed, n, classes=10, difficulty=0.5, shape=(1, 28, 28)):
    """Deterministic class-conditional toy images.

    Each class gets a smooth random template; samples are the template plus a
    difficulty-scaled random shift and pixel noise. Per-example noise levels
    vary (half the examples are drawn noisier than the other half) so that
    hardness is heterogeneous. difficulty=0 gives one noiseless prototype per
    class, which is linearly separable by construction.

    Pixel values are snapped to the 1/255 grid so IDX round trips are exact.
    """
    if n < classes:
        raise DataError("need n >= classes")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    if c != 1:
        raise DataError("synth_dataset generates single-channel images")

    # smooth templates: low-resolution noise upsampled by nearest neighbour
    base = rng.uniform(0.1, 0.9, size=(classes, h // 4 + 1, w // 4 + 1))
    templates = np.kron(base, np.ones((1, 4, 4)))[:, :h, :w]

    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)

    max_shift = int(round(3 * difficulty))
    noise_hi = rng.random(n) < 0.5  # heterogeneous hardness
    sigma = difficulty * np.where(noise_hi, 0.25, 0.08)

    images = np.empty((n, 1, h, w))
    for i in range(n):
        t = templates[labels[i]]
        if max_shift:
            sy = int(rng.integers(-max_shift, max_shift + 1))
            sx = int(rng.integers(-max_shift, max_shift + 1))
            t = np.roll(np.roll(t, sy, axis=0), sx, axis=1)
        img = t + sigma[i] * rng.standard_normal((h, w))
        images[i, 0] = img
    images = np.clip(images, 0.0, 1.0)
    images = np.rint(images * 255.0) / 255.0
    return Dataset(images, labels, classes)


# ---- sampling -------------------------------------------------------------------

def sample_with_replacement(n, weights, rng):
    """n i.i.d. index draws with P(i) proportional to weights[i]."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise DataError("weights length must equal n")
    if np.any(weights < 0):
        raise DataError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise DataError("weights must not all be zero")
    return rng.choice(n, size=n, replace=True, p=weights / total).astype(np.int64)
