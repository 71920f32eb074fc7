"""Datasets: synthetic generators, IDX files, contrast normalization, augmentation."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace

import numpy as np

GCN_EPS = 1e-8

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_CODES = {v.newbyteorder("="): k for k, v in IDX_DTYPES.items()}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (K, *feature_shape), float64
    labels: np.ndarray  # (K,), int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels).astype(np.int64)
        if len(inputs) < 1 or len(inputs) != len(labels):
            raise ValueError(f"need K >= 1 samples with matching labels, got {len(inputs)} / {len(labels)}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(inputs)):
            raise ValueError("inputs contain non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "gaussian-mixture"  # or "two-spirals"
    num_classes: int = 2
    samples_per_class: int = 100
    input_dim: int = 2
    noise_std: float = 1.0
    label_noise: float = 0.0
    seed: int = 0
    test_samples_per_class: int | None = None  # defaults to samples_per_class

    def __post_init__(self):
        if self.kind not in ("gaussian-mixture", "two-spirals"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.num_classes < 2 or self.samples_per_class < 1 or self.input_dim < 1:
            raise ValueError("need num_classes >= 2, samples_per_class >= 1, input_dim >= 1")
        if self.kind == "two-spirals" and self.input_dim < 2:
            raise ValueError("two-spirals needs input_dim >= 2")
        if not self.noise_std >= 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Draw i.i.d. train and test splits from one seeded distribution.

    Gaussian mixture: class centres are standard normal in ``input_dim``
    dimensions, samples are centre + ``noise_std`` * N(0, I).  Two spirals:
    ``num_classes`` interleaved arms in the plane, embedded by a fixed random
    orthonormal map when ``input_dim > 2``.  Label noise reassigns a label to a
    uniformly chosen *other* class with probability ``label_noise``, in both
    splits.
    """
    rng = np.random.default_rng(spec.seed)
    C, d = spec.num_classes, spec.input_dim
    if spec.kind == "gaussian-mixture":
        centers = rng.standard_normal((C, d))
        embed = None
    else:
        centers = None
        embed = np.linalg.qr(rng.standard_normal((d, 2)))[0] if d > 2 else None

    def draw(n_per_class, stream):
        y = np.repeat(np.arange(C), n_per_class)
        if spec.kind == "gaussian-mixture":
            x = centers[y] + spec.noise_std * stream.standard_normal((len(y), d))
        else:
            t = stream.uniform(0.0, 1.0, len(y))
            r = 0.25 + 2.0 * t
            theta = 3.0 * np.pi * t + 2.0 * np.pi * y / C
            x = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
            x += spec.noise_std * stream.standard_normal(x.shape)
            if embed is not None:
                x = x @ embed.T
        flip = stream.random(len(y)) < spec.label_noise
        shift = stream.integers(1, C, len(y))
        y_noisy = np.where(flip, (y + shift) % C, y)
        order = stream.permutation(len(y))
        return x[order], y_noisy[order]

    train_stream, test_stream = (np.random.default_rng([spec.seed, k]) for k in (1, 2))
    n_test = spec.test_samples_per_class or spec.samples_per_class
    xtr, ytr = draw(spec.samples_per_class, train_stream)
    xte, yte = draw(n_test, test_stream)
    return Dataset(xtr, ytr, C, "train"), Dataset(xte, yte, C, "test")


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def read_idx(path, scale: bool = True) -> np.ndarray:
    """Read a big-endian IDX array.

    Unsigned-byte arrays with two or more dimensions are images and come back
    as float64 in [0, 1] when ``scale`` is true; 1-D unsigned-byte arrays are
    labels and come back as int64.  Other dtypes are returned as native
    float64 / int64.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_DTYPES:
        raise IdxFormatError(f"{path}: bad IDX magic {raw[:4].hex()} (expected 0000<type><ndim>)")
    dtype = IDX_DTYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if ndim == 0 or len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header, {ndim} dimensions need {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:  # python ints: no overflow before the size check
        count *= d
    expected = count * dtype.itemsize
    actual = len(raw) - header
    if expected != actual:
        raise IdxFormatError(f"{path}: payload size mismatch, dims {dims} need {expected} bytes, found {actual}")
    arr = np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)
    if dtype.kind == "f":
        return arr.astype(np.float64)
    if raw[2] == 0x08 and ndim >= 2 and scale:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.int64)


def write_idx(path, arr: np.ndarray) -> None:
    """Write ``arr`` as IDX.  The dtype must be one IDX supports."""
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=")
    if key not in IDX_CODES:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX type code")
    code = IDX_CODES[key]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=IDX_DTYPES[code]).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(head + payload)
    os.replace(tmp, path)


def load_idx_dataset(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path, scale=False).astype(np.int64)
    if labels.ndim != 1 or len(labels) != len(images):
        raise IdxFormatError(f"{labels_path}: expected {len(images)} labels, got shape {labels.shape}")
    if images.ndim == 3:  # (K, H, W) -> single channel
        images = images[:, None]
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(images.astype(np.float64), labels, num_classes, split)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def global_contrast_normalize(ds: Dataset, eps: float = GCN_EPS) -> Dataset:
    """Per sample: subtract the mean, divide by max(std, eps)."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    flat = ds.inputs.reshape(len(ds), -1)
    centered = flat - flat.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    out = centered / np.maximum(std, eps)
    out[np.ptp(flat, axis=1) == 0] = 0.0  # exactly constant: rounding residue only
    return replace(ds, inputs=out.reshape(ds.inputs.shape))


def augment(images: np.ndarray, flip: bool, crop_pad: int, rng: np.random.Generator, flip_prob: float = 0.5) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop, per image.

    ``images`` is (B, C, H, W) or (B, H, W).  Draws from ``rng`` in a fixed
    order (flip decisions, then crop offsets) so results depend only on the
    stream.
    """
    x = np.asarray(images, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"augment needs a spatial batch, got shape {images.shape}")
    B, C, H, W = x.shape
    if crop_pad < 0 or crop_pad >= W or crop_pad >= H:
        raise ValueError(f"crop_pad must be in [0, {min(H, W)}), got {crop_pad}")
    out = x.copy()
    if flip:
        which = rng.random(B) < flip_prob
        out[which] = out[which, :, :, ::-1]
    if crop_pad:
        p = crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, B)
        dx = rng.integers(0, 2 * p + 1, B)
        rows = dy[:, None] + np.arange(H)[None]
        cols = dx[:, None] + np.arange(W)[None]
        bidx = np.arange(B)[:, None, None, None]
        cidx = np.arange(C)[None, :, None, None]
        out = padded[bidx, cidx, rows[:, None, :, None], cols[:, None, None, :]]
    return out[:, 0] if squeeze else out
