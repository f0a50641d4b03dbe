"""Dataset ingestion, label corruption, synthetic data, checkpoints.

IDX files (the classic big-endian handwritten-digit container) load
into DatasetSplit with pixel values scaled to [0, 1]; malformed files
raise IdxFormatError carrying the byte offset of the problem.

Checkpoints are a single-file container: an ASCII header line
"vibckpt <version> <manifest-bytes>\n", a UTF-8 JSON manifest listing
each tensor's name, shape, byte offset, and length, then the raw
little-endian float64 blobs back to back. Offsets are relative to the
end of the manifest. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numeric_core import Rng, Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

CHECKPOINT_VERSION = 1
_CKPT_TAG = b"vibckpt"


class IdxFormatError(ValueError):
    """Malformed IDX file; offset points at the offending bytes."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointFormatError(ValueError):
    """Malformed or unsupported checkpoint file."""


@dataclass
class DatasetSplit:
    """Features, integer labels, and where they came from."""

    features: Tensor
    labels: Tensor
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    def flattened(self) -> "DatasetSplit":
        """Same split with images flattened to feature vectors."""
        n = self.features.shape[0]
        return DatasetSplit(
            features=self.features.reshape(n, -1),
            labels=self.labels,
            num_classes=self.num_classes,
            provenance=dict(self.provenance),
        )

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(
            features=self.features[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            provenance=dict(self.provenance),
        )


def _read_exact(f, n: int, what: str, offset: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IdxFormatError(f"truncated file: wanted {n} bytes for {what}, got {len(data)}",
                             offset)
    return data


def _load_idx_images(path) -> Tensor:
    with open(path, "rb") as f:
        header = _read_exact(f, 16, "image header", 0)
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}", 0)
        body = _read_exact(f, count * rows * cols, f"{count} images of {rows}x{cols}", 16)
        extra = f.read(1)
        if extra:
            raise IdxFormatError("trailing bytes after image data", 16 + count * rows * cols)
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols)
    return pixels.astype(np.float64) / 255.0


def _load_idx_labels(path) -> Tensor:
    with open(path, "rb") as f:
        header = _read_exact(f, 8, "label header", 0)
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}", 0)
        body = _read_exact(f, count, f"{count} labels", 8)
        extra = f.read(1)
        if extra:
            raise IdxFormatError("trailing bytes after label data", 8 + count)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path) -> DatasetSplit:
    """Parse an IDX image/label file pair into a DatasetSplit.

    Big-endian headers: images carry magic 0x00000803 then count, rows,
    cols; labels carry magic 0x00000801 then count. Pixels are unsigned
    bytes scaled to [0, 1]. Count mismatches and truncation raise
    IdxFormatError with the byte offset. num_classes is floored at 10
    since this loader targets the digit corpus.
    """
    images = _load_idx_images(images_path)
    labels = _load_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} does not match label count {labels.shape[0]}", 4)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    return DatasetSplit(
        features=images,
        labels=labels,
        num_classes=max(num_classes, 10),
        provenance={"source": f"idx:{images_path}", "labels": str(labels_path)},
    )


def corrupt_labels(labels: Tensor, p: float, num_classes: int, rng: Rng) -> Tensor:
    """Replace each label with probability p by a uniform draw over all
    num_classes classes (the draw may equal the original), so p=1 gives
    completely random labels with the full ln(num_classes) entropy."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must lie in [0, 1], got {p}")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    mask = np.asarray(rng.uniform((n,))) < p
    draws = rng.integers(0, num_classes, (n,))
    return np.where(mask, draws, labels)


def synthetic_gaussian_dataset(d: int, n: int, num_classes: int, margin: float,
                               rng: Rng) -> DatasetSplit:
    """Class-conditional unit-covariance Gaussians whose means sit
    margin apart along random orthogonal directions."""
    if d < 1 or n < 1 or num_classes < 1:
        raise ValueError("d, n, num_classes must all be at least 1")
    if num_classes > d:
        raise ValueError("need num_classes <= d for orthogonal class directions")
    raw = rng.standard_normal((d, num_classes))
    q, _ = np.linalg.qr(raw)
    means = (margin / np.sqrt(2.0)) * q[:, :num_classes].T  # [C, d], pairwise distance = margin
    labels = rng.integers(0, num_classes, (n,))
    features = means[labels] + rng.standard_normal((n, d))
    return DatasetSplit(
        features=features,
        labels=labels,
        num_classes=num_classes,
        provenance={"source": "synthetic-gaussian", "margin": margin, "d": d},
    )


# 5x7 digit glyphs; rows top to bottom, 1 bits left to right.
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def _glyph_bitmaps() -> Tensor:
    out = np.zeros((10, 7, 5))
    for digit, rows in _GLYPHS.items():
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                out[digit, r, c] = 1.0 if ch == "1" else 0.0
    return out


def synthetic_digit_dataset(n: int, rng: Rng, image_size: int = 28, upscale: float = 3.0,
                            jitter: float = 3.0, noise_sd: float = 0.08) -> DatasetSplit:
    """Digit-recognition images: 5x7 glyph bitmaps drawn onto an
    image_size canvas through a per-sample affine map (continuous
    sub-pixel translation up to +-jitter, scale wobble around upscale,
    small rotation and shear), then amplitude jitter and additive pixel
    noise, clipped to [0, 1].

    Serves as the bundled stand-in for real handwritten-digit data in
    tests and desk-scale experiments; same 28x28, 10-class shape. The
    continuous distortion parameters make every sample distinct, which
    matters for label-memorization experiments: nearly identical inputs
    with independent random labels would cap attainable training
    accuracy regardless of model capacity.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    glyphs = _glyph_bitmaps()  # [10, 7, 5]
    gh, gw = glyphs.shape[1], glyphs.shape[2]
    labels = rng.integers(0, 10, (n,))
    offs_r = jitter * (2.0 * rng.uniform((n,)) - 1.0)
    offs_c = jitter * (2.0 * rng.uniform((n,)) - 1.0)
    scale_r = upscale * (1.0 + 0.12 * (2.0 * rng.uniform((n,)) - 1.0))
    scale_c = upscale * (1.0 + 0.12 * (2.0 * rng.uniform((n,)) - 1.0))
    angles = np.deg2rad(10.0) * (2.0 * rng.uniform((n,)) - 1.0)
    shears = 0.15 * (2.0 * rng.uniform((n,)) - 1.0)
    amps = 0.65 + 0.35 * rng.uniform((n,))
    noise = rng.standard_normal((n, image_size, image_size)) * noise_sd

    # Inverse-map every canvas pixel into glyph coordinates and sample
    # the bitmap bilinearly (zero outside). Canvas grid is shared.
    half = (image_size - 1) / 2.0
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    rows -= half
    cols -= half
    gcr = (gh - 1) / 2.0
    gcc = (gw - 1) / 2.0
    images = np.empty((n, image_size, image_size))
    for i in range(n):
        ca, sa = np.cos(angles[i]), np.sin(angles[i])
        # canvas offset, undone first, then inverse rotation+shear, then
        # inverse scaling back to glyph units
        r0 = rows - offs_r[i]
        c0 = cols - offs_c[i]
        rr = ca * r0 + sa * c0
        cc = -sa * r0 + ca * c0
        cc = cc - shears[i] * rr
        gr = rr / scale_r[i] + gcr
        gc = cc / scale_c[i] + gcc
        images[i] = amps[i] * _bilinear(glyphs[labels[i]], gr, gc)
    images = np.clip(images + noise, 0.0, 1.0)
    return DatasetSplit(
        features=images,
        labels=labels,
        num_classes=10,
        provenance={"source": "synthetic-digits", "image_size": image_size},
    )


def _bilinear(grid: Tensor, r: Tensor, c: Tensor) -> Tensor:
    """Sample a 2-D grid at fractional coordinates, zero outside."""
    gh, gw = grid.shape
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0

    def at(ri, ci):
        inside = (ri >= 0) & (ri < gh) & (ci >= 0) & (ci < gw)
        vals = grid[np.clip(ri, 0, gh - 1), np.clip(ci, 0, gw - 1)]
        return np.where(inside, vals, 0.0)

    return ((1 - fr) * (1 - fc) * at(r0, c0) + (1 - fr) * fc * at(r0, c0 + 1)
            + fr * (1 - fc) * at(r0 + 1, c0) + fr * fc * at(r0 + 1, c0 + 1))


def standardize(train: DatasetSplit, *others) -> tuple:
    """Normalize features by the global mean/SD of the training split.

    One scalar mean and SD over every training pixel (single-channel
    data); the same affine map is applied to each additional split.
    Returns the transformed splits followed by (mean, sd).
    """
    mean = float(train.features.mean())
    sd = float(train.features.std())
    if sd == 0.0:
        raise ValueError("training features are constant; cannot standardize")
    out = []
    for split in (train, *others):
        feats = (split.features - mean) / sd
        prov = dict(split.provenance)
        prov["standardized"] = {"mean": mean, "sd": sd}
        out.append(DatasetSplit(features=feats, labels=split.labels,
                                num_classes=split.num_classes, provenance=prov))
    return (*out, (mean, sd))


@dataclass
class Checkpoint:
    """What one container file holds."""

    version: int
    spec: dict
    tensors: dict
    provenance: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the single-file container; see the module docstring for
    the byte layout."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in ckpt.tensors.items():
        arr = np.ascontiguousarray(np.asarray(tensor, dtype="<f8"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({
        "spec": ckpt.spec,
        "provenance": ckpt.provenance,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_TAG + b" %d %d\n" % (ckpt.version, len(manifest)))
        f.write(manifest)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    """Read a container written by save_checkpoint, bit-exactly."""
    with open(path, "rb") as f:
        header = f.readline(128)
        parts = header.split()
        if len(parts) != 3 or parts[0] != _CKPT_TAG or not header.endswith(b"\n"):
            raise CheckpointFormatError(f"not a checkpoint file: bad header {header[:32]!r}")
        try:
            version, manifest_len = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise CheckpointFormatError(f"malformed header {header!r}") from exc
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}, "
                                        f"supported: {CHECKPOINT_VERSION}")
        manifest_raw = f.read(manifest_len)
        if len(manifest_raw) != manifest_len:
            raise CheckpointFormatError("truncated manifest")
        try:
            manifest = json.loads(manifest_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"corrupt manifest: {exc}") from exc
        blob = f.read()
    tensors = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = blob[start:start + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointFormatError(f"short read for tensor {entry['name']!r}: "
                                        f"wanted {nbytes} bytes, file has {len(blob) - start}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).copy()
    return Checkpoint(version=version, spec=manifest["spec"], tensors=tensors,
                      provenance=manifest.get("provenance", {}))
