"""Gradually shifting domain sequences: generators, transforms, batching, IDX I/O.

A domain sequence starts from a labeled source dataset and applies one
transform at evenly spaced strengths. Every intermediate domain is produced
directly from the source at its own strength (never by chaining), so
interpolation error does not compound. Oracle labels travel with every
domain but are meant for evaluation only; training code must not read them
past the source.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, IdxFormatError, ShapeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Feature matrix with optional oracle class labels."""

    X: np.ndarray
    y: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        object.__setattr__(self, "X", X)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ShapeError(f"features must be a non-empty 2-D array, got {X.shape}")
        if self.y is not None:
            y = np.ascontiguousarray(self.y, dtype=np.int64)
            object.__setattr__(self, "y", y)
            if y.shape != (X.shape[0],):
                raise ShapeError(
                    f"labels have shape {y.shape}, expected ({X.shape[0]},)"
                )
            if y.size and y.min() < 0:
                raise ValueError("labels must be non-negative class indices")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def features_only(self) -> "Dataset":
        return Dataset(self.X)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.X[idx], None if self.y is None else self.y[idx])


@dataclass(frozen=True)
class DomainSequence:
    """Ordered domains from labeled source (index 0) to target (index -1)."""

    domains: tuple[Dataset, ...]
    shift_params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "shift_params", tuple(float(s) for s in self.shift_params))
        if len(self.domains) < 2:
            raise ValueError("a domain sequence needs at least source and target")
        if len(self.domains) != len(self.shift_params):
            raise ValueError("one shift parameter per domain required")
        if self.domains[0].y is None:
            raise ContractError("the source domain must carry labels")
        diffs = np.diff(self.shift_params)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError(f"shift parameters must be strictly monotone, "
                             f"got {self.shift_params}")

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def source(self) -> Dataset:
        return self.domains[0]

    @property
    def target(self) -> Dataset:
        return self.domains[-1]


@dataclass(frozen=True)
class BatchPlan:
    """Seeded partition of a dataset into m batches.

    With batch_size unset the split is balanced (sizes differ by at most 1);
    otherwise batches are chunks of batch_size and the last may be short.
    """

    m: int
    seed: int
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def make_batches(ds: Dataset, plan: BatchPlan) -> list[Dataset]:
    """Shuffle with the plan's seed and split into m non-empty batches."""
    if plan.m > ds.n:
        raise ValueError(f"cannot split {ds.n} rows into {plan.m} non-empty batches")
    if plan.batch_size is not None and plan.m * plan.batch_size < ds.n:
        raise ValueError(
            f"{plan.m} batches of {plan.batch_size} cannot cover {ds.n} rows"
        )
    rng = np.random.default_rng(plan.seed)
    perm = rng.permutation(ds.n)
    if plan.batch_size is None:
        parts = np.array_split(perm, plan.m)
    else:
        parts = [perm[i:i + plan.batch_size] for i in range(0, ds.n, plan.batch_size)]
    return [ds.subset(p) for p in parts if p.size]


# Class-1 arc: radius and angular offset (degrees) of the inner half circle.
# Both arcs are centered at the origin so that a rotation slides each class
# mostly along its own support; only the arc ends expose new territory, which
# keeps consecutive rotated domains close while leaving the joint boundary
# angle-dependent (a source-only model still fails after a large total turn).
_MOON_R1 = 0.5
_MOON_PSI_DEG = 60.0


def make_two_moons(n: int, noise_sd: float, seed: int) -> Dataset:
    """Two interleaving half circles with Gaussian coordinate noise.

    Class 0 is the upper arc of the unit circle centered at the origin;
    class 1 is a half circle of radius 0.5, also centered at the origin,
    rotated 60 degrees so one end reaches into the class-0 concavity.
    Class 0 gets ceil(n/2) points.
    """
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be >= 0, got {noise_sd}")
    n0 = (n + 1) // 2
    n1 = n // 2
    psi = np.deg2rad(_MOON_PSI_DEG)
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(np.pi - psi, 2.0 * np.pi - psi, n1)
    X = np.concatenate([
        np.column_stack([np.cos(t0), np.sin(t0)]),
        np.column_stack([_MOON_R1 * np.cos(t1), _MOON_R1 * np.sin(t1)]),
    ])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    rng = np.random.default_rng(seed)
    X = X + rng.normal(0.0, noise_sd, size=X.shape)
    return Dataset(X, y)


def make_gaussians(n: int, noise_sd: float, seed: int,
                   radius: float = 1.5) -> Dataset:
    """Two Gaussian blobs at (+-radius, 0); rotating them moves the class
    boundary, which makes a linearly separable substrate for convex runs."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    n0 = (n + 1) // 2
    n1 = n // 2
    rng = np.random.default_rng(seed)
    X = np.concatenate([
        rng.normal(0.0, noise_sd, size=(n0, 2)) + np.array([-radius, 0.0]),
        rng.normal(0.0, noise_sd, size=(n1, 2)) + np.array([radius, 0.0]),
    ])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return Dataset(X, y)


def rotate2d(ds: Dataset, angle_deg: float) -> Dataset:
    """Rotate 2-D points counterclockwise about the origin; labels unchanged."""
    if ds.d != 2:
        raise ShapeError(f"rotate2d needs 2 feature columns, got {ds.d}")
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return Dataset(ds.X @ rot.T, ds.y)


def rotate_image(ds: Dataset, angle_deg: float, side: int) -> Dataset:
    """Rotate flattened side x side images about their center.

    Bilinear interpolation, out-of-bounds pixels read as 0. angle 0 returns
    bit-identical pixels.
    """
    if ds.d != side * side:
        raise ShapeError(f"features have {ds.d} columns, expected {side}*{side}")
    if angle_deg == 0.0:
        return Dataset(ds.X.copy(), ds.y)
    imgs = ds.X.reshape(ds.n, side, side)
    c = (side - 1) / 2.0
    a = np.deg2rad(angle_deg)
    cos_a, sin_a = np.cos(a), np.sin(a)
    rr, cc = np.meshgrid(np.arange(side) - c, np.arange(side) - c, indexing="ij")
    # inverse map: sample the source at the location that rotates onto (rr, cc)
    src_r = cos_a * rr + sin_a * cc + c
    src_c = -sin_a * rr + cos_a * cc + c
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    def gather(ri, ci):
        valid = (ri >= 0) & (ri < side) & (ci >= 0) & (ci < side)
        vals = imgs[:, np.clip(ri, 0, side - 1), np.clip(ci, 0, side - 1)]
        return vals * valid

    out = (gather(r0, c0) * ((1 - fr) * (1 - fc))
           + gather(r0, c0 + 1) * ((1 - fr) * fc)
           + gather(r0 + 1, c0) * (fr * (1 - fc))
           + gather(r0 + 1, c0 + 1) * (fr * fc))
    return Dataset(out.reshape(ds.n, side * side), ds.y)


def color_shift(ds: Dataset, offset: float) -> Dataset:
    """Add a constant offset to every feature value; labels unchanged."""
    return Dataset(ds.X + offset, ds.y)


Transform = Callable[[Dataset, float], Dataset]


def build_sequence(source: Dataset, transform: Transform, total_shift: float,
                   n_given: int) -> DomainSequence:
    """Evenly spaced domains: domain i is the source transformed at strength
    total_shift * i / (n_given - 1). Domain 0 is the untransformed source."""
    if n_given < 2:
        raise ValueError(f"need at least 2 domains, got {n_given}")
    if source.y is None:
        raise ContractError("the source dataset must carry labels")
    shifts = [total_shift * i / (n_given - 1) for i in range(n_given)]
    domains = [source] + [transform(source, s) for s in shifts[1:]]
    return DomainSequence(tuple(domains), tuple(shifts))


def _read_exact(data: bytes, offset: int, count: int, path: str) -> bytes:
    if offset + count > len(data):
        raise IdxFormatError(
            f"{path}: truncated, needed {offset + count} bytes but file has {len(data)}"
        )
    return data[offset:offset + count]


def _parse_idx_images(data: bytes, path: str) -> np.ndarray:
    magic, = struct.unpack(">I", _read_exact(data, 0, 4, path))
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    count, rows, cols = struct.unpack(">III", _read_exact(data, 4, 12, path))
    expected = 16 + count * rows * cols
    if len(data) != expected:
        raise IdxFormatError(
            f"{path}: payload is {len(data) - 16} bytes, header implies "
            f"{count}*{rows}*{cols} = {count * rows * cols}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows * cols)


def _parse_idx_labels(data: bytes, path: str) -> np.ndarray:
    magic, = struct.unpack(">I", _read_exact(data, 0, 4, path))
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    count, = struct.unpack(">I", _read_exact(data, 4, 4, path))
    if len(data) != 8 + count:
        raise IdxFormatError(
            f"{path}: payload is {len(data) - 8} bytes, header says {count} labels"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair; pixels scaled to [0, 1]."""
    with open(images_path, "rb") as f:
        raw_images = f.read()
    with open(labels_path, "rb") as f:
        raw_labels = f.read()
    images = _parse_idx_images(raw_images, str(images_path))
    labels = _parse_idx_labels(raw_labels, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image file has {images.shape[0]} items but label file has "
            f"{labels.shape[0]}"
        )
    return Dataset(images.astype(np.float64) / 255.0, labels)


def write_idx(ds: Dataset, images_path, labels_path, rows: int, cols: int) -> None:
    """Write a dataset back to an IDX pair; inverse of load_idx for byte data."""
    if ds.d != rows * cols:
        raise ShapeError(f"features have {ds.d} columns, expected {rows}*{cols}")
    if ds.y is None:
        raise ContractError("write_idx needs labels")
    pixels = np.rint(np.clip(ds.X, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, ds.n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, ds.n))
        f.write(ds.y.astype(np.uint8).tobytes())


def holdout_split(ds: Dataset, frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded split into (kept, held_out) with held_out getting round(n*frac) rows."""
    if not 0.0 < frac < 1.0:
        raise ValueError(f"frac must be in (0, 1), got {frac}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    n_hold = int(round(ds.n * frac))
    n_hold = min(max(n_hold, 1), ds.n - 1)
    return ds.subset(np.sort(perm[n_hold:])), ds.subset(np.sort(perm[:n_hold]))
