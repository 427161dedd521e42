"""Synthetic paired-modality datasets and their binary file format.

Samples pair an image-like tensor with a matrix-like signal under one
label. Class means sit along a fixed random direction per modality,
separated by a configurable distance, so the two modalities can carry
deliberately unequal information. Values are quantized to float32 at
generation time because the file format stores float32; compute stays
float64 in memory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, FormatError, ParameterError

MAGIC = b"PMD1"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class PairedSample:
    modality_a: np.ndarray  # image-like [C,H,W]
    modality_b: np.ndarray  # signal-like [Ch,T]
    label: int


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 2500
    positive_fraction: float = 0.29
    shape_a: tuple[int, ...] = (3, 16, 16)
    shape_b: tuple[int, ...] = (8, 64)
    sep_a: float = 2.0
    sep_b: float = 1.2
    noise_a: float = 1.0
    noise_b: float = 1.0
    n_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ParameterError(f"n_samples must be >= 0, got {self.n_samples}")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ParameterError(
                f"positive_fraction must lie in (0, 1), got {self.positive_fraction}"
            )
        if self.sep_a < 0 or self.sep_b < 0:
            raise ParameterError("class separations must be >= 0")
        if self.noise_a < 0 or self.noise_b < 0:
            raise ParameterError("noise levels must be >= 0")
        if len(self.shape_a) != 3 or len(self.shape_b) != 2:
            raise ParameterError(
                f"shape_a must be rank 3 and shape_b rank 2, got {self.shape_a}, {self.shape_b}"
            )
        if any(d < 1 for d in self.shape_a + self.shape_b):
            raise ParameterError("all shape dimensions must be >= 1")
        if self.n_classes < 2:
            raise ParameterError(f"n_classes must be >= 2, got {self.n_classes}")


@dataclass
class PairedDataset:
    modality_a: np.ndarray  # [N,C,H,W] float64
    modality_b: np.ndarray  # [N,Ch,T] float64
    labels: np.ndarray      # [N] int64
    n_classes: int = 2

    def __post_init__(self):
        if not (len(self.modality_a) == len(self.modality_b) == len(self.labels)):
            raise DataError("modalities and labels must have equal sample counts")
        if len(self.labels) and int(self.labels.max()) >= self.n_classes:
            raise DataError(
                f"label {int(self.labels.max())} out of range for {self.n_classes} classes"
            )

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> PairedSample:
        return PairedSample(self.modality_a[i], self.modality_b[i], int(self.labels[i]))

    def subset(self, indices) -> "PairedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return PairedDataset(
            self.modality_a[idx].copy(),
            self.modality_b[idx].copy(),
            self.labels[idx].copy(),
            self.n_classes,
        )


def _class_counts(n: int, positive_fraction: float, n_classes: int) -> list[int]:
    if n_classes == 2:
        n_pos = int(round(n * positive_fraction))
        return [n - n_pos, n_pos]
    # Multi-class keeps near-equal sizes; the fraction only has a binary meaning.
    base = n // n_classes
    counts = [base] * n_classes
    for i in range(n - base * n_classes):
        counts[i] += 1
    return counts


def generate(spec: SynthSpec) -> PairedDataset:
    """Deterministically draw a paired dataset from the spec and its seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    direction_a = rng.standard_normal(spec.shape_a)
    direction_a /= np.linalg.norm(direction_a)
    direction_b = rng.standard_normal(spec.shape_b)
    direction_b /= np.linalg.norm(direction_b)

    counts = _class_counts(spec.n_samples, spec.positive_fraction, spec.n_classes)
    labels = np.repeat(np.arange(spec.n_classes, dtype=np.int64), counts)
    labels = labels[rng.permutation(spec.n_samples)]

    # Class c sits at offset (c/(M-1) - 1/2) * sep along the modality direction,
    # so for two classes the means are exactly sep apart.
    span = np.linspace(-0.5, 0.5, spec.n_classes)
    mod_a = spec.sep_a * span[labels, None, None, None] * direction_a[None] \
        + spec.noise_a * rng.standard_normal((spec.n_samples,) + spec.shape_a)
    mod_b = spec.sep_b * span[labels, None, None] * direction_b[None] \
        + spec.noise_b * rng.standard_normal((spec.n_samples,) + spec.shape_b)
    mod_a = mod_a.astype(np.float32).astype(np.float64)
    mod_b = mod_b.astype(np.float32).astype(np.float64)
    return PairedDataset(mod_a, mod_b, labels, spec.n_classes)


def add_noise(x: np.ndarray, kind: str, level: float, seed: int) -> np.ndarray:
    """Noise-augment one tensor; deterministic in the seed.

    gaussian adds N(0, level^2) everywhere. salt_pepper overwrites exactly
    floor(level*n) positions, half with the tensor max and half with the
    tensor min.
    """
    x = np.asarray(x, dtype=np.float64)
    if level < 0:
        raise ParameterError(f"noise level must be >= 0, got {level}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        if level == 0:
            return x.copy()
        return x + level * rng.standard_normal(x.shape)
    if kind == "salt_pepper":
        if level > 1:
            raise ParameterError(f"salt_pepper level must be <= 1, got {level}")
        out = x.copy()
        n_hit = int(np.floor(level * x.size))
        if n_hit == 0:
            return out
        positions = rng.choice(x.size, size=n_hit, replace=False)
        flat = out.reshape(-1)
        n_salt = n_hit // 2
        flat[positions[:n_salt]] = x.max()
        flat[positions[n_salt:]] = x.min()
        return out
    raise ParameterError(f"unknown noise kind '{kind}' (use gaussian or salt_pepper)")


def apply_validation_noise(ds: PairedDataset, level: float, seed: int) -> PairedDataset:
    """Corrupt the image modality of a validation set in deterministic thirds.

    The first n//3 samples of a seeded permutation get gaussian noise, the
    next n//3 salt-and-pepper, the remainder stays clean.
    """
    rng = np.random.default_rng(seed)
    n = len(ds)
    perm = rng.permutation(n)
    third = n // 3
    sample_seeds = rng.integers(0, 2**31 - 1, size=n)
    mod_a = ds.modality_a.copy()
    for i in perm[:third]:
        mod_a[i] = add_noise(ds.modality_a[i], "gaussian", level, int(sample_seeds[i]))
    for i in perm[third : 2 * third]:
        mod_a[i] = add_noise(ds.modality_a[i], "salt_pepper", level, int(sample_seeds[i]))
    return PairedDataset(mod_a, ds.modality_b.copy(), ds.labels.copy(), ds.n_classes)


def split(ds: PairedDataset, train_fraction: float, seed: int) -> tuple[PairedDataset, PairedDataset]:
    """Label-stratified disjoint/exhaustive split, deterministic in seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        members = members[rng.permutation(len(members))]
        n_train = int(round(train_fraction * len(members)))
        train_idx.append(members[:n_train])
        val_idx.append(members[n_train:])
    train = np.sort(np.concatenate(train_idx))
    val = np.sort(np.concatenate(val_idx))
    return ds.subset(train), ds.subset(val)


# -- file format ------------------------------------------------------------

def _shape_header(shape: tuple[int, ...]) -> bytes:
    return struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)


def save(ds: PairedDataset, path) -> None:
    """Write the dataset in the little-endian PMD1 layout (float32 payload)."""
    shape_a = ds.modality_a.shape[1:]
    shape_b = ds.modality_b.shape[1:]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(ds)))
        fh.write(_shape_header(shape_a))
        fh.write(_shape_header(shape_b))
        fh.write(struct.pack("<I", ds.n_classes))
        for i in range(len(ds)):
            fh.write(ds.modality_a[i].astype("<f4").tobytes())
            fh.write(ds.modality_b[i].astype("<f4").tobytes())
            fh.write(struct.pack("<B", int(ds.labels[i])))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(
                f"truncated dataset file: needed {n} bytes for {what} "
                f"at byte offset {self.offset}, file has {len(self.blob)}"
            )
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return struct.unpack("<B", self.take(1, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load(path) -> PairedDataset:
    """Read a PMD1 file; rejects malformed input without partial results."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte offset 4")
    n = r.u32("sample count")

    def read_shape(what: str) -> tuple[int, ...]:
        rank = r.u8(f"{what} rank")
        return tuple(r.u32(f"{what} dim {i}") for i in range(rank))

    shape_a = read_shape("modality A")
    shape_b = read_shape("modality B")
    n_classes = r.u32("class count")
    size_a = int(np.prod(shape_a)) if shape_a else 1
    size_b = int(np.prod(shape_b)) if shape_b else 1
    mod_a = np.empty((n,) + shape_a, dtype=np.float64)
    mod_b = np.empty((n,) + shape_b, dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        a = np.frombuffer(r.take(4 * size_a, f"sample {i} modality A"), dtype="<f4")
        b = np.frombuffer(r.take(4 * size_b, f"sample {i} modality B"), dtype="<f4")
        mod_a[i] = a.reshape(shape_a).astype(np.float64)
        mod_b[i] = b.reshape(shape_b).astype(np.float64)
        labels[i] = r.u8(f"sample {i} label")
    if r.offset != len(blob):
        raise FormatError(
            f"trailing garbage: {len(blob) - r.offset} unexpected bytes at byte offset {r.offset}"
        )
    if n and labels.max() >= n_classes:
        raise DataError(
            f"label {int(labels.max())} out of range for {n_classes} classes"
        )
    return PairedDataset(mod_a, mod_b, labels, n_classes)


def default_spec(**overrides) -> SynthSpec:
    return replace(SynthSpec(), **overrides)
