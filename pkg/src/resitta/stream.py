"""Test-stream construction: datasets, synthetic corruptions and non-i.i.d. orderings."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy import ndimage

DATASET_MAGIC = b"RTDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4s6I")
CSV_PREFIX = "# resitta-dataset v1"


@dataclass
class Dataset:
    samples: np.ndarray  # N x C x H x W, float32
    labels: np.ndarray  # N, int64
    num_classes: int

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ValueError(f"samples must be N x C x H x W, got {self.samples.shape}")
        if len(self.samples) < 1 or len(self.samples) != len(self.labels):
            raise ValueError("need at least one sample and one label per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)


# -- corruptions -------------------------------------------------------------


class CorruptionKind(str, Enum):
    GAUSSIAN_NOISE = "gaussian_noise"
    SHOT_NOISE = "shot_noise_approx"
    BLUR = "blur"
    CONTRAST = "contrast"
    BRIGHTNESS = "brightness"
    PIXELATE = "pixelate_approx"


SEVERITY_TABLE = {
    CorruptionKind.GAUSSIAN_NOISE: (0.08, 0.12, 0.18, 0.26, 0.38),
    CorruptionKind.SHOT_NOISE: (60.0, 25.0, 12.0, 7.0, 4.0),
    CorruptionKind.BLUR: (0.4, 0.6, 0.8, 1.0, 1.5),
    CorruptionKind.CONTRAST: (0.75, 0.5, 0.4, 0.3, 0.15),
    CorruptionKind.BRIGHTNESS: (0.1, 0.2, 0.3, 0.4, 0.5),
    CorruptionKind.PIXELATE: (0.2, 0.4, 0.6, 0.8, 1.0),
}


@dataclass(frozen=True)
class Corruption:
    kind: CorruptionKind
    severity: int = 5

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if self.severity not in range(1, 6):
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def name(self) -> str:
        return f"{self.kind.value}-{self.severity}"

    @classmethod
    def parse(cls, name: str) -> Corruption:
        kind, _, sev = name.rpartition("-")
        return cls(CorruptionKind(kind), int(sev))


def _gaussian_blur_periodic(x: np.ndarray, sigma: float) -> np.ndarray:
    h, w = x.shape[-2:]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    transfer = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fy**2 + fx**2))
    return np.real(np.fft.ifft2(np.fft.fft2(x, axes=(-2, -1)) * transfer, axes=(-2, -1)))


def _block_mean(x: np.ndarray, block: int) -> np.ndarray:
    h, w = x.shape[-2:]
    out = np.empty_like(x)
    for i in range(0, h, block):
        for j in range(0, w, block):
            tile = x[..., i : i + block, j : j + block]
            out[..., i : i + block, j : j + block] = tile.mean(axis=(-2, -1), keepdims=True)
    return out


def corrupt(x: np.ndarray, c: Corruption, seed: int = 0) -> np.ndarray:
    """Apply a synthetic corruption to one image (C x H x W) or a batch (N x C x H x W).

    Noise kinds draw one standard-normal field per call from ``seed`` and scale
    it by the severity table, so the distortion energy grows strictly with
    severity for the same seed.
    """
    x = np.asarray(x, dtype=np.float64)
    level = SEVERITY_TABLE[c.kind][c.severity - 1]
    kind = c.kind
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        z = np.random.default_rng(seed).standard_normal(x.shape)
        out = x + level * z
    elif kind is CorruptionKind.SHOT_NOISE:
        z = np.random.default_rng(seed).standard_normal(x.shape)
        out = x + np.sqrt((np.abs(x) + 1e-3) / level) * z
    elif kind is CorruptionKind.BLUR:
        out = _gaussian_blur_periodic(x, level)
    elif kind is CorruptionKind.CONTRAST:
        axes = tuple(range(x.ndim - 3, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        out = mean + (x - mean) * level
    elif kind is CorruptionKind.BRIGHTNESS:
        out = x + level
    else:
        h, w = x.shape[-2:]
        coarse = (_block_mean(x, 2) + _block_mean(x, 4) + _block_mean(x, max(h, w))) / 3.0
        out = x + level * (coarse - x)
    return out.astype(np.float32)


def corrupt_dataset(ds: Dataset, c: Corruption, seed: int = 0) -> Dataset:
    return Dataset(corrupt(ds.samples, c, seed), ds.labels.copy(), ds.num_classes)


# -- orderings ---------------------------------------------------------------


def _proportional_counts(n: int, weights: np.ndarray) -> np.ndarray:
    """Split n items by weights using largest remainders."""
    raw = weights * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, delta: float, k: int) -> np.ndarray:
    g = rng.gamma(delta, 1.0, size=k)
    s = g.sum()
    if s <= 0 or not np.isfinite(s):
        # every draw underflowed; put all mass on one slot
        g = np.zeros(k)
        g[rng.integers(k)] = 1.0
        s = 1.0
    return g / s


def dirichlet_slots(labels, num_classes: int, delta: float, slots: int | None = None, seed: int = 0) -> list[np.ndarray]:
    """Sample indices grouped into time slots, each slot already shuffled."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    labels = np.asarray(labels)
    k = num_classes if slots is None else int(slots)
    if k < 1:
        raise ValueError("need at least one slot")
    rng = np.random.default_rng(seed)
    per_slot: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        pi = _dirichlet(rng, delta, k)
        idx = rng.permutation(idx)
        bounds = np.concatenate([[0], np.cumsum(_proportional_counts(idx.size, pi))])
        for s in range(k):
            per_slot[s].append(idx[bounds[s] : bounds[s + 1]])
    out = []
    for parts in per_slot:
        slot = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        out.append(rng.permutation(slot))
    return out


def dirichlet_order(ds: Dataset, delta: float, slots: int | None = None, seed: int = 0) -> np.ndarray:
    return np.concatenate(dirichlet_slots(ds.labels, ds.num_classes, delta, slots, seed)).astype(np.int64)


def label_sorted_order(ds: Dataset) -> np.ndarray:
    return np.argsort(ds.labels, kind="stable")


def iid_order(ds: Dataset, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).permutation(len(ds))


# -- streams -----------------------------------------------------------------


@dataclass
class StreamSpec:
    domain_sequence: list[str]
    correlation: str = "dirichlet"  # dirichlet | label_sorted | iid
    delta: float = 0.1
    slots: int | None = None
    batch_size: int = 64
    seed: int = 1

    def __post_init__(self) -> None:
        if self.correlation not in ("dirichlet", "label_sorted", "iid"):
            raise ValueError(f"unknown correlation mode {self.correlation!r}")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.slots is not None and self.slots < 1:
            raise ValueError("slots must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class Batch:
    """What the adapter sees: inputs and position only, never labels."""

    x: np.ndarray
    domain: str
    index: int


@dataclass(frozen=True)
class EvalLabels:
    labels: np.ndarray


def order_for(ds: Dataset, spec: StreamSpec, domain_index: int) -> np.ndarray:
    seed = int(np.random.SeedSequence([spec.seed, domain_index]).generate_state(1)[0])
    if spec.correlation == "dirichlet":
        return dirichlet_order(ds, spec.delta, spec.slots, seed)
    if spec.correlation == "label_sorted":
        return label_sorted_order(ds)
    return iid_order(ds, seed)


@dataclass
class Stream:
    spec: StreamSpec
    datasets: Mapping[str, Dataset]
    orders: list[np.ndarray] = field(default_factory=list)

    def __iter__(self) -> Iterator[tuple[Batch, EvalLabels]]:
        b = self.spec.batch_size
        index = 0
        for name, order in zip(self.spec.domain_sequence, self.orders):
            ds = self.datasets[name]
            # partial final batch of each domain is dropped
            for start in range(0, len(order) - b + 1, b):
                idx = order[start : start + b]
                yield Batch(ds.samples[idx], name, index), EvalLabels(ds.labels[idx].copy())
                index += 1

    def __len__(self) -> int:
        return sum(len(o) // self.spec.batch_size for o in self.orders)


def build_stream(spec: StreamSpec, datasets: Mapping[str, Dataset]) -> Stream:
    missing = [d for d in spec.domain_sequence if d not in datasets]
    if missing:
        raise KeyError(f"datasets not found: {missing}")
    orders = [order_for(datasets[name], spec, i) for i, name in enumerate(spec.domain_sequence)]
    return Stream(spec, datasets, orders)


# -- synthetic data ----------------------------------------------------------


def synthetic_images(
    n: int,
    num_classes: int = 10,
    channels: int = 3,
    size: int = 8,
    noise: float = 0.3,
    seed: int = 0,
    prototype_seed: int = 1234,
    color_spread: float = 0.3,
    max_rotation_deg: float = 15.0,
) -> Dataset:
    """Class-conditional colour patterns.

    Each class has a fixed smooth prototype (shared across calls through
    ``prototype_seed``) plus a class-specific colour offset. Samples get the
    nuisance variation natural images have and the strong augmentation assumes
    is label-preserving: gain, horizontal flip, small rotation, one-pixel
    circular shift, then pixel noise.
    """
    prng = np.random.default_rng(prototype_seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    protos = np.zeros((num_classes, channels, size, size))
    for c in range(num_classes):
        for ch in range(channels):
            acc = np.zeros((size, size))
            for _ in range(3):
                fy, fx = prng.integers(0, 3, size=2)
                phase = prng.uniform(0, 2 * np.pi)
                acc += prng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
            protos[c, ch] = acc
    protos = (protos - protos.min()) / (protos.max() - protos.min())
    protos += color_spread * prng.uniform(-1, 1, size=(num_classes, channels, 1, 1))

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
    flips = rng.random(n) < 0.5
    angles = np.deg2rad(rng.uniform(-max_rotation_deg, max_rotation_deg, size=n))
    shifts = rng.integers(-1, 2, size=(n, 2))
    x = protos[labels] * gain
    center = np.array([(size - 1) / 2, (size - 1) / 2])
    for i in range(n):
        img = x[i][:, :, ::-1] if flips[i] else x[i]
        if angles[i] != 0.0:
            cos, sin = np.cos(angles[i]), np.sin(angles[i])
            rot = np.array([[cos, -sin], [sin, cos]])
            offset = center - rot @ center
            img = np.stack([ndimage.affine_transform(ch, rot, offset=offset, order=1, mode="nearest") for ch in img])
        x[i] = np.roll(img, tuple(shifts[i]), axis=(1, 2))
    x = x + noise * rng.standard_normal(x.shape)
    return Dataset(x.astype(np.float32), labels, num_classes)


# -- file formats ------------------------------------------------------------


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.samples.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, ds.num_classes)
    return head + ds.samples.astype("<f4").tobytes() + ds.labels.astype("<i4").tobytes()


def dataset_from_bytes(blob: bytes) -> Dataset:
    if len(blob) < _HEADER.size:
        raise ValueError("truncated dataset header")
    magic, version, n, c, h, w, k = _HEADER.unpack_from(blob)
    if magic != DATASET_MAGIC:
        raise ValueError("not a resitta dataset file")
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    count = n * c * h * w
    expect = _HEADER.size + 4 * count + 4 * n
    if len(blob) != expect:
        raise ValueError(f"dataset payload is {len(blob)} bytes, expected {expect}")
    off = _HEADER.size
    samples = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=off + 4 * count)
    return Dataset(samples.astype(np.float32), labels.astype(np.int64), k)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(dataset_to_csv(ds))
    else:
        path.write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        return dataset_from_csv(path.read_text())
    return dataset_from_bytes(path.read_bytes())


def dataset_to_csv(ds: Dataset) -> str:
    _, c, h, w = ds.samples.shape
    lines = [f"{CSV_PREFIX} C={c} H={h} W={w} num_classes={ds.num_classes}"]
    flat = ds.samples.reshape(len(ds), -1)
    for y, row in zip(ds.labels, flat):
        lines.append(",".join([str(int(y))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def dataset_from_csv(text: str) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(CSV_PREFIX):
        raise ValueError("missing resitta CSV header line")
    meta = dict(tok.split("=") for tok in lines[0][len(CSV_PREFIX) :].split())
    c, h, w, k = (int(meta[key]) for key in ("C", "H", "W", "num_classes"))
    rows = [ln.split(",") for ln in lines[1:]]
    if any(len(r) != 1 + c * h * w for r in rows):
        raise ValueError("CSV row length does not match header shape")
    labels = np.array([int(r[0]) for r in rows])
    samples = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float32).reshape(-1, c, h, w)
    return Dataset(samples, labels, k)
