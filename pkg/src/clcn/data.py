"""Domain datasets: IDX digit files, synthetic shift generators, batch sampling."""

from __future__ import annotations

import contextlib
import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ContractError, FormatError, LengthError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
DIGIT_SIDE = 28


@dataclass(frozen=True, eq=False)
class DomainDataset:
    samples: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    domain: str = "source"

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ContractError(f"samples must be 2-D, got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        if self.domain not in ("source", "target"):
            raise ContractError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(samples),):
                raise ContractError(f"{labels.shape[0]} labels for {len(samples)} samples")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ContractError(f"labels must lie in [0, {self.num_classes})")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> DomainDataset:
        labels = None if self.labels is None else self.labels[idx]
        return DomainDataset(self.samples[idx], labels, self.num_classes, self.domain)


class LabelAudit:
    """Wraps a dataset and counts every read of ``labels``.

    Reads made inside ``evaluation()`` are not counted; training code has no
    business touching target labels, so any counted read is a leak.
    """

    def __init__(self, dataset: DomainDataset):
        self._dataset = dataset
        self.label_reads = 0
        self._evaluating = 0

    def __getattr__(self, name):
        return getattr(self._dataset, name)

    def __len__(self) -> int:
        return len(self._dataset)

    @property
    def labels(self):
        if not self._evaluating:
            self.label_reads += 1
        return self._dataset.labels

    @contextlib.contextmanager
    def evaluation(self) -> Iterator[None]:
        self._evaluating += 1
        try:
            yield
        finally:
            self._evaluating -= 1


@contextlib.contextmanager
def evaluation_access(ds) -> Iterator[None]:
    """Mark label reads inside the block as evaluation reads."""
    if isinstance(ds, LabelAudit):
        with ds.evaluation():
            yield
    else:
        yield


# -- IDX files --------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{path}: file shorter than its {header}-byte header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: magic {found}, expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < n:
        raise LengthError(f"{path}: payload has {len(payload)} bytes, header promises {n}")
    return dims, np.frombuffer(payload, dtype=np.uint8, count=n)


def resize_nearest(images: np.ndarray, side: int) -> np.ndarray:
    """Nearest-neighbour resample of [N, rows, cols] images to [N, side, side]."""
    _, rows, cols = images.shape
    r = np.minimum((np.arange(side) * rows) // side, rows - 1)
    c = np.minimum((np.arange(side) * cols) // side, cols - 1)
    return images[:, r][:, :, c]


def load_idx_images(path, side: int | None = None) -> np.ndarray:
    """Read an IDX image file into [N, rows*cols] floats in [0, 1].

    With ``side`` set, images are nearest-neighbour resampled to side x side
    first (USPS 16x16 -> 28x28).
    """
    (n, rows, cols), payload = _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, 3, path)
    images = payload.reshape(n, rows, cols)
    if side is not None and (rows, cols) != (side, side):
        images = resize_nearest(images, side)
    return images.reshape(n, -1).astype(np.float32) / np.float32(255)


def load_idx_labels(path) -> np.ndarray:
    (n,), payload = _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, 1, path)
    return payload.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ContractError("expected uint8 images of shape [N, rows, cols]")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ContractError("labels must be a 1-D array of bytes")
    header = struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
    Path(path).write_bytes(header + labels.astype(np.uint8).tobytes())


def load_idx_dataset(
    images_path,
    labels_path,
    num_classes: int = 10,
    domain: str = "source",
    side: int | None = DIGIT_SIDE,
    limit: int | None = None,
) -> DomainDataset:
    images = load_idx_images(images_path, side)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ContractError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return DomainDataset(images, labels, num_classes, domain)


# -- synthetic domain pairs ---------------------------------------------------


def _rotate(points: np.ndarray, angle: float, center=(0.0, 0.0)) -> np.ndarray:
    out = points.copy()
    c, s = np.cos(angle), np.sin(angle)
    xy = points[:, :2] - np.asarray(center)
    out[:, 0] = c * xy[:, 0] - s * xy[:, 1] + center[0]
    out[:, 1] = s * xy[:, 0] + c * xy[:, 1] + center[1]
    return out


def shifted_gaussian_means(num_classes: int, dim: int) -> np.ndarray:
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0], means[:, 1] = np.cos(angles), np.sin(angles)
    return means


def _shift_vector(shift, dim: int) -> np.ndarray:
    shift = np.atleast_1d(np.asarray(shift, dtype=np.float64))
    if shift.size == 1:
        # a scalar is a displacement of that length along the first axis
        vec = np.zeros(dim)
        vec[0] = shift[0]
        return vec
    if shift.shape != (dim,):
        raise ContractError(f"shift must be a scalar or have length {dim}")
    return shift


def gen_shifted_gaussians(
    num_classes: int = 4,
    per_class: int = 200,
    dim: int = 2,
    shift=2.0,
    rotation: float = 0.0,
    noise: float = 0.25,
    seed: int = 0,
) -> tuple[DomainDataset, DomainDataset]:
    """Isotropic Gaussian classes on the unit circle; the target domain is the
    same distribution rotated by ``rotation`` radians about the origin (first
    two coordinates) and then translated by ``shift``."""
    if num_classes < 2 or dim < 2:
        raise ContractError("need num_classes >= 2 and dim >= 2")
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    means = shifted_gaussian_means(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)

    def draw(rng):
        return means[labels] + noise * rng.standard_normal((len(labels), dim))

    xs = draw(src_rng)
    xt = _rotate(draw(tgt_rng), rotation) + _shift_vector(shift, dim)
    return (
        DomainDataset(xs, labels, num_classes, "source"),
        DomainDataset(xt, labels.copy(), num_classes, "target"),
    )


MOONS_CENTER = (0.5, 0.25)


def _moons(n: int, noise: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0, np.pi, n0)
    t1 = rng.uniform(0, np.pi, n1)
    # class 0 is the lower arc, class 1 the upper one
    lower = np.stack([1 - np.cos(t0), 0.5 - np.sin(t0)], axis=1)
    upper = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    x = np.concatenate([lower, upper])
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return x, y


def gen_two_moons_pair(
    n: int = 400, noise: float = 0.1, angle: float = 0.0, seed: int = 0
) -> tuple[DomainDataset, DomainDataset]:
    """Two interleaved half circles; the target is rotated by ``angle`` about
    the centre of the construction."""
    if n < 2:
        raise ContractError("need n >= 2")
    src_rng, tgt_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    xs, ys = _moons(n, noise, src_rng)
    xt, yt = _moons(n, noise, tgt_rng)
    xt = _rotate(xt, angle, MOONS_CENTER)
    return DomainDataset(xs, ys, 2, "source"), DomainDataset(xt, yt, 2, "target")


def export_csv(path, *datasets: DomainDataset) -> None:
    """Write ``x0..x{d-1},label,domain`` rows; missing labels are left blank."""
    dim = datasets[0].dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(dim)] + ["label", "domain"])
        for ds in datasets:
            labels = ds.labels
            for i, row in enumerate(ds.samples):
                label = "" if labels is None else int(labels[i])
                writer.writerow([repr(float(v)) for v in row] + [label, ds.domain])


def load_csv(path, num_classes: int | None = None) -> dict[str, DomainDataset]:
    rows: dict[str, list] = {"source": [], "target": []}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "domain"]:
            raise FormatError(f"{path}: header must end with label,domain")
        for rec in reader:
            rows.setdefault(rec[-1], []).append(rec)
    labelled = [int(r[-2]) for group in rows.values() for r in group if r[-2] != ""]
    k = num_classes if num_classes is not None else max(labelled, default=1) + 1
    out = {}
    for domain, group in rows.items():
        if not group:
            continue
        x = np.array([[float(v) for v in r[:-2]] for r in group])
        has_labels = all(r[-2] != "" for r in group)
        y = np.array([int(r[-2]) for r in group]) if has_labels else None
        out[domain] = DomainDataset(x, y, k, domain)
    return out


# -- batch sampling -----------------------------------------------------------


class BatchSampler:
    """Uniform-with-replacement index stream, optionally class-balanced."""

    def __init__(self, batch_size: int, seed: int, balanced: bool = False):
        if batch_size < 1:
            raise ContractError("batch_size must be positive")
        self.batch_size = batch_size
        self.balanced = balanced
        self.rng = np.random.default_rng(seed)

    def indices(self, n: int) -> np.ndarray:
        if n < 1:
            raise ContractError("cannot sample from an empty dataset")
        return self.rng.integers(0, n, size=self.batch_size)

    def balanced_indices(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        """Round-robin over classes, uniform with replacement within a class."""
        per_class = [np.flatnonzero(labels == k) for k in range(num_classes)]
        present = [idx for idx in per_class if idx.size]
        if not present:
            raise ContractError("cannot sample from an empty dataset")
        picks = []
        for i in range(self.batch_size):
            pool = present[i % len(present)]
            picks.append(pool[self.rng.integers(0, pool.size)])
        return np.asarray(picks, dtype=np.int64)


def sample_batch(ds, sampler: BatchSampler) -> tuple[np.ndarray, np.ndarray | None]:
    """Draw one batch. Labels come back for source datasets only; target labels
    are never touched here."""
    if ds.domain == "source":
        labels = ds.labels
        if labels is None:
            raise ContractError("source dataset needs labels")
        if sampler.balanced:
            idx = sampler.balanced_indices(labels, ds.num_classes)
        else:
            idx = sampler.indices(len(ds))
        return ds.samples[idx], labels[idx]
    return ds.samples[sampler.indices(len(ds))], None
