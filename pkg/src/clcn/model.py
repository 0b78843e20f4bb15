"""Dense feature extractor ``f`` with norm-rescaled output and linear softmax head ``g``."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Callable

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, FormatError, LengthError

MAGIC = b"CLCN"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    embed_dim: int = 16
    num_classes: int = 2
    scale: float = 5.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ContractError("layer widths must be positive")
        if self.embed_dim < 2:
            raise ContractError("embed_dim must be >= 2")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if not self.scale > 0:
            raise ContractError("scale must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.embed_dim]
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class ModelParams:
    """Weights of ``f`` (one (W, b) pair per layer) and of the head ``g``.

    Entries are float32 arrays, or tensors while a loss is being recorded.
    """

    arch: Architecture
    weights: list
    biases: list
    head_w: object
    head_b: object
    seed: int = 0
    extra_heads: dict = field(default_factory=dict)

    def tensors(self) -> list:
        """All parameters in declaration order: f layers, head, then extra heads."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out += [self.head_w, self.head_b]
        for name in sorted(self.extra_heads):
            out += list(self.extra_heads[name])
        return out

    def with_tensors(self, tensors: list) -> ModelParams:
        tensors = list(tensors)
        if len(tensors) != len(self.tensors()):
            raise DimensionError(f"expected {len(self.tensors())} tensors, got {len(tensors)}")
        n = len(self.weights)
        extras = {}
        pos = 2 * n + 2
        for name in sorted(self.extra_heads):
            extras[name] = (tensors[pos], tensors[pos + 1])
            pos += 2
        return ModelParams(
            arch=self.arch,
            weights=tensors[0 : 2 * n : 2],
            biases=tensors[1 : 2 * n : 2],
            head_w=tensors[2 * n],
            head_b=tensors[2 * n + 1],
            seed=self.seed,
            extra_heads=extras,
        )

    def map(self, fn: Callable) -> ModelParams:
        return self.with_tensors([fn(t) for t in self.tensors()])

    def numpy(self) -> ModelParams:
        return self.map(lambda t: np.array(t.data if isinstance(t, ad.Tensor) else t, dtype=np.float32))


def _he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)).astype(np.float32)


def init_params(arch: Architecture, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims:
        weights.append(_he_normal(rng, fan_in, fan_out))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    head_w = _he_normal(rng, arch.embed_dim, arch.num_classes)
    head_b = np.zeros(arch.num_classes, dtype=np.float32)
    return ModelParams(arch, weights, biases, head_w, head_b, seed=seed)


def add_head(params: ModelParams, name: str, seed: int) -> ModelParams:
    """Attach an auxiliary linear head over the embedding (used by ablations)."""
    rng = np.random.default_rng(seed)
    arch = params.arch
    heads = dict(params.extra_heads)
    heads[name] = (
        _he_normal(rng, arch.embed_dim, arch.num_classes),
        np.zeros(arch.num_classes, dtype=np.float32),
    )
    return ModelParams(arch, params.weights, params.biases, params.head_w, params.head_b, params.seed, heads)


def embed(params: ModelParams, batch) -> ad.Tensor:
    width = np.shape(batch.data if isinstance(batch, ad.Tensor) else batch)
    if len(width) != 2 or width[1] != params.arch.input_dim:
        raise DimensionError(f"batch shape {width} does not match input_dim {params.arch.input_dim}")
    h = batch
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.affine(h, w, b)
        if i < last:
            h = ad.relu(h)
    return ad.l2norm_rescale(h, params.arch.scale)


def logits(params: ModelParams, features, head: str | None = None) -> ad.Tensor:
    w, b = (params.head_w, params.head_b) if head is None else params.extra_heads[head]
    return ad.affine(features, w, b)


def classify(params: ModelParams, features, head: str | None = None) -> ad.Tensor:
    """Class probabilities ``softmax(g(features))``, one row per sample."""
    return ad.softmax(logits(params, features, head))


def predict(params: ModelParams, samples: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = []
    for start in range(0, len(samples), chunk):
        z = logits(params, embed(params, samples[start : start + chunk]))
        out.append(np.argmax(z.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -- checkpoint format ------------------------------------------------------
#
# magic "CLCN" | u32 version | u32 flags | u32 input_dim | u32 n_hidden
# | u32 hidden[n_hidden] | u32 embed_dim | u32 num_classes | f32 scale
# | u64 seed | u32 n_extra_heads | (u16 len, utf-8 name) per extra head
# then raw little-endian f32 tensors in ModelParams.tensors() order.
# Bits in ``flags`` announce trailing sections appended by the trainer.


def write_header(fh: BinaryIO, params: ModelParams, flags: int = 0) -> None:
    arch = params.arch
    fh.write(MAGIC)
    fh.write(struct.pack("<III", FORMAT_VERSION, flags, arch.input_dim))
    fh.write(struct.pack("<I", len(arch.hidden_dims)))
    fh.write(struct.pack(f"<{len(arch.hidden_dims)}I", *arch.hidden_dims))
    fh.write(struct.pack("<IIfQ", arch.embed_dim, arch.num_classes, arch.scale, params.seed))
    names = sorted(params.extra_heads)
    fh.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)) + raw)


def write_f32(fh: BinaryIO, arrays) -> None:
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise LengthError(f"checkpoint truncated: wanted {n} bytes, got {len(raw)}")
    return raw


def read_bytes(fh: BinaryIO, n: int) -> np.ndarray:
    return np.frombuffer(_read_exact(fh, n), dtype=np.uint8)


def read_f32(fh: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    return np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").astype(np.float32).reshape(shape)


def read_header(fh: BinaryIO) -> tuple[ModelParams, int]:
    """Parse the header and parameter tensors; returns (params, flags)."""
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("not a CLCN checkpoint (bad magic)")
    version, flags, input_dim = struct.unpack("<III", _read_exact(fh, 12))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_hidden,) = struct.unpack("<I", _read_exact(fh, 4))
    hidden = struct.unpack(f"<{n_hidden}I", _read_exact(fh, 4 * n_hidden))
    embed_dim, k, s, seed = struct.unpack("<IIfQ", _read_exact(fh, 20))
    (n_extra,) = struct.unpack("<I", _read_exact(fh, 4))
    names = []
    for _ in range(n_extra):
        (length,) = struct.unpack("<H", _read_exact(fh, 2))
        names.append(_read_exact(fh, length).decode())
    arch = Architecture(input_dim, hidden, embed_dim, k, float(s))
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_dims:
        weights.append(read_f32(fh, (fan_in, fan_out)))
        biases.append(read_f32(fh, (fan_out,)))
    head_w, head_b = read_f32(fh, (embed_dim, k)), read_f32(fh, (k,))
    extras = {name: (read_f32(fh, (embed_dim, k)), read_f32(fh, (k,))) for name in names}
    return ModelParams(arch, weights, biases, head_w, head_b, seed, extras), flags


def save_params(path, params: ModelParams) -> None:
    params = params.numpy()
    with open(path, "wb") as fh:
        write_header(fh, params)
        write_f32(fh, params.tensors())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        params, _ = read_header(fh)
    return params
