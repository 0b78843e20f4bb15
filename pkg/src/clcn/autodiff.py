"""Tape-based reverse-mode differentiation over dense numpy arrays.

Only the primitives the training losses need are provided. Every op takes
``Tensor`` or array-like operands; operands without a tape are constants.
Forward arithmetic runs in float32 unless the ``float64()`` context is
active, which is how the finite-difference oracle evaluates its probes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DegenerateError, DimensionError, OracleError

_DTYPE: type = np.float32

DEGENERATE_NORM = 1e-12
LOG_CLAMP = 1e-12


def active_dtype() -> type:
    return _DTYPE


@contextlib.contextmanager
def float64() -> Iterator[None]:
    """Evaluate every op inside the block in 64-bit arithmetic."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.float64
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs: tuple, vjp: Callable | None):
        self.inputs = inputs
        self.vjp = vjp


class Gradients:
    """Per-node gradient accumulators filled by ``Tape.backward``."""

    def __init__(self, grads: list):
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.node is None or t.node >= len(self._grads):
            raise ContractError("tensor was not recorded on this tape")
        g = self._grads[t.node]
        return np.zeros_like(t.data) if g is None else g


class Tape:
    """Append-only record of primitive applications for one loss evaluation."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        self._check_open()
        data = value.data if isinstance(value, Tensor) else value
        self.nodes.append(_Node((), None))
        return Tensor(data, self, len(self.nodes) - 1)

    def _record(self, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
        self._check_open()
        ids = tuple(x.node if isinstance(x, Tensor) and x.tape is self else None for x in inputs)
        self.nodes.append(_Node(ids, vjp))
        return Tensor(out, self, len(self.nodes) - 1)

    def _check_open(self):
        if self._consumed:
            raise ContractError("tape already differentiated; record a new one")

    def backward(self, root: Tensor) -> Gradients:
        self._check_open()
        if not isinstance(root, Tensor) or root.tape is not self:
            raise ContractError("root is not recorded on this tape")
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.data)
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if src is None or gi is None:
                    continue
                grads[src] = gi if grads[src] is None else grads[src] + gi
        # saved forward values are released with the closures
        for node in self.nodes:
            node.vjp = None
        self._consumed = True
        return Gradients(grads)


def _data(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data.astype(_DTYPE, copy=False)
    return np.asarray(x, dtype=_DTYPE)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _emit(out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape._record(out, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _require_2d(name: str, a: np.ndarray):
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")


# -- primitives -------------------------------------------------------------


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for x[N,D], W[D,M], b[M]."""
    xd, Wd, bd = _data(x), _data(W), _data(b)
    _require_2d("x", xd)
    _require_2d("W", Wd)
    if xd.shape[1] != Wd.shape[0] or bd.shape != (Wd.shape[1],):
        raise DimensionError(f"affine: x{xd.shape} W{Wd.shape} b{bd.shape}")
    out = xd @ Wd + bd

    def vjp(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _emit(out, (x, W, b), vjp)


def matmul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    _require_2d("a", ad)
    _require_2d("b", bd)
    if ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: {ad.shape} @ {bd.shape}")

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), vjp)


def transpose(a) -> Tensor:
    ad = _data(a)
    _require_2d("a", ad)
    return _emit(ad.T.copy(), (a,), lambda g: (g.T,))


def relu(x) -> Tensor:
    xd = _data(x)
    mask = xd > 0  # subgradient 0 at exactly 0

    def vjp(g):
        return (g * mask,)

    return _emit(np.where(mask, xd, 0).astype(xd.dtype), (x,), vjp)


def l2norm_rescale(x, s: float) -> Tensor:
    """Scale every row of ``x`` to Euclidean norm ``s``."""
    if not s > 0:
        raise ContractError(f"rescale factor must be positive, got {s}")
    xd = _data(x)
    _require_2d("x", xd)
    norms = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    if (norms <= DEGENERATE_NORM).any():
        rows = np.flatnonzero(norms[:, 0] <= DEGENERATE_NORM).tolist()
        raise DegenerateError(f"rows {rows} have norm <= {DEGENERATE_NORM}")
    unit = xd / norms

    def vjp(g):
        return (s * (g - unit * (g * unit).sum(axis=1, keepdims=True)) / norms,)

    return _emit(s * unit, (x,), vjp)


def softmax(x) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    xd = _data(x)
    _require_2d("x", xd)
    z = np.exp(xd - xd.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit(p, (x,), vjp)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    out = np.zeros((labels.size, k), dtype=_DTYPE)
    out[np.arange(labels.size), labels] = 1
    return out


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against per-row targets.

    ``target`` is either an [N,K] array of distributions or a length-N vector
    of integer class ids.
    """
    ld = _data(logits)
    _require_2d("logits", ld)
    n, k = ld.shape
    if k < 2:
        raise ContractError("need at least two classes")
    t = np.asarray(target)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise DimensionError(f"{t.shape[0]} labels for {n} rows")
        t = one_hot(t, k)
    t = t.astype(_DTYPE)
    if t.shape != ld.shape:
        raise DimensionError(f"target {t.shape} vs logits {ld.shape}")
    if np.abs(t.astype(np.float64).sum(axis=1) - 1).max(initial=0) > 1e-6:
        raise ContractError("each target row must sum to 1")
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -(t * logp).sum() / n

    def vjp(g):
        return (g * (np.exp(logp) - t) / n, None)

    return _emit(np.asarray(loss), (logits, target), vjp)


def nll(probs, labels, eps: float = LOG_CLAMP) -> tuple[Tensor, int]:
    """``-mean(log probs[i, labels[i]])`` with entries clamped at ``eps``.

    Returns the loss and the number of clamped entries.
    """
    pd = _data(probs)
    _require_2d("probs", pd)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = pd.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    picked = pd[rows, labels]
    clamped = picked < eps
    loss = -np.log(np.maximum(picked, eps)).sum() / n

    def vjp(g):
        gp = np.zeros_like(pd)
        gp[rows, labels] = np.where(clamped, 0, -g / (n * np.maximum(picked, eps)))
        return (gp,)

    return _emit(np.asarray(loss), (probs,), vjp), int(clamped.sum())


def segment_mean(x, labels, k: int) -> tuple[Tensor, np.ndarray]:
    """Per-class mean rows of ``x``; classes absent from ``labels`` get zero rows.

    Returns the [K,M] means and the boolean present-mask.
    """
    xd = _data(x)
    _require_2d("x", xd)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (xd.shape[0],):
        raise DimensionError(f"{labels.shape} labels for {xd.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, xd.shape[1]), dtype=xd.dtype)
    np.add.at(sums, labels, xd)
    present = counts > 0
    inv = np.where(present, 1.0 / np.maximum(counts, 1), 0.0).astype(xd.dtype)
    out = sums * inv[:, None]

    def vjp(g):
        return (g[labels] * inv[labels][:, None],)

    return _emit(out, (x,), vjp), present


def row_affine(x, w, c) -> Tensor:
    """``w[:, None] * x + c`` where ``w`` and ``c`` are constants."""
    xd = _data(x)
    wd = np.asarray(w, dtype=_DTYPE)
    cd = np.asarray(c, dtype=_DTYPE)
    if wd.shape != (xd.shape[0],) or cd.shape != xd.shape:
        raise DimensionError(f"row_affine: x{xd.shape} w{wd.shape} c{cd.shape}")

    def vjp(g):
        return (g * wd[:, None],)

    return _emit(wd[:, None] * xd + cd, (x,), vjp)


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad + bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return _unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)

    return _emit(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    try:
        out = ad * bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(out, (a, b), vjp)


def scale(a, factor: float) -> Tensor:
    ad = _data(a)
    return _emit(ad * _DTYPE(factor), (a,), lambda g: (g * _DTYPE(factor),))


def total(a) -> Tensor:
    """Sum of all entries."""
    ad = _data(a)
    return _emit(np.asarray(ad.sum()), (a,), lambda g: (np.broadcast_to(g, ad.shape).copy(),))


def mean(a) -> Tensor:
    ad = _data(a)
    n = ad.size

    def vjp(g):
        return (np.broadcast_to(g / n, ad.shape).copy(),)

    return _emit(np.asarray(ad.sum() / n), (a,), vjp)


# -- oracle -----------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``point`` is an array or a sequence of arrays; ``f`` receives one tensor
    per array and must return a scalar tensor. The analytic gradient is taken
    at the active precision; the difference quotients are evaluated in
    float64. The error per coordinate is ``|a - fd| / max(1, |a|)``.
    """
    if not 1e-6 <= h <= 1e-2:
        raise ContractError(f"step h={h} outside [1e-6, 1e-2]")
    single = isinstance(point, (Tensor, np.ndarray)) or np.isscalar(point)
    parts = [point] if single else list(point)
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in parts]

    tape = Tape()
    leaves = [tape.watch(a) for a in arrays]
    out = f(*leaves)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("f must return a scalar tensor")
    if out.tape is tape:
        grads = tape.backward(out)
        analytic = [grads[leaf].astype(np.float64) for leaf in leaves]
    else:
        # f ignores its inputs entirely
        analytic = [np.zeros_like(a) for a in arrays]

    worst = 0.0
    with float64():
        for which, base in enumerate(arrays):
            flat = base.reshape(-1)
            for j in range(flat.size):
                probes = []
                for step in (h, -h):
                    moved = flat.copy()
                    moved[j] += step
                    args = [Tensor(a) for a in arrays]
                    args[which] = Tensor(moved.reshape(base.shape))
                    val = f(*args).data
                    if not np.isfinite(val).all():
                        raise OracleError(f"f is not finite at probe {which}[{j}]{step:+g}")
                    probes.append(float(val.reshape(-1)[0]))
                fd = (probes[0] - probes[1]) / (2 * h)
                a = float(analytic[which].reshape(-1)[j])
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
