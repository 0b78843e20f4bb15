"""Finite-difference oracle suite: every differentiable primitive plus one
complete training-episode loss, each checked at several random points."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .core import Banks, ema_update, episode_loss
from .model import Architecture, embed, init_params

TOLERANCE = 1e-3


@dataclass(frozen=True)
class OracleResult:
    name: str
    error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _away_from_zero(rng, shape, margin=0.1):
    # keeps relu inputs off the kink
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, Callable]]:
    """name -> (point factory, f). ``f`` maps leaves to a scalar tensor."""
    labels5 = np.array([0, 2, 1, 2, 0])
    # fixed random cotangents turn vector-valued ops into scalars
    shapes = [(4, 2), (3, 2), (4, 3), (5, 3), (4, 5), (4, 6), (4, 4), (3, 4), (2, 3)]
    cot = {shape: rng.standard_normal(shape) for shape in shapes}
    c = rng.standard_normal((3, 4))

    def ce_soft():
        t = rng.random((4, 3)) + 0.1
        return t / t.sum(axis=1, keepdims=True)

    soft_target = ce_soft()
    return {
        "affine": (
            lambda: [rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)],
            lambda x, w, b: ad.total(ad.mul(ad.affine(x, w, b), cot[(4, 2)])),
        ),
        "matmul": (
            lambda: [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))],
            lambda a, b: ad.total(ad.mul(ad.matmul(a, b), cot[(3, 2)])),
        ),
        "transpose": (
            lambda: [rng.standard_normal((3, 4))],
            lambda a: ad.total(ad.mul(ad.transpose(a), cot[(4, 3)])),
        ),
        "relu": (
            lambda: [_away_from_zero(rng, (5, 3))],
            lambda x: ad.total(ad.mul(ad.relu(x), cot[(5, 3)])),
        ),
        "l2norm_rescale": (
            lambda: [rng.standard_normal((4, 5))],
            lambda x: ad.total(ad.mul(ad.l2norm_rescale(x, 5.0), cot[(4, 5)])),
        ),
        "softmax": (
            lambda: [rng.standard_normal((4, 6))],
            lambda x: ad.total(ad.mul(ad.softmax(x), cot[(4, 6)])),
        ),
        "softmax_cross_entropy": (
            lambda: [rng.standard_normal((5, 3))],
            lambda z: ad.softmax_cross_entropy(z, labels5),
        ),
        "softmax_cross_entropy_soft": (
            lambda: [rng.standard_normal((4, 3))],
            lambda z: ad.softmax_cross_entropy(z, soft_target),
        ),
        "nll": (
            lambda: [rng.random((5, 3)) + 0.2],
            lambda p: ad.nll(p, labels5)[0],
        ),
        "segment_mean": (
            lambda: [rng.standard_normal((5, 4))],
            lambda x: ad.total(ad.mul(ad.segment_mean(x, labels5, 4)[0], cot[(4, 4)])),
        ),
        "row_affine": (
            lambda: [rng.standard_normal((3, 4))],
            lambda x: ad.total(ad.mul(ad.row_affine(x, np.array([0.3, 1.0, 0.0]), c), cot[(3, 4)])),
        ),
        "add": (
            lambda: [rng.standard_normal((3, 4)), rng.standard_normal(4)],
            lambda a, b: ad.total(ad.mul(ad.add(a, b), cot[(3, 4)])),
        ),
        "mul": (
            lambda: [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))],
            lambda a, b: ad.total(ad.mul(ad.mul(a, b), cot[(3, 4)])),
        ),
        "scale": (
            lambda: [rng.standard_normal((2, 3))],
            lambda a: ad.total(ad.mul(ad.scale(a, -1.7), cot[(2, 3)])),
        ),
        "mean": (
            lambda: [rng.standard_normal((4, 3))],
            lambda a: ad.mean(ad.mul(a, a)),
        ),
    }


def episode_case(seed: int = 0, partial_target: bool = False):
    """A full episode loss with 8 samples per domain, K=3 classes and a
    4-dimensional embedding, as a function of every network parameter.

    Both banks start warm, so the EMA blend is on the gradient path. With
    ``partial_target`` the target bank has not yet seen class 2.
    """
    rng = np.random.default_rng(seed)
    arch = Architecture(input_dim=5, hidden_dims=(6,), embed_dim=4, num_classes=3, scale=5.0)
    params = init_params(arch, seed)
    # a positive hidden bias keeps every embedding row away from zero norm
    params = params.with_tensors([params.weights[0], np.full(6, 0.5, np.float32), *params.tensors()[2:]])
    xs = rng.standard_normal((8, 5))
    ys = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    xt = rng.standard_normal((8, 5)) + 0.5
    warm = Banks.empty(3, 4, theta=0.7)
    f_prev = embed(params, rng.standard_normal((9, 5))).data
    prev_labels = np.arange(9) % 3
    local, present = ad.segment_mean(f_prev, prev_labels, 3)
    local = local.data
    tgt_present = present & (np.arange(3) < 2) if partial_target else present
    banks = Banks(ema_update(warm.source, local, present), ema_update(warm.target, local[::-1], tgt_present))

    def f(*leaves):
        loss, _ = episode_loss(xs, ys, xt, params.with_tensors(leaves), banks, alpha=1.3)
        return loss.total

    return [np.asarray(t, dtype=np.float64) for t in params.tensors()], f


def run_suite(points: int = 10, seed: int = 0, progress=None) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (make_point, f) in _primitive_cases(rng).items():
        worst = max(ad.grad_check(f, make_point()) for _ in range(points))
        results.append(OracleResult(name, worst, points))
        if progress is not None:
            progress(results[-1])
    episode_points = max(1, points // 5)
    worst = 0.0
    for i in range(episode_points):
        point, f = episode_case(seed + i, partial_target=i % 2 == 1)
        worst = max(worst, ad.grad_check(f, point))
    results.append(OracleResult("episode_loss", worst, episode_points))
    if progress is not None:
        progress(results[-1])
    return results


def main_report(points: int = 10, seed: int = 0) -> bool:
    started = time.perf_counter()
    ok = True

    def show(r: OracleResult):
        nonlocal ok
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} max rel err {r.error:.2e} ({r.points} points)")

    run_suite(points, seed, show)
    print(f"oracle suite {'passed' if ok else 'FAILED'} in {time.perf_counter() - started:.1f}s")
    return ok
