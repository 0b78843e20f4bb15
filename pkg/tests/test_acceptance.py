"""Acceptance gate: one test per criterion, each logging a PASS/FAIL line.

Lines are echoed immediately and repeated in the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from clcn.cli import main as cli_main
from clcn.core import Banks, CentroidBank, alpha_schedule, ema_update, episode_loss, ncc_assign, soft_scores
from clcn.data import LabelAudit
from clcn.experiments import (
    DataUnavailable,
    digits_sweep,
    median_final,
    synthetic_config,
    synthetic_pair,
    synthetic_sweep,
)
from clcn.model import Architecture, init_params
from clcn.oracles import TOLERANCE, run_suite
from clcn.trainer import VARIANTS, train

SEEDS = [0, 1, 2, 3, 4]
DIGIT_SEEDS = [0, 1, 2]
DIGIT_EPISODES = 3000


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


_SWEEPS: dict = {}


def synthetic_runs(variants):
    missing = [v for v in variants if v not in _SWEEPS]
    if missing:
        started = time.perf_counter()
        runs = synthetic_sweep(missing, SEEDS)
        per_variant = (time.perf_counter() - started) / len(missing)
        for v in missing:
            _SWEEPS[v] = ([r for r in runs if r.variant == v], per_variant)
    return {v: _SWEEPS[v] for v in variants}


def test_criterion_1_gradient_oracles():
    started = time.perf_counter()
    results = run_suite(points=10, seed=0)
    elapsed = time.perf_counter() - started
    worst = max(results, key=lambda r: r.error)
    names = {r.name for r in results}
    ok = all(r.passed for r in results) and elapsed < 30 and "episode_loss" in names
    record(1, "gradient oracle suite", ok,
           f"{len(results)} checks, worst {worst.name} {worst.error:.2e} (< {TOLERANCE:g}), {elapsed:.1f}s (< 30s)")


def _loop_assign(f, c):
    labels = []
    for row in f:
        best, best_k = -math.inf, 0
        for k in range(len(c)):
            cos = float(row @ c[k]) / (math.sqrt(float(row @ row)) * math.sqrt(float(c[k] @ c[k])))
            if cos > best:  # strict: the first maximum wins
                best, best_k = cos, k
        labels.append(best_k)
    return np.array(labels)


def _loop_scores(f, c):
    out = np.empty((len(f), len(c)))
    for i, row in enumerate(f):
        cos = [float(row @ ck) / (math.sqrt(float(row @ row)) * math.sqrt(float(ck @ ck))) for ck in c]
        e = [math.exp(v) for v in cos]
        out[i] = [v / sum(e) for v in e]
    return out


def test_criterion_2_brute_force_equivalence():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    mismatched, worst = 0, 0.0
    for _ in range(100):
        n, k, m = rng.integers(1, 129), rng.integers(2, 11), rng.integers(2, 65)
        f = rng.standard_normal((n, m)).astype(np.float32).astype(np.float64)
        c = rng.standard_normal((k, m)).astype(np.float32).astype(np.float64)
        if rng.random() < 0.2:
            c[1] = c[0] * 2.0  # duplicate direction: exercises the tie rule
        bank = CentroidBank(c, np.ones(k, bool))
        mismatched += int((ncc_assign(f, bank) != _loop_assign(f, c)).sum())
        worst = max(worst, float(np.abs(soft_scores(f, bank).data - _loop_scores(f, c)).max()))
    elapsed = time.perf_counter() - started
    ok = mismatched == 0 and worst < 1e-5 and elapsed < 10
    record(2, "batched NCC and soft scores vs loops", ok,
           f"100 instances, {mismatched} label mismatches, max prob diff {worst:.1e} (< 1e-5), {elapsed:.1f}s (< 10s)")


def test_criterion_3_normalization_and_convexity():
    rng = np.random.default_rng(3)
    row_err = 0.0
    convex = True
    for _ in range(200):
        k, m = rng.integers(2, 11), rng.integers(2, 33)
        f = rng.standard_normal((16, m)) * rng.uniform(0.01, 100)
        bank = CentroidBank(rng.standard_normal((k, m)), np.ones(k, bool))
        row_err = max(row_err, float(np.abs(soft_scores(f, bank).data.sum(axis=1) - 1).max()))
        prev = CentroidBank(rng.standard_normal((k, m)) * 10, np.ones(k, bool), rng.uniform())
        local = (rng.standard_normal((k, m)) * 10).astype(np.float32)
        new = ema_update(prev, local, np.ones(k, bool)).centroids
        lo, hi = np.minimum(prev.centroids, local), np.maximum(prev.centroids, local)
        slack = 1e-6 * (1 + np.abs(lo) + np.abs(hi))
        convex &= bool(((new >= lo - slack) & (new <= hi + slack)).all())
    grid = np.array([alpha_schedule(p) for p in np.linspace(0, 1, 1000)])
    alpha_ok = grid[0] == 0.0 and bool((np.diff(grid) >= 0).all())
    arch = Architecture(6, (12,), 4, 3)
    total_err = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        params = init_params(arch, seed)
        banks = Banks.empty(3, 4)
        alpha = float(r.uniform(0, 2.5))
        for _ in range(3):
            xs, xt = r.standard_normal((8, 6)), r.standard_normal((8, 6)) + 1
            ys = r.permutation(np.arange(8) % 3)
            loss, banks = episode_loss(xs, ys, xt, params, banks, alpha)
            total_err = max(total_err, abs(loss.total.item() - (loss.loss_c.item() + alpha * loss.loss_cyc.item())))
    ok = row_err <= 1e-6 and convex and alpha_ok and total_err <= 1e-6
    record(3, "normalization, convexity, schedule, loss identity", ok,
           f"row-sum err {row_err:.1e}, EMA convex {convex}, alpha(0)=0 and monotone {alpha_ok}, "
           f"|L_total - (L_C + a*L_cyc)| {total_err:.1e}")


def test_criterion_4_synthetic_adaptation_gain():
    started = time.perf_counter()
    sweeps = synthetic_runs(["clcn", "source-only"])
    elapsed = time.perf_counter() - started
    clcn, base = sweeps["clcn"][0], sweeps["source-only"][0]
    gain = median_final(clcn, "clcn") - median_final(base, "source-only")
    ratios = [r.final.centroid_dist / r.at_fraction(0.1).centroid_dist for r in clcn]
    ratio = float(np.median(ratios))
    ok = gain >= 0.15 and ratio <= 0.5 and elapsed < 300
    record(4, "synthetic adaptation gain", ok,
           f"median target acc CLCN {median_final(clcn, 'clcn'):.4f} vs source-only "
           f"{median_final(base, 'source-only'):.4f}, gain {100 * gain:.1f} pts (>= 15); "
           f"median final/10% centroid distance {ratio:.3f} (<= 0.5) per seed "
           f"{[round(x, 3) for x in ratios]}; {elapsed:.0f}s (< 300s)")


def test_criterion_5_ablation_direction():
    started = time.perf_counter()
    sweeps = synthetic_runs(["clcn", "ncc-finetune", "source-only"])
    elapsed = time.perf_counter() - started + sum(t for _, t in sweeps.values())
    med = {v: median_final(runs, v) for v, (runs, _) in sweeps.items()}
    ok = med["clcn"] >= med["ncc-finetune"] >= med["source-only"] and elapsed < 900
    record(5, "ablation ordering", ok,
           f"median target acc CLCN {med['clcn']:.4f} >= ncc-finetune {med['ncc-finetune']:.4f} "
           f">= source-only {med['source-only']:.4f}; ~{elapsed:.0f}s of training (< 900s)")


def test_criterion_6_digits_desk_scale():
    started = time.perf_counter()
    try:
        runs = digits_sweep(["clcn", "source-only"], DIGIT_SEEDS, episodes=DIGIT_EPISODES)
    except DataUnavailable as exc:
        record(6, "MNIST->USPS desk scale", False, f"not run: {exc}")
        return
    elapsed = time.perf_counter() - started
    gain = median_final(runs, "clcn") - median_final(runs, "source-only")
    ok = gain >= 0.05 and elapsed < 1200
    record(6, "MNIST->USPS desk scale", ok,
           f"median target acc CLCN {median_final(runs, 'clcn'):.4f} vs source-only "
           f"{median_final(runs, 'source-only'):.4f}, gain {100 * gain:.1f} pts (>= 5); {elapsed:.0f}s (< 1200s)")


def test_criterion_7_cli_determinism(tmp_path):
    config = tmp_path / "synthetic.json"
    config.write_text(json.dumps({"train": {"episodes": 1000, "eval_every": 100}}))
    codes = [cli_main(["train", "--config", str(config), "--out", str(tmp_path / n), "--seed", "7"]) for n in "ab"]
    a, b = ((tmp_path / n / "trace.csv").read_bytes() for n in "ab")
    ok = codes == [0, 0] and a == b and a.count(b"\n") == 11
    record(7, "byte-identical traces from repeated train", ok,
           f"exit codes {codes}, trace.csv identical: {a == b} ({len(a)} bytes)")


def test_criterion_8_label_hygiene():
    source, target = synthetic_pair(0)
    reads = {}
    for variant in VARIANTS:
        audited = LabelAudit(target)
        run = train(source, audited, synthetic_config(variant, 0, episodes=200))
        reads[variant] = (audited.label_reads, not math.isnan(run.final.tgt_acc))
    ok = all(n == 0 and evaluated for n, evaluated in reads.values())
    record(8, "no target label reads during training", ok,
           ", ".join(f"{v}: {n} reads" for v, (n, _) in reads.items()) + " (evaluation reads excluded)")
