"""Desk-scale experiments shared by the acceptance tests and scripts/."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import ScheduleConfig
from .data import gen_shifted_gaussians, load_idx_dataset
from .errors import CLCNError
from .model import Architecture
from .trainer import TraceRow, TrainConfig, run_variant

SYNTH_EPISODES = 5000
SYNTH_ARCH = Architecture(input_dim=2, hidden_dims=(32,), embed_dim=16, num_classes=4, scale=5.0)

DIGITS_FILES = {
    "source_images": "mnist-images.idx3-ubyte",
    "source_labels": "mnist-labels.idx1-ubyte",
    "target_images": "usps-images.idx3-ubyte",
    "target_labels": "usps-labels.idx1-ubyte",
}
DIGITS_ARCH = Architecture(input_dim=784, hidden_dims=(256, 128), embed_dim=64, num_classes=10, scale=5.0)
DIGITS_SOURCE, DIGITS_TARGET = 2000, 1800


class DataUnavailable(CLCNError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class RunSummary:
    variant: str
    seed: int
    trace: tuple[TraceRow, ...]
    wall_time: float
    inactive_cycle_episodes: int

    @property
    def final(self) -> TraceRow:
        return self.trace[-1]

    def at_fraction(self, fraction: float) -> TraceRow:
        """First trace row at or past ``fraction`` of training."""
        last = self.trace[-1].episode
        return next(r for r in self.trace if r.episode >= fraction * last)


def synthetic_pair(seed: int):
    return gen_shifted_gaussians(
        num_classes=4, per_class=200, dim=2, shift=2.0, rotation=np.deg2rad(30.0), noise=0.25, seed=seed
    )


def synthetic_config(variant: str, seed: int, episodes: int = SYNTH_EPISODES) -> TrainConfig:
    return TrainConfig(SYNTH_ARCH, episodes=episodes, variant=variant, seed=seed, eval_every=max(1, episodes // 10))


def digits_dir() -> Path:
    return Path(os.environ.get("CLCN_DIGITS_DIR", Path(__file__).resolve().parents[2] / "data" / "digits"))


def digits_pair(directory=None):
    directory = Path(directory) if directory is not None else digits_dir()
    paths = {key: directory / name for key, name in DIGITS_FILES.items()}
    missing = [str(p) for p in paths.values() if not (p.exists() or p.with_name(p.name + ".gz").exists())]
    if missing:
        raise DataUnavailable(
            "MNIST/USPS IDX files not found: " + ", ".join(missing)
            + " (run scripts/prepare_digits.py or set CLCN_DIGITS_DIR)"
        )

    def pick(p: Path) -> Path:
        return p if p.exists() else p.with_name(p.name + ".gz")

    source = load_idx_dataset(pick(paths["source_images"]), pick(paths["source_labels"]), 10, "source", 28, DIGITS_SOURCE)
    target = load_idx_dataset(pick(paths["target_images"]), pick(paths["target_labels"]), 10, "target", 28, DIGITS_TARGET)
    return source, target


def digits_config(variant: str, seed: int, episodes: int = 3000, lr: float = 0.001) -> TrainConfig:
    return TrainConfig(
        DIGITS_ARCH,
        episodes=episodes,
        variant=variant,
        seed=seed,
        schedule=ScheduleConfig(lr0=lr),
        eval_every=max(1, episodes // 10),
    )


def _synthetic_job(job: tuple[str, int, int]) -> RunSummary:
    variant, seed, episodes = job
    source, target = synthetic_pair(seed)
    r = run_variant(source, target, synthetic_config(variant, seed, episodes))
    return RunSummary(variant, seed, tuple(r.trace), r.wall_time, r.inactive_cycle_episodes)


def _digits_job(job: tuple[str, int, int, str]) -> RunSummary:
    variant, seed, episodes, directory = job
    source, target = digits_pair(directory)
    r = run_variant(source, target, digits_config(variant, seed, episodes))
    return RunSummary(variant, seed, tuple(r.trace), r.wall_time, r.inactive_cycle_episodes)


def worker_count(default: int | None = None) -> int:
    cap = os.environ.get("CLCN_THREADS")
    if cap:
        return max(1, int(cap))
    return default or min(4, os.cpu_count() or 1)


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def synthetic_sweep(variants, seeds, episodes: int = SYNTH_EPISODES, workers: int = 1) -> list[RunSummary]:
    return _map(_synthetic_job, [(v, s, episodes) for v in variants for s in seeds], workers)


def digits_sweep(variants, seeds, episodes: int = 3000, workers: int = 1, directory=None) -> list[RunSummary]:
    directory = str(directory if directory is not None else digits_dir())
    digits_pair(directory)  # fail fast, before any worker starts
    return _map(_digits_job, [(v, s, episodes, directory) for v in variants for s in seeds], workers)


def median_final(runs: list[RunSummary], variant: str, field: str = "tgt_acc") -> float:
    values = [getattr(r.final, field) for r in runs if r.variant == variant]
    return float(np.median(values))


def with_episodes(cfg: TrainConfig, episodes: int) -> TrainConfig:
    return replace(cfg, episodes=episodes, eval_every=max(1, episodes // 10))
