"""JSON experiment configs.

A config has up to three sections, each optional::

    {
      "dataset": {"kind": "shifted_gaussians", "num_classes": 4, ...},
      "model":   {"hidden_dims": [32], "embed_dim": 16, "scale": 5.0},
      "train":   {"episodes": 5000, "lr": 0.01, "variant": "clcn", ...}
    }

Unknown keys anywhere are rejected, so a misspelt hyper-parameter cannot
silently fall back to its default. Relative data paths resolve against the
config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ScheduleConfig
from .data import DomainDataset, gen_shifted_gaussians, gen_two_moons_pair, load_csv, load_idx_dataset
from .errors import CLCNError, ContractError
from .model import Architecture
from .trainer import TrainConfig


class ConfigError(CLCNError, ValueError):
    pass


DATASET_KEYS = {
    "shifted_gaussians": {"num_classes": 4, "per_class": 200, "dim": 2, "shift": 2.0, "rotation_deg": 30.0, "noise": 0.25, "seed": 0},
    "two_moons": {"n": 400, "noise": 0.1, "angle_deg": 30.0, "seed": 0},
    "idx": {
        "source_images": None,
        "source_labels": None,
        "target_images": None,
        "target_labels": None,
        "num_classes": 10,
        "side": 28,
        "source_limit": None,
        "target_limit": None,
    },
    "csv": {"path": None, "num_classes": None},
}

MODEL_KEYS = {"hidden_dims": [32], "embed_dim": 16, "scale": 5.0}

TRAIN_KEYS = {
    "episodes": 5000,
    "batch_size": 128,
    "lr": 0.01,
    "lr_mode": "constant",
    "lr_gamma": 10.0,
    "lr_beta": 0.75,
    "alpha0": 2.5,
    "alpha_gamma": 10.0,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "theta": 0.7,
    "variant": "clcn",
    "seed": 0,
    "eval_every": 100,
    "balanced_source": False,
    "stop_gradient_banks": False,
    "fixed_alpha": None,
}


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "shifted_gaussians"})
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    base_dir: Path = field(default_factory=Path.cwd)


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


def parse_config(raw: dict, base_dir=None) -> ExperimentConfig:
    _check_keys("config", raw, ("dataset", "model", "train"))
    dataset = dict(raw.get("dataset", {"kind": "shifted_gaussians"}))
    kind = dataset.get("kind", "shifted_gaussians")
    if kind not in DATASET_KEYS:
        raise ConfigError(f"unknown dataset kind {kind!r}; choose from {', '.join(DATASET_KEYS)}")
    dataset["kind"] = kind
    _check_keys("dataset", dataset, {"kind", *DATASET_KEYS[kind]})
    model = dict(raw.get("model", {}))
    _check_keys("model", model, MODEL_KEYS)
    train = dict(raw.get("train", {}))
    _check_keys("train", train, TRAIN_KEYS)
    return ExperimentConfig(dataset, model, train, Path(base_dir) if base_dir else Path.cwd())


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return parse_config(raw, path.parent)


def _setting(section: dict, defaults: dict, key: str):
    return section.get(key, defaults[key])


def build_datasets(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    ds = cfg.dataset
    kind = ds["kind"]
    opts = {k: _setting(ds, DATASET_KEYS[kind], k) for k in DATASET_KEYS[kind]}
    if kind == "shifted_gaussians":
        return gen_shifted_gaussians(
            opts["num_classes"], opts["per_class"], opts["dim"], opts["shift"],
            np.deg2rad(opts["rotation_deg"]), opts["noise"], opts["seed"],
        )
    if kind == "two_moons":
        return gen_two_moons_pair(opts["n"], opts["noise"], np.deg2rad(opts["angle_deg"]), opts["seed"])

    def resolve(key):
        if opts[key] is None:
            raise ConfigError(f"dataset '{kind}' needs '{key}'")
        p = Path(opts[key])
        return p if p.is_absolute() else cfg.base_dir / p

    if kind == "idx":
        common = {"num_classes": opts["num_classes"], "side": opts["side"]}
        source = load_idx_dataset(resolve("source_images"), resolve("source_labels"), domain="source", limit=opts["source_limit"], **common)
        target = load_idx_dataset(resolve("target_images"), resolve("target_labels"), domain="target", limit=opts["target_limit"], **common)
        return source, target
    pair = load_csv(resolve("path"), opts["num_classes"])
    if "source" not in pair or "target" not in pair:
        raise ConfigError("CSV must hold both a source and a target domain")
    return pair["source"], pair["target"]


def build_train_config(cfg: ExperimentConfig, input_dim: int, num_classes: int) -> TrainConfig:
    m = {k: _setting(cfg.model, MODEL_KEYS, k) for k in MODEL_KEYS}
    t = {k: _setting(cfg.train, TRAIN_KEYS, k) for k in TRAIN_KEYS}
    try:
        arch = Architecture(input_dim, tuple(m["hidden_dims"]), m["embed_dim"], num_classes, float(m["scale"]))
        schedule = ScheduleConfig(t["alpha0"], t["alpha_gamma"], t["lr"], t["lr_gamma"], t["lr_beta"], t["lr_mode"])
        return TrainConfig(
            arch=arch,
            batch_size=t["batch_size"],
            episodes=t["episodes"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            schedule=schedule,
            theta=t["theta"],
            variant=t["variant"],
            seed=t["seed"],
            eval_every=t["eval_every"],
            balanced_source=t["balanced_source"],
            stop_gradient_banks=t["stop_gradient_banks"],
            fixed_alpha=t["fixed_alpha"],
        )
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def with_overrides(cfg: TrainConfig, seed: int | None = None, variant: str | None = None) -> TrainConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if variant is not None:
        changes["variant"] = variant
    try:
        return replace(cfg, **changes)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
