"""SGD training driver for CLCN and its ablation variants."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .core import (
    Banks,
    CentroidBank,
    EpisodeLoss,
    ScheduleConfig,
    alpha_schedule,
    cross_domain_pass,
    cycle_loss,
    episode_loss,
    lr_schedule,
    ncc_assign,
)
from .data import BatchSampler, evaluation_access, sample_batch
from .errors import ContractError, DegenerateError, OptimizerError, TrainingError
from .metrics import accuracy, centroid_distance
from .model import (
    Architecture,
    ModelParams,
    add_head,
    embed,
    init_params,
    logits,
    predict,
    read_bytes,
    read_f32,
    read_header,
    write_f32,
    write_header,
)

VARIANTS = ("clcn", "source-only", "softmax-cycle", "ncc-finetune", "cycle-plus-finetune")

VARIANT_HELP = {
    "clcn": "source cross-entropy plus the cycle label-consistent loss",
    "source-only": "source cross-entropy only; banks are tracked for diagnostics but never enter the loss",
    "softmax-cycle": (
        "nearest-centroid steps replaced by softmax heads: the source head labels target samples, "
        "a second head is fit to those hard labels on detached target features, and the cycle "
        "loss scores source samples with that second head"
    ),
    "ncc-finetune": "target hard pseudo-labels from source centroids used directly as a target cross-entropy term",
    "cycle-plus-finetune": "cycle loss and the target pseudo-label cross-entropy together",
}

TARGET_HEAD = "target"
TRACE_FIELDS = ("episode", "loss_c", "loss_cyc", "alpha", "lr", "src_acc", "tgt_acc", "centroid_dist")

FLAG_BANKS = 1
FLAG_VELOCITY = 2


@dataclass(frozen=True)
class TrainConfig:
    arch: Architecture
    batch_size: int = 128
    episodes: int = 5000
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    theta: float = 0.7
    variant: str = "clcn"
    seed: int = 0
    eval_every: int = 100
    balanced_source: bool = False
    stop_gradient_banks: bool = False
    fixed_alpha: float | None = None  # constant adaptation weight in place of the ramp

    def __post_init__(self):
        if self.episodes < 1:
            raise ContractError("episodes must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("batch_size and eval_every must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError("theta must lie in [0, 1]")
        if self.fixed_alpha is not None and not self.fixed_alpha >= 0:
            raise ContractError("fixed_alpha must be non-negative")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class TraceRow:
    episode: int
    loss_c: float
    loss_cyc: float
    alpha: float
    lr: float
    src_acc: float
    tgt_acc: float
    centroid_dist: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, name) for name in TRACE_FIELDS)


@dataclass
class RunResult:
    trace: list[TraceRow]
    params: ModelParams
    banks: Banks
    velocity: list[np.ndarray]
    config: TrainConfig
    wall_time: float = 0.0
    clamped: int = 0
    inactive_cycle_episodes: int = 0

    @property
    def final(self) -> TraceRow:
        return self.trace[-1]


def sgd_step(params, grads, lr, momentum, weight_decay, velocity, episode=None):
    """Heavy-ball SGD with coupled weight decay.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Returns fresh (params, velocity) lists; inputs are left untouched.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ContractError("params, grads and velocity must have equal length")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        p = np.asarray(p)
        g = np.asarray(g, dtype=p.dtype)
        if p.shape != g.shape or p.shape != np.shape(v):
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {np.shape(v)}")
        if not np.isfinite(g).all():
            raise OptimizerError("non-finite gradient", episode)
        with np.errstate(over="ignore", invalid="ignore"):
            v = (momentum * np.asarray(v, dtype=p.dtype) + g + weight_decay * p).astype(p.dtype)
            stepped = (p - lr * v).astype(p.dtype)
        if not np.isfinite(stepped).all():
            raise OptimizerError("update overflowed to non-finite parameters", episode)
        new_velocity.append(v)
        new_params.append(stepped)
    return new_params, new_velocity


def _constant(t) -> ad.Tensor:
    return ad.Tensor(t.data if isinstance(t, ad.Tensor) else t)


def variant_loss(
    variant: str,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    params: ModelParams,
    banks: Banks,
    alpha: float,
    stop_gradient: bool = False,
) -> tuple[EpisodeLoss, Banks]:
    """Episode loss for any variant. ``loss_cyc`` holds the term weighted by alpha."""
    if variant == "clcn":
        return episode_loss(xs, ys, xt, params, banks, alpha, stop_gradient)

    fs = embed(params, xs)
    ft = embed(params, xt)
    l_c = ad.softmax_cross_entropy(logits(params, fs), ys)
    diag: dict = {}

    if variant == "source-only":
        _, banks, _ = cross_domain_pass(_constant(fs), ys, _constant(ft), banks)
        zero = ad.Tensor(0.0)
        return EpisodeLoss(l_c, zero, 0.0, l_c), banks

    if variant == "softmax-cycle":
        _, banks, _ = cross_domain_pass(_constant(fs), ys, _constant(ft), banks)
        target_pseudo = np.argmax(logits(params, _constant(ft)).data, axis=1)
        head_fit = ad.softmax_cross_entropy(logits(params, _constant(ft), TARGET_HEAD), target_pseudo)
        scores = ad.softmax(logits(params, fs, TARGET_HEAD))
        adapt = cycle_loss(scores, ys, diag)
        total = ad.add(ad.add(l_c, ad.scale(adapt, alpha)), head_fit)
        return EpisodeLoss(l_c, adapt, alpha, total, diag.get("clamped", 0), True, target_pseudo), banks

    if variant in ("ncc-finetune", "cycle-plus-finetune"):
        scores, banks, pseudo = cross_domain_pass(fs, ys, ft, banks, stop_gradient)
        terms = []
        if variant == "cycle-plus-finetune" and scores is not None:
            terms.append(cycle_loss(scores, ys, diag))
        if pseudo is not None:
            terms.append(ad.softmax_cross_entropy(logits(params, ft), pseudo))
        adapt = ad.Tensor(0.0)
        for term in terms:
            adapt = ad.add(adapt, term)
        total = ad.add(l_c, ad.scale(adapt, alpha))
        return EpisodeLoss(l_c, adapt, alpha, total, diag.get("clamped", 0), bool(terms), pseudo), banks

    raise ContractError(f"unknown variant {variant!r}")


def evaluate(params: ModelParams, banks: Banks, source, target) -> tuple[float, float, float]:
    """Source accuracy, target accuracy and centroid distance.

    The distance is NaN until every source class has been sampled; unseen
    target classes count as zero centroids.
    """
    params = params.numpy()
    src_acc = accuracy(predict(params, source.samples), source.labels)
    with evaluation_access(target):
        target_labels = target.labels
    tgt_acc = float("nan") if target_labels is None else accuracy(predict(params, target.samples), target_labels)
    if banks.source.ready:
        dist = centroid_distance(banks.source, banks.target, partial=True)
    else:
        dist = float("nan")
    return src_acc, tgt_acc, dist


def _forward_is_finite(params: ModelParams, *batches) -> bool:
    with np.errstate(over="ignore", invalid="ignore"):
        for x in batches:
            h = x
            for i, (w, b) in enumerate(zip(params.weights, params.biases)):
                h = h @ w + b
                h = np.maximum(h, 0) if i < len(params.weights) - 1 else h
            if not np.isfinite(h).all():
                return False
    return True


def train(source, target, cfg: TrainConfig, progress=None) -> RunResult:
    """Run ``cfg.episodes`` episodes; deterministic given ``cfg.seed``.

    Target labels, if present, are read only by ``evaluate``.
    """
    if source.labels is None:
        raise ContractError("source dataset must be labeled")
    if source.dim != cfg.arch.input_dim or target.dim != cfg.arch.input_dim:
        raise ContractError("dataset width does not match the architecture")
    if source.num_classes != cfg.arch.num_classes:
        raise ContractError("dataset class count does not match the architecture")

    started = time.perf_counter()
    init_seed, src_seed, tgt_seed, head_seed = np.random.SeedSequence(cfg.seed).generate_state(4)
    params = init_params(cfg.arch, int(init_seed))
    if cfg.variant == "softmax-cycle":
        params = add_head(params, TARGET_HEAD, int(head_seed))
    velocity = [np.zeros_like(p) for p in params.tensors()]
    banks = Banks.empty(cfg.arch.num_classes, cfg.arch.embed_dim, cfg.theta)
    src_sampler = BatchSampler(cfg.batch_size, int(src_seed), cfg.balanced_source)
    tgt_sampler = BatchSampler(cfg.batch_size, int(tgt_seed))
    sched = cfg.schedule

    trace: list[TraceRow] = []
    clamped = inactive = 0
    for t in range(1, cfg.episodes + 1):
        p = t / cfg.episodes
        if cfg.variant == "source-only":
            alpha = 0.0
        elif cfg.fixed_alpha is not None:
            alpha = float(cfg.fixed_alpha)
        else:
            alpha = alpha_schedule(p, sched.alpha0, sched.alpha_gamma)
        lr = lr_schedule(p, sched.lr0, sched.lr_gamma, sched.lr_beta, sched.lr_mode)
        xs, ys = sample_batch(source, src_sampler)
        xt, _ = sample_batch(target, tgt_sampler)

        tape = ad.Tape()
        leaves = [tape.watch(a) for a in params.tensors()]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, banks = variant_loss(
                    cfg.variant, xs, ys, xt, params.with_tensors(leaves), banks, alpha, cfg.stop_gradient_banks
                )
        except (ContractError, DegenerateError) as exc:
            if _forward_is_finite(params, xs, xt):
                raise
            raise TrainingError(f"episode {t}: forward pass became non-finite ({exc})") from exc
        if not loss.total.is_finite():
            raise TrainingError(
                f"episode {t}: non-finite loss (L_C={loss.loss_c.item()}, adapt={loss.loss_cyc.item()})"
            )
        clamped += loss.clamped
        inactive += not loss.cycle_active
        grads = tape.backward(loss.total)
        new, velocity = sgd_step(
            params.tensors(), [grads[leaf] for leaf in leaves], lr, cfg.momentum, cfg.weight_decay, velocity, t
        )
        params = params.with_tensors(new)

        if t % cfg.eval_every == 0 or t == cfg.episodes:
            src_acc, tgt_acc, dist = evaluate(params, banks, source, target)
            row = TraceRow(t, loss.loss_c.item(), loss.loss_cyc.item(), alpha, lr, src_acc, tgt_acc, dist)
            trace.append(row)
            if progress is not None:
                progress(row)

    return RunResult(
        trace=trace,
        params=params,
        banks=banks,
        velocity=velocity,
        config=cfg,
        wall_time=time.perf_counter() - started,
        clamped=clamped,
        inactive_cycle_episodes=inactive,
    )


def run_variant(source, target, cfg: TrainConfig, variant: str | None = None, progress=None) -> RunResult:
    if variant is not None:
        cfg = replace(cfg, variant=variant)
    return train(source, target, cfg, progress)


def target_pseudo_labels(params: ModelParams, banks: Banks, samples: np.ndarray) -> np.ndarray:
    """Nearest-source-centroid labels for arbitrary samples (needs a full source bank)."""
    return ncc_assign(embed(params.numpy(), samples), banks.source)


# -- checkpoints ----------------------------------------------------------------
#
# The model checkpoint layout, with FLAG_BANKS / FLAG_VELOCITY set, followed by
#   banks:    for source then target: f32 theta | u8 initialized[K] | f32 centroids[K, M]
#   velocity: f32 tensors in parameter order


def save_checkpoint(path, params: ModelParams, banks: Banks | None = None, velocity=None) -> None:
    params = params.numpy()
    flags = (FLAG_BANKS if banks is not None else 0) | (FLAG_VELOCITY if velocity is not None else 0)
    with open(path, "wb") as fh:
        write_header(fh, params, flags)
        write_f32(fh, params.tensors())
        if banks is not None:
            for bank in (banks.source, banks.target):
                write_f32(fh, [np.float32(bank.theta)])
                fh.write(bank.initialized.astype(np.uint8).tobytes())
                write_f32(fh, [bank.centroids])
        if velocity is not None:
            write_f32(fh, velocity)


def load_checkpoint(path) -> tuple[ModelParams, Banks | None, list | None]:
    with open(path, "rb") as fh:
        params, flags = read_header(fh)
        banks = velocity = None
        k, m = params.arch.num_classes, params.arch.embed_dim
        if flags & FLAG_BANKS:
            pair = []
            for _ in range(2):
                theta = float(read_f32(fh, (1,))[0])
                mask = read_bytes(fh, k).astype(bool)
                pair.append(CentroidBank(read_f32(fh, (k, m)), mask, round(theta, 6)))
            banks = Banks(*pair)
        if flags & FLAG_VELOCITY:
            velocity = [read_f32(fh, np.shape(t)) for t in params.tensors()]
    return params, banks, velocity
