"""Cross-domain nearest-centroid classification and the cycle label-consistent loss.

A training episode runs in three stages:

1. source class centroids of the batch are folded into the global source
   bank, and every target sample gets the label of its most cosine-similar
   source centroid (hard pseudo-label, no gradient);
2. target pseudo-class centroids are folded into the global target bank;
3. every source sample gets a softmax over its cosine similarities to the
   target centroids, and the cross-entropy of that "soft" pseudo-label
   against the true source label is the cycle loss.

The total loss is ``L_C + alpha * L_cyc`` with ``L_C`` the ordinary source
cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError
from .model import ModelParams, embed, logits


@dataclass(frozen=True, eq=False)
class CentroidBank:
    centroids: np.ndarray
    initialized: np.ndarray
    theta: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError(f"theta must lie in [0, 1], got {self.theta}")
        c = np.asarray(self.centroids, dtype=np.float32)
        mask = np.asarray(self.initialized, dtype=bool)
        if c.ndim != 2 or mask.shape != (c.shape[0],):
            raise DimensionError(f"centroids {c.shape} vs mask {mask.shape}")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "initialized", mask)

    @classmethod
    def empty(cls, num_classes: int, dim: int, theta: float = 0.7) -> CentroidBank:
        return cls(np.zeros((num_classes, dim), np.float32), np.zeros(num_classes, bool), theta)

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]

    @property
    def ready(self) -> bool:
        return bool(self.initialized.all())

    def require_ready(self, what: str) -> None:
        if not self.ready:
            missing = np.flatnonzero(~self.initialized).tolist()
            raise ContractError(f"{what}: classes {missing} have no centroid yet")


@dataclass
class EpisodeLoss:
    loss_c: ad.Tensor
    loss_cyc: ad.Tensor
    alpha: float
    total: ad.Tensor
    clamped: int = 0
    cycle_active: bool = True
    target_pseudo: np.ndarray | None = None


@dataclass(frozen=True)
class ScheduleConfig:
    alpha0: float = 2.5
    alpha_gamma: float = 10.0
    lr0: float = 0.01
    lr_gamma: float = 10.0
    lr_beta: float = 0.75
    lr_mode: str = "constant"

    def __post_init__(self):
        for name in ("alpha0", "alpha_gamma", "lr0", "lr_beta"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        if self.lr_mode not in ("constant", "annealed"):
            raise ContractError(f"lr_mode must be 'constant' or 'annealed', got {self.lr_mode!r}")


# -- centroids ----------------------------------------------------------------


def local_centroids(features, labels, num_classes: int) -> tuple[ad.Tensor, np.ndarray]:
    """Per-class mean of the batch features, and which classes were present."""
    return ad.segment_mean(features, labels, num_classes)


def _ema_coefficients(bank: CentroidBank, present: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # new = w * local + c, row by row
    theta = np.float32(bank.theta)
    update = present & bank.initialized
    first = present & ~bank.initialized
    w = np.where(update, 1 - theta, np.where(first, 1, 0)).astype(np.float32)
    c = np.where(update[:, None], theta * bank.centroids, 0)
    c = np.where(present[:, None], c, bank.centroids).astype(np.float32)
    return w, c


def ema_update(bank: CentroidBank, local, present) -> CentroidBank:
    """Fold a batch's local centroids into the global bank.

    Present, initialized rows move to ``theta * old + (1 - theta) * local``;
    present rows seen for the first time are set to ``local``; absent rows
    are carried over.
    """
    local = np.asarray(local.data if isinstance(local, ad.Tensor) else local, dtype=np.float32)
    present = np.asarray(present, dtype=bool)
    if local.shape != bank.centroids.shape or present.shape != (bank.num_classes,):
        raise DimensionError(f"local {local.shape} / mask {present.shape} vs bank {bank.centroids.shape}")
    if not np.isfinite(local[present]).all():
        raise ContractError("non-finite local centroid")
    w, c = _ema_coefficients(bank, present)
    return replace(bank, centroids=w[:, None] * local + c, initialized=bank.initialized | present)


def blend_centroids(bank: CentroidBank, local: ad.Tensor, present) -> tuple[ad.Tensor, CentroidBank]:
    """EMA update that keeps the batch component differentiable.

    The historical ``theta * old`` part is a constant; ``(1 - theta) * local``
    carries gradient back to the batch features.
    """
    present = np.asarray(present, dtype=bool)
    new = ema_update(bank, local, present)
    w, c = _ema_coefficients(bank, present)
    return ad.row_affine(local, w, c), new


# -- nearest-centroid classification ------------------------------------------


def _unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return a / np.maximum(norms, ad.DEGENERATE_NORM)


def cosine_matrix(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """[N,K] cosine similarities, evaluated in float64."""
    return _unit_rows(features) @ _unit_rows(centroids).T


def ncc_assign(features, bank: CentroidBank) -> np.ndarray:
    """Hard pseudo-label = index of the most cosine-similar centroid.

    Ties go to the lowest class index. Not differentiable.
    """
    bank.require_ready("ncc_assign")
    f = np.asarray(features.data if isinstance(features, ad.Tensor) else features)
    if f.ndim != 2 or f.shape[1] != bank.centroids.shape[1]:
        raise DimensionError(f"features {f.shape} vs centroids {bank.centroids.shape}")
    return np.argmax(cosine_matrix(f, bank.centroids), axis=1)


def soft_scores(features, bank: CentroidBank, centroids=None, partial: bool = False) -> ad.Tensor:
    """Row-wise softmax over cosine similarities to the bank's centroids.

    ``centroids`` may pass a differentiable version of the bank's rows
    (see ``blend_centroids``); by default the bank is treated as constant.
    With ``partial=True`` a class the bank has never seen contributes a
    similarity of 0, as the zero vector would; otherwise every class must
    be initialized.
    """
    if centroids is None:
        centroids = bank.centroids
    f_unit = ad.l2norm_rescale(features, 1.0)
    if bank.ready or not partial:
        bank.require_ready("soft_scores")
        c_unit = ad.l2norm_rescale(centroids, 1.0)
        return ad.softmax(ad.matmul(f_unit, ad.transpose(c_unit)))
    seen = bank.initialized.astype(np.float32)
    # unseen rows are swapped for a constant so the normalization stays defined,
    # then their similarity column is zeroed
    filler = np.where(bank.initialized[:, None], 0, 1).astype(np.float32) * np.ones_like(bank.centroids)
    c_unit = ad.l2norm_rescale(ad.row_affine(centroids, seen, filler), 1.0)
    cos = ad.mul(ad.matmul(f_unit, ad.transpose(c_unit)), seen[None, :])
    return ad.softmax(cos)


def cycle_loss(scores, labels, diagnostics: dict | None = None) -> ad.Tensor:
    """Cross-entropy of the true source labels against their soft pseudo-labels."""
    loss, clamped = ad.nll(scores, labels)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    return loss


def classification_loss(probs, labels, diagnostics: dict | None = None) -> ad.Tensor:
    loss, clamped = ad.nll(probs, labels)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    return loss


# -- episode ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Banks:
    source: CentroidBank
    target: CentroidBank

    @classmethod
    def empty(cls, num_classes: int, dim: int, theta: float = 0.7) -> Banks:
        return cls(CentroidBank.empty(num_classes, dim, theta), CentroidBank.empty(num_classes, dim, theta))


def cross_domain_pass(
    fs,
    ys: np.ndarray,
    ft,
    banks: Banks,
    stop_gradient: bool = False,
) -> tuple[ad.Tensor | None, Banks, np.ndarray | None]:
    """Stages 1 and 2 of an episode, plus the soft scores of stage 3.

    Returns (scores or None, updated banks, target pseudo-labels or None).
    Scores are None only while some source class has never been sampled.
    Target classes not yet seen score with similarity 0 (see ``soft_scores``).
    """
    k = banks.source.num_classes
    src_local, src_present = local_centroids(fs, ys, k)
    source = ema_update(banks.source, src_local, src_present)
    if not source.ready:
        return None, Banks(source, banks.target), None
    pseudo = ncc_assign(ft, source)
    tgt_local, tgt_present = local_centroids(ft, pseudo, k)
    tgt_blend, target = blend_centroids(banks.target, tgt_local, tgt_present)
    centroids = target.centroids if stop_gradient else tgt_blend
    return soft_scores(fs, target, centroids, partial=True), Banks(source, target), pseudo


def episode_loss(
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    params: ModelParams,
    banks: Banks,
    alpha: float,
    stop_gradient: bool = False,
) -> tuple[EpisodeLoss, Banks]:
    """Loss of one training episode; banks are returned updated, not mutated."""
    if len(xs) == 0 or len(xt) == 0:
        raise ContractError("episode batches must be non-empty")
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    fs = embed(params, xs)
    ft = embed(params, xt)
    diag: dict = {}
    scores, new_banks, pseudo = cross_domain_pass(fs, ys, ft, banks, stop_gradient)
    if scores is None:
        l_cyc = ad.Tensor(0.0)
    else:
        l_cyc = cycle_loss(scores, ys, diag)
    l_c = ad.softmax_cross_entropy(logits(params, fs), ys)
    total = ad.add(l_c, ad.scale(l_cyc, alpha))
    result = EpisodeLoss(
        loss_c=l_c,
        loss_cyc=l_cyc,
        alpha=float(alpha),
        total=total,
        clamped=diag.get("clamped", 0),
        cycle_active=scores is not None,
        target_pseudo=pseudo,
    )
    return result, new_banks


# -- schedules ----------------------------------------------------------------


def alpha_schedule(p: float, alpha0: float = 2.5, gamma: float = 10.0) -> float:
    """Cycle-loss weight ramped from 0 towards ``alpha0`` over training progress ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"progress must lie in [0, 1], got {p}")
    return float(alpha0 * (2.0 / (1.0 + np.exp(-gamma * p)) - 1.0))


def lr_schedule(
    p: float, lr0: float = 0.01, gamma: float = 10.0, beta: float = 0.75, mode: str = "constant"
) -> float:
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"progress must lie in [0, 1], got {p}")
    if mode == "constant":
        return float(lr0)
    if mode == "annealed":
        return float(lr0 / (1.0 + gamma * p) ** beta)
    raise ContractError(f"unknown lr mode {mode!r}")
