"""Accuracy, cross-domain centroid distance and a PCA projection for plots."""

from __future__ import annotations

import numpy as np

from .core import CentroidBank
from .errors import ContractError, DegenerateError, DimensionError


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if labels.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


def centroid_distance(source: CentroidBank, target: CentroidBank, partial: bool = False) -> float:
    """Sum over classes of the squared Euclidean distance between matching centroids.

    ``partial=True`` accepts banks with unseen classes, whose rows are zero.
    """
    if not partial:
        source.require_ready("centroid_distance")
        target.require_ready("centroid_distance")
    if source.centroids.shape != target.centroids.shape:
        raise DimensionError(f"{source.centroids.shape} vs {target.centroids.shape}")
    diff = source.centroids.astype(np.float64) - target.centroids.astype(np.float64)
    return float((diff * diff).sum())


def _orthogonalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for b in basis:
        v = v - (v @ b) * b
    return v


def _top_direction(
    cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int, found: list[np.ndarray]
) -> np.ndarray:
    # iterates are kept orthogonal to earlier directions; deflation alone
    # leaves a round-off residual along them that a rank-deficient
    # remainder would otherwise converge to
    v = _orthogonalize(rng.standard_normal(cov.shape[0]), found)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = _orthogonalize(cov @ v, found)
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        # the sign of an eigenvector is arbitrary; compare up to sign
        done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
        v = w
        if done:
            break
    return v


def pca_project(
    features, tol: float = 1e-6, max_iter: int = 1000, seed: int = 0
) -> np.ndarray:
    """Project rows onto the top two principal directions.

    Directions come from power iteration on the covariance with deflation;
    the start vectors are drawn from a fixed seed, so the output is a
    deterministic function of the input. Each direction's sign is fixed so
    that its largest-magnitude coordinate is positive.
    """
    x = np.asarray(features.data if hasattr(features, "data") else features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError("need at least two samples in a 2-D array")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    if not np.abs(cov).max() > 0:
        raise DegenerateError("all samples are identical (rank 0)")
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(2):
        if cov.shape[0] <= len(dirs):
            dirs.append(np.zeros(cov.shape[0]))
            continue
        v = _top_direction(cov, rng, tol, max_iter, dirs)
        v = v * np.sign(v[np.argmax(np.abs(v))])
        lam = float(v @ cov @ v)
        dirs.append(v)
        cov = cov - lam * np.outer(v, v)
    return centered @ np.stack(dirs, axis=1)
