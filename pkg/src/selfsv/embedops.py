"""Stabilized vector operations: length normalization, cosine scoring,
statistics pooling and feature normalization.

All arithmetic is done in float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, DimensionMismatchError, NonFiniteError

EPS_NORM = 1.0e-4
EPS_POOL = 1.0e-3
STD_FLOOR = 1.0e-8


@dataclass(frozen=True)
class StabilityConstants:
    eps_norm: float = EPS_NORM
    eps_pool: float = EPS_POOL

    def __post_init__(self):
        if not (self.eps_norm > 0 and self.eps_pool > 0):
            raise ValueError("stability constants must be positive")


def _finite(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("input contains NaN or Inf")
    return x


def stabilized_norm(x, eps_norm: float = EPS_NORM) -> np.ndarray:
    """sqrt(sum_k x_k^2 + eps) over the last axis."""
    x = _finite(x)
    return np.sqrt(np.sum(x * x, axis=-1) + eps_norm)


def length_normalize(x, eps_norm: float = EPS_NORM) -> np.ndarray:
    """Divide ``x`` (vector, or matrix row-wise) by its eps-stabilized norm.

    The result always has Euclidean norm strictly below one, approaching one
    as ``|x|`` grows.
    """
    x = _finite(x)
    return x / stabilized_norm(x, eps_norm)[..., None]


def cosine_score(a, b, eps_norm: float = EPS_NORM) -> float:
    a = _finite(a)
    b = _finite(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatchError(f"cosine_score shapes {a.shape} vs {b.shape}")
    # elementwise product then sum: evaluation order identical for (a, b) and (b, a)
    return float(np.sum(length_normalize(a, eps_norm) * length_normalize(b, eps_norm)))


def cosine_matrix(a, b, eps_norm: float = EPS_NORM) -> np.ndarray:
    """All-pairs cosine scores between rows of ``a`` and rows of ``b``."""
    a = np.atleast_2d(_finite(a))
    b = np.atleast_2d(_finite(b))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dims {a.shape[1]} vs {b.shape[1]}")
    return length_normalize(a, eps_norm) @ length_normalize(b, eps_norm).T


def paired_cosine(a, b, eps_norm: float = EPS_NORM) -> np.ndarray:
    """Row-wise cosine of matched rows."""
    a = _finite(a)
    b = _finite(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes {a.shape} vs {b.shape}")
    return np.sum(length_normalize(a, eps_norm) * length_normalize(b, eps_norm), axis=-1)


def stats_pool(frames, eps_pool: float = EPS_POOL, mode: str = "clamp") -> np.ndarray:
    """Mean and standard deviation over the frame axis (second to last).

    ``mode="clamp"`` computes sqrt(max(E[x^2] - E[x]^2, eps)); ``mode="add"``
    computes sqrt(E[x^2] - E[x]^2 + eps).  Accepts ``(T, F)`` or a batch
    ``(..., T, F)`` and returns ``(..., 2F)``.
    """
    x = _finite(frames)
    if x.ndim < 2:
        raise DimensionMismatchError("frames must be at least 2-D (T x F)")
    if x.shape[-2] == 0:
        raise DataError("empty frame sequence")
    mean = x.mean(axis=-2)
    var = (x * x).mean(axis=-2) - mean * mean
    if mode == "clamp":
        std = np.sqrt(np.maximum(var, eps_pool))
    elif mode == "add":
        std = np.sqrt(np.maximum(var, 0.0) + eps_pool)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return np.concatenate([mean, std], axis=-1)


def sliding_cmn(features, window: int = 300) -> np.ndarray:
    """Subtract from every frame the mean over a centered window.

    The window holds ``min(window, T)`` frames starting ``window // 2`` frames
    before the current one, shifted inward where it would cross an utterance
    boundary, so an utterance no longer than the window is normalized by its
    global mean.
    """
    x = _finite(features)
    if x.ndim != 2:
        raise DimensionMismatchError("features must be T x F")
    if window < 1:
        raise ValueError("window must be >= 1")
    T = x.shape[0]
    if T == 0:
        return x.copy()
    w = min(window, T)
    t = np.arange(T)
    start = np.clip(t - window // 2, 0, T - w)
    csum = np.vstack([np.zeros((1, x.shape[1])), np.cumsum(x, axis=0)])
    means = (csum[start + w] - csum[start]) / w
    return x - means


@dataclass(frozen=True)
class MvnStats:
    mean: np.ndarray
    std: np.ndarray


def compute_mvn_stats(dataset, std_floor: float = STD_FLOOR) -> MvnStats:
    """Per-dimension mean and population std over rows of ``dataset``.

    Dimensions with std below ``std_floor`` get std 1.
    """
    x = _finite(dataset)
    x = x.reshape(-1, x.shape[-1])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < std_floor, 1.0, std)
    return MvnStats(mean, std)


def global_mvn(features, stats: MvnStats) -> np.ndarray:
    x = _finite(features)
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionMismatchError(
            f"feature dim {x.shape[-1]} vs stats dim {stats.mean.shape[0]}")
    return (x - stats.mean) / stats.std
