"""Training objectives with analytic gradients.

Every loss comes in a single-example form (``softmax_ce``, ``bitempered_loss``,
``moco_infonce``) and a row-batched form used by the trainer.  Gradients are
with respect to the logits, except for the InfoNCE and classifier-head
losses, which return gradients with respect to their vector inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import DimensionMismatchError
from .embedops import EPS_NORM, length_normalize, stabilized_norm

COS_TOLERANCE = 1e-6


class LambdaSearchError(ArithmeticError):
    """The tempered-softmax normalizer search did not converge."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 40.0
    margin: float = 0.2
    variant: str = "subtractive"  # or "angular"

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")
        if self.variant not in ("subtractive", "angular"):
            raise ValueError(f"unknown margin variant {self.variant!r}")
        if self.variant == "angular" and self.margin >= math.pi:
            raise ValueError("angular margin must be < pi")


@dataclass(frozen=True)
class BiTemperedConfig:
    t1: float = 0.9
    t2: float = 1.1
    lambda_iters: int = 200
    lambda_tol: float = 1e-12

    def __post_init__(self):
        if not (0 < self.t1 <= 1 <= self.t2):
            raise ValueError("need 0 < t1 <= 1 <= t2")
        if self.lambda_iters < 1 or self.lambda_tol <= 0:
            raise ValueError("lambda_iters and lambda_tol must be positive")


@dataclass(frozen=True)
class ContrastiveConfig:
    scale: float = 10.0
    queue_capacity: int = 65536

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be positive")


# ---------------------------------------------------------------------------
# margin logits


def _clamp_cos(cos_theta):
    c = np.asarray(cos_theta, dtype=np.float64)
    if np.any(np.abs(c) > 1 + COS_TOLERANCE) or not np.all(np.isfinite(c)):
        raise ValueError("cosine outside [-1, 1]")
    return np.clip(c, -1.0, 1.0)


def margin_logits_array(cos_theta, is_target, cfg: MarginConfig):
    """Vectorized margin logits and their derivative d(logit)/d(cos).

    Non-target entries get ``s*cos``.  Target entries get ``s*(cos - m)``
    (subtractive) or ``s*cos(min(theta + m, pi))`` (angular); capping the
    angle at pi keeps target logits monotone in cos and never above the
    non-target logit.
    """
    c = _clamp_cos(cos_theta)
    tgt = np.broadcast_to(np.asarray(is_target, dtype=bool), c.shape)
    s, m = cfg.scale, cfg.margin
    z = s * c
    dz = np.full(c.shape, s)
    if cfg.variant == "subtractive":
        z = np.where(tgt, s * (c - m), z)
    else:
        theta = np.arccos(c)
        shifted = np.minimum(theta + m, math.pi)
        sin_theta = np.maximum(np.sqrt(np.maximum(1.0 - c * c, 0.0)), 1e-12)
        zt = s * np.cos(shifted)
        dzt = np.where(theta + m < math.pi, s * np.sin(shifted) / sin_theta, 0.0)
        z = np.where(tgt, zt, z)
        dz = np.where(tgt, dzt, dz)
    return z, dz


def margin_logits(cos_theta: float, is_target: bool, cfg: MarginConfig) -> float:
    z, _ = margin_logits_array(np.array([cos_theta]), np.array([is_target]), cfg)
    return float(z[0])


# ---------------------------------------------------------------------------
# softmax cross-entropy


def _check_targets(targets, n_classes):
    targets = np.asarray(targets, dtype=np.int64)
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise IndexError("target index out of range")
    return targets


def softmax_ce_batch(logits, targets):
    """Per-row cross-entropy ``logsumexp(z) - z[target]`` and its gradient."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = _check_targets(targets, z.shape[1])
    rows = np.arange(z.shape[0])
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    total = ez.sum(axis=1, keepdims=True)
    lse = (np.log(total) + zmax)[:, 0]
    loss = lse - z[rows, targets]
    grad = ez / total
    grad[rows, targets] -= 1.0
    return loss, grad


def softmax_ce(logits, target: int):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or len(z) == 0:
        raise DimensionMismatchError("logits must be a non-empty vector")
    loss, grad = softmax_ce_batch(z[None, :], [target])
    return float(loss[0]), grad[0]


# ---------------------------------------------------------------------------
# bi-tempered logistic loss


def log_t(x, t: float):
    x = np.asarray(x, dtype=np.float64)
    if t == 1.0:
        return np.log(x)
    return (x ** (1.0 - t) - 1.0) / (1.0 - t)


def exp_t(x, t: float):
    x = np.asarray(x, dtype=np.float64)
    if t == 1.0:
        return np.exp(x)
    return np.maximum(1.0 + (1.0 - t) * x, 0.0) ** (1.0 / (1.0 - t))


def tempered_softmax(logits, t: float, tol: float = 1e-12, max_iters: int = 200):
    """Row-wise tempered softmax ``p = exp_t(z - lam)`` with ``sum(p) = 1``.

    The normalizer is bracketed starting from ``[max(z), max(z) + 1]`` (the
    sum is >= 1 at ``max(z)``), the upper end doubled until the sum drops
    below one, then bisected to ``tol`` and polished with Newton steps.
    Returns ``(p, lam)``.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if t < 1.0:
        raise ValueError("tempered softmax requires t >= 1")
    if t == 1.0:
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        total = ez.sum(axis=1, keepdims=True)
        return ez / total, (np.log(total) + zmax)[:, 0]

    def excess(lam):
        return exp_t(z - lam[:, None], t).sum(axis=1) - 1.0

    lo = z.max(axis=1)
    width = np.ones_like(lo)
    iters = 0
    while True:
        above = excess(lo + width) > 0
        if not above.any():
            break
        iters += 1
        if iters > max_iters:
            raise LambdaSearchError("could not bracket normalizer",
                                    float(np.max(excess(lo + width))))
        width = np.where(above, 2.0 * width, width)
    hi = lo + width
    while np.any(hi - lo > tol):
        iters += 1
        if iters > max_iters:
            raise LambdaSearchError("bisection did not converge",
                                    float(np.max(np.abs(excess(0.5 * (lo + hi))))))
        mid = 0.5 * (lo + hi)
        pos = excess(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
    lam = 0.5 * (lo + hi)
    for _ in range(2):
        p = exp_t(z - lam[:, None], t)
        resid = p.sum(axis=1) - 1.0
        slope = (p ** t).sum(axis=1)
        cand = lam + resid / slope
        better = np.abs(excess(cand)) < np.abs(resid)
        lam = np.where(better, cand, lam)
    return exp_t(z - lam[:, None], t), lam


def bitempered_batch(logits, targets, cfg: BiTemperedConfig):
    """Per-row bi-tempered loss against one-hot targets, and d(loss)/d(logits).

    loss = -log_t1(p_c) - (1 - sum_k p_k^(2-t1)) / (2-t1), with p the tempered
    softmax at t2.  Reduces to softmax cross-entropy at t1 = t2 = 1.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = _check_targets(targets, z.shape[1])
    if cfg.t1 == 1.0 and cfg.t2 == 1.0:
        return softmax_ce_batch(z, targets)
    t1, t2 = cfg.t1, cfg.t2
    rows = np.arange(z.shape[0])
    p, _ = tempered_softmax(z, t2, cfg.lambda_tol, cfg.lambda_iters)
    pc = p[rows, targets]
    loss = -log_t(pc, t1) - (1.0 - np.sum(p ** (2.0 - t1), axis=1)) / (2.0 - t1)
    # dL/dp, then chain through p_k = exp_t2(z_k - lam(z))
    g = p ** (1.0 - t1)
    g[rows, targets] -= pc ** (-t1)
    pt = p ** t2
    escort = pt / pt.sum(axis=1, keepdims=True)
    grad = g * pt - escort * np.sum(g * pt, axis=1, keepdims=True)
    return loss, grad


def bitempered_loss(logits, target: int, cfg: BiTemperedConfig = BiTemperedConfig()):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or len(z) == 0:
        raise DimensionMismatchError("logits must be a non-empty vector")
    loss, grad = bitempered_batch(z[None, :], [target], cfg)
    return float(loss[0]), grad[0]


# ---------------------------------------------------------------------------
# momentum-contrast InfoNCE


def _cos_grad_coeffs(x, eps_norm):
    r = stabilized_norm(x, eps_norm)
    return x / r[:, None], r


def moco_infonce_batch(queries, positive_keys, queue, cfg: ContrastiveConfig = ContrastiveConfig(),
                       eps_norm: float = EPS_NORM):
    """Per-row InfoNCE: logits ``s * [cos(q, k+), cos(q, n_1), ...]``, target 0.

    Returns (per-row losses, gradient w.r.t. the queries).  Keys are treated
    as constants.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    kp = np.atleast_2d(np.asarray(positive_keys, dtype=np.float64))
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, q.shape[1]) if np.size(queue) else \
        np.zeros((0, q.shape[1]))
    if kp.shape != q.shape:
        raise DimensionMismatchError(f"query {q.shape} vs key {kp.shape}")
    qhat, rq = _cos_grad_coeffs(q, eps_norm)
    khat = length_normalize(kp, eps_norm)
    nhat = length_normalize(queue, eps_norm)
    cos = np.concatenate([np.sum(qhat * khat, axis=1)[:, None], qhat @ nhat.T], axis=1)
    loss, dlogit = softmax_ce_batch(cfg.scale * cos, np.zeros(len(q), dtype=np.int64))
    dcos = cfg.scale * dlogit
    # d cos(q, k)/dq = khat / r_q - cos * q / r_q^2
    lin = dcos[:, :1] * khat + dcos[:, 1:] @ nhat
    radial = np.sum(dcos * cos, axis=1)
    grad = lin / rq[:, None] - radial[:, None] * q / (rq * rq)[:, None]
    return loss, grad


def moco_infonce(query, positive_key, queue, cfg: ContrastiveConfig = ContrastiveConfig(),
                 eps_norm: float = EPS_NORM):
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(positive_key, dtype=np.float64)
    if q.ndim != 1 or k.shape != q.shape:
        raise DimensionMismatchError("query and key must be vectors of equal length")
    queue = np.asarray(queue, dtype=np.float64)
    if queue.size and (queue.ndim != 2 or queue.shape[1] != q.shape[0]):
        raise DimensionMismatchError("queue entries must match the query dim")
    loss, grad = moco_infonce_batch(q[None, :], k[None, :], queue, cfg, eps_norm)
    return float(loss[0]), grad[0]


# ---------------------------------------------------------------------------
# classification head: cosine logits with margin -> CE or bi-tempered


@dataclass(frozen=True)
class HeadConfig:
    loss: str = "bitempered"  # or "softmax"
    margin: MarginConfig = field(default_factory=MarginConfig)
    bitempered: BiTemperedConfig = field(default_factory=BiTemperedConfig)

    def __post_init__(self):
        if self.loss not in ("softmax", "bitempered"):
            raise ValueError(f"unknown loss {self.loss!r}")


def classification_loss(emb, reps, labels, cfg: HeadConfig, weights: Optional[np.ndarray] = None,
                        eps_norm: float = EPS_NORM):
    """Weighted-mean margin classification loss over a batch.

    ``emb`` is B x E, ``reps`` (the class representatives) is C x E.  The
    batch loss is ``sum_b w_b * loss_b / B``.  Returns
    ``(loss, grad_emb, grad_reps)``.
    """
    x = np.asarray(emb, dtype=np.float64)
    w = np.asarray(reps, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionMismatchError(f"emb {x.shape} vs reps {w.shape}")
    labels = _check_targets(labels, w.shape[0])
    B = x.shape[0]
    ex = np.ones(B) if weights is None else np.asarray(weights, dtype=np.float64)
    xhat, rx = _cos_grad_coeffs(x, eps_norm)
    what, rw = _cos_grad_coeffs(w, eps_norm)
    cos = xhat @ what.T
    is_target = np.zeros_like(cos, dtype=bool)
    is_target[np.arange(B), labels] = True
    z, dz_dcos = margin_logits_array(np.clip(cos, -1.0, 1.0), is_target, cfg.margin)
    if cfg.loss == "softmax":
        per, dz = softmax_ce_batch(z, labels)
    else:
        per, dz = bitempered_batch(z, labels, cfg.bitempered)
    loss = float(np.sum(ex * per) / B)
    G = (ex / B)[:, None] * dz * dz_dcos
    gc = G * cos
    grad_x = (G @ what) / rx[:, None] - gc.sum(axis=1)[:, None] * x / (rx * rx)[:, None]
    grad_w = (G.T @ xhat) / rw[:, None] - gc.sum(axis=0)[:, None] * w / (rw * rw)[:, None]
    return loss, grad_x, grad_w
