"""Detection metrics: DET operating points, EER, minDCF, relative improvement.

A trial is accepted as a target when its score is >= the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, ScoreSet


@dataclass(frozen=True)
class DcfParams:
    # VoxSRC convention; not taken from any reported system
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("need 0 < p_target < 1 and positive costs")


def _scores_labels(scores, labels=None):
    if isinstance(scores, ScoreSet):
        labels = scores.trials.label_array() if labels is None else labels
        scores = scores.scores
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if len(s) != len(y):
        raise DataError(f"{len(s)} scores vs {len(y)} labels")
    if y.all() or not y.any():
        raise DataError("need at least one target and one non-target trial")
    return s, y


def det_points(scores, labels=None):
    """Operating points ``(thresholds, p_miss, p_fa)`` swept over the sorted
    unique scores, followed by a final ``+inf`` threshold (reject all).

    ``p_miss`` is non-decreasing and ``p_fa`` non-increasing along the sweep.
    """
    s, y = _scores_labels(scores, labels)
    order = np.argsort(s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    n_tgt = int(y.sum())
    n_non = len(y) - n_tgt
    thresholds, first = np.unique(s_sorted, return_index=True)
    # trials strictly below each threshold
    tgt_below = np.concatenate([[0], np.cumsum(y_sorted)])[first]
    non_below = np.concatenate([[0], np.cumsum(~y_sorted)])[first]
    thresholds = np.append(thresholds, np.inf)
    tgt_below = np.append(tgt_below, n_tgt)
    non_below = np.append(non_below, n_non)
    p_miss = tgt_below / n_tgt
    p_fa = (n_non - non_below) / n_non
    assert np.all(np.diff(p_miss) >= 0) and np.all(np.diff(p_fa) <= 0)
    return thresholds, p_miss, p_fa


def eer(scores, labels=None) -> float:
    """Equal error rate in [0, 1], linearly interpolated on the DET points
    where ``p_miss - p_fa`` changes sign."""
    _, p_miss, p_fa = det_points(scores, labels)
    d = p_miss - p_fa
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return float(p_miss[i])
    t = -d[i - 1] / (d[i] - d[i - 1])
    return float(p_miss[i - 1] + t * (p_miss[i] - p_miss[i - 1]))


def dcf_curve(p_miss, p_fa, p: DcfParams = DcfParams()):
    norm = min(p.c_miss * p.p_target, p.c_fa * (1 - p.p_target))
    return (p.c_miss * p.p_target * p_miss + p.c_fa * (1 - p.p_target) * p_fa) / norm


def min_dcf(scores, labels=None, p: DcfParams = DcfParams()) -> float:
    """Minimum normalized detection cost over the swept thresholds."""
    _, p_miss, p_fa = det_points(scores, labels)
    return float(np.min(dcf_curve(p_miss, p_fa, p)))


def rel_delta(prev_eer: float, cur_eer: float) -> float:
    """Relative EER improvement in percent."""
    if prev_eer <= 0:
        raise ValueError("previous EER must be positive")
    return 100.0 * (prev_eer - cur_eer) / prev_eer
