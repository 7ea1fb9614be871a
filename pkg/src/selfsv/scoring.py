"""Cosine trial scoring, adaptive ZT-norm / S-norm, and score fusion.

ZT-norm, step by step (all statistics from :func:`adaptive_stats`):

1. Z statistics of each enrollment utterance ``e`` from its scores against
   the cohort, ``(mu_e, sigma_e)``.
2. Z statistics of each cohort utterance ``c`` from its scores against the
   rest of the cohort, ``(mu_c, sigma_c)``.
3. For each test utterance ``t``, the cohort-vs-test scores are Z-normalized
   with the cohort statistics: ``(S(c, t) - mu_c) / sigma_c``.
4. T statistics of ``t`` from those normalized scores, ``(mu_t, sigma_t)``.
5. Output ``((s - mu_e) / sigma_e - mu_t) / sigma_t``.

A score between an utterance and itself never enters any statistic
(utterances are matched by id).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DataError, EmbeddingSet, ScoreSet, TrialList
from .embedops import cosine_matrix, paired_cosine

SIGMA_FLOOR = 1e-6

ScoreFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CohortConfig:
    size: int = 10000
    seed: int = 0
    drop_top: int = 10
    use_top: int = 200
    adaptive_z: bool = True
    adaptive_t: bool = True

    def __post_init__(self):
        if self.size < 1 or self.use_top < 1 or self.drop_top < 0:
            raise ValueError("need size >= 1, use_top >= 1, drop_top >= 0")

    def describe(self) -> str:
        return (f"cohort_size={self.size} cohort_seed={self.seed} drop_top={self.drop_top} "
                f"use_top={self.use_top} adaptive_z={self.adaptive_z} "
                f"adaptive_t={self.adaptive_t}")


@dataclass(frozen=True)
class NormStats:
    mu: float
    sigma: float


def score_trials(emb: EmbeddingSet, trials: TrialList) -> ScoreSet:
    enroll = emb.rows([e for e, _ in trials.pairs]) if len(trials) else np.zeros((0, emb.dim))
    test = emb.rows([t for _, t in trials.pairs]) if len(trials) else np.zeros((0, emb.dim))
    return ScoreSet(trials, paired_cosine(enroll, test))


def cohort_select(emb: EmbeddingSet, cfg: CohortConfig) -> EmbeddingSet:
    """Uniform sample of ``cfg.size`` utterances without replacement."""
    if cfg.size > len(emb):
        raise DataError(f"cohort size {cfg.size} exceeds {len(emb)} available utterances")
    idx = np.random.default_rng(cfg.seed).choice(len(emb), size=cfg.size, replace=False)
    return EmbeddingSet(tuple(emb.ids[i] for i in idx), emb.data[idx])


def adaptive_stats(scores, cfg: CohortConfig, adaptive: bool = True) -> NormStats:
    """Mean and population std of the top cohort scores.

    Scores are sorted descending, the first ``drop_top`` discarded and the
    next ``min(use_top, remaining)`` kept.  With ``adaptive=False`` all scores
    are used.  NaN entries (excluded self-scores) are ignored.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    s = s[~np.isnan(s)]
    if adaptive:
        if len(s) <= cfg.drop_top:
            raise DataError(f"{len(s)} cohort scores, cannot drop top {cfg.drop_top}")
        s = np.sort(s)[::-1][cfg.drop_top:cfg.drop_top + cfg.use_top]
    elif len(s) == 0:
        raise DataError("no cohort scores")
    return NormStats(float(s.mean()), max(float(s.std()), SIGMA_FLOOR))


def _stats_rows(matrix, cfg, adaptive):
    stats = [adaptive_stats(row, cfg, adaptive) for row in matrix]
    return (np.array([st.mu for st in stats]), np.array([st.sigma for st in stats]))


def _self_masked(matrix, row_ids, col_ids):
    m = np.array(matrix, dtype=np.float64)
    cols = {u: j for j, u in enumerate(col_ids)}
    for i, u in enumerate(row_ids):
        j = cols.get(u)
        if j is not None:
            m[i, j] = np.nan
    return m


def _trial_index(raw: ScoreSet, emb_enroll: EmbeddingSet, emb_test: EmbeddingSet):
    enroll_ids = raw.trials.enroll_ids
    test_ids = raw.trials.test_ids
    e_pos = {u: i for i, u in enumerate(enroll_ids)}
    t_pos = {u: i for i, u in enumerate(test_ids)}
    ei = np.array([e_pos[e] for e, _ in raw.trials.pairs], dtype=np.int64)
    ti = np.array([t_pos[t] for _, t in raw.trials.pairs], dtype=np.int64)
    return enroll_ids, test_ids, emb_enroll.rows(enroll_ids), emb_test.rows(test_ids), ei, ti


def zt_norm(raw: ScoreSet, emb_enroll: EmbeddingSet, emb_test: EmbeddingSet,
            cohort: EmbeddingSet, cfg: CohortConfig, score_fn: ScoreFn = cosine_matrix) -> ScoreSet:
    """Adaptive ZT-norm of ``raw``; see the module docstring for the recipe.

    ``score_fn(A, B)`` must return the all-pairs score matrix between rows of
    A and B, and must be the function that produced ``raw``.
    """
    enroll_ids, test_ids, E, T, ei, ti = _trial_index(raw, emb_enroll, emb_test)
    C = cohort.data
    s_ec = _self_masked(score_fn(E, C), enroll_ids, cohort.ids)
    s_cc = _self_masked(score_fn(C, C), cohort.ids, cohort.ids)
    s_ct = _self_masked(score_fn(C, T), cohort.ids, test_ids)
    mu_e, sd_e = _stats_rows(s_ec, cfg, cfg.adaptive_z)
    mu_c, sd_c = _stats_rows(s_cc, cfg, cfg.adaptive_z)
    z_ct = (s_ct - mu_c[:, None]) / sd_c[:, None]
    mu_t, sd_t = _stats_rows(z_ct.T, cfg, cfg.adaptive_t)
    z = (raw.scores - mu_e[ei]) / sd_e[ei]
    return ScoreSet(raw.trials, (z - mu_t[ti]) / sd_t[ti])


def s_norm(raw: ScoreSet, emb_enroll: EmbeddingSet, emb_test: EmbeddingSet,
           cohort: EmbeddingSet, cfg: CohortConfig, score_fn: ScoreFn = cosine_matrix) -> ScoreSet:
    """Symmetric normalization: mean of the enroll-side and test-side
    standardized scores, each with adaptive cohort statistics."""
    enroll_ids, test_ids, E, T, ei, ti = _trial_index(raw, emb_enroll, emb_test)
    C = cohort.data
    mu_e, sd_e = _stats_rows(_self_masked(score_fn(E, C), enroll_ids, cohort.ids), cfg,
                             cfg.adaptive_z)
    mu_t, sd_t = _stats_rows(_self_masked(score_fn(T, C), test_ids, cohort.ids), cfg,
                             cfg.adaptive_t)
    s = raw.scores
    return ScoreSet(raw.trials, 0.5 * ((s - mu_e[ei]) / sd_e[ei] + (s - mu_t[ti]) / sd_t[ti]))


def fuse(score_sets: Sequence[ScoreSet]) -> ScoreSet:
    """Per-trial arithmetic mean.

    Values are sorted per trial before summing so the result does not depend
    on the order of the systems, and are accumulated as offsets from the
    smallest value so identical inputs give back exactly that value.
    """
    if not score_sets:
        raise DataError("nothing to fuse")
    trials = score_sets[0].trials
    for s in score_sets[1:]:
        if s.trials.pairs != trials.pairs:
            raise DataError("score sets are over different trial lists")
    stack = np.sort(np.stack([s.scores for s in score_sets]), axis=0)
    base = stack[0]
    return ScoreSet(trials, base + (stack - base).sum(axis=0) / len(score_sets))
