"""Pseudo-label generation: k-means, agglomerative merging of the k-means
centroids, cross-network label exchange and agreement-based weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import DataError, EmbeddingSet, LabelSet, MissingIdError
from .embedops import EPS_NORM, length_normalize


@dataclass(frozen=True)
class ClusteringConfig:
    n_pseudo: int = 7500
    kmeans_k: Optional[int] = None  # default 3 * n_pseudo
    max_lloyd_iters: int = 100
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if self.n_pseudo < 1:
            raise ValueError("n_pseudo must be >= 1")
        if self.kmeans_k is not None and self.kmeans_k < self.n_pseudo:
            raise ValueError("kmeans_k must be >= n_pseudo")
        if self.restarts < 1 or self.max_lloyd_iters < 1:
            raise ValueError("restarts and max_lloyd_iters must be >= 1")

    @property
    def k(self) -> int:
        return self.kmeans_k if self.kmeans_k is not None else 3 * self.n_pseudo


@dataclass(frozen=True, eq=False)
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    history: tuple = ()

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x, c):
    d = (x * x).sum(axis=1)[:, None] - 2.0 * x @ c.T + (c * c).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x, k, rng):
    # first center drawn by mass (uniform) so duplicated datasets pick the same point
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    mass = np.ones(n)
    closest = None
    for j in range(k):
        cum = np.cumsum(mass)
        if cum[-1] <= 0:
            # every point already coincides with a center
            i = int(rng.integers(n))
        else:
            i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
            i = min(i, n - 1)
        centers[j] = x[i]
        d = _sq_dists(x, centers[j:j + 1])[:, 0]
        closest = d if closest is None else np.minimum(closest, d)
        mass = closest
    return centers


def _lloyd(x, centers, max_iters):
    history = []
    assign = None
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        new_assign = d.argmin(axis=1)
        inertia = float(d[np.arange(len(x)), new_assign].sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            # re-seed empty clusters at the points farthest from their centroid
            resid = ((x - centers[assign]) ** 2).sum(axis=1)
            taken = set()
            for j in np.flatnonzero(~nonempty):
                for i in np.argsort(-resid, kind="stable"):
                    if i not in taken:
                        taken.add(i)
                        centers[j] = x[i]
                        break
    d = _sq_dists(x, centers)
    assign = d.argmin(axis=1)
    inertia = float(((x - centers[assign]) ** 2).sum())
    return centers, assign, inertia, tuple(history)


def kmeans(X, k: int, cfg: ClusteringConfig = ClusteringConfig()) -> ClusterModel:
    """k-means++ initialization followed by Lloyd iterations.

    Runs ``cfg.restarts`` independent initializations and keeps the lowest
    inertia.  Inertia is checked to be non-increasing at every iteration.
    """
    x = np.asarray(X.data if isinstance(X, EmbeddingSet) else X, dtype=np.float64)
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise DataError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(cfg.seed)
    best = None
    for _ in range(cfg.restarts):
        centers, assign, inertia, history = _lloyd(x, _kmeanspp(x, k, rng), cfg.max_lloyd_iters)
        if best is None or inertia < best.inertia:
            best = ClusterModel(centers, assign, inertia, history)
    return best


def ahc_merge(model: ClusterModel, target_k: int, eps_norm: float = EPS_NORM) -> np.ndarray:
    """Greedily merge k-means clusters down to ``target_k``.

    At every step the pair of clusters whose size-weighted mean vectors have
    the highest cosine similarity is merged (lowest index pair on ties).
    Returns an array mapping each k-means cluster to 0..target_k-1, numbered
    in order of first appearance.
    """
    K = model.k
    if target_k < 1:
        raise ValueError("target_k must be >= 1")
    if target_k > K:
        raise ValueError(f"target_k {target_k} exceeds the {K} input clusters")
    sizes = np.maximum(np.bincount(model.assignment, minlength=K), 1).astype(np.float64)
    sums = model.centroids * sizes[:, None]
    parent = np.arange(K)
    alive = np.ones(K, dtype=bool)
    unit = length_normalize(sums, eps_norm)
    sim = unit @ unit.T
    np.fill_diagonal(sim, -np.inf)
    for _ in range(K - target_k):
        i, j = np.unravel_index(np.argmax(sim), sim.shape)
        i, j = min(i, j), max(i, j)
        sums[i] += sums[j]
        sizes[i] += sizes[j]
        alive[j] = False
        parent[parent == j] = i
        sim[j, :] = -np.inf
        sim[:, j] = -np.inf
        u = length_normalize(sums[i], eps_norm)
        row = length_normalize(sums, eps_norm) @ u
        row[~alive] = -np.inf
        row[i] = -np.inf
        sim[i, :] = row
        sim[:, i] = row
    _, mapping = np.unique(parent, return_inverse=True)
    return _first_appearance(mapping)


def _first_appearance(labels) -> np.ndarray:
    labels = np.asarray(labels)
    order = {}
    for lab in labels.tolist():
        order.setdefault(lab, len(order))
    return np.array([order[lab] for lab in labels.tolist()], dtype=np.int64)


def generate_pseudo_labels(X: EmbeddingSet, cfg: ClusteringConfig) -> LabelSet:
    """Length-normalize, k-means to ``cfg.k`` clusters, merge to ``n_pseudo``."""
    if len(X) < cfg.n_pseudo:
        raise DataError(f"{len(X)} utterances for {cfg.n_pseudo} pseudo-speakers")
    x = length_normalize(X.data)
    k = min(cfg.k, len(X))
    model = kmeans(x, k, cfg)
    mapping = ahc_merge(model, cfg.n_pseudo)
    labels = _first_appearance(mapping[model.assignment])
    return LabelSet(X.ids, labels, None, int(labels.max()) + 1)


def concat_embeddings(A: EmbeddingSet, B: EmbeddingSet, eps_norm: float = EPS_NORM) -> EmbeddingSet:
    """Length-normalize both parts and concatenate them (ids in A's order)."""
    if set(A.ids) != set(B.ids) or len(A) != len(B):
        raise MissingIdError("embedding sets cover different utterances")
    b = B.rows(A.ids)
    return EmbeddingSet(A.ids, np.hstack([length_normalize(A.data, eps_norm),
                                          length_normalize(b, eps_norm)]))


def cluster_agreement_weights(labels_a: LabelSet, labels_b: LabelSet,
                              downweight: float = 0.5) -> np.ndarray:
    """Per-utterance weights (aligned with ``labels_a.ids``) from agreement of
    two clusterings.

    Clusters are matched one-to-one greedily by descending overlap; ties go
    to the pair that occurs first in utterance order, which keeps the result
    independent of how either side numbers its clusters.  Utterances whose
    (a, b) pair is matched get weight 1, all others ``downweight``.
    """
    if not 0.0 <= downweight <= 1.0:
        raise ValueError("downweight must be in [0, 1]")
    b = labels_b.aligned_to(labels_a.ids).labels
    a = labels_a.labels
    pairs = {}
    for i, key in enumerate(zip(a.tolist(), b.tolist())):
        if key in pairs:
            pairs[key][0] += 1
        else:
            pairs[key] = [1, i]
    ranked = sorted(pairs.items(), key=lambda kv: (-kv[1][0], kv[1][1]))
    used_a, used_b, matched = set(), set(), set()
    for (ca, cb), _ in ranked:
        if ca not in used_a and cb not in used_b:
            used_a.add(ca)
            used_b.add(cb)
            matched.add((ca, cb))
    return np.array([1.0 if key in matched else downweight
                     for key in zip(a.tolist(), b.tolist())])


def cross_label_exchange(emb_a: EmbeddingSet, emb_b: EmbeddingSet, cfg: ClusteringConfig,
                         concat: bool = False):
    """Pseudo-labels for the next round of each network: ``(for_b, for_a)``.

    Normally network B learns from clusters of A's embeddings and vice versa,
    both clustered with ``cfg.seed``.  In concat mode both label sets come
    from the concatenated embeddings, clustered with seeds ``cfg.seed`` and
    ``cfg.seed + 1``.
    """
    if set(emb_a.ids) != set(emb_b.ids):
        raise MissingIdError("embedding sets cover different utterances")
    if concat:
        joint = concat_embeddings(emb_a, emb_b)
        for_b = generate_pseudo_labels(joint, cfg)
        for_a = generate_pseudo_labels(joint, replace(cfg, seed=cfg.seed + 1))
    else:
        for_b = generate_pseudo_labels(emb_a, cfg)
        for_a = generate_pseudo_labels(emb_b.subset(emb_a.ids), cfg)
    return for_b, for_a
