"""Pseudo-labels from k-means followed by agglomerative merging, and the
agreement weights obtained when two label sets are compared.

    python3 demos/02_pseudo_labels.py
"""

import numpy as np

from selfsv.clustering import ClusteringConfig, cluster_agreement_weights, generate_pseudo_labels
from selfsv.pipeline import default_config, prepare, synth_generate


def purity(pred, true):
    """Fraction of utterances carrying their cluster's majority speaker."""
    hits = sum(np.bincount(true[pred == c]).max() for c in np.unique(pred))
    return hits / len(true)


cfg = default_config()
data = synth_generate(cfg.synth)
prep = prepare(data, n_copies=0)
true = data.train_labels.labels
n_speakers = len(np.unique(true))

runs = {}
for seed in (0, 1):
    ccfg = ClusteringConfig(n_pseudo=n_speakers, seed=seed)
    runs[seed] = generate_pseudo_labels(prep.train_feats, ccfg)
    print(f"seed {seed}: {runs[seed].n_clusters} clusters from {ccfg.kmeans_k or 3 * n_speakers} "
          f"k-means centroids, purity {purity(runs[seed].labels, true):.3f}")

# matched cluster pairs get weight 1, everything else the downweight
weights = cluster_agreement_weights(runs[0], runs[1], downweight=0.5)
print(f"{np.mean(weights == 1.0):.1%} of utterances land in matched clusters under both seeds")
