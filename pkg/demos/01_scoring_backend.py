"""Cosine scoring, adaptive score normalization and evaluation on synthetic
speakers, using the pooled front-end features directly as embeddings.

    python3 demos/01_scoring_backend.py
"""

from selfsv.metrics import eer, min_dcf
from selfsv.pipeline import default_config, prepare, synth_generate
from selfsv.scoring import CohortConfig, cohort_select, s_norm, score_trials, zt_norm

cfg = default_config()
data = synth_generate(cfg.synth)
prep = prepare(data, n_copies=0)
print(f"{len(data.train_ids)} training utterances, {len(data.val_ids)} validation utterances, "
      f"{len(data.trials)} trials")

raw = score_trials(prep.val_feats, data.trials)
print(f"raw cosine   EER {100 * eer(raw):6.2f}%  minDCF {min_dcf(raw):.4f}")

# the cohort is drawn from training utterances only
cohort_cfg = CohortConfig(size=300, drop_top=10, use_top=200)
cohort = cohort_select(prep.train_feats, cohort_cfg)
for name, norm in (("zt-norm", zt_norm), ("s-norm", s_norm)):
    normed = norm(raw, prep.val_feats, prep.val_feats, cohort, cohort_cfg)
    print(f"{name:<12} EER {100 * eer(normed):6.2f}%  minDCF {min_dcf(normed):.4f}")
