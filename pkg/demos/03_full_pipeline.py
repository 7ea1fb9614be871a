"""The full synthetic experiment: momentum-contrast pre-training, three
rounds of pseudo-labeling with two networks, and score fusion.  Takes about
ten seconds.

    python3 demos/03_full_pipeline.py
"""

from selfsv.pipeline import default_config, run_pipeline

cfg = default_config()
report, extractors = run_pipeline(cfg)
print(report.to_text())

for network in ("A", "B"):
    series = report.eer_series(network)
    print(f"network {network} EER by iteration: "
          + " -> ".join(f"{100 * v:.2f}%" for v in series))
print(f"trained extractors: {', '.join(sorted(extractors))}")
