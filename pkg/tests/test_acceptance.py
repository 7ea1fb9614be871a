"""Acceptance criteria, one test each.

Every test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary (and directly when this file is run as a script).
"""

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import central_diff, rel_err
from oracles import det_oracle, eer_oracle, lr_oracle, min_dcf_oracle, zt_oracle
from selfsv.cli import main as cli_main
from selfsv.clustering import ClusteringConfig, kmeans
from selfsv.core import EmbeddingSet, ScoreSet, TrialList
from selfsv.embedops import cosine_matrix
from selfsv.losses import (BiTemperedConfig, ContrastiveConfig, HeadConfig, MarginConfig,
                           bitempered_loss, classification_loss, margin_logits,
                           margin_logits_array, moco_infonce, softmax_ce)
from selfsv.metrics import det_points, eer, min_dcf
from selfsv.pipeline import ExperimentReport
from selfsv.scoring import CohortConfig, s_norm, score_trials, zt_norm
from selfsv.trainer import backward, forward, init_extractor, lr_at

RESULTS = []
H = 1e-5
GRAD_TOL = 1e-4
N_INSTANCES = 100


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# gradient suite


def _grad_cases(rng):
    """Yield (family, analytic gradient, finite-difference gradient)."""
    for _ in range(N_INSTANCES):
        z, c = rng.standard_normal(5) * 2, int(rng.integers(5))
        yield "softmax_ce", softmax_ce(z, c)[1], central_diff(lambda v: softmax_ce(v, c)[0], z, H)
    cfg = BiTemperedConfig(0.9, 1.1)
    for _ in range(N_INSTANCES):
        z, c = rng.standard_normal(5) * 2, int(rng.integers(5))
        yield ("bitempered", bitempered_loss(z, c, cfg)[1],
               central_diff(lambda v: bitempered_loss(v, c, cfg)[0], z, H))
    ccfg = ContrastiveConfig(10.0)
    for _ in range(N_INSTANCES):
        q, k, queue = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal((8, 6))
        yield ("moco_infonce", moco_infonce(q, k, queue, ccfg)[1],
               central_diff(lambda v: moco_infonce(v, k, queue, ccfg)[0], q, H))
    for variant, m in (("subtractive", 0.2), ("angular", 0.3)):
        mcfg = MarginConfig(40.0, m, variant)
        for _ in range(N_INSTANCES):
            cos = np.array([rng.uniform(-0.95, 0.95)])
            _, dz = margin_logits_array(cos, True, mcfg)
            yield (f"margin_logits[{variant}]", dz,
                   central_diff(lambda v: margin_logits(float(v[0]), True, mcfg), cos, H))
    for loss in ("softmax", "bitempered"):
        for variant in ("subtractive", "angular"):
            hcfg = HeadConfig(loss, MarginConfig(10.0, 0.2, variant))
            for _ in range(N_INSTANCES // 4):
                x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
                y, wt = rng.integers(0, 4, 3), rng.uniform(0, 1, 3)
                _, gx, gw = classification_loss(x, w, y, hcfg, wt)
                fam = "classification_head"
                yield fam, gx, central_diff(lambda v: classification_loss(v, w, y, hcfg, wt)[0], x, H)
                yield fam, gw, central_diff(lambda v: classification_loss(x, v, y, hcfg, wt)[0], w, H)
    for hidden in (0, 5):
        for _ in range(N_INSTANCES):
            p = init_extractor(4, 3, hidden, seed=int(rng.integers(2**31)))
            p = p.with_blocks({k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.blocks.items()})
            x, up = rng.standard_normal((2, 4)), rng.standard_normal((2, 3))
            grads, gx = backward(p, x, up)
            fam = f"extractor_backward[hidden={hidden}]"
            name = sorted(p.blocks)[int(rng.integers(len(p.blocks)))]

            def f(v, name=name, p=p, x=x, up=up):
                return float(np.sum(up * forward(p.with_blocks({**p.blocks, name: v}), x)))
            yield fam, grads[name], central_diff(f, p.blocks[name], H)
            yield fam, gx, central_diff(lambda v, p=p, up=up: float(np.sum(up * forward(p, v))), x, H)


def test_gradient_suite():
    start = time.perf_counter()
    worst, counts = {}, {}
    for fam, analytic, fd in _grad_cases(np.random.default_rng(2021)):
        worst[fam] = max(worst.get(fam, 0.0), rel_err(analytic, fd))
        counts[fam] = counts.get(fam, 0) + 1
    elapsed = time.perf_counter() - start
    ok = (all(v < GRAD_TOL for v in worst.values()) and min(counts.values()) >= N_INSTANCES
          and elapsed < 30)
    detail = (f"{len(worst)} families, >= {min(counts.values())} instances each, worst rel err "
              f"{max(worst.values()):.2e} (< {GRAD_TOL:g}), {elapsed:.1f} s (< 30 s)")
    assert record("gradient suite", ok, detail), worst


# ---------------------------------------------------------------------------
# reduction suite


def test_reduction_suite():
    rng = np.random.default_rng(7)
    ce_gap = 0.0
    for _ in range(500):
        z, c = rng.standard_normal(int(rng.integers(2, 9))) * 5, 0
        ce_gap = max(ce_gap, abs(bitempered_loss(z, c, BiTemperedConfig(1.0, 1.0))[0]
                                 - softmax_ce(z, c)[0]))
    margin_gap = 0.0
    for cos in np.linspace(-1, 1, 401):
        vals = [margin_logits(cos, t, MarginConfig(40.0, 0.0, v))
                for v in ("subtractive", "angular") for t in (True, False)]
        margin_gap = max(margin_gap, max(vals) - min(vals))
    affine_gap = 0.0
    cfg = CohortConfig(size=12, drop_top=2, use_top=6)
    for seed in range(20):
        r = np.random.default_rng(seed)
        emb = EmbeddingSet(tuple(f"e{i}" for i in range(6)), r.standard_normal((6, 4)))
        cohort = EmbeddingSet(tuple(f"c{i}" for i in range(12)), r.standard_normal((12, 4)))
        trials = TrialList(tuple((f"e{i}", f"e{j}") for i in range(6) for j in range(6) if i != j))
        raw = score_trials(emb, trials)
        a, b = r.uniform(0.1, 10), r.uniform(-5, 5)
        fn = lambda x, y, a=a, b=b: a * cosine_matrix(x, y) + b  # noqa: E731
        for norm in (zt_norm, s_norm):
            base = norm(raw, emb, emb, cohort, cfg).scores
            moved = norm(ScoreSet(trials, a * raw.scores + b), emb, emb, cohort, cfg, score_fn=fn)
            affine_gap = max(affine_gap, float(np.max(np.abs(moved.scores - base))))
    ok = ce_gap <= 1e-9 and margin_gap <= 1e-9 and affine_gap <= 1e-9
    detail = (f"bitempered(1,1) vs softmax_ce {ce_gap:.1e}, margin m=0 variant gap "
              f"{margin_gap:.1e}, zt/s affine gap {affine_gap:.1e} (all <= 1e-9)")
    assert record("reduction suite", ok, detail)


# ---------------------------------------------------------------------------
# oracle suite


def _brute_kmeans(x, k):
    import itertools
    best = math.inf
    for labels in itertools.product(range(k), repeat=len(x)):
        if len(set(labels)) != k:
            continue
        lab = np.array(labels)
        best = min(best, sum(((x[lab == j] - x[lab == j].mean(axis=0)) ** 2).sum()
                             for j in range(k)))
    return best


def test_oracle_suite():
    rng = np.random.default_rng(99)
    metric_mismatch = 0
    n_metric = 1000
    for _ in range(n_metric):
        n = int(rng.integers(2, 21))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        s = rng.integers(-4, 5, n) / 4.0 if rng.random() < 0.5 else rng.standard_normal(n)
        sl, yl = s.tolist(), y.tolist()
        thr, pm, pf = det_points(s, y)
        same = (list(zip(thr.tolist(), pm.tolist(), pf.tolist())) == det_oracle(sl, yl)
                and eer(s, y) == eer_oracle(sl, yl) and min_dcf(s, y) == min_dcf_oracle(sl, yl))
        metric_mismatch += not same

    r = np.random.default_rng(4)
    emb = EmbeddingSet(("a", "b", "c", "d"), r.standard_normal((4, 3)))
    cohort = EmbeddingSet(("c", "d", "k1", "k2", "k3", "k4"),
                          np.vstack([emb.data[2:], r.standard_normal((4, 3))]))
    trials = TrialList((("a", "b"), ("a", "c"), ("b", "d"), ("c", "d"), ("d", "a")))
    got = zt_norm(score_trials(emb, trials), emb, emb, cohort, CohortConfig(6, 0, 1, 3)).scores
    as_dict = lambda e: {u: e.data[i].tolist() for i, u in enumerate(e.ids)}  # noqa: E731
    ref = zt_oracle(trials.pairs, as_dict(emb), as_dict(cohort), 1, 3)
    zt_gap = float(np.max(np.abs(got - np.array(ref))))

    km_fail = 0
    n_km = 40
    for seed in range(n_km):
        r = np.random.default_rng(1000 + seed)
        n = int(r.integers(3, 9))
        k = int(r.integers(2, min(4, n - 1) + 1))
        x = r.standard_normal((n, 2))
        model = kmeans(x, k, ClusteringConfig(seed=seed, restarts=20))
        km_fail += not math.isclose(model.inertia, _brute_kmeans(x, k), rel_tol=1e-9, abs_tol=1e-12)
    ok = metric_mismatch == 0 and zt_gap <= 1e-9 and km_fail == 0
    detail = (f"det/eer/minDCF exact on {n_metric - metric_mismatch}/{n_metric} instances; "
              f"zt toy gap {zt_gap:.1e} (<= 1e-9); kmeans brute force {n_km - km_fail}/{n_km}")
    assert record("oracle suite", ok, detail)


# ---------------------------------------------------------------------------
# shipped pipeline: two CLI runs


@pytest.fixture(scope="module")
def shipped_runs(tmp_path_factory):
    runs = []
    for i in range(2):
        out = tmp_path_factory.mktemp(f"run{i}")
        start = time.perf_counter()
        code = cli_main(["pipeline", "--out", str(out)])
        runs.append((out, code, time.perf_counter() - start))
    return runs


def test_iteration_ordering(shipped_runs):
    out, code, elapsed = shipped_runs[0]
    report = ExperimentReport.from_tsv((out / "report.tsv").read_text())
    raw = report.find("baseline")[0].eer_raw
    it0 = report.find("stage1")[0].eer_raw
    it2 = {r.system: r.eer_raw for r in report.find("stage2", iteration=2)}
    ok = code == 0 and max(it2.values()) < it0 < raw and elapsed < 300
    detail = (f"raw {100 * raw:.2f}% > iter0 {100 * it0:.2f}% > iter2 "
              + ", ".join(f"{k} {100 * v:.2f}%" for k, v in sorted(it2.items()))
              + f"; {elapsed:.1f} s (< 300 s)")
    assert record("iteration ordering", ok, detail)


def test_fusion_and_normalization(shipped_runs):
    out, _, _ = shipped_runs[0]
    report = ExperimentReport.from_tsv((out / "report.tsv").read_text())
    members = report.find("fusion-member")
    fused = report.find("fusion")[0]
    best = min(r.eer_zt for r in members)
    worsen = {r.system: r.eer_zt - r.eer_raw for r in members}
    fusion_ok = fused.eer_zt <= best + 0.005
    norm_ok = all(v <= 0.005 for v in worsen.values())
    ok = len({r.system for r in members}) >= 3 and fusion_ok and norm_ok
    detail = (f"fused zt {100 * fused.eer_zt:.3f}% vs best member zt {100 * best:.3f}% + 0.5 "
              f"({'ok' if fusion_ok else 'violated'}); zt-norm change per member "
              + ", ".join(f"{k} {100 * v:+.3f}" for k, v in worsen.items())
              + f" points (limit +0.5: {'ok' if norm_ok else 'violated'})")
    assert record("fusion and normalization", ok, detail)


def test_determinism(shipped_runs):
    (a, ca, _), (b, cb, _) = shipped_runs
    names = ["report.txt", "report.tsv", "config.cfg"] + sorted(
        str(p.relative_to(a)) for p in (a / "checkpoints").iterdir())
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = ca == cb == 0 and not differ
    detail = f"{len(names) - len(differ)}/{len(names)} output files byte-identical across two runs"
    assert record("determinism", ok, detail), differ


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule():
    rng = np.random.default_rng(5)
    hold_end = 0.10 + 0.2333
    seg = (1 - hold_end) / 10
    edges = [0.0, 0.05, 0.1, hold_end, 1.0] + [hold_end + i * seg for i in range(1, 10)]
    points = edges + rng.random(1000 - len(edges)).tolist()
    bad = [p for p in points if lr_at(p, 0.0125) != lr_oracle(p, 0.0125)]
    ok = not bad and len(points) == 1000
    detail = f"{len(points) - len(bad)}/{len(points)} progress points equal the reference exactly"
    assert record("LR schedule", ok, detail), bad[:5]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
