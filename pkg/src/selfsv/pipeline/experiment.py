"""Stage 1 (momentum contrast), stage 2 (iterative pseudo-labeling with two
networks exchanging labels) and score fusion on synthetic speakers."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from ..clustering import ClusteringConfig, cluster_agreement_weights, cross_label_exchange
from ..core import EmbeddingSet, ScoreSet
from ..embedops import MvnStats, compute_mvn_stats, global_mvn, stats_pool
from ..losses import BiTemperedConfig, ContrastiveConfig, HeadConfig, MarginConfig
from ..metrics import eer, min_dcf
from ..scoring import CohortConfig, cohort_select, fuse, score_trials, zt_norm
from ..trainer import (ClassifierTrainConfig, ContrastiveTrainConfig, ExtractorParams, LrSchedule,
                       SgdConfig, embed, init_extractor, train_classifier, train_contrastive)
from .config import IterationConfig, PipelineConfig, _parse_system_name
from .report import ExperimentReport, ReportRow
from .synth import SynthData, augment, synth_generate


def derive_seed(seed: int, *tags) -> int:
    """Stable 32-bit sub-seed for a named pipeline step."""
    key = ":".join(str(t) for t in (seed,) + tags).encode()
    return zlib.crc32(key)


@dataclass(frozen=True, eq=False)
class Prepared:
    """Synthetic data plus the fixed front-end: stats pooling followed by
    global mean/variance normalization with statistics from the full
    training utterances."""

    data: SynthData
    mvn: MvnStats
    train_feats: EmbeddingSet
    val_feats: EmbeddingSet
    copies: np.ndarray  # (n_copies + 1) x N x T x F, index 0 = original

    def front_end(self, frames) -> np.ndarray:
        return global_mvn(stats_pool(frames), self.mvn)


def prepare(data: SynthData, n_copies: int = 3, seed: int = 0) -> Prepared:
    pooled = stats_pool(data.train_frames)
    mvn = compute_mvn_stats(pooled)
    train = EmbeddingSet(data.train_ids, global_mvn(pooled, mvn))
    val = EmbeddingSet(data.val_ids, global_mvn(stats_pool(data.val_frames), mvn))
    # pre-augmented copies for network B, each utterance with a fixed non-identity channel
    rng = np.random.default_rng(derive_seed(seed, "copies"))
    cfg = data.cfg
    copies = [data.train_frames]
    for _ in range(n_copies):
        ch = rng.integers(1, cfg.n_channels, size=len(data.train_ids)) if cfg.n_channels > 1 \
            else np.zeros(len(data.train_ids), dtype=np.int64)
        copies.append(augment(data.train_frames, ch, cfg, rng))
    return Prepared(data, mvn, train, val, np.stack(copies))


def _as_prepared(data: Union[SynthData, Prepared], cfg: PipelineConfig) -> Prepared:
    return data if isinstance(data, Prepared) else prepare(data, cfg.n_copies, cfg.seed)


def _chunks(frames, idx, length, rng):
    T = frames.shape[-2]
    length = max(1, min(length, T))
    starts = rng.integers(0, T - length + 1, size=len(idx))
    return frames[idx[:, None], starts[:, None] + np.arange(length)]


def on_the_fly_sampler(prep: Prepared, chunk_frames: int):
    """Random chunk, then a fresh random channel (channel 0 included)."""
    cfg = prep.data.cfg

    def sample(idx, rng):
        chunks = _chunks(prep.data.train_frames, idx, chunk_frames, rng)
        channels = rng.integers(cfg.n_channels, size=len(idx))
        return prep.front_end(augment(chunks, channels, cfg, rng))
    return sample


def preaugmented_sampler(prep: Prepared, chunk_frames: int):
    """Random chunk of the original or one of the fixed augmented copies."""

    def sample(idx, rng):
        copy = rng.integers(prep.copies.shape[0], size=len(idx))
        T = prep.copies.shape[-2]
        length = max(1, min(chunk_frames, T))
        starts = rng.integers(0, T - length + 1, size=len(idx))
        frames = prep.copies[copy[:, None], idx[:, None], starts[:, None] + np.arange(length)]
        return prep.front_end(frames)
    return sample


@dataclass(frozen=True, eq=False)
class Evaluation:
    raw: ScoreSet
    zt: ScoreSet
    eer_raw: float
    eer_zt: float
    mindcf_raw: float
    mindcf_zt: float


def _evaluate_embeddings(train_emb: EmbeddingSet, val_emb: EmbeddingSet, prep: Prepared,
                         cohort_cfg: CohortConfig) -> Evaluation:
    trials = prep.data.trials
    raw = score_trials(val_emb, trials)
    cohort = cohort_select(train_emb, cohort_cfg)
    zt = zt_norm(raw, val_emb, val_emb, cohort, cohort_cfg)
    return Evaluation(raw, zt, eer(raw), eer(zt), min_dcf(raw), min_dcf(zt))


def evaluate(params: ExtractorParams, prep: Prepared, cohort_cfg: CohortConfig) -> Evaluation:
    return _evaluate_embeddings(embed(params, prep.train_feats), embed(params, prep.val_feats),
                                prep, cohort_cfg)


def evaluate_baseline(prep: Prepared, cohort_cfg: CohortConfig) -> Evaluation:
    """Cosine scoring directly on the normalized pooled features."""
    return _evaluate_embeddings(prep.train_feats, prep.val_feats, prep, cohort_cfg)


def _row(kind, system, iteration, network, ev: Evaluation) -> ReportRow:
    return ReportRow(kind, system, iteration, network, ev.eer_raw, ev.eer_zt, ev.mindcf_raw,
                     ev.mindcf_zt)


def stage1_train_config(cfg: PipelineConfig) -> ContrastiveTrainConfig:
    s1 = cfg.stage1
    return ContrastiveTrainConfig(
        epochs=s1.stage1_epochs, batch_size=s1.stage1_batch,
        sgd=SgdConfig(nominal_lr=s1.stage1_lr), schedule=LrSchedule(),
        contrastive=ContrastiveConfig(s1.contrastive_scale, s1.queue_capacity),
        moco_momentum=s1.moco_momentum, emb_dim=s1.emb_dim, hidden_dim=s1.hidden_dim,
        seed=derive_seed(cfg.seed, "stage1", "train"))


def run_stage1(data: Union[SynthData, Prepared], cfg: PipelineConfig,
               report: ExperimentReport = None) -> ExtractorParams:
    """Iteration 0: contrastive training with two augmented views per
    utterance; appends the stage-1 evaluation to ``report`` if given."""
    prep = _as_prepared(data, cfg)
    tcfg = stage1_train_config(cfg)
    init = init_extractor(prep.train_feats.dim, tcfg.emb_dim, tcfg.hidden_dim,
                          seed=derive_seed(cfg.seed, "stage1", "init"))
    if tcfg.epochs == 0:
        params = init
    else:
        params = train_contrastive(prep.train_feats, on_the_fly_sampler(prep, cfg.stage1.chunk_frames),
                                   tcfg, init=init)
    if report is not None:
        report.add(_row("stage1", "iter0", 0, "", evaluate(params, prep, cfg.cohort)))
    return params


def stage2_train_config(icfg: IterationConfig, cfg: PipelineConfig, seed: int) -> ClassifierTrainConfig:
    head = HeadConfig(icfg.loss, MarginConfig(icfg.scale, icfg.margin, icfg.margin_variant),
                      BiTemperedConfig(icfg.t1, icfg.t2))
    return ClassifierTrainConfig(epochs=icfg.epochs, batch_size=icfg.batch_size,
                                 sgd=SgdConfig(nominal_lr=icfg.nominal_lr), schedule=LrSchedule(),
                                 head=head, emb_dim=cfg.stage1.emb_dim,
                                 hidden_dim=cfg.stage1.hidden_dim, seed=seed)


def initial_params(previous: ExtractorParams, icfg: IterationConfig, cfg: PipelineConfig,
                   iteration: int, network: str) -> ExtractorParams:
    """Warm start from the previous iteration, or a fresh draw ("from scratch")."""
    if icfg.init_from_previous:
        return previous
    return init_extractor(previous.input_dim, previous.emb_dim, previous.hidden_dim,
                          seed=derive_seed(cfg.seed, "stage2", iteration, network, "init"))


def run_stage2(stage1: ExtractorParams, data: Union[SynthData, Prepared], cfg: PipelineConfig,
               report: ExperimentReport = None):
    """Iterative clustering.  Returns ``(report, extractors)`` where
    ``extractors`` maps ``iter<N><A|B>`` to trained parameters (the final A
    and B are ``iter<n_iterations>A`` / ``...B``)."""
    prep = _as_prepared(data, cfg)
    report = report if report is not None else ExperimentReport()
    feats = prep.train_feats
    nets = {"A": stage1, "B": stage1}
    systems: Dict[str, ExtractorParams] = {}
    for it in range(1, cfg.n_iterations + 1):
        icfg = cfg.for_iteration(it)
        emb_a = embed(nets["A"], feats)
        emb_b = embed(nets["B"], feats)
        ccfg = ClusteringConfig(n_pseudo=cfg.n_pseudo, kmeans_k=cfg.kmeans_k,
                                seed=derive_seed(cfg.seed, "cluster", it))
        for_b, for_a = cross_label_exchange(emb_a, emb_b, ccfg, concat=icfg.concat_labels)
        if icfg.agreement_downweight < 1.0:
            w = cluster_agreement_weights(for_b, for_a, icfg.agreement_downweight)
            for_b = for_b.with_weights(w)
            for_a = for_a.aligned_to(for_b.ids).with_weights(w)
        chunk = int(round(cfg.stage1.chunk_frames * icfg.chunk_scale))
        samplers = {"A": on_the_fly_sampler(prep, chunk), "B": preaugmented_sampler(prep, chunk)}
        labels = {"A": for_a, "B": for_b}
        new = {}
        for net in ("A", "B"):
            tcfg = stage2_train_config(icfg, cfg, derive_seed(cfg.seed, "stage2", it, net))
            init = initial_params(nets[net], icfg, cfg, it, net)
            new[net] = train_classifier(feats, labels[net], tcfg, init=init, sampler=samplers[net])
            name = f"iter{it}{net}"
            systems[name] = new[net]
            report.add(_row("stage2", name, it, net, evaluate(new[net], prep, cfg.cohort)))
        nets = new
    return report, systems


def run_fusion(systems: Sequence[Tuple[str, ExtractorParams]], data: Union[SynthData, Prepared],
               cohort_cfg: CohortConfig, cfg: PipelineConfig = None,
               report: ExperimentReport = None) -> ExperimentReport:
    """Score every system raw and ZT-normalized, then average the normalized
    (and, for reference, the raw) scores across systems."""
    if not systems:
        raise ValueError("fusion needs at least one system")
    prep = data if isinstance(data, Prepared) else prepare(data, *(
        (cfg.n_copies, cfg.seed) if cfg is not None else ()))
    report = report if report is not None else ExperimentReport()
    evals = []
    for name, params in systems:
        ev = evaluate(params, prep, cohort_cfg)
        evals.append(ev)
        report.add(_row("fusion-member", name, 0, "", ev))
    raw = fuse([e.raw for e in evals])
    zt = fuse([e.zt for e in evals])
    report.add(ReportRow("fusion", "+".join(n for n, _ in systems), 0, "", eer(raw), eer(zt),
                         min_dcf(raw), min_dcf(zt)))
    return report


def run_pipeline(cfg: PipelineConfig):
    """Generate data, run both stages and the configured fusion.

    Returns ``(report, extractors)``; ``extractors`` holds ``iter0`` and every
    stage-2 system.
    """
    report = ExperimentReport()
    report.meta.append(("seed", str(cfg.seed)))
    report.meta.append(("stage1_seed", str(derive_seed(cfg.seed, "stage1", "train"))))
    for it in range(1, cfg.n_iterations + 1):
        report.meta.append((f"cluster_seed_iter{it}", str(derive_seed(cfg.seed, "cluster", it))))
    report.meta.append(("cohort", cfg.cohort.describe()))
    for line in cfg.to_text().splitlines():
        key, _, value = line.partition(" = ")
        report.meta.append((f"config.{key}" if value or not key.startswith("[") else key, value))
    data = synth_generate(cfg.synth)
    prep = prepare(data, cfg.n_copies, cfg.seed)
    report.add(_row("baseline", "raw", -1, "", evaluate_baseline(prep, cfg.cohort)))
    stage1 = run_stage1(prep, cfg, report)
    _, systems = run_stage2(stage1, prep, cfg, report)
    extractors = {"iter0": stage1, **systems}
    if cfg.fusion:
        run_fusion([(name, systems[name]) for name in cfg.fusion], prep, cfg.cohort, report=report)
    return report, extractors
