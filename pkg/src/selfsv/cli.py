"""Command-line interface: ``selfsv <subcommand> ...``.

Exit codes: 0 on success, 1 on usage errors, 2 on data or file errors.
Every subcommand accepts ``--seed``; the ones without randomness ignore it.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import ClusteringConfig, generate_pseudo_labels
from .core import (DataError, EmbeddingSet, LabelSet, read_embeddings, read_scores, read_trials,
                   write_embeddings, write_labels, write_scores, write_trials)
from .embedops import compute_mvn_stats, global_mvn, stats_pool
from .metrics import det_points, eer, min_dcf
from .pipeline.config import ConfigError, default_config, default_config_text, load_config
from .pipeline.experiment import run_pipeline
from .pipeline.synth import synth_generate
from .scoring import CohortConfig, cohort_select, fuse, s_norm, score_trials, zt_norm
from .trainer import embed, load_extractor, save_extractor

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pipeline_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_synth(args):
    """Front-end features (pooled, mean/variance normalized) of the synthetic
    train and validation sets, the true train labels and the trial list."""
    cfg = _pipeline_config(args)
    data = synth_generate(cfg.synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pooled = stats_pool(data.train_frames)
    mvn = compute_mvn_stats(pooled)
    write_embeddings(EmbeddingSet(data.train_ids, global_mvn(pooled, mvn)), out / "train.emb")
    write_embeddings(EmbeddingSet(data.val_ids, global_mvn(stats_pool(data.val_frames), mvn)),
                     out / "val.emb")
    write_labels(data.train_labels, out / "train_labels.tsv")
    write_trials(data.trials, out / "trials.tsv")
    print(f"wrote {len(data.train_ids)} train / {len(data.val_ids)} validation utterances "
          f"and {len(data.trials)} trials to {out}")


def cmd_embed(args):
    params, _ = load_extractor(args.model)
    feats = read_embeddings(args.input)
    if feats.dim != params.input_dim:
        raise DataError(f"features have dim {feats.dim}, extractor expects {params.input_dim}")
    write_embeddings(embed(params, feats), args.output)


def cmd_cluster(args):
    emb = read_embeddings(args.input)
    cfg = ClusteringConfig(n_pseudo=args.n_pseudo, kmeans_k=args.kmeans_k,
                           seed=args.seed if args.seed is not None else 0)
    if len(emb) < cfg.n_pseudo:
        raise DataError(f"{len(emb)} utterances cannot form {cfg.n_pseudo} clusters")
    write_labels(generate_pseudo_labels(emb, cfg), args.output)


def cmd_score(args):
    emb = read_embeddings(args.embeddings)
    trials = read_trials(args.trials)
    write_scores(score_trials(emb, trials), args.output)


def cmd_norm(args):
    trials = read_trials(args.trials)
    raw = read_scores(args.scores, trials)
    enroll = read_embeddings(args.enroll)
    test = read_embeddings(args.test) if args.test else enroll
    pool = read_embeddings(args.cohort)
    size = args.cohort_size if args.cohort_size is not None else len(pool)
    cfg = CohortConfig(size=size, seed=args.seed if args.seed is not None else 0,
                       drop_top=args.drop_top, use_top=args.use_top)
    cohort = cohort_select(pool, cfg)
    norm = zt_norm if args.method == "zt" else s_norm
    header = f"{args.method}-norm {cfg.describe()}"
    write_scores(norm(raw, enroll, test, cohort, cfg), args.output, header=header)


def cmd_fuse(args):
    sets = [read_scores(p) for p in args.scores]
    write_scores(fuse(sets), args.output, header=f"fusion of {len(sets)} systems by mean")


def cmd_eval(args):
    trials = read_trials(args.trials)
    if trials.labels is None:
        raise DataError("eval needs a labeled trial list")
    scores = read_scores(args.scores, trials)
    print(f"EER {100 * eer(scores):.4f} minDCF {min_dcf(scores):.4f}")
    if args.det:
        thresholds, p_miss, p_fa = det_points(scores)
        with open(args.det, "w", encoding="utf-8", newline="\n") as f:
            f.write("threshold\tp_miss\tp_fa\n")
            for t, pm, pf in zip(thresholds, p_miss, p_fa):
                f.write(f"{t!r}\t{pm!r}\t{pf!r}\n")


def cmd_pipeline(args):
    if args.print_default:
        sys.stdout.write(default_config_text())
        return
    if not args.out:
        raise UsageError("--out is required")
    cfg = _pipeline_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report, extractors = run_pipeline(cfg)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    if not args.no_checkpoints:
        ckpt = out / "checkpoints"
        ckpt.mkdir(exist_ok=True)
        data = synth_generate(cfg.synth)
        mvn = compute_mvn_stats(stats_pool(data.train_frames))
        for name, params in extractors.items():
            save_extractor(params, ckpt / f"{name}.ckpt",
                           extra={"mvn_mean": mvn.mean, "mvn_std": mvn.std})
    sys.stdout.write(report.to_text())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="selfsv", description="Self-supervised speaker verification backend.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="random seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic speaker data")
    sp.add_argument("--config", help="experiment config (default: the shipped one)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("embed", cmd_embed, "extract embeddings from front-end features")
    sp.add_argument("--model", required=True, help="extractor checkpoint")
    sp.add_argument("--input", required=True, help="feature file")
    sp.add_argument("--output", required=True, help="embedding file to write")

    sp = add("cluster", cmd_cluster, "pseudo-labels by k-means followed by AHC")
    sp.add_argument("--input", required=True, help="embedding file")
    sp.add_argument("--n-pseudo", type=int, required=True, help="number of pseudo-speakers")
    sp.add_argument("--kmeans-k", type=int, default=None, help="k-means clusters (default 3x)")
    sp.add_argument("--output", required=True, help="label TSV to write")

    sp = add("score", cmd_score, "cosine-score a trial list")
    sp.add_argument("--embeddings", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--output", required=True)

    sp = add("norm", cmd_norm, "adaptive ZT-norm or S-norm of a score file")
    sp.add_argument("--method", choices=("zt", "s"), default="zt")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--enroll", required=True, help="embeddings of enrollment utterances")
    sp.add_argument("--test", help="embeddings of test utterances (default: --enroll)")
    sp.add_argument("--cohort", required=True, help="embeddings to draw the cohort from")
    sp.add_argument("--cohort-size", type=int, default=None, help="default: all of --cohort")
    sp.add_argument("--drop-top", type=int, default=10)
    sp.add_argument("--use-top", type=int, default=200)
    sp.add_argument("--output", required=True)

    sp = add("fuse", cmd_fuse, "average score files over the same trials")
    sp.add_argument("scores", nargs="+", help="score files")
    sp.add_argument("--output", required=True)

    sp = add("eval", cmd_eval, "EER and minDCF of a score file")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials", required=True, help="labeled trial list")
    sp.add_argument("--det", help="write DET points as TSV")

    sp = add("pipeline", cmd_pipeline, "run the full synthetic experiment")
    sp.add_argument("--config", help="experiment config (default: the shipped one)")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--no-checkpoints", action="store_true", help="skip writing extractors")
    sp.add_argument("--print-default", action="store_true", help="print the shipped config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"selfsv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ConfigError, OSError) as exc:
        print(f"selfsv: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
