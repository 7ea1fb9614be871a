import numpy as np
import pytest

from selfsv.cli import EXIT_DATA, EXIT_USAGE, main
from selfsv.core import (EmbeddingSet, ScoreSet, TrialList, read_embeddings, read_labels,
                         read_scores, write_embeddings, write_scores, write_trials)
from selfsv.trainer import identity_extractor, save_extractor

CONFIG = """seed = 2
n_speakers = 6
utts_per_speaker = 4
feature_dim = 4
n_frames = 12
n_val_speakers = 3
val_utts_per_speaker = 3
n_trials = 20
emb_dim = 4
chunk_frames = 6
stage1_epochs = 1
stage1_batch = 8
queue_capacity = 16
epochs = 1
batch_size = 8
n_pseudo = 4
n_copies = 1
n_iterations = 1
cohort_size = 20
drop_top = 1
use_top = 10
fusion = iter1A iter1B
"""


@pytest.fixture
def data_dir(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(CONFIG)
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    return tmp_path


class TestCli:
    def test_score_norm_eval_chain(self, data_dir, capsys):
        d = data_dir / "d"
        ckpt = data_dir / "id.ckpt"
        save_extractor(identity_extractor(8), ckpt)
        assert main(["embed", "--model", str(ckpt), "--input", str(d / "val.emb"),
                     "--output", str(data_dir / "v.emb")]) == 0
        assert read_embeddings(data_dir / "v.emb") == read_embeddings(d / "val.emb")
        raw = data_dir / "raw.tsv"
        assert main(["score", "--embeddings", str(d / "val.emb"), "--trials",
                     str(d / "trials.tsv"), "--output", str(raw)]) == 0
        for method in ("zt", "s"):
            out = data_dir / f"{method}.tsv"
            assert main(["norm", "--method", method, "--scores", str(raw), "--trials",
                         str(d / "trials.tsv"), "--enroll", str(d / "val.emb"), "--cohort",
                         str(d / "train.emb"), "--cohort-size", "20", "--drop-top", "1",
                         "--use-top", "10", "--seed", "4", "--output", str(out)]) == 0
            header = out.read_text().splitlines()[0]
            assert header.startswith("# ") and "cohort_size=20" in header and "cohort_seed=4" in header
        fused = data_dir / "f.tsv"
        assert main(["fuse", str(raw), str(raw), "--output", str(fused)]) == 0
        np.testing.assert_array_equal(read_scores(fused).scores, read_scores(raw).scores)
        capsys.readouterr()
        det = data_dir / "det.tsv"
        assert main(["eval", "--scores", str(raw), "--trials", str(d / "trials.tsv"),
                     "--det", str(det)]) == 0
        line = capsys.readouterr().out.strip()
        assert line.startswith("EER ") and " minDCF " in line
        assert det.read_text().startswith("threshold\tp_miss\tp_fa\n")

    def test_cluster(self, data_dir):
        d = data_dir / "d"
        out = data_dir / "l.tsv"
        assert main(["cluster", "--input", str(d / "train.emb"), "--n-pseudo", "3",
                     "--seed", "1", "--output", str(out)]) == 0
        assert read_labels(out).labels.max() == 2

    def test_pipeline_outputs(self, data_dir):
        out = data_dir / "run"
        assert main(["pipeline", "--config", str(data_dir / "exp.cfg"), "--out", str(out)]) == 0
        for name in ("report.txt", "report.tsv", "config.cfg", "checkpoints/iter1A.ckpt"):
            assert (out / name).exists()
        # checkpoints embed the synth features of the same config
        assert main(["embed", "--model", str(out / "checkpoints/iter1A.ckpt"), "--input",
                     str(data_dir / "d/val.emb"), "--output", str(data_dir / "e.emb")]) == 0

    def test_usage_errors(self, capsys):
        assert main(["pipeline"]) == EXIT_USAGE
        with pytest.raises(SystemExit) as info:
            main(["eval"])
        assert info.value.code == EXIT_USAGE
        with pytest.raises(SystemExit) as info:
            main(["nosuch"])
        assert info.value.code == EXIT_USAGE

    def test_data_errors(self, tmp_path, capsys):
        assert main(["eval", "--scores", str(tmp_path / "missing.tsv"), "--trials",
                     str(tmp_path / "missing.tsv")]) == EXIT_DATA
        trials = tmp_path / "t.tsv"
        trials.write_text("a\tb\tmaybe\n")
        assert main(["eval", "--scores", str(trials), "--trials", str(trials)]) == EXIT_DATA
        unlabeled = tmp_path / "u.tsv"
        write_trials(TrialList((("a", "b"),)), unlabeled)
        scores = tmp_path / "s.tsv"
        write_scores(ScoreSet(TrialList((("a", "b"),)), np.array([0.1])), scores)
        assert main(["eval", "--scores", str(scores), "--trials", str(unlabeled)]) == EXIT_DATA
        bad_cfg = tmp_path / "bad.cfg"
        bad_cfg.write_text("nonsense = 1\n")
        assert main(["synth", "--config", str(bad_cfg), "--out", str(tmp_path / "x")]) == EXIT_DATA
        emb = tmp_path / "e.emb"
        write_embeddings(EmbeddingSet(("a",), np.ones((1, 3))), emb)
        ckpt = tmp_path / "m.ckpt"
        save_extractor(identity_extractor(2), ckpt)
        assert main(["embed", "--model", str(ckpt), "--input", str(emb), "--output",
                     str(tmp_path / "o.emb")]) == EXIT_DATA

    def test_seed_everywhere(self):
        from selfsv.cli import build_parser
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices
        for name, sp in sub.items():
            assert any("--seed" in a.option_strings for a in sp._actions), name
