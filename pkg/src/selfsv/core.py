"""Domain types and file I/O shared by the rest of the package.

File formats
------------
Embeddings are stored as a binary container plus a text sidecar of ids::

    offset  size  field
    0       8     magic  b"SVEMBF32"
    8       4     dim    uint32 little-endian, > 0
    12      8     count  uint64 little-endian
    20      4*dim*count  row-major float32 little-endian

The sidecar ``<path>.ids`` holds one utterance id per line, ``count`` lines.

Trials are TSV ``enroll<TAB>test[<TAB>label]`` where label is one of
``target``/``nontarget`` (``1``/``0`` also accepted).  Scores are TSV
``enroll<TAB>test<TAB>score`` with 17 significant digits; lines starting with
``#`` are comments.  Label sets are TSV ``utterance<TAB>label[<TAB>weight]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

MAGIC = b"SVEMBF32"
_HEADER = struct.Struct("<8sIQ")
SCORE_FORMAT = ".17g"

_LABEL_TOKENS = {"target": True, "1": True, "nontarget": False, "0": False}


class DataError(ValueError):
    """Base class for malformed or inconsistent input data."""


class MalformedHeaderError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class DuplicateIdError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class MissingIdError(DataError, KeyError):
    pass


class TrialFormatError(DataError):
    pass


def check_id(utt: str) -> str:
    if not isinstance(utt, str) or not utt:
        raise DataError(f"utterance id must be a non-empty string, got {utt!r}")
    if "\t" in utt or "\n" in utt or "\r" in utt:
        raise DataError(f"utterance id contains tab/newline: {utt!r}")
    return utt


def _check_unique(ids: Sequence[str]) -> None:
    seen = set()
    for utt in ids:
        if utt in seen:
            raise DuplicateIdError(f"duplicate utterance id {utt!r}")
        seen.add(utt)


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Utterance ids plus an ``N x dim`` matrix (held as float64, read-only)."""

    ids: tuple
    data: np.ndarray

    def __post_init__(self):
        ids = tuple(check_id(u) for u in self.ids)
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionMismatchError(f"data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise DimensionMismatchError("embedding dim must be positive")
        if data.shape[0] != len(ids):
            raise DimensionMismatchError(
                f"{len(ids)} ids but {data.shape[0]} rows")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("embedding data contains NaN or Inf")
        _check_unique(ids)
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingSet":
        return cls((), np.zeros((0, dim)))

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (self.ids == other.ids and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())

    def index(self) -> dict:
        return {u: i for i, u in enumerate(self.ids)}

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        """Gather rows for ``ids``; raises MissingIdError for unknown ids."""
        pos = self.index()
        try:
            idx = [pos[u] for u in ids]
        except KeyError as exc:
            raise MissingIdError(f"id {exc.args[0]!r} not in embedding set") from None
        return self.data[idx]

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        return EmbeddingSet(tuple(ids), self.rows(ids))


@dataclass(frozen=True)
class TrialList:
    pairs: tuple
    labels: Optional[tuple] = None

    def __post_init__(self):
        pairs = tuple((check_id(e), check_id(t)) for e, t in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        if self.labels is not None:
            labels = tuple(bool(x) for x in self.labels)
            if len(labels) != len(pairs):
                raise DataError(f"{len(labels)} labels for {len(pairs)} trials")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def enroll_ids(self) -> list:
        return list(dict.fromkeys(e for e, _ in self.pairs))

    @property
    def test_ids(self) -> list:
        return list(dict.fromkeys(t for _, t in self.pairs))

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("trial list has no labels")
        return np.array(self.labels, dtype=bool)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    trials: TrialList
    scores: np.ndarray

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64).reshape(-1)
        if len(scores) != len(self.trials):
            raise DimensionMismatchError(
                f"{len(scores)} scores for {len(self.trials)} trials")
        if not np.all(np.isfinite(scores)):
            raise NonFiniteError("scores contain NaN or Inf")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScoreSet):
            return NotImplemented
        return (self.trials.pairs == other.trials.pairs
                and self.scores.tobytes() == other.scores.tobytes())


@dataclass(frozen=True, eq=False)
class LabelSet:
    """Per-utterance integer labels, optional per-utterance weights in [0, 1]."""

    ids: tuple
    labels: np.ndarray
    weights: Optional[np.ndarray] = None
    n_clusters: Optional[int] = field(default=None)

    def __post_init__(self):
        ids = tuple(check_id(u) for u in self.ids)
        _check_unique(ids)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(labels) != len(ids):
            raise DimensionMismatchError(f"{len(labels)} labels for {len(ids)} ids")
        if len(labels) and labels.min() < 0:
            raise DataError("labels must be non-negative")
        n = self.n_clusters
        if n is None:
            n = int(labels.max()) + 1 if len(labels) else 0
        elif len(labels) and labels.max() >= n:
            raise DataError(f"label {labels.max()} >= declared cluster count {n}")
        labels.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_clusters", int(n))
        if self.weights is not None:
            w = np.array(self.weights, dtype=np.float64).reshape(-1)
            if len(w) != len(ids):
                raise DimensionMismatchError(f"{len(w)} weights for {len(ids)} ids")
            if not np.all((w >= 0) & (w <= 1)):
                raise DataError("weights must lie in [0, 1]")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelSet):
            return NotImplemented
        same_w = (self.weights is None and other.weights is None) or (
            self.weights is not None and other.weights is not None
            and self.weights.tobytes() == other.weights.tobytes())
        return (self.ids == other.ids and self.n_clusters == other.n_clusters
                and np.array_equal(self.labels, other.labels) and same_w)

    def with_weights(self, weights) -> "LabelSet":
        return LabelSet(self.ids, self.labels, weights, self.n_clusters)

    def aligned_to(self, ids: Sequence[str]) -> "LabelSet":
        """Reorder to ``ids`` (which must be the same id set)."""
        pos = {u: i for i, u in enumerate(self.ids)}
        if len(ids) != len(self.ids) or any(u not in pos for u in ids):
            raise MissingIdError("label set ids do not match")
        idx = np.array([pos[u] for u in ids], dtype=np.int64)
        w = None if self.weights is None else self.weights[idx]
        return LabelSet(tuple(ids), self.labels[idx], w, self.n_clusters)


# ---------------------------------------------------------------------------
# embeddings


def ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


def pack_matrix(data: np.ndarray) -> bytes:
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[1] < 1:
        raise DimensionMismatchError(f"cannot pack array of shape {data.shape}")
    header = _HEADER.pack(MAGIC, data.shape[1], data.shape[0])
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


def unpack_matrix(buf: bytes, offset: int = 0):
    """Decode one container starting at ``offset``; returns (matrix, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise MalformedHeaderError("truncated header")
    magic, dim, count = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}")
    if dim < 1:
        raise MalformedHeaderError("dim must be positive")
    start = offset + _HEADER.size
    nbytes = 4 * dim * count
    if len(buf) - start < nbytes:
        raise DimensionMismatchError(
            f"payload holds {len(buf) - start} bytes, header promises {nbytes}")
    data = np.frombuffer(buf, dtype="<f4", count=dim * count, offset=start)
    return data.reshape(count, dim).astype(np.float64), start + nbytes


def write_embeddings(emb: EmbeddingSet, path) -> None:
    path = Path(path)
    path.write_bytes(pack_matrix(emb.data))
    with open(ids_path(path), "w", encoding="utf-8", newline="\n") as f:
        for utt in emb.ids:
            f.write(utt + "\n")


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    data, end = unpack_matrix(path.read_bytes())
    if end != path.stat().st_size:
        raise DimensionMismatchError("trailing bytes after embedding payload")
    with open(ids_path(path), encoding="utf-8", newline="") as f:
        ids = [line.rstrip("\n") for line in f]
    if len(ids) != data.shape[0]:
        raise DimensionMismatchError(
            f"{len(ids)} ids in sidecar for {data.shape[0]} rows")
    return EmbeddingSet(tuple(ids), data)


# ---------------------------------------------------------------------------
# trials / scores / labels


def _tsv_lines(path):
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def parse_label(token: str) -> bool:
    try:
        return _LABEL_TOKENS[token]
    except KeyError:
        raise TrialFormatError(f"unknown label token {token!r}") from None


def read_trials(path) -> TrialList:
    pairs, labels = [], []
    ncols = None
    for lineno, cols in _tsv_lines(path):
        if len(cols) not in (2, 3):
            raise TrialFormatError(f"line {lineno}: expected 2 or 3 columns, got {len(cols)}")
        if ncols is None:
            ncols = len(cols)
        elif len(cols) != ncols:
            raise TrialFormatError(f"line {lineno}: mixed labeled and unlabeled trials")
        pairs.append((cols[0], cols[1]))
        if ncols == 3:
            try:
                labels.append(parse_label(cols[2]))
            except TrialFormatError as exc:
                raise TrialFormatError(f"line {lineno}: {exc}") from None
    return TrialList(tuple(pairs), tuple(labels) if ncols == 3 else None)


def write_trials(trials: TrialList, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, (e, t) in enumerate(trials.pairs):
            if trials.labels is None:
                f.write(f"{e}\t{t}\n")
            else:
                f.write(f"{e}\t{t}\t{'target' if trials.labels[i] else 'nontarget'}\n")


def write_scores(scores: ScoreSet, path, header: Optional[str] = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        for (e, t), s in zip(scores.trials.pairs, scores.scores):
            f.write(f"{e}\t{t}\t{format(float(s), SCORE_FORMAT)}\n")


def read_scores(path, trials: Optional[TrialList] = None) -> ScoreSet:
    """Read a score file.  If ``trials`` is given, pairs must match it in order
    and its labels are attached."""
    pairs, values = [], []
    for lineno, cols in _tsv_lines(path):
        if len(cols) != 3:
            raise TrialFormatError(f"line {lineno}: expected 3 columns, got {len(cols)}")
        try:
            value = float(cols[2])
        except ValueError:
            raise TrialFormatError(f"line {lineno}: bad score {cols[2]!r}") from None
        if not math.isfinite(value):
            raise NonFiniteError(f"line {lineno}: non-finite score")
        pairs.append((cols[0], cols[1]))
        values.append(value)
    if trials is None:
        trials = TrialList(tuple(pairs))
    elif tuple(pairs) != trials.pairs:
        raise TrialFormatError("score file pairs do not match the trial list")
    return ScoreSet(trials, np.array(values))


def write_labels(labels: LabelSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, utt in enumerate(labels.ids):
            if labels.weights is None:
                f.write(f"{utt}\t{labels.labels[i]}\n")
            else:
                f.write(f"{utt}\t{labels.labels[i]}\t{format(float(labels.weights[i]), SCORE_FORMAT)}\n")


def read_labels(path, n_clusters: Optional[int] = None) -> LabelSet:
    ids, labels, weights = [], [], []
    ncols = None
    for lineno, cols in _tsv_lines(path):
        if len(cols) not in (2, 3) or (ncols is not None and len(cols) != ncols):
            raise TrialFormatError(f"line {lineno}: bad column count {len(cols)}")
        ncols = len(cols)
        ids.append(cols[0])
        try:
            labels.append(int(cols[1]))
            if ncols == 3:
                weights.append(float(cols[2]))
        except ValueError:
            raise TrialFormatError(f"line {lineno}: cannot parse {cols[1:]!r}") from None
    return LabelSet(tuple(ids), np.array(labels, dtype=np.int64),
                    np.array(weights) if ncols == 3 else None, n_clusters)
