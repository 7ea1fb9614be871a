"""Toy embedding extractor, SGD with Nesterov momentum, the warmup/hold/halving
learning-rate schedule, and the momentum-contrast (MoCo) training loop.

The extractor is either affine (``hidden_dim == 0``) or one tanh hidden layer::

    y = W x + b                          (linear)
    y = W2 tanh(W1 x + b1) + b2          (hidden)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import (DataError, DimensionMismatchError, EmbeddingSet, LabelSet, MalformedHeaderError,
                   NonFiniteError, pack_matrix, unpack_matrix)
from .losses import ContrastiveConfig, HeadConfig, classification_loss, moco_infonce_batch


# ---------------------------------------------------------------------------
# extractor


@dataclass(frozen=True, eq=False)
class ExtractorParams:
    blocks: dict
    input_dim: int
    hidden_dim: int = 0
    emb_dim: int = 256

    def __post_init__(self):
        blocks = {k: np.array(v, dtype=np.float64) for k, v in self.blocks.items()}
        expected = _block_shapes(self.input_dim, self.hidden_dim, self.emb_dim)
        if set(blocks) != set(expected):
            raise DimensionMismatchError(f"blocks {sorted(blocks)} != {sorted(expected)}")
        for name, shape in expected.items():
            if blocks[name].shape != shape:
                raise DimensionMismatchError(f"{name}: {blocks[name].shape} != {shape}")
            if not np.all(np.isfinite(blocks[name])):
                raise NonFiniteError(f"{name} has non-finite entries")
        object.__setattr__(self, "blocks", blocks)

    def __eq__(self, other):
        if not isinstance(other, ExtractorParams):
            return NotImplemented
        return (self.shape_key == other.shape_key and all(
            np.array_equal(self.blocks[k], other.blocks[k]) for k in self.blocks))

    @property
    def shape_key(self):
        return (self.input_dim, self.hidden_dim, self.emb_dim)

    def with_blocks(self, blocks: dict) -> "ExtractorParams":
        return ExtractorParams(blocks, self.input_dim, self.hidden_dim, self.emb_dim)


def _block_shapes(input_dim, hidden_dim, emb_dim):
    if input_dim < 1 or emb_dim < 1 or hidden_dim < 0:
        raise DimensionMismatchError("extractor dims must be positive")
    if hidden_dim == 0:
        return {"W": (emb_dim, input_dim), "b": (emb_dim,)}
    return {"W1": (hidden_dim, input_dim), "b1": (hidden_dim,),
            "W2": (emb_dim, hidden_dim), "b2": (emb_dim,)}


def init_extractor(input_dim: int, emb_dim: int = 256, hidden_dim: int = 0,
                   seed: int = 0) -> ExtractorParams:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = {}
    for name, shape in _block_shapes(input_dim, hidden_dim, emb_dim).items():
        if len(shape) == 2:
            blocks[name] = rng.standard_normal(shape) / math.sqrt(shape[1])
        else:
            blocks[name] = np.zeros(shape)
    return ExtractorParams(blocks, input_dim, hidden_dim, emb_dim)


def identity_extractor(dim: int) -> ExtractorParams:
    return ExtractorParams({"W": np.eye(dim), "b": np.zeros(dim)}, dim, 0, dim)


def _as_batch(params, features):
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.input_dim:
        raise DimensionMismatchError(f"input dim {x.shape[1]} != {params.input_dim}")
    return x, single


def forward(params: ExtractorParams, features) -> np.ndarray:
    """Embed a feature vector, or a batch of row vectors."""
    x, single = _as_batch(params, features)
    p = params.blocks
    if params.hidden_dim == 0:
        y = x @ p["W"].T + p["b"]
    else:
        y = np.tanh(x @ p["W1"].T + p["b1"]) @ p["W2"].T + p["b2"]
    return y[0] if single else y


def backward(params: ExtractorParams, features, upstream_grad):
    """Gradients of ``sum(upstream * forward(x))`` w.r.t. every block and x."""
    x, single = _as_batch(params, features)
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if g.shape != (x.shape[0], params.emb_dim):
        raise DimensionMismatchError(f"upstream grad shape {g.shape}")
    p = params.blocks
    if params.hidden_dim == 0:
        grads = {"W": g.T @ x, "b": g.sum(axis=0)}
        gx = g @ p["W"]
    else:
        h = np.tanh(x @ p["W1"].T + p["b1"])
        gh = (g @ p["W2"]) * (1.0 - h * h)
        grads = {"W2": g.T @ h, "b2": g.sum(axis=0), "W1": gh.T @ x, "b1": gh.sum(axis=0)}
        gx = gh @ p["W1"]
    return grads, (gx[0] if single else gx)


def embed(params: ExtractorParams, features: EmbeddingSet) -> EmbeddingSet:
    return EmbeddingSet(features.ids, forward(params, features.data))


def save_extractor(params: ExtractorParams, path, extra: Optional[dict] = None) -> None:
    """Checkpoint as consecutive float32 containers plus a ``.meta`` sidecar.

    Values are stored at float32 precision.  ``extra`` holds additional named
    1-D or 2-D arrays (e.g. feature normalization statistics).
    """
    path = Path(path)
    arrays = dict(params.blocks)
    for k, v in (extra or {}).items():
        if k in arrays:
            raise ValueError(f"extra block {k!r} clashes with a parameter block")
        arrays[k] = v
    names = list(arrays)
    with open(path, "wb") as f:
        for name in names:
            f.write(pack_matrix(np.atleast_2d(arrays[name])))
    meta = [f"input_dim = {params.input_dim}", f"hidden_dim = {params.hidden_dim}",
            f"emb_dim = {params.emb_dim}"]
    for name in names:
        meta.append(f"block = {name} {' '.join(str(d) for d in np.shape(arrays[name]))}")
    Path(str(path) + ".meta").write_text("\n".join(meta) + "\n", encoding="utf-8")


def load_extractor(path):
    """Inverse of :func:`save_extractor`; returns ``(params, extra)``."""
    path = Path(path)
    meta = {"block": []}
    for line in Path(str(path) + ".meta").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key == "block":
            meta["block"].append(value.split())
        else:
            meta[key] = value
    try:
        dims = int(meta["input_dim"]), int(meta["hidden_dim"]), int(meta["emb_dim"])
    except (KeyError, ValueError):
        raise MalformedHeaderError("checkpoint metadata lacks dims") from None
    buf = path.read_bytes()
    offset = 0
    arrays = {}
    for name, *shape in meta["block"]:
        mat, offset = unpack_matrix(buf, offset)
        shape = tuple(int(s) for s in shape)
        if mat.size != math.prod(shape):
            raise DimensionMismatchError(f"block {name}: size {mat.size} vs shape {shape}")
        arrays[name] = mat.reshape(shape)
    if offset != len(buf):
        raise DimensionMismatchError("trailing bytes in checkpoint")
    names = set(_block_shapes(*dims))
    params = ExtractorParams({k: arrays.pop(k) for k in names}, *dims)
    return params, arrays


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass(frozen=True)
class SgdConfig:
    nominal_lr: float = 0.0125
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    decay_biases: bool = True

    def __post_init__(self):
        if self.nominal_lr <= 0:
            raise ValueError("nominal_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class LrSchedule:
    warmup_frac: float = 0.10
    constant_frac: float = 0.2333
    n_decay_steps: int = 10
    decay_factor: float = 0.5
    # True: the first decay segment is already halved (last = nominal / 2**n)
    halve_first_segment: bool = True

    def __post_init__(self):
        if self.warmup_frac < 0 or self.constant_frac < 0:
            raise ValueError("fractions must be >= 0")
        if self.warmup_frac + self.constant_frac >= 1:
            raise ValueError("warmup + constant must be < 1")
        if self.n_decay_steps < 1:
            raise ValueError("n_decay_steps must be >= 1")


def lr_at(progress: float, nominal: float, sched: LrSchedule = LrSchedule()) -> float:
    """Learning rate at training progress in [0, 1].

    Linear warmup from 0, a constant hold, then ``n_decay_steps`` equal
    segments, each a factor ``decay_factor`` below the previous one.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress {progress} outside [0, 1]")
    if progress < sched.warmup_frac:
        return nominal * (progress / sched.warmup_frac)
    hold_end = sched.warmup_frac + sched.constant_frac
    if progress < hold_end:
        return nominal
    seg_len = (1.0 - hold_end) / sched.n_decay_steps
    segment = sched.n_decay_steps
    for i in range(1, sched.n_decay_steps):
        if progress < hold_end + i * seg_len:
            segment = i
            break
    exponent = segment if sched.halve_first_segment else segment - 1
    return nominal * sched.decay_factor ** exponent


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, cfg: SgdConfig):
    """One SGD step on dicts of arrays; returns ``(params, velocity)``.

    g' = g + wd*theta;  v <- mu*v + g';
    theta <- theta - lr*(g' + mu*v)  (Nesterov)  or  theta - lr*v.
    """
    new_p, new_v = {}, {}
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DimensionMismatchError(f"{name}: grad {g.shape} vs param {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if cfg.weight_decay and (cfg.decay_biases or not name.startswith("b")):
            g = g + cfg.weight_decay * theta
        v = cfg.momentum * velocity.get(name, np.zeros_like(theta)) + g
        step = g + cfg.momentum * v if cfg.nesterov else v
        new_p[name] = theta - lr * step
        new_v[name] = v
    return new_p, new_v


# ---------------------------------------------------------------------------
# momentum contrast


@dataclass(frozen=True, eq=False)
class MoCoState:
    key_params: ExtractorParams
    queue: np.ndarray
    capacity: int = 65536
    momentum: float = 0.999

    def __post_init__(self):
        q = np.array(self.queue, dtype=np.float64).reshape(-1, self.key_params.emb_dim)
        if len(q) > self.capacity:
            raise ValueError("queue longer than capacity")
        object.__setattr__(self, "queue", q)


def momentum_update(state: MoCoState, query_params: ExtractorParams) -> MoCoState:
    """key <- m * key + (1 - m) * query, blockwise."""
    if state.key_params.shape_key != query_params.shape_key:
        raise DimensionMismatchError("key and query encoders differ in shape")
    m = state.momentum
    blocks = {k: m * v + (1.0 - m) * query_params.blocks[k]
              for k, v in state.key_params.blocks.items()}
    return replace(state, key_params=state.key_params.with_blocks(blocks))


def queue_push(state: MoCoState, keys) -> MoCoState:
    """FIFO append; the oldest entries fall off beyond capacity."""
    keys = np.asarray(keys, dtype=np.float64).reshape(-1, state.key_params.emb_dim)
    if len(keys) == 0:
        return state
    queue = np.concatenate([state.queue, keys])[-state.capacity:]
    return replace(state, queue=queue)


# ---------------------------------------------------------------------------
# training loops

Sampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 10
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=SgdConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    head: HeadConfig = field(default_factory=HeadConfig)
    emb_dim: int = 256
    hidden_dim: int = 0
    seed: int = 0


@dataclass(frozen=True)
class ContrastiveTrainConfig:
    epochs: int = 1
    batch_size: int = 64
    sgd: SgdConfig = field(default_factory=SgdConfig)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    moco_momentum: float = 0.999
    emb_dim: int = 256
    hidden_dim: int = 0
    seed: int = 0


def _batches(n, batch_size, epochs, rng):
    steps_per_epoch = math.ceil(n / batch_size)
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            yield order[s * batch_size:(s + 1) * batch_size]


def _rows_sampler(features: EmbeddingSet) -> Sampler:
    return lambda idx, rng: features.data[idx]


def train_classifier(features: EmbeddingSet, labels: LabelSet, cfg: ClassifierTrainConfig,
                     init: Optional[ExtractorParams] = None, sampler: Optional[Sampler] = None,
                     on_step: Optional[Callable[[dict], None]] = None) -> ExtractorParams:
    """Train the extractor as a speaker classifier on (pseudo-)labels.

    Class representatives are trained jointly with the extractor and dropped
    at the end.  Per-utterance label weights scale each example's loss; a
    batch whose weights are all zero is skipped entirely.  ``sampler`` maps
    a batch of utterance indices to extractor inputs (default: the rows of
    ``features``), which is where chunking and augmentation plug in.
    """
    labels = labels.aligned_to(features.ids)
    if len(np.unique(labels.labels)) < 2:
        raise DataError("classifier training needs at least two classes")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_extractor(features.dim, cfg.emb_dim, cfg.hidden_dim, seed=cfg.seed)
    sampler = sampler or _rows_sampler(features)
    n_classes = labels.n_clusters
    reps = rng.standard_normal((n_classes, init.emb_dim))
    params = dict(init.blocks, reps=reps)
    velocity: dict = {}
    weights = labels.weights
    total = cfg.epochs * math.ceil(len(features) / cfg.batch_size)
    for step, idx in enumerate(_batches(len(features), cfg.batch_size, cfg.epochs, rng)):
        w = None if weights is None else weights[idx]
        x = sampler(idx, rng)
        if w is not None and not np.any(w > 0):
            continue
        ext = init.with_blocks({k: v for k, v in params.items() if k != "reps"})
        y = forward(ext, x)
        loss, gy, greps = classification_loss(y, params["reps"], labels.labels[idx], cfg.head, w)
        grads, _ = backward(ext, x, gy)
        grads["reps"] = greps
        lr = lr_at(step / total, cfg.sgd.nominal_lr, cfg.schedule)
        params, velocity = sgd_step(params, grads, velocity, lr, cfg.sgd)
        if on_step is not None:
            on_step({"step": step, "loss": loss, "lr": lr})
    return init.with_blocks({k: v for k, v in params.items() if k != "reps"})


def train_contrastive(features: EmbeddingSet, augment: Sampler, cfg: ContrastiveTrainConfig,
                      init: Optional[ExtractorParams] = None,
                      on_step: Optional[Callable[[dict], None]] = None) -> ExtractorParams:
    """Momentum-contrast training.

    Each step draws two augmented views of every utterance in the batch: the
    query view goes through the trained encoder, the key view through the
    momentum encoder.  After the SGD step the key encoder is moved towards
    the query encoder and the key embeddings are pushed onto the negative
    queue.
    """
    if len(features) < 2:
        raise DataError("contrastive training needs at least two utterances")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        init = init_extractor(features.dim, cfg.emb_dim, cfg.hidden_dim, seed=cfg.seed)
    params = init
    velocity: dict = {}
    state = MoCoState(init, np.zeros((0, init.emb_dim)), cfg.contrastive.queue_capacity,
                      cfg.moco_momentum)
    total = cfg.epochs * math.ceil(len(features) / cfg.batch_size)
    for step, idx in enumerate(_batches(len(features), cfg.batch_size, cfg.epochs, rng)):
        xq = augment(idx, rng)
        xk = augment(idx, rng)
        q = forward(params, xq)
        k = forward(state.key_params, xk)
        losses, gq = moco_infonce_batch(q, k, state.queue, cfg.contrastive)
        grads, _ = backward(params, xq, gq / len(idx))
        lr = lr_at(step / total, cfg.sgd.nominal_lr, cfg.schedule)
        blocks, velocity = sgd_step(params.blocks, grads, velocity, lr, cfg.sgd)
        params = params.with_blocks(blocks)
        state = queue_push(momentum_update(state, params), k)
        if on_step is not None:
            on_step({"step": step, "loss": float(losses.mean()), "lr": lr,
                     "params": params, "moco": state})
    return params
