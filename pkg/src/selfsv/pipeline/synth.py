"""Synthetic speakers with channel perturbations.

Each utterance is a ``T x F`` frame matrix::

    clean_t    = speaker_mean + session_offset + speaker_scale * noise_t
    observed_t = gain[c] * clean_t + offset[c] + aug_noise * noise'_t

where ``c`` is a channel drawn per utterance.  Channel 0 is the identity
(no gain, offset or noise).  The channel offsets are large and shared across
speakers, so raw features confound speaker and channel.  The session offset
is an isotropic part plus a larger part confined to a low-rank subspace;
augmenting an utterance cannot reveal it (both views share the session), so
only speaker-level supervision teaches an extractor to discount it.  Speaker
identity lives both in the frame means and in the per-dimension frame scale.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from ..core import LabelSet, TrialList


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 50
    utts_per_speaker: int = 20
    feature_dim: int = 32
    n_frames: int = 60
    between_speaker_spread: float = 1.0
    within_speaker_spread: float = 0.5
    session_rank: int = 4
    session_spread: float = 2.5
    frame_noise: float = 1.0
    speaker_scale_spread: float = 0.3
    n_channels: int = 4
    channel_spread: float = 3.0
    channel_gain_spread: float = 0.1
    augment_noise: float = 0.3
    n_val_speakers: int = 40
    val_utts_per_speaker: int = 10
    n_trials: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 2 or self.n_val_speakers < 2:
            raise ValueError("need at least two speakers in each split")
        if self.between_speaker_spread <= 0 or self.within_speaker_spread <= 0:
            raise ValueError("spreads must be positive")
        if self.session_rank < 0 or self.session_spread < 0:
            raise ValueError("session_rank and session_spread must be >= 0")
        if self.n_channels < 1 or self.n_frames < 1 or self.feature_dim < 1:
            raise ValueError("n_channels, n_frames and feature_dim must be >= 1")
        if self.utts_per_speaker < 1 or self.val_utts_per_speaker < 2:
            raise ValueError("need >= 1 train and >= 2 validation utterances per speaker")


@dataclass(frozen=True, eq=False)
class ChannelBank:
    gains: np.ndarray  # n_channels x F
    offsets: np.ndarray  # n_channels x F


@functools.lru_cache(maxsize=16)
def channel_bank(cfg: SynthConfig) -> ChannelBank:
    rng = np.random.default_rng([cfg.seed, 7])
    C, F = cfg.n_channels, cfg.feature_dim
    gains = np.exp(cfg.channel_gain_spread * rng.standard_normal((C, F)))
    offsets = cfg.channel_spread * rng.standard_normal((C, F))
    gains[0] = 1.0
    offsets[0] = 0.0
    gains.setflags(write=False)
    offsets.setflags(write=False)
    return ChannelBank(gains, offsets)


@functools.lru_cache(maxsize=16)
def session_basis(cfg: SynthConfig) -> np.ndarray:
    """Orthonormal rows spanning the session-variability subspace."""
    rng = np.random.default_rng([cfg.seed, 11])
    rank = min(cfg.session_rank, cfg.feature_dim)
    if rank == 0:
        return np.zeros((0, cfg.feature_dim))
    q, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, rank)))
    basis = q.T.copy()
    basis.setflags(write=False)
    return basis


def augment(features, channel, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply channel perturbation(s) to features with last axis F.

    ``channel`` is a single index, or one index per leading-axis entry of a
    batch.  Channel 0 returns the input unchanged.
    """
    x = np.asarray(features, dtype=np.float64)
    ch = np.asarray(channel, dtype=np.int64)
    if np.any(ch < 0) or np.any(ch >= cfg.n_channels):
        raise ValueError(f"channel outside 0..{cfg.n_channels - 1}")
    if x.shape[-1] != cfg.feature_dim:
        raise ValueError(f"feature dim {x.shape[-1]} != {cfg.feature_dim}")
    bank = channel_bank(cfg)
    if ch.ndim:
        if ch.shape[0] != x.shape[0]:
            raise ValueError("one channel per batch entry required")
        shape = (len(ch),) + (1,) * (x.ndim - 2) + (cfg.feature_dim,)
        gain = bank.gains[ch].reshape(shape)
        offset = bank.offsets[ch].reshape(shape)
        active = (ch != 0).reshape(shape[:-1] + (1,))
    else:
        if int(ch) == 0:
            return x.copy()
        gain, offset, active = bank.gains[ch], bank.offsets[ch], True
    noise = cfg.augment_noise * rng.standard_normal(x.shape)
    return np.where(active, gain * x + offset + noise, x)


@dataclass(frozen=True, eq=False)
class SynthData:
    cfg: SynthConfig
    train_ids: tuple
    train_frames: np.ndarray  # N x T x F
    train_labels: LabelSet  # true speakers; never given to clustering
    train_channels: np.ndarray
    val_ids: tuple
    val_frames: np.ndarray
    val_labels: np.ndarray
    trials: TrialList


def _speakers(rng, cfg, n):
    F = cfg.feature_dim
    u = rng.standard_normal((n, F))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    means = cfg.between_speaker_spread * math.sqrt(F) * u
    scales = cfg.frame_noise * np.exp(cfg.speaker_scale_spread * rng.standard_normal((n, F)))
    return means, scales


def _utterances(rng, cfg, means, scales, per_speaker):
    n = len(means)
    spk = np.repeat(np.arange(n), per_speaker)
    T, F = cfg.n_frames, cfg.feature_dim
    basis = session_basis(cfg)
    offset = cfg.within_speaker_spread * rng.standard_normal((len(spk), 1, F))
    offset = offset + (cfg.session_spread * rng.standard_normal((len(spk), 1, len(basis)))) @ basis
    clean = means[spk][:, None, :] + offset + scales[spk][:, None, :] * \
        rng.standard_normal((len(spk), T, F))
    channels = rng.integers(cfg.n_channels, size=len(spk))
    return spk, augment(clean, channels, cfg, rng), channels


def _make_trials(rng, ids, spk, n_trials):
    n = len(ids)
    n_tgt = n_trials // 2
    by_spk = {}
    for i, s in enumerate(spk.tolist()):
        by_spk.setdefault(s, []).append(i)
    tgt_pairs = [(a, b) for members in by_spk.values()
                 for x, a in enumerate(members) for b in members[x + 1:]]
    pick = rng.choice(len(tgt_pairs), size=min(n_tgt, len(tgt_pairs)), replace=False)
    chosen = [tgt_pairs[i] for i in sorted(pick)]
    seen = set(chosen)
    non = []
    while len(non) < n_trials - len(chosen):
        a, b = (int(v) for v in rng.integers(n, size=2))
        if spk[a] == spk[b] or (a, b) in seen or (b, a) in seen:
            continue
        seen.add((a, b))
        non.append((a, b))
    pairs = [(a, b, True) for a, b in chosen] + [(a, b, False) for a, b in non]
    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return TrialList(tuple((ids[a], ids[b]) for a, b, _ in pairs),
                     tuple(lab for _, _, lab in pairs))


def synth_generate(cfg: SynthConfig = SynthConfig()) -> SynthData:
    """Training utterances with true labels, plus disjoint validation speakers
    and a trial list that is about half targets."""
    rng = np.random.default_rng(cfg.seed)
    means, scales = _speakers(rng, cfg, cfg.n_speakers + cfg.n_val_speakers)
    tr = slice(0, cfg.n_speakers)
    va = slice(cfg.n_speakers, None)
    spk, frames, channels = _utterances(rng, cfg, means[tr], scales[tr], cfg.utts_per_speaker)
    train_ids = tuple(f"spk{s:04d}-utt{i:05d}" for i, s in enumerate(spk.tolist()))
    vspk, vframes, _ = _utterances(rng, cfg, means[va], scales[va], cfg.val_utts_per_speaker)
    vspk = vspk + cfg.n_speakers
    val_ids = tuple(f"val{s:04d}-utt{i:05d}" for i, s in enumerate(vspk.tolist()))
    trials = _make_trials(rng, val_ids, vspk, cfg.n_trials)
    return SynthData(cfg, train_ids, frames, LabelSet(train_ids, spk, None, cfg.n_speakers),
                     channels, val_ids, vframes, vspk, trials)
