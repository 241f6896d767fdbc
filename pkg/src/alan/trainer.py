"""Optimization loop for the projection head over a manifest of sequences.

Each training step draws two distinct sequences, samples a 16-frame
stride-2 clip from each (covering at least one cardiac cycle), builds
the per-anchor pair set, and applies one bias-corrected Adam update from
the accumulated correspondence-loss gradients. Runs are bitwise
reproducible under a fixed seed: all randomness flows from one seeded
64-bit PCG generator and execution is single-threaded.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from alan.errors import ConfigError, DataError, NumericError
from alan.feature_store import DatasetManifest, FeatureSequence, read_features
from alan.raptor_head import RaptorParams, backward_patch, forward_patch, save_checkpoint
from alan.stego_objective import LossConfig, sample_pairs, total_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    K: int
    learning_rate: float = 5e-3
    epochs: int = 40
    frames_per_clip: int = 16
    frame_stride: int = 2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_sequences: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    standardize_features: bool = True

    def __post_init__(self):
        # learning_rate 0 is allowed: it makes training a (useful) no-op.
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.frames_per_clip < 1:
            raise ConfigError("frames_per_clip must be >= 1")
        if self.frame_stride < 1:
            raise ConfigError("frame_stride must be >= 1")
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        if self.batch_sequences != 2:
            raise ConfigError(
                "batch_sequences != 2 is not supported: a step pairs one "
                "anchor with one repulsive partner"
            )


@dataclass
class AdamState:
    """First/second moment estimates shaped like the parameters."""

    m: RaptorParams
    v: RaptorParams
    step: int = 0

    @classmethod
    def zeros(cls, c: int, k: int) -> "AdamState":
        return cls(m=RaptorParams.zeros(c, k), v=RaptorParams.zeros(c, k))


@dataclass
class TrainReport:
    epoch_losses: list[float]
    wall_time_s: float
    checkpoint_path: str | None
    config: dict


def sample_clip(t: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Frame indices of one training clip.

    Prefers ``frames_per_clip`` frames at ``frame_stride``; short
    sequences fall back to stride 1, and sequences shorter than the clip
    are used whole (with a warning).
    """
    if t < 1:
        raise DataError("cannot sample a clip from an empty sequence")
    frames = cfg.frames_per_clip
    for stride in (cfg.frame_stride, 1):
        span = (frames - 1) * stride + 1
        if t >= span:
            start = int(rng.integers(t - span + 1))
            return start + stride * np.arange(frames)
    logger.warning(
        "sequence of %d frames shorter than clip length %d; using all frames",
        t, frames,
    )
    return np.arange(t)


def adam_step(params: RaptorParams, grads: RaptorParams, state: AdamState,
              cfg: TrainConfig):
    """One bias-corrected Adam update; returns (new params, new state)."""
    for g in grads.arrays():
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient")
    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(),
                          state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps))
    return (RaptorParams.from_arrays(new_p),
            AdamState(m=RaptorParams.from_arrays(new_m),
                      v=RaptorParams.from_arrays(new_v), step=t))


def standardize_stats(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over every patch of every
    sequence."""
    if not sequences:
        raise DataError("cannot standardize an empty dataset")
    c = sequences[0].C
    stacked = np.concatenate(
        [s.patches.reshape(-1, c).astype(np.float64) for s in sequences]
    )
    return stacked.mean(axis=0), stacked.std(axis=0)


def apply_standardize(patches: np.ndarray, mu: np.ndarray,
                      sigma: np.ndarray) -> np.ndarray:
    """(x - mu) / sigma per channel; near-constant channels are centered
    but left unscaled."""
    scale = np.where(sigma < 1e-12, 1.0, sigma)
    return (np.asarray(patches, dtype=np.float64) - mu) / scale


def save_feature_stats(mu: np.ndarray, sigma: np.ndarray, path) -> None:
    """Persist training-split standardization stats for reuse at
    inference time (parcelize must see the same transform)."""
    doc = {"mean": [float(v) for v in mu], "std": [float(v) for v in sigma]}
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


def load_feature_stats(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f)
    try:
        mu = np.asarray(doc["mean"], dtype=np.float64)
        sigma = np.asarray(doc["std"], dtype=np.float64)
    except (TypeError, KeyError) as exc:
        raise DataError(f"{path}: malformed feature-stats file") from exc
    if mu.shape != sigma.shape or mu.ndim != 1:
        raise DataError(f"{path}: mean/std must be 1-D and aligned")
    return mu, sigma


def train(sequences, cfg: TrainConfig, checkpoint_path=None, stats_path=None):
    """Train the head on a list of FeatureSequence; returns
    (RaptorParams, TrainReport).

    With ``stats_path`` set and standardization enabled, the fitted
    per-channel stats are written there for reuse at inference time.
    """
    if len(sequences) < 2:
        raise DataError(
            "training needs at least 2 sequences (repulsive pairs require "
            "distinct sequences)"
        )
    c = sequences[0].C
    for s in sequences:
        if s.C != c:
            raise DataError(
                f"channel mismatch: '{s.seq_id}' has C={s.C}, expected {c}"
            )
    t_start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)

    if cfg.standardize_features:
        mu, sigma = standardize_stats(sequences)
        feats = [apply_standardize(s.patches, mu, sigma) for s in sequences]
        if stats_path is not None:
            save_feature_stats(mu, sigma, stats_path)
    else:
        feats = [s.patches.astype(np.float64) for s in sequences]
    # [T, N, C] per sequence, patch grid flattened row-major.
    feats = [f.reshape(f.shape[0], -1, c) for f in feats]

    params = RaptorParams.init(c, cfg.K, rng)
    state = AdamState.zeros(c, cfg.K)
    n_seq = len(sequences)
    epoch_losses = []
    for epoch in range(cfg.epochs):
        step_losses = []
        for anchor in rng.permutation(n_seq):
            partner = int(rng.integers(n_seq - 1))
            if partner >= anchor:
                partner += 1
            loss, grads = _step(feats[anchor], feats[partner], params, cfg, rng)
            params, state = adam_step(params, grads, state, cfg)
            step_losses.append(loss)
        mean_loss = float(np.mean(step_losses))
        epoch_losses.append(mean_loss)
        logger.info("epoch %d/%d: mean loss %.6f", epoch + 1, cfg.epochs, mean_loss)

    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    report = TrainReport(
        epoch_losses=epoch_losses,
        wall_time_s=time.perf_counter() - t_start,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
        config=asdict(cfg),
    )
    return params, report


def _step(feat_a: np.ndarray, feat_b: np.ndarray, params: RaptorParams,
          cfg: TrainConfig, rng: np.random.Generator):
    """One anchor/partner step: clips, pairs, loss, accumulated gradients."""
    clip_a = sample_clip(feat_a.shape[0], cfg, rng)
    clip_b = sample_clip(feat_b.shape[0], cfg, rng)
    pairs = sample_pairs(len(clip_a), len(clip_b), rng)
    frames_a = [feat_a[t] for t in clip_a]
    frames_b = [feat_b[t] for t in clip_b]
    fwd_a = [forward_patch(f, params) for f in frames_a]
    fwd_b = [forward_patch(f, params) for f in frames_b]
    loss, d_pa, d_pb = total_loss(
        pairs, frames_a, [p for p, _ in fwd_a],
        frames_b, [p for p, _ in fwd_b], cfg.loss,
    )
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    acc = [np.zeros_like(a) for a in params.arrays()]
    for (_, cache), d_p in zip(fwd_a + fwd_b, d_pa + d_pb):
        grads, _ = backward_patch(cache, d_p)
        for total_g, g in zip(acc, grads.arrays()):
            total_g += g
    return loss, RaptorParams.from_arrays(acc)


def train_from_manifest(manifest: DatasetManifest, cfg: TrainConfig,
                        checkpoint_path=None, stats_path=None):
    """Load every sequence referenced by the manifest and train."""
    sequences = [read_features(e.feature_path) for e in manifest.entries]
    return train(sequences, cfg, checkpoint_path=checkpoint_path,
                 stats_path=stats_path)


def write_train_report(report: TrainReport, path) -> None:
    """Plain-text report: header plus one loss line per epoch."""
    lines = [
        f"checkpoint: {report.checkpoint_path}",
        f"wall_time_s: {report.wall_time_s:.3f}",
        f"epochs: {len(report.epoch_losses)}",
        "config:",
    ]
    for key, value in sorted(report.config.items()):
        if isinstance(value, dict):
            lines.append(f"  {key}:")
            lines.extend(f"    {k}: {v}" for k, v in sorted(value.items()))
        else:
            lines.append(f"  {key}: {value}")
    lines.append("epoch_losses:")
    for i, loss in enumerate(report.epoch_losses, start=1):
        lines.append(f"  epoch {i:4d}: {loss:.10f}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
