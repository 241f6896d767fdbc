"""Video-adapted correspondence loss for training the projection head.

Video sequences replace augmentation pairs: every anchor frame is paired
with itself (attractive), with another frame of the same sequence
(similar), and with a frame of a different sequence (repulsive). Each
pair contributes a signed correspondence term

    L = -sign * mean_{p,q} (F[p,q] - b) * max(S[p,q], 0)

where F is the cosine-similarity tensor between the two frames' backbone
features, S the same tensor built from the head's softmax outputs, b a
per-kind shift, and sign +1 for attractive/similar pairs, -1 for
repulsive ones. Gradients flow through S into the head probabilities via
the full cosine-similarity Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from alan.errors import ConfigError, DataError

logger = logging.getLogger(__name__)


class PairKind(Enum):
    SELF = "self"
    SIMILAR = "similar"
    REPULSIVE = "repulsive"


@dataclass(frozen=True)
class Pair:
    """Frame pairing inside a training step.

    ``a`` indexes the anchor clip. ``b`` indexes the anchor clip for
    SELF/SIMILAR pairs and the partner clip for REPULSIVE pairs.
    """

    a: int
    b: int
    kind: PairKind


@dataclass
class LossConfig:
    lambda_self: float = 1.0
    lambda_similar: float = 1.0
    lambda_repulsive: float = 1.0
    b_self: float = 0.3
    b_similar: float = 0.3
    b_repulsive: float = 0.7
    center_features: bool = False

    def __post_init__(self):
        lambdas = (self.lambda_self, self.lambda_similar, self.lambda_repulsive)
        if any(l < 0 for l in lambdas):
            raise ConfigError("loss weights must be non-negative")
        if all(l == 0 for l in lambdas):
            raise ConfigError("at least one loss weight must be positive")


_SIGN = {PairKind.SELF: 1.0, PairKind.SIMILAR: 1.0, PairKind.REPULSIVE: -1.0}


def sample_pairs(n_anchor: int, n_other: int,
                 rng: np.random.Generator) -> list[Pair]:
    """Draw the per-anchor pair set for one step.

    Every anchor frame yields one SELF pair, one SIMILAR pair (a distinct
    frame of the anchor clip, skipped with a warning for 1-frame clips)
    and one REPULSIVE pair (a uniform frame of the partner clip).
    Deterministic under a seeded rng.
    """
    if n_anchor < 1 or n_other < 1:
        raise DataError("clips must be non-empty")
    if n_anchor == 1:
        logger.warning("similar pairs skipped: anchor clip has a single frame")
    pairs = []
    for i in range(n_anchor):
        pairs.append(Pair(i, i, PairKind.SELF))
        if n_anchor > 1:
            j = int(rng.integers(n_anchor - 1))
            if j >= i:
                j += 1
            pairs.append(Pair(i, j, PairKind.SIMILAR))
        pairs.append(Pair(i, int(rng.integers(n_other)), PairKind.REPULSIVE))
    return pairs


def correspondence(f_a: np.ndarray, f_b: np.ndarray,
                   center: bool = False) -> np.ndarray:
    """Cosine-similarity tensor [N_a, N_b] between two patch-vector sets.

    Zero vectors map to similarity 0. With ``center``, the mean of each
    row is subtracted afterwards.
    """
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if f_a.ndim != 2 or f_b.ndim != 2 or f_a.shape[1] != f_b.shape[1]:
        raise DataError(
            f"channel mismatch: {f_a.shape} vs {f_b.shape}"
        )
    values = _unit_rows(f_a) @ _unit_rows(f_b).T
    if center:
        values = values - values.mean(axis=1, keepdims=True)
    return values


def loss_term(f_corr: np.ndarray, s_corr: np.ndarray, shift: float,
              sign: float):
    """One signed correspondence term.

    Returns (scalar loss, dL/dS). Entries with S <= 0 are clamped out of
    both the value and the gradient.
    """
    f_corr = np.asarray(f_corr, dtype=np.float64)
    s_corr = np.asarray(s_corr, dtype=np.float64)
    if f_corr.shape != s_corr.shape:
        raise DataError(
            f"shape mismatch: F {f_corr.shape} vs S {s_corr.shape}"
        )
    count = f_corr.size
    weight = f_corr - shift
    active = s_corr > 0.0
    value = -sign * float((weight * np.where(active, s_corr, 0.0)).sum()) / count
    d_s = np.where(active, -sign * weight / count, 0.0)
    return value, d_s


def total_loss(pairs, feats_anchor, probs_anchor, feats_other, probs_other,
               cfg: LossConfig):
    """Weighted sum of all pair terms with gradients w.r.t. head outputs.

    ``feats_*`` and ``probs_*`` are per-frame lists of [N, C] / [N, K]
    arrays at patch resolution. Returns
    (loss, dL/dprobs_anchor, dL/dprobs_other) with the gradient lists
    matching the prob lists entry for entry.
    """
    feats_anchor = [np.asarray(f, dtype=np.float64) for f in feats_anchor]
    feats_other = [np.asarray(f, dtype=np.float64) for f in feats_other]
    probs_anchor = [np.asarray(p, dtype=np.float64) for p in probs_anchor]
    probs_other = [np.asarray(p, dtype=np.float64) for p in probs_other]
    d_anchor = [np.zeros_like(p) for p in probs_anchor]
    d_other = [np.zeros_like(p) for p in probs_other]
    lam = {
        PairKind.SELF: cfg.lambda_self,
        PairKind.SIMILAR: cfg.lambda_similar,
        PairKind.REPULSIVE: cfg.lambda_repulsive,
    }
    total = 0.0
    for pair in pairs:
        weight = lam[pair.kind]
        if weight == 0.0:
            continue
        repulsive = pair.kind is PairKind.REPULSIVE
        try:
            f_a, p_a = feats_anchor[pair.a], probs_anchor[pair.a]
            if repulsive:
                f_b, p_b = feats_other[pair.b], probs_other[pair.b]
            else:
                f_b, p_b = feats_anchor[pair.b], probs_anchor[pair.b]
        except IndexError as exc:
            raise DataError(f"pair {pair} references a missing frame") from exc
        shift = {
            PairKind.SELF: cfg.b_self,
            PairKind.SIMILAR: cfg.b_similar,
            PairKind.REPULSIVE: cfg.b_repulsive,
        }[pair.kind]
        f_corr = correspondence(f_a, f_b, center=cfg.center_features)
        s_corr = correspondence(p_a, p_b)
        value, d_s = loss_term(f_corr, s_corr, shift, _SIGN[pair.kind])
        total += weight * value
        d_pa, d_pb = _cosine_backward(p_a, p_b, weight * d_s)
        d_anchor[pair.a] += d_pa
        if repulsive:
            d_other[pair.b] += d_pb
        else:
            d_anchor[pair.b] += d_pb
    return total, d_anchor, d_other


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _cosine_backward(u: np.ndarray, v: np.ndarray, grad: np.ndarray):
    """Backprop grad ([N_u, N_v]) through C = cosine(u rows, v rows).

    Quotient rule per entry: dC/du_p = v_q/(|u||v|) - C * u_p/|u|^2.
    Rows with zero norm get zero gradient (similarity pinned to 0).
    """
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    u_hat = np.divide(u, nu, out=np.zeros_like(u), where=nu > 0)
    v_hat = np.divide(v, nv, out=np.zeros_like(v), where=nv > 0)
    corr = u_hat @ v_hat.T
    row = (grad * corr).sum(axis=1, keepdims=True)
    col = (grad * corr).sum(axis=0)[:, None]
    d_u = grad @ v_hat - u_hat * row
    d_u = np.divide(d_u, nu, out=np.zeros_like(u), where=nu > 0)
    d_v = grad.T @ u_hat - v_hat * col
    d_v = np.divide(d_v, nv, out=np.zeros_like(v), where=nv > 0)
    return d_u, d_v
