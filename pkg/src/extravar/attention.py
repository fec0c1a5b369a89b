"""Multi-head attention with per-head logit scaling and entropy calibration.

All reductions run along fixed axes in float64, so results are bitwise
reproducible for a given input regardless of which thread computes a head.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

__all__ = [
    "MASK_FILL",
    "HeadTensors",
    "AttentionStats",
    "CalibrationPolicy",
    "logits",
    "scaled_attention",
    "normalized_entropy",
    "row_variance",
    "global_variance",
    "entropy_slope",
    "closed_form_alpha",
    "gated_alpha",
    "head_statistics",
    "attend",
    "multi_head_attend",
    "write_stats_csv",
]

# Finite stand-in for -inf on masked logits; alpha * MASK_FILL stays finite
# for every alpha used during calibration, and exp() of it underflows to 0.
MASK_FILL = -1e9


@dataclass
class HeadTensors:
    """Query, key and value rows of one head; ``mask[i, j]`` is True where i may attend j."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        if self.q.ndim != 2 or self.k.ndim != 2:
            raise ValueError("q and k must be 2-D (rows x features)")
        if self.q.shape[1] != self.k.shape[1]:
            raise ValueError(f"q width {self.q.shape[1]} != k width {self.k.shape[1]}")
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.float64)
            if self.v.ndim != 2 or self.v.shape[0] != self.k.shape[0]:
                raise ValueError(f"v must have {self.k.shape[0]} rows, got shape {self.v.shape}")
        if self.mask is not None:
            self.mask = _check_mask(self.mask, (self.q.shape[0], self.k.shape[0]))

    @property
    def dim(self) -> int:
        return self.q.shape[1]


@dataclass(frozen=True)
class AttentionStats:
    """Entropy and logit variance of one head at alpha = 1."""

    entropy: float
    variance: float
    n_keys: int
    alpha: float = 1.0


@dataclass(frozen=True)
class CalibrationPolicy:
    tau_h: float = 0.3
    epsilon: float = 1e-8
    active_after_step: int = 9
    alpha_min: float = 0.5
    alpha_max: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.tau_h < 1.0:
            raise ValueError(f"tau_h must lie in (0, 1), got {self.tau_h}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 < self.alpha_min <= 1.0 <= self.alpha_max:
            raise ValueError("alpha clamp must satisfy 0 < alpha_min <= 1 <= alpha_max")


def _check_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ValueError(f"mask shape {mask.shape} != logits shape {shape}")
    if not mask.any(axis=1).all():
        raise ValueError("every query row needs at least one attendable key")
    return mask


def _row_counts(P: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return np.full(P.shape[0], P.shape[1], dtype=np.float64)
    return mask.sum(axis=1).astype(np.float64)


def logits(head: HeadTensors) -> np.ndarray:
    """S = Q K^T / sqrt(d); masked entries hold ``MASK_FILL``."""
    S = head.q @ head.k.T / math.sqrt(head.dim)
    if head.mask is not None:
        S = np.where(head.mask, S, MASK_FILL)
    return S


def scaled_attention(S: np.ndarray, alpha: float = 1.0, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax of alpha * S."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    S = np.asarray(S, dtype=np.float64)
    z = alpha * S
    if mask is not None:
        mask = _check_mask(mask, S.shape)
        z = np.where(mask, z, -np.inf)
    elif np.any(np.max(S, axis=1) <= MASK_FILL):
        raise ValueError("a logit row is fully masked")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _xlogx(P: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)


def normalized_entropy(P: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Shannon entropy averaged over rows, each row divided by ln(attendable keys).

    Dense maps reduce to -1/(N_q ln N_k) * sum P ln P. Natural log throughout;
    the base cancels in the ratio anyway.
    """
    P = np.asarray(P, dtype=np.float64)
    counts = _row_counts(P, mask)
    if np.any(counts < 2):
        raise ValueError("normalized entropy needs at least 2 attendable keys per row")
    row_h = -_xlogx(P).sum(axis=1)
    return float(np.mean(row_h / np.log(counts)))


def row_variance(S: np.ndarray, P: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Var_{P_i}(S_i) per row, with masked entries excluded."""
    S = np.asarray(S, dtype=np.float64)
    if mask is not None:
        S = np.where(mask, S, 0.0)
    mean = (P * S).sum(axis=1)
    var = (P * S * S).sum(axis=1) - mean * mean
    return np.maximum(var, 0.0)


def global_variance(S: np.ndarray, P1: np.ndarray, mask: np.ndarray | None = None) -> float:
    """V_g: mean over rows of the logit variance under the alpha = 1 attention."""
    return float(np.mean(row_variance(S, P1, mask)))


def entropy_slope(S: np.ndarray, alpha: float, mask: np.ndarray | None = None) -> float:
    """dH/dalpha = -(alpha / N_q) * sum_i Var_{P_i(alpha)}(S_i) / ln N_k; never positive."""
    P = scaled_attention(S, alpha, mask)
    counts = _row_counts(P, mask)
    if np.any(counts < 2):
        raise ValueError("entropy slope needs at least 2 attendable keys per row")
    var = row_variance(S, P, mask)
    return float(-alpha * np.mean(var / np.log(counts)))


def closed_form_alpha(h_current: float, h_ref: float, variance: float, n_keys: int) -> float:
    """First-order estimate 1 + (H(1) - H_ref) ln N_k / V_g."""
    if not variance > 0:
        raise ValueError(f"logit variance must be positive, got {variance}")
    if n_keys < 2:
        raise ValueError(f"need at least 2 keys, got {n_keys}")
    return 1.0 + (h_current - h_ref) * math.log(n_keys) / variance


def gated_alpha(
    stats: AttentionStats, policy: CalibrationPolicy, k: int, h_ref: float | None
) -> float:
    """Calibrated scale, or exactly 1.0 when any gate fails.

    Gates: the step is past ``active_after_step``, a reference entropy exists
    and is below ``tau_h``, and the logit variance reaches ``epsilon``.
    """
    if k <= policy.active_after_step:
        return 1.0
    if h_ref is None or not h_ref < policy.tau_h:
        return 1.0
    if not stats.variance >= policy.epsilon or stats.n_keys < 2:
        return 1.0
    alpha = closed_form_alpha(stats.entropy, h_ref, stats.variance, stats.n_keys)
    return float(min(max(alpha, policy.alpha_min), policy.alpha_max))


def head_statistics(S: np.ndarray, mask: np.ndarray | None = None) -> tuple[AttentionStats, np.ndarray]:
    """Entropy and V_g at alpha = 1, plus the alpha = 1 attention map.

    A single attendable key is trivially uniform, so its entropy is reported
    as 1 and its variance as 0.
    """
    P1 = scaled_attention(S, 1.0, mask)
    counts = _row_counts(P1, mask)
    n_keys = int(counts.min())
    if n_keys < 2:
        return AttentionStats(entropy=1.0, variance=0.0, n_keys=n_keys), P1
    stats = AttentionStats(
        entropy=normalized_entropy(P1, mask),
        variance=global_variance(S, P1, mask),
        n_keys=n_keys,
    )
    return stats, P1


def attend(head: HeadTensors, alpha: float = 1.0) -> np.ndarray:
    """P(alpha) V for one head."""
    if head.v is None:
        raise ValueError("attend needs value rows")
    P = scaled_attention(logits(head), alpha, head.mask)
    return P @ head.v


def multi_head_attend(
    heads: Sequence[HeadTensors], alphas: Sequence[float], w_o: np.ndarray
) -> np.ndarray:
    """Concatenate per-head outputs and apply the output projection."""
    if len(heads) != len(alphas):
        raise ValueError(f"{len(heads)} heads but {len(alphas)} scaling factors")
    out = np.concatenate([attend(h, a) for h, a in zip(heads, alphas)], axis=1)
    if out.shape[1] != w_o.shape[0]:
        raise ValueError(f"concatenated width {out.shape[1]} != projection rows {w_o.shape[0]}")
    return out @ w_o


def write_stats_csv(rows: Iterable[tuple], fh: IO[str]) -> None:
    """Rows of (layer, head, step, alpha, entropy, variance)."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["layer", "head", "step", "alpha", "entropy", "variance"])
    for layer, head, step, alpha, entropy, variance in rows:
        writer.writerow([layer, head, step, repr(float(alpha)), repr(float(entropy)), repr(float(variance))])
