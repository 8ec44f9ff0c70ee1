"""Task losses: symmetric InfoNCE, antenna/signal matching scores and BCE, and
multi-class cross-entropy."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError, ShapeError, UsageError

SCORE_EPS = 1e-7


def _diag_mean(m: Tensor) -> Tensor:
    n = m.rows
    return ad.sum_all(m * Tensor(np.eye(n))) * (1.0 / n)


def info_nce(visual: Tensor, signal: Tensor, temperature: float) -> Tensor:
    """Symmetric CLIP-style contrastive loss; row i of each input is a positive pair."""
    if visual.rows == 0:
        raise UsageError("info_nce: empty batch")
    if visual.shape != signal.shape:
        raise ShapeError(f"info_nce: visual {visual.shape} vs signal {signal.shape}")
    if temperature <= 0:
        raise UsageError(f"temperature must be > 0, got {temperature}")
    try:
        v = ad.normalize_rows(visual)
    except NumericError as exc:
        raise NumericError(f"visual {exc}") from None
    try:
        s = ad.normalize_rows(signal)
    except NumericError as exc:
        raise NumericError(f"signal {exc}") from None
    logits = (v @ s.T) * (1.0 / temperature)
    i2t = -_diag_mean(ad.log_softmax_rows(logits))
    t2i = -_diag_mean(ad.log_softmax_rows(logits.T))
    return (i2t + t2i) * 0.5


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    if a.rows < 1 or b.rows < 1:
        raise UsageError("cosine_matrix needs at least one row on each side")
    return ad.normalize_rows(a) @ ad.normalize_rows(b).T


def matching_scores(antennas: Tensor, signals: Tensor, temperature: float = 1.0) -> Tensor:
    """``M x N`` scores ``sigmoid(cos(a_i, s_j) / temperature)`` in (0, 1)."""
    return ad.sigmoid(cosine_matrix(antennas, signals) * (1.0 / temperature))


def _pair_arrays(pairs, m: int, n: int, station_id) -> tuple[np.ndarray, int]:
    y = np.zeros((m, n))
    for a, s in pairs:
        if not (0 <= a < m and 0 <= s < n):
            raise DataError(
                f"station {station_id}: pair ({a}, {s}) outside {m}x{n} score matrix"
            )
        y[a, s] = 1.0
    return y, int(y.sum())


def matching_weights(pairs, m: int, n: int, station_id=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Positive mask, per-cell weights and normalizer for the balanced BCE."""
    y, n_pos = _pair_arrays(pairs, m, n, station_id)
    n_neg = m * n - n_pos
    w_neg = n_pos / n_neg if (n_pos and n_neg) else 1.0
    weights = np.where(y > 0, 1.0, w_neg)
    return y, weights, float(weights.sum())


def matching_loss(scores: Tensor, pairs: Iterable[tuple[int, int]], station_id=None,
                  eps: float = SCORE_EPS) -> Tensor:
    """Class-balanced binary cross-entropy over all ``M x N`` cells.

    Negatives are down-weighted by ``|P| / (MN - |P|)`` so both classes carry
    equal total weight.
    """
    m, n = scores.shape
    y, weights, norm = matching_weights(list(pairs), m, n, station_id)
    s = ad.clamp(scores, eps, 1.0 - eps)
    ll = ad.log(s) * Tensor(y * weights) + ad.log(1.0 - s) * Tensor((1.0 - y) * weights)
    return -ad.sum_all(ll) * (1.0 / norm)


def cross_entropy(logits: Tensor, labels: int | Sequence[int]) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over rows."""
    labels = [labels] if isinstance(labels, (int, np.integer)) else list(labels)
    if len(labels) != logits.rows:
        raise ShapeError(f"{len(labels)} labels for {logits.rows} rows of logits")
    onehot = np.zeros(logits.shape)
    for i, lab in enumerate(labels):
        if not 0 <= lab < logits.cols:
            raise UsageError(f"label {lab} outside [0, {logits.cols})")
        onehot[i, lab] = 1.0
    return -ad.sum_all(ad.log_softmax_rows(logits) * Tensor(onehot)) * (1.0 / logits.rows)
