"""Token entropy: per-token channel entropy, the entropy-gated residual layer
(ETE), the mean-token-entropy auxiliary loss (TEL) and loss composition."""

from __future__ import annotations

import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import LN_EPS, TokenBatch, _xavier
from .errors import ConfigError, NumericError, ShapeError, UsageError

MODALITIES = ("V", "S", "G")


def token_entropy(F: Tensor) -> Tensor:
    """Shannon entropy (nats) of softmax over channels, one value per row: ``T x 1``."""
    if F.cols < 2:
        raise UsageError(f"token entropy needs at least 2 channels, got {F.cols}")
    p = ad.softmax_rows(F)
    logp = ad.log_softmax_rows(F)
    return -ad.sum_rows(p * logp)


def entropy_np(x: np.ndarray) -> np.ndarray:
    """Row entropies of a plain array; used for logging outside any tape."""
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=1)


def init_ete(dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """ETE parameters. The gate starts at 0 so the layer is an identity at init."""
    return {
        "W": ad.parameter(_xavier(rng, dim, 1), "W"),
        # a zero bias would make LayerNorm(W*H) nearly independent of H
        "b": ad.parameter(_xavier(rng, 1, dim), "b"),
        "gamma": ad.parameter(np.zeros((1, 1)), "gamma"),
        "ln_g": ad.parameter(np.ones((1, dim)), "ln_g"),
        "ln_b": ad.parameter(np.zeros((1, dim)), "ln_b"),
    }


def ete_forward(F: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """``F + gamma * LayerNorm(H W^T + b)`` where ``H`` is each row's entropy."""
    d = F.cols
    if params["W"].shape != (d, 1) or params["b"].shape != (1, d) or params["gamma"].shape != (1, 1):
        raise ShapeError(
            f"ETE parameters W{params['W'].shape} b{params['b'].shape} "
            f"gamma{params['gamma'].shape} do not fit width {d}"
        )
    H = token_entropy(F)
    proj = H @ params["W"].T + params["b"]
    corr = ad.layer_norm(proj, params["ln_g"], params["ln_b"], LN_EPS)
    return F + params["gamma"] * corr


def mean_token_entropy(matrices: Iterable[Tensor]) -> Tensor:
    """Mean entropy over every row of every matrix (zero-row matrices skipped)."""
    total = None
    count = 0
    for m in matrices:
        if m.rows == 0:
            continue
        s = ad.sum_all(token_entropy(m))
        total = s if total is None else total + s
        count += m.rows
    if total is None:
        raise UsageError("token entropy loss over an empty batch")
    return total * (1.0 / count)


def tel_loss(batch: Sequence[Mapping[str, Tensor]]) -> Tensor:
    """Token entropy loss for a batch of items, each a ``{modality: T x D}`` dict.

    Absent modalities are skipped; the normalizer counts only present tokens.
    """
    if not batch:
        raise UsageError("tel_loss: empty batch")
    return mean_token_entropy(m for item in batch for m in item.values())


def total_loss(task: Tensor, tel: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if not (np.isfinite(task.data).all() and np.isfinite(tel.data).all()):
        raise NumericError("non-finite task or entropy loss")
    return task + tel * float(lam)


def first_token_entropy(F: Tensor | np.ndarray) -> float:
    """Entropy of row 0, as a plain float (never differentiated)."""
    data = F.data if isinstance(F, Tensor) else np.asarray(F, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise UsageError("first_token_entropy: empty token matrix")
    if data.shape[1] < 2:
        raise UsageError(f"token entropy needs at least 2 channels, got {data.shape[1]}")
    return float(entropy_np(data[:1])[0])


def entropy_summary(batch: TokenBatch) -> tuple[float, float]:
    """(mean entropy over all tokens, mean first-token entropy over items)."""
    h = entropy_np(batch.x.data)
    bound = math.log(batch.x.cols)
    if h.size and (h.min() < 0.0 or h.max() > bound + 1e-12):
        raise NumericError(f"token entropy outside [0, ln D]: [{h.min()}, {h.max()}]")
    return float(h.mean()), float(h[batch.starts].mean())
