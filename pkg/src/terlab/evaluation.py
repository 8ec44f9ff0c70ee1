"""Open-set assignment, ranking metrics and entropy-log aggregation."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


def _arr(scores) -> np.ndarray:
    return scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)


@dataclass
class Assignment:
    matches: list[tuple[int, int]]
    abstained_antennas: list[int]
    abstained_signals: list[int]
    threshold: float
    scores: list[float] = field(default_factory=list)


def open_set_match(scores, threshold: float) -> Assignment:
    """Greedy one-to-one assignment by descending score; cells below
    ``threshold`` are never matched. Ties go to the lower antenna index,
    then the lower signal index."""
    s = _arr(scores)
    if not 0.0 <= threshold <= 1.0:
        raise UsageError(f"threshold {threshold} outside [0, 1]")
    m, n = s.shape
    flat = np.lexsort((np.tile(np.arange(n), m), np.repeat(np.arange(m), n), -s.ravel()))
    used_a, used_s = set(), set()
    matches, kept = [], []
    for cell in flat:
        i, j = divmod(int(cell), n)
        if s[i, j] < threshold:
            break
        if i in used_a or j in used_s:
            continue
        used_a.add(i)
        used_s.add(j)
        matches.append((i, j))
        kept.append(float(s[i, j]))
    return Assignment(
        matches,
        [i for i in range(m) if i not in used_a],
        [j for j in range(n) if j not in used_s],
        threshold,
        kept,
    )


def _rank_in_row(row: np.ndarray, j: int) -> int:
    """0-based rank of column ``j``; ties rank lower indices first."""
    v = row[j]
    return int(np.sum(row > v) + np.sum(row[:j] == v))


def topk_hits(scores, pairs: Iterable[tuple[int, int]], k: int) -> tuple[int, int]:
    """(hits, total) where a hit means the true signal ranks in the antenna's top k."""
    s = _arr(scores)
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    n = s.shape[1]
    if k > n:
        warnings.warn(f"k={k} exceeds {n} candidate signals; clamped", stacklevel=2)
        k = n
    hits = total = 0
    for a, sig in pairs:
        total += 1
        hits += _rank_in_row(s[a], sig) < k
    return hits, total


def topk_accuracy(scores, pairs, k: int) -> float:
    hits, total = topk_hits(scores, list(pairs), k)
    if total == 0:
        raise UsageError("topk_accuracy needs at least one ground-truth pair")
    return hits / total


def recall_at_k(similarity, k: int, direction: str = "i2t") -> float:
    """Fraction of queries whose diagonal partner ranks in the top ``k``."""
    s = _arr(similarity)
    b = s.shape[0]
    if s.shape != (b, b):
        raise UsageError(f"recall_at_k needs a square matrix, got {s.shape}")
    if not 1 <= k <= b:
        raise UsageError(f"k={k} outside [1, {b}]")
    if direction == "t2i":
        s = s.T
    elif direction != "i2t":
        raise UsageError(f"direction must be i2t or t2i, got {direction!r}")
    return sum(_rank_in_row(s[i], i) < k for i in range(b)) / b


GENERATIONS = ("4G", "5G", "overall")


def matching_metrics(per_station: Iterable[tuple[np.ndarray, Sequence, Sequence[str]]],
                     ks=(1, 3)) -> dict[str, dict[int, float]]:
    """Micro-averaged Acc@k over all ground-truth pairs, split by the true
    signal's generation. Input items: ``(scores, pairs, signal_generations)``."""
    hits = defaultdict(int)
    totals = defaultdict(int)
    for scores, pairs, gens in per_station:
        s = _arr(scores)
        for a, sig in pairs:
            for gen in (gens[sig], "overall"):
                totals[gen] += 1
                for k in ks:
                    hits[gen, k] += _rank_in_row(s[a], sig) < min(k, s.shape[1])
    return {
        gen: {k: (hits[gen, k] / totals[gen] if totals[gen] else float("nan")) for k in ks}
        for gen in GENERATIONS
    }


def aggregate_entropy_log(records: Iterable[Mapping], epochs: Iterable[int] | None = None,
                          modalities: Sequence[str] = ("V", "S", "G")) -> list[dict]:
    """Mean ``mean_entropy`` / ``first_token_entropy`` per (epoch, modality).

    Sums use ``math.fsum`` so the result does not depend on record order.
    """
    buckets: dict[tuple[int, str], list[Mapping]] = defaultdict(list)
    for r in records:
        buckets[int(r["epoch"]), str(r["modality"])].append(r)
    wanted = set(buckets)
    if epochs is not None:
        for e in epochs:
            for m in modalities:
                if (e, m) not in buckets:
                    warnings.warn(f"no entropy records for epoch {e}, modality {m}; row omitted",
                                  stacklevel=2)
    order = {m: i for i, m in enumerate(modalities)}
    rows = []
    for e, m in sorted(wanted, key=lambda key: (key[0], order.get(key[1], len(order)), key[1])):
        bucket = buckets[e, m]
        rows.append({
            "epoch": e,
            "modality": m,
            "mean_entropy": math.fsum(r["mean_entropy"] for r in bucket) / len(bucket),
            "first_token_entropy": math.fsum(r["first_token_entropy"] for r in bucket) / len(bucket),
        })
    return rows
