import math
import random
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terlab.errors import UsageError
from terlab.evaluation import (
    aggregate_entropy_log,
    matching_metrics,
    open_set_match,
    recall_at_k,
    topk_accuracy,
)


def greedy_oracle(scores, threshold):
    """Re-simulate the greedy recurrence by rescanning every remaining cell."""
    m, n = len(scores), len(scores[0])
    free_a, free_s = set(range(m)), set(range(n))
    matches = []
    while free_a and free_s:
        best = None
        for i in sorted(free_a):
            for j in sorted(free_s):
                if best is None or scores[i][j] > scores[best[0]][best[1]]:
                    best = (i, j)
        if scores[best[0]][best[1]] < threshold:
            break
        matches.append(best)
        free_a.discard(best[0])
        free_s.discard(best[1])
    return matches


def rank_oracle(row, j):
    """How many entries beat column j (ties: lower index wins)."""
    return sum(1 for c, v in enumerate(row) if v > row[j] or (v == row[j] and c < j))


def topk_oracle(scores, pairs, k):
    k = min(k, len(scores[0]))
    return sum(rank_oracle(scores[a], s) < k for a, s in pairs) / len(pairs)


def recall_oracle(sim, k, direction):
    b = len(sim)
    hits = 0
    for q in range(b):
        row = [sim[q][c] for c in range(b)] if direction == "i2t" else [sim[r][q] for r in range(b)]
        hits += rank_oracle(row, q) < k
    return hits / b


def test_open_set_identity_like():
    s = np.full((3, 3), 0.1) + np.eye(3) * 0.8
    out = open_set_match(s, 0.5)
    assert sorted(out.matches) == [(0, 0), (1, 1), (2, 2)]
    assert out.abstained_antennas == [] and out.abstained_signals == []


def test_open_set_all_below_threshold():
    out = open_set_match(np.full((2, 4), 0.3), 0.5)
    assert out.matches == []
    assert out.abstained_antennas == [0, 1] and out.abstained_signals == [0, 1, 2, 3]


def test_open_set_tie_break():
    out = open_set_match(np.full((2, 2), 0.7), 0.5)
    assert out.matches == [(0, 0), (1, 1)]


@pytest.mark.parametrize("seed", range(20))
def test_open_set_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(size=(4, 6)), 1)  # coarse values force ties
    thr = float(rng.uniform(0.2, 0.8))
    assert open_set_match(s, thr).matches == greedy_oracle(s.tolist(), thr)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000), st.floats(0, 1))
def test_open_set_is_one_to_one_and_thresholded(m, n, seed, thr):
    s = np.random.default_rng(seed).uniform(size=(m, n))
    out = open_set_match(s, thr)
    assert len({a for a, _ in out.matches}) == len(out.matches)
    assert len({b for _, b in out.matches}) == len(out.matches)
    assert all(s[a, b] >= thr for a, b in out.matches)
    assert len(out.matches) + len(out.abstained_antennas) == m
    assert len(out.matches) + len(out.abstained_signals) == n


def test_open_set_bad_threshold():
    with pytest.raises(UsageError):
        open_set_match(np.zeros((2, 2)), 1.5)


def test_topk_perfect_diagonal():
    assert topk_accuracy(np.eye(4), [(i, i) for i in range(4)], 1) == 1.0


def test_topk_k_equals_n():
    s = np.random.default_rng(0).uniform(size=(3, 5))
    assert topk_accuracy(s, [(0, 4), (1, 0), (2, 2)], 5) == 1.0


def test_topk_rank_two_everywhere():
    s = np.array([[0.5, 0.9, 0.1], [0.1, 0.5, 0.9], [0.9, 0.1, 0.5]])
    pairs = [(0, 0), (1, 1), (2, 2)]
    assert topk_accuracy(s, pairs, 1) == topk_oracle(s.tolist(), pairs, 1) == 0.0
    assert topk_accuracy(s, pairs, 3) == topk_oracle(s.tolist(), pairs, 3) == 1.0


def test_topk_ties_favor_lower_index():
    s = np.array([[0.5, 0.5, 0.5]])
    assert topk_accuracy(s, [(0, 0)], 1) == 1.0
    assert topk_accuracy(s, [(0, 2)], 2) == 0.0


def test_topk_clamps_k_with_warning():
    with pytest.warns(UserWarning, match="clamped"):
        assert topk_accuracy(np.array([[0.2, 0.1]]), [(0, 1)], 5) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_topk_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    s = np.round(rng.uniform(size=(5, 7)), 1)
    pairs = [(a, int(rng.integers(7))) for a in range(5)]
    for k in (1, 2, 3, 7):
        assert topk_accuracy(s, pairs, k) == topk_oracle(s.tolist(), pairs, k)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_topk_nonincreasing_when_true_scores_drop(seed, drop):
    rng = np.random.default_rng(seed)
    s = rng.uniform(size=(4, 5))
    pairs = [(a, int(rng.integers(5))) for a in range(4)]
    lowered = s.copy()
    for a, b in pairs:
        lowered[a, b] -= drop
    for k in (1, 3):
        assert topk_accuracy(lowered, pairs, k) <= topk_accuracy(s, pairs, k)


def test_recall_identity_and_reversed():
    assert recall_at_k(np.eye(5), 1, "i2t") == recall_at_k(np.eye(5), 1, "t2i") == 1.0
    # anti-diagonal favoured, true diagonal scored worst in every row and column
    rev = np.fliplr(np.eye(8)) - np.eye(8)
    assert recall_at_k(rev, 3, "i2t") == 0.0
    assert recall_at_k(rev, 3, "t2i") == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_recall_matches_oracle(seed):
    s = np.random.default_rng(seed).normal(size=(8, 8))
    for k in (1, 5, 8):
        for d in ("i2t", "t2i"):
            assert recall_at_k(s, k, d) == recall_oracle(s.tolist(), k, d)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_recall_symmetric_matrix_directions_agree(seed, k):
    a = np.random.default_rng(seed).normal(size=(6, 6))
    s = a + a.T
    assert recall_at_k(s, k, "i2t") == recall_at_k(s, k, "t2i")


def test_recall_k_too_large():
    with pytest.raises(UsageError):
        recall_at_k(np.eye(3), 4)


def test_matching_metrics_micro_average_by_generation():
    s1 = np.array([[0.9, 0.1], [0.2, 0.8]])
    s2 = np.array([[0.1, 0.9, 0.2]])
    out = matching_metrics([(s1, [(0, 0), (1, 1)], ["4G", "5G"]), (s2, [(0, 0)], ["5G", "4G", "4G"])])
    assert out["4G"][1] == 1.0
    assert out["5G"][1] == 0.5
    assert out["overall"][1] == pytest.approx(2 / 3)
    assert out["overall"][3] == 1.0


def test_entropy_aggregation_examples():
    one = [{"epoch": 0, "modality": "V", "mean_entropy": 1.25, "first_token_entropy": 0.5}]
    assert aggregate_entropy_log(one)[0]["mean_entropy"] == 1.25
    two = one + [{"epoch": 0, "modality": "V", "mean_entropy": 1.75, "first_token_entropy": 1.5}]
    row = aggregate_entropy_log([dict(r, mean_entropy=v) for r, v in zip(two, (1.0, 2.0))])[0]
    assert row["mean_entropy"] == 1.5


def test_entropy_aggregation_order_independent():
    rng = random.Random(0)
    recs = [{"epoch": e, "modality": m, "mean_entropy": rng.uniform(0, 3), "first_token_entropy": rng.uniform(0, 3)}
            for e in range(4) for m in "VSG" for _ in range(7)]
    base = aggregate_entropy_log(recs)
    for _ in range(5):
        rng.shuffle(recs)
        assert aggregate_entropy_log(recs) == base
    for row in base:
        bucket = [r["mean_entropy"] for r in recs if r["epoch"] == row["epoch"] and r["modality"] == row["modality"]]
        assert row["mean_entropy"] == math.fsum(bucket) / len(bucket)


def test_entropy_aggregation_warns_on_missing_bucket():
    recs = [{"epoch": 0, "modality": "V", "mean_entropy": 1.0, "first_token_entropy": 1.0}]
    with pytest.warns(UserWarning, match="epoch 1"):
        rows = aggregate_entropy_log(recs, epochs=[0, 1], modalities=("V",))
    assert [r["epoch"] for r in rows] == [0]


def test_metrics_are_fractions():
    rng = np.random.default_rng(5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(20):
            s = rng.uniform(size=(3, 4))
            v = topk_accuracy(s, [(0, 1), (2, 3)], int(rng.integers(1, 6)))
            assert 0.0 <= v <= 1.0
