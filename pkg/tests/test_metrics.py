import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tactbind.metrics import keyword_score, retrieval_accuracy, topk_accuracy, topk_hits


def brute_topk(scores, targets, k):
    """Sort each row by (-score, index) and look for the target in the first k."""
    hits = 0
    for row, t in zip(scores, targets):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += t in order[:k]
    return 100.0 * hits / len(targets)


def brute_retrieval(sim, k):
    B = len(sim)
    return brute_topk(sim, list(range(B)), min(k, B))


def random_instance(rng, n_rows, K):
    # coarse integer scores so ties actually occur
    return rng.integers(-2, 3, size=(n_rows, K)).astype(float), rng.integers(0, K, size=n_rows)


def test_argmax_target_gives_full_top1():
    logits = np.array([[3.0, 1.0, 0.0], [0.0, 0.5, 2.0]])
    assert topk_accuracy(logits, np.array([0, 2]), 1) == 100.0


def test_k_equal_K_always_full():
    rng = np.random.default_rng(0)
    logits, targets = random_instance(rng, 7, 4)
    assert topk_accuracy(logits, targets, 4) == 100.0


def test_random_five_rows_against_sort_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6))
    targets = rng.integers(0, 6, size=5)
    for k in range(1, 7):
        assert topk_accuracy(logits, targets, k) == pytest.approx(brute_topk(logits, targets, k), abs=1e-12)


def test_ties_go_to_lower_index():
    logits = np.array([[1.0, 1.0, 1.0]])
    assert topk_hits(logits, np.array([0]), 1)[0]
    assert not topk_hits(logits, np.array([1]), 1)[0]
    assert topk_hits(logits, np.array([1]), 2)[0]


@pytest.mark.parametrize("targets", [[0, 3], [-1, 0]])
def test_target_out_of_range(targets):
    with pytest.raises(ValueError, match="out of range"):
        topk_accuracy(np.zeros((2, 3)), np.array(targets), 1)


@pytest.mark.parametrize("k", [0, 4])
def test_k_out_of_range(k):
    with pytest.raises(ValueError):
        topk_accuracy(np.zeros((2, 3)), np.array([0, 1]), k)


def test_retrieval_identity_dominant():
    sim = np.eye(4) * 10 + np.random.default_rng(0).normal(size=(4, 4))
    assert retrieval_accuracy(sim, 1) == 100.0


def test_retrieval_single_item():
    assert retrieval_accuracy(np.array([[-3.0]]), 1) == 100.0


def test_retrieval_random_4x4_oracle():
    sim = np.random.default_rng(0).normal(size=(4, 4))
    for k in (1, 2, 3, 4, 5):
        assert retrieval_accuracy(sim, k) == pytest.approx(brute_retrieval(sim, k), abs=1e-12)


def test_retrieval_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        retrieval_accuracy(np.zeros((2, 3)), 1)


def test_exhaustive_small_instances_match_oracles():
    # 1000 seeded instances covering every (K, B) with K, B <= 6 and every k
    rng = np.random.default_rng(0)
    shapes = list(itertools.product(range(1, 7), range(1, 7)))
    for i in range(1000):
        K, B = shapes[i % len(shapes)]
        logits, targets = random_instance(rng, B, K)
        for k in range(1, K + 1):
            assert topk_accuracy(logits, targets, k) == pytest.approx(brute_topk(logits, targets, k), abs=1e-12)
        sim = rng.integers(-2, 3, size=(B, B)).astype(float)
        for k in range(1, 7):
            assert retrieval_accuracy(sim, k) == pytest.approx(brute_retrieval(sim, k), abs=1e-12)
        if K >= 5:
            assert topk_accuracy(logits, targets, 1) <= topk_accuracy(logits, targets, 5)


def test_keyword_score_examples():
    assert keyword_score({"a", "b"}, {"a", "b"}) == 5.0
    assert keyword_score({"c"}, {"a", "b"}) == 0.0
    assert keyword_score({"a"}, {"a", "b"}) == 2.5
    assert keyword_score(set(), {"a"}) == 0.0


def test_keyword_score_rejects_empty_truth():
    with pytest.raises(ValueError):
        keyword_score({"a"}, set())


words = st.frozensets(st.sampled_from("abcdefg"), min_size=1, max_size=7)


@given(words, words)
def test_keyword_score_symmetric_and_five_iff_equal(p, t):
    s = keyword_score(p, t)
    assert s == keyword_score(t, p)
    assert 0.0 <= s <= 5.0
    assert (s == 5.0) == (p == t)
