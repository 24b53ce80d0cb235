"""Top-k accuracy, in-batch retrieval accuracy and the 0-5 keyword score."""

from __future__ import annotations

from typing import AbstractSet

import numpy as np


def topk_hits(scores: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    """Boolean per row: is ``targets[i]`` among the ``k`` largest entries of ``scores[i]``?

    Ties are broken toward the lower index, i.e. an entry ``j`` outranks the
    target when ``s[j] > s[t]`` or (``s[j] == s[t]`` and ``j < t``).
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got {scores.shape}")
    N, K = scores.shape
    if targets.shape != (N,):
        raise ValueError(f"targets shape {targets.shape} does not match {scores.shape}")
    if not 1 <= k <= K:
        raise ValueError(f"k={k} outside [1, {K}]")
    if N and (targets.min() < 0 or targets.max() >= K):
        raise ValueError(f"target out of range [0, {K})")
    s_t = scores[np.arange(N), targets][:, None]
    cols = np.arange(K)[None, :]
    ahead = (scores > s_t) | ((scores == s_t) & (cols < targets[:, None]))
    return ahead.sum(axis=1) < k


def topk_accuracy(logits: np.ndarray, targets: np.ndarray, k: int) -> float:
    """Percentage of rows whose target is in the top ``k``."""
    hits = topk_hits(logits, targets, k)
    return 100.0 * float(hits.mean()) if hits.size else 0.0


def retrieval_accuracy(similarity: np.ndarray, k: int) -> float:
    """Percentage of rows ``i`` whose diagonal entry ranks in the top ``k`` of row ``i``."""
    similarity = np.asarray(similarity)
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1]:
        raise ValueError(f"similarity must be square, got {similarity.shape}")
    B = similarity.shape[0]
    k = min(k, B)
    return topk_accuracy(similarity, np.arange(B), k)


def keyword_score(predicted: AbstractSet[str], truth: AbstractSet[str]) -> float:
    """``5 * |P & T| / |P | T|``; an empty prediction scores 0."""
    if not truth:
        raise ValueError("truth keyword set must be nonempty")
    predicted, truth = set(predicted), set(truth)
    if not predicted:
        return 0.0
    return 5.0 * len(predicted & truth) / len(predicted | truth)
