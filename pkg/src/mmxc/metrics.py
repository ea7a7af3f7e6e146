"""Ranking metrics for label prediction: P@k, nDCG@k, R@k and pairwise AUC.

Predictions are per-test-point ranked (label, score) lists; relevance is
binary. Computation deliberately walks datapoints in order with plain
Python accumulation so results are bit-identical to a naive reference
implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from bisect import bisect_left, bisect_right
from typing import Mapping, Sequence

import numpy as np

Prediction = Sequence[tuple[int, float]]


def validate_predictions(preds: Sequence[Prediction]) -> None:
    """Check ranked-list invariants: unique labels, non-increasing scores."""
    for i, ranked in enumerate(preds):
        labels = [l for l, _ in ranked]
        if len(set(labels)) != len(labels):
            raise ValueError(f"prediction list {i} repeats a label")
        scores = [s for _, s in ranked]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"prediction list {i} has increasing scores")


def precision_at_k(preds: Sequence[Prediction], gt: Sequence[np.ndarray], k: int) -> float:
    """Mean over test points of |top-k ∩ positives| / k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        hits = sum(1 for label, _ in ranked[:k] if label in pos_set)
        total += hits / k
    return total / len(preds) if preds else 0.0


def ndcg_at_k(preds: Sequence[Prediction], gt: Sequence[np.ndarray], k: int) -> float:
    """Mean nDCG@k with binary gains; zero-positive datapoints are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    counted = 0
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        if not pos_set:
            continue
        dcg = 0.0
        for r, (label, _) in enumerate(ranked[:k], start=1):
            if label in pos_set:
                dcg += 1.0 / math.log2(r + 1)
        ideal = 0.0
        for r in range(1, min(k, len(pos_set)) + 1):
            ideal += 1.0 / math.log2(r + 1)
        total += dcg / ideal
        counted += 1
    return total / counted if counted else 0.0


def recall_at_k(preds: Sequence[Prediction], gt: Sequence[np.ndarray], k: int) -> float:
    """Mean over test points with positives of |top-k ∩ positives| / |positives|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    total = 0.0
    counted = 0
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        if not pos_set:
            continue
        hits = sum(1 for label, _ in ranked[:k] if label in pos_set)
        total += hits / len(pos_set)
        counted += 1
    return total / counted if counted else 0.0


def auc(preds: Sequence[Prediction], gt: Sequence[np.ndarray], n_labels: int) -> float:
    """Mean per-datapoint pairwise ranking AUC over the full label universe.

    A (positive, negative) pair counts 1 when the positive outscores the
    negative and 0.5 on ties. Labels absent from the prediction list score
    -inf, so they lose to every ranked label and tie with each other.
    Datapoints lacking either class are skipped.
    """
    total = 0.0
    counted = 0
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        n_pos = len(pos_set)
        n_neg = n_labels - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranked_pos_scores = []
        ranked_neg_scores = []
        for label, score in ranked:
            if label in pos_set:
                ranked_pos_scores.append(score)
            else:
                ranked_neg_scores.append(score)
        unranked_pos = n_pos - len(ranked_pos_scores)
        unranked_neg = n_neg - len(ranked_neg_scores)
        neg_sorted = sorted(ranked_neg_scores)
        wins = 0.0
        for s in ranked_pos_scores:
            below = bisect_left(neg_sorted, s)
            ties = bisect_right(neg_sorted, s) - below
            wins += below + unranked_neg + 0.5 * ties
        wins += 0.5 * unranked_pos * unranked_neg
        total += wins / (n_pos * n_neg)
        counted += 1
    return total / counted if counted else 0.0


@dataclass
class BinPartition:
    """Equi-voluminous label bins by ascending training frequency.

    Boundaries are placed by a greedy sweep over frequency-sorted labels so
    each bin's total positive-pair mass is as equal as possible.
    """

    bin_of: np.ndarray
    masses: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.masses)


def make_bins(label_freq: np.ndarray, n_bins: int = 5) -> BinPartition:
    freq = np.asarray(label_freq, dtype=np.float64)
    n_labels = freq.shape[0]
    if n_bins < 1 or n_labels == 0:
        raise ValueError("make_bins: need >=1 bin and a non-empty label set")
    order = np.lexsort((np.arange(n_labels), freq))
    total = float(freq.sum())
    bin_of = np.zeros(n_labels, dtype=np.int64)
    masses = np.zeros(n_bins)
    b = 0
    cum = 0.0
    for lab in order:
        bin_of[lab] = b
        cum += freq[lab]
        masses[b] += freq[lab]
        while b < n_bins - 1 and total > 0 and cum >= (b + 1) * total / n_bins:
            b += 1
    return BinPartition(bin_of=bin_of, masses=masses)


def bin_decomposition(
    preds: Sequence[Prediction],
    gt: Sequence[np.ndarray],
    bins: BinPartition,
    k: int,
) -> np.ndarray:
    """Per-bin contribution to R@k; contributions sum to the overall value."""
    if k < 1:
        raise ValueError("k must be >= 1")
    totals = np.zeros(bins.n_bins)
    counted = 0
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        if not pos_set:
            continue
        counted += 1
        for label, _ in ranked[:k]:
            if label in pos_set:
                totals[bins.bin_of[label]] += 1.0 / len(pos_set)
    if counted:
        totals /= counted
    return totals


def category_report(
    preds: Sequence[Prediction],
    gt: Sequence[np.ndarray],
    categories: Mapping[int, str],
    k: int,
) -> dict[str, float]:
    """P@k restricted to each category's labels; empty categories omitted.

    Labels missing from the map fall into ``"other"``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    totals: dict[str, float] = {}
    seen_positive: dict[str, int] = {}
    for ranked, pos in zip(preds, gt):
        pos_set = set(int(p) for p in pos)
        for p in pos_set:
            cat = categories.get(p, "other")
            seen_positive[cat] = seen_positive.get(cat, 0) + 1
        hits: dict[str, int] = {}
        for label, _ in ranked[:k]:
            if label in pos_set:
                cat = categories.get(label, "other")
                hits[cat] = hits.get(cat, 0) + 1
        for cat, cnt in hits.items():
            totals[cat] = totals.get(cat, 0.0) + cnt / k
    n = len(preds)
    report = {}
    for cat in sorted(seen_positive):
        report[cat] = totals.get(cat, 0.0) / n if n else 0.0
    return report
