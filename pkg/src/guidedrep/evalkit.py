"""ROC-AUC, F1, bootstrap resampling, and the two-sided Wilcoxon signed-rank test."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .seeding import substream

EXACT_MAX_N = 25
MIN_PAIRS = 5


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.labels = np.asarray(self.labels).astype(int)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must be aligned")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.scores))

    def __len__(self):
        return len(self.scores)

    def subset(self, idx) -> "ScoredSet":
        return ScoredSet(self.scores[idx], self.labels[idx], np.asarray(self.sample_ids)[idx])


def roc_auc(s: ScoredSet) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2."""
    pos = s.labels == 1
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = stats.rankdata(s.scores)
    u = float(ranks[pos].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def f1_score(s: ScoredSet, threshold: float = 0.5) -> float:
    if len(s) == 0:
        raise ValueError("empty scored set")
    pred = s.scores >= threshold
    truth = s.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


@dataclass
class BootstrapReport:
    values: np.ndarray
    resample_size: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))


def bootstrap_indices(labels: np.ndarray, n_resamples: int, resample_size: int, seed: int,
                      need_both_classes: bool = True, max_retries: int = 100) -> list[np.ndarray]:
    """With-replacement index draws; resample ``b`` depends only on ``(seed, b)``.

    Sharing indices across models pairs their bootstrap vectors by resample.
    """
    if resample_size < 1 or n_resamples < 1:
        raise ValueError("resample_size and n_resamples must be >= 1")
    labels = np.asarray(labels).astype(int)
    out = []
    for b in range(n_resamples):
        rng = substream(seed, "bootstrap", b)
        for _ in range(max_retries):
            idx = rng.integers(0, len(labels), size=resample_size)
            if not need_both_classes or 0 < labels[idx].sum() < resample_size:
                break
        else:
            raise RuntimeError(f"resample {b}: no two-class draw in {max_retries} tries")
        out.append(idx)
    return out


def bootstrap_metric(s: ScoredSet, metric: Callable[[ScoredSet], float] = roc_auc, n_resamples: int = 50,
                     resample_size: int | None = None, seed: int = 0,
                     indices: list[np.ndarray] | None = None) -> BootstrapReport:
    size = len(s) if resample_size is None else resample_size
    if indices is None:
        indices = bootstrap_indices(s.labels, n_resamples, size, seed, need_both_classes=metric is roc_auc)
    return BootstrapReport(np.array([metric(s.subset(idx)) for idx in indices]), size)


def _signed_ranks(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    if d.shape != np.asarray(b).shape:
        raise ValueError("paired samples must have equal length")
    d = d[d != 0]
    ranks = stats.rankdata(np.abs(d))
    return d, ranks


def _exact_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of sign assignments per value of the doubled positive-rank sum."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_two_sided(a, b, exact_max_n: int = EXACT_MAX_N) -> float:
    """Two-sided p-value of the signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes share average ranks.
    Up to ``exact_max_n`` nonzero pairs the null is enumerated exactly;
    beyond that a tie- and continuity-corrected normal approximation is used.
    All-zero differences give p = 1; between 1 and 4 nonzero pairs is an error.
    """
    d, ranks = _signed_ranks(a, b)
    n = len(d)
    if n == 0:
        return 1.0
    if n < MIN_PAIRS:
        raise ValueError(f"need at least {MIN_PAIRS} nonzero paired differences, got {n}")
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        doubled = np.round(2 * ranks).astype(int)
        counts = _exact_null_counts(doubled)
        w2 = int(round(2 * w_plus))
        total = 2 ** n
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        return float(min(1.0, 2 * min(lower, upper) / total))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    diff = w_plus - mean
    z = (abs(diff) - 0.5) / np.sqrt(var) if abs(diff) >= 0.5 else 0.0
    return float(min(1.0, 2 * stats.norm.sf(z)))
