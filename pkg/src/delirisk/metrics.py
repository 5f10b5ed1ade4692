"""AUROC, bootstrap confidence intervals, rank-sum comparison, ROC export.

AUROC uses the rank-sum (Mann-Whitney) formulation with average ranks for
ties, O(n log n). The bootstrap resamples whole stays with replacement,
redrawing single-class resamples, and reports the median with 2.5/97.5
percentiles across the configured iterations. Model comparison is a
two-sided Wilcoxon rank-sum test with tie correction and continuity
correction on the two bootstrap AUROC distributions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class UndefinedMetricError(Exception):
    """AUROC requested on a single-class sample."""


@dataclass(frozen=True)
class ScoredStay:
    stay_id: str
    score: float
    label: int
    onset_interval: Optional[int] = None
    los_hours: float = 0.0


@dataclass(frozen=True)
class ScoredCohort:
    entries: tuple

    def __post_init__(self):
        ids = [e.stay_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stay_id in scored cohort")

    @property
    def scores(self):
        return np.array([e.score for e in self.entries], dtype=np.float64)

    @property
    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.int64)


@dataclass
class MetricsReport:
    auroc_median: float
    ci_low: float
    ci_high: float
    bootstrap_samples: list
    n_pos: int
    n_neg: int
    redraws: int = 0
    per_day: list = field(default_factory=list)


@dataclass(frozen=True)
class ComparisonResult:
    model_a: str
    model_b: str
    statistic: float  # rank-sum U for sample a
    p_value: float

    @property
    def significant_at_0_05(self) -> bool:
        return self.p_value < 0.05


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties receive the mean rank of their group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"need both classes, got {n_pos} pos / {n_neg} neg")
    ranks = _average_ranks(scores)
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def bootstrap_auroc(cohort: ScoredCohort, iterations: int = 200, seed: int = 0,
                    max_redraws: int = 1000) -> MetricsReport:
    """Stay-level bootstrap; single-class resamples are redrawn and counted."""
    scores = cohort.scores
    labels = cohort.labels
    n = len(cohort.entries)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("bootstrap needs both classes in the cohort")
    samples = []
    total_redraws = 0
    for it in range(iterations):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(it,)))
        consecutive = 0
        while True:
            idx = rng.integers(0, n, size=n)
            lab = labels[idx]
            if 0 < lab.sum() < n:
                break
            consecutive += 1
            total_redraws += 1
            if consecutive > max_redraws:
                raise UndefinedMetricError(
                    f"bootstrap iteration {it}: {consecutive} single-class redraws")
        samples.append(auroc(scores[idx], lab))
    arr = np.asarray(samples)
    return MetricsReport(
        auroc_median=float(np.median(arr)),
        ci_low=float(np.percentile(arr, 2.5)),
        ci_high=float(np.percentile(arr, 97.5)),
        bootstrap_samples=samples,
        n_pos=n_pos,
        n_neg=n_neg,
        redraws=total_redraws,
    )


def wilcoxon_rank_sum(samples_a, samples_b, model_a: str = "a",
                      model_b: str = "b") -> ComparisonResult:
    """Two-sided rank-sum test, tie-corrected normal approximation with
    continuity correction. Requires at least 8 values per sample."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 < 8 or n2 < 8:
        raise ValueError(f"rank-sum needs >= 8 values per sample (got {n1}, {n2}); "
                         "collect more bootstrap iterations")
    combined = np.concatenate([a, b])
    ranks = _average_ranks(combined)
    rank_sum_a = ranks[:n1].sum()
    u1 = rank_sum_a - n1 * (n1 + 1) / 2.0
    mean_u = n1 * n2 / 2.0
    n = n1 + n2
    _, counts = np.unique(combined, return_counts=True)
    tie_term = float((counts.astype(np.float64) ** 3 - counts).sum())
    var_u = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var_u <= 0:
        return ComparisonResult(model_a, model_b, float(u1), 1.0)
    z = (abs(u1 - mean_u) - 0.5) / math.sqrt(var_u)
    z = max(z, 0.0)
    p = math.erfc(z / math.sqrt(2.0))
    return ComparisonResult(model_a, model_b, float(u1), min(1.0, p))


def per_day_auroc(cohort: ScoredCohort, days: int = 7, min_class_n: int = 5) -> list:
    """AUROC per admission day k=1..days.

    Positives for day k: delirium onsets inside hours [24k, 24(k+1)).
    Negatives: non-delirium stays still in the ICU through hour 24(k+1).
    Days with fewer than `min_class_n` of either class yield None.
    """
    out = []
    for day in range(1, days + 1):
        lo, hi = 24.0 * day, 24.0 * (day + 1)
        scores, labels = [], []
        for e in cohort.entries:
            if e.label == 1 and e.onset_interval is not None:
                onset_hours = 12.0 * e.onset_interval
                if lo <= onset_hours < hi:
                    scores.append(e.score)
                    labels.append(1)
            elif e.label == 0 and e.los_hours >= hi:
                scores.append(e.score)
                labels.append(0)
        n_pos = sum(labels)
        n_neg = len(labels) - n_pos
        if n_pos < min_class_n or n_neg < min_class_n:
            out.append(None)
        else:
            out.append(auroc(scores, labels))
    return out


def roc_points(scores, labels) -> list:
    """ROC polyline: one vertex per distinct threshold plus the corners;
    trapezoidal area over these points equals auroc()."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_points needs both classes")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i:j + 1] == 1).sum())
        fp += int((sorted_labels[i:j + 1] == 0).sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j + 1
    return points


def trapezoid_area(points) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def write_metrics_csv(path, rows) -> None:
    """rows: (model_name, MetricsReport)"""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "auroc_median", "ci_low", "ci_high", "n_pos", "n_neg"])
        for name, rep in rows:
            w.writerow([name, repr(rep.auroc_median), repr(rep.ci_low), repr(rep.ci_high),
                        rep.n_pos, rep.n_neg])


def write_per_day_csv(path, rows) -> None:
    """rows: (model_name, per_day list)"""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "day", "auroc"])
        for name, per_day in rows:
            for day, value in enumerate(per_day, start=1):
                w.writerow([name, day, repr(value) if value is not None else ""])


def write_roc_csv(path, rows) -> None:
    """rows: (model_name, points)"""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "fpr", "tpr"])
        for name, points in rows:
            for fpr, tpr in points:
                w.writerow([name, repr(fpr), repr(tpr)])


def write_comparisons_csv(path, comparisons) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "model_b", "statistic", "p_value"])
        for c in comparisons:
            w.writerow([c.model_a, c.model_b, repr(c.statistic), repr(c.p_value)])
