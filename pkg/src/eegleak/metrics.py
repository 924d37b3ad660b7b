"""Patient-level metrics and percentile-bootstrap confidence intervals.

Scores are oriented so that higher means "more likely poor outcome" and the
positive class (label 1) is the poor outcome.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from . import _kernels
from .errors import DegenerateCohortError

POOR_OUTCOME = "poor_outcome"
SURVIVAL = "survival"


@dataclass
class ScoredCohort:
    patient_ids: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.patient_ids = np.asarray(self.patient_ids, dtype=object)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.scores.shape[0]
        if self.patient_ids.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("patient_ids, scores and labels must have equal lengths")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def take(self, idx: np.ndarray) -> "ScoredCohort":
        return ScoredCohort(self.patient_ids[idx], self.scores[idx], self.labels[idx])

    @classmethod
    def from_survival(cls, patient_ids, survival_prob, surv_labels,
                      positive: str = POOR_OUTCOME) -> "ScoredCohort":
        """Orient survival probabilities / ``surv`` labels for metric computation."""
        p = np.asarray(survival_prob, dtype=np.float64)
        y = np.asarray(surv_labels, dtype=np.int64)
        if positive == POOR_OUTCOME:
            return cls(patient_ids, 1.0 - p, 1 - y)
        if positive == SURVIVAL:
            return cls(patient_ids, p, y)
        raise ValueError(f"unknown positive class {positive!r}")


def _need_both(c: ScoredCohort, what: str) -> None:
    if c.n_pos == 0 or c.n_neg == 0:
        raise DegenerateCohortError(f"{what} needs both classes "
                                    f"(got {c.n_pos} positive, {c.n_neg} negative)")


def roc_auc(cohort: ScoredCohort) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie)."""
    _need_both(cohort, "roc_auc")
    order = np.argsort(cohort.scores, kind="stable")
    return _kernels.roc_auc_sorted(cohort.scores[order], cohort.labels[order])


def sensitivity_at_specificity(cohort: ScoredCohort, spec_min: float) -> float:
    """Best recall among ``score >= t`` rules whose specificity is at least ``spec_min``."""
    if cohort.n_neg == 0:
        raise DegenerateCohortError("sensitivity_at_specificity needs at least one negative")
    if cohort.n_pos == 0:
        return 0.0
    order = np.argsort(-cohort.scores, kind="stable")
    return _kernels.sens_at_spec_sorted(cohort.scores[order], cohort.labels[order], spec_min)


@dataclass
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    precision_undefined: bool = False


def confusion_metrics(cohort: ScoredCohort, threshold: float = 0.5) -> Confusion:
    _need_both(cohort, "confusion_metrics")
    pred = cohort.scores >= threshold
    y = cohort.labels == 1
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    undefined = tp + fp == 0
    precision = 0.0 if undefined else tp / (tp + fp)
    recall = tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return Confusion(tp, fp, fn, tn, (tp + tn) / len(cohort), precision, recall, f1,
                     tn / (tn + fp), undefined)


def balanced_accuracy(cohort: ScoredCohort, threshold: float = 0.5) -> float:
    c = confusion_metrics(cohort, threshold)
    return 0.5 * (c.recall + c.specificity)


def correlation_score(balanced_accuracy: float) -> float:
    """``2 * (BA - 0.5)`` floored at zero."""
    if not 0.0 <= balanced_accuracy <= 1.0:
        raise ValueError(f"balanced accuracy must lie in [0, 1], got {balanced_accuracy}")
    return max(0.0, 2.0 * (balanced_accuracy - 0.5))


MetricFn = Callable[[ScoredCohort], float]


def metric_suite(threshold: float = 0.5) -> Dict[str, MetricFn]:
    """Every reported metric, keyed by report name."""
    return {
        "auc": roc_auc,
        "accuracy": lambda c: confusion_metrics(c, threshold).accuracy,
        "precision": lambda c: confusion_metrics(c, threshold).precision,
        "recall": lambda c: confusion_metrics(c, threshold).recall,
        "f1": lambda c: confusion_metrics(c, threshold).f1,
        "sens_at_spec95": lambda c: sensitivity_at_specificity(c, 0.95),
        "sens_at_spec99": lambda c: sensitivity_at_specificity(c, 0.99),
    }


@dataclass
class BootstrapResult:
    intervals: Dict[str, Tuple[float, float]]
    n_resamples: int
    redraws: int


def bootstrap_many(cohort: ScoredCohort, metrics: Mapping[str, MetricFn],
                   n_resamples: int = 1000, seed: int = 0, alpha: float = 0.05
                   ) -> BootstrapResult:
    """Percentile intervals for several metrics from one set of patient resamples.

    Resample ``i`` draws from ``default_rng([seed, i, attempt])`` so any single
    resample can be reproduced independently.  Resamples missing a class are
    redrawn; after ``10 * n_resamples`` total draws the cohort is declared
    degenerate.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be at least 100")
    _need_both(cohort, "bootstrap")
    n = len(cohort)
    budget = 10 * n_resamples
    draws = 0
    values = {name: np.empty(n_resamples) for name in metrics}
    for i in range(n_resamples):
        attempt = 0
        while True:
            draws += 1
            if draws > budget:
                raise DegenerateCohortError(
                    f"bootstrap exhausted {budget} draws without enough two-class resamples")
            idx = np.random.default_rng([int(seed), i, attempt]).integers(0, n, size=n)
            ys = cohort.labels[idx]
            if 0 < ys.sum() < n:
                break
            attempt += 1
        sample = cohort.take(idx)
        for name, fn in metrics.items():
            values[name][i] = fn(sample)
    q = [100 * alpha / 2, 100 * (1 - alpha / 2)]
    intervals = {}
    for name, v in values.items():
        lo, hi = np.percentile(v, q, method="linear")
        intervals[name] = (float(lo), float(hi))
    return BootstrapResult(intervals, n_resamples, draws - n_resamples)


def bootstrap_ci(cohort: ScoredCohort, metric: MetricFn, n_resamples: int = 1000,
                 seed: int = 0) -> Tuple[float, float]:
    return bootstrap_many(cohort, {"m": metric}, n_resamples, seed).intervals["m"]


@dataclass
class MetricsReport:
    metrics: Dict[str, Dict[str, float]]
    n_patients: int
    n_positive: int
    n_resamples: int
    seed: int
    leaky: bool = False
    positive_class: str = POOR_OUTCOME
    threshold: float = 0.5
    flags: Dict[str, object] = field(default_factory=dict)

    def point(self, name: str) -> Optional[float]:
        return self.metrics[name]["point"]

    def to_dict(self) -> Dict:
        return {
            "metrics": self.metrics,
            "n_patients": self.n_patients,
            "n_positive": self.n_positive,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "leaky": self.leaky,
            "positive_class": self.positive_class,
            "threshold": self.threshold,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(**dict(d))


def evaluate_cohort(cohort: ScoredCohort, n_resamples: int = 1000, seed: int = 0,
                    threshold: float = 0.5, leaky: bool = False,
                    positive_class: str = POOR_OUTCOME) -> MetricsReport:
    """Point estimates and bootstrap intervals for every metric in the suite.

    A cohort holding a single class has no defined ROC-based metrics; every
    value is then ``None`` and ``flags["single_class"]`` is set.
    """
    suite = metric_suite(threshold)
    if cohort.n_pos == 0 or cohort.n_neg == 0:
        metrics = {name: {"point": None, "ci_low": None, "ci_high": None} for name in suite}
        flags = {"single_class": True, "orientation": f"positive class = {positive_class}"}
        return MetricsReport(metrics, len(cohort), cohort.n_pos, n_resamples, int(seed), leaky,
                             positive_class, threshold, flags)
    conf = confusion_metrics(cohort, threshold)
    boot = bootstrap_many(cohort, suite, n_resamples, seed)
    metrics = {}
    for name, fn in suite.items():
        lo, hi = boot.intervals[name]
        metrics[name] = {"point": float(fn(cohort)), "ci_low": lo, "ci_high": hi}
    flags = {"single_class": False, "precision_undefined": conf.precision_undefined,
             "bootstrap_redraws": boot.redraws,
             "orientation": f"positive class = {positive_class}"}
    return MetricsReport(metrics, len(cohort), cohort.n_pos, n_resamples, int(seed), leaky,
                         positive_class, threshold, flags)
