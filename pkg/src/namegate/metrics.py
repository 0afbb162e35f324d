"""Confusion matrices and macro-averaged classification metrics.

The class set is always the full vocabulary plus the mispronounced class,
in vocabulary order with mispronounced last, regardless of which classes
appear in a particular fold. Per-class quantities with a zero denominator
are scored 0 and still count toward the macro average; reports carry that
convention in their metadata.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baselines import class_index
from .errors import EmptyInputError
from .prompts import PromptLabel

ZERO_DIVISION_CONVENTION = "zero"


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray            # rows = true class, cols = predicted class
    classes: tuple[str, ...]      # display names, mispronounced last

    @classmethod
    def from_labels(cls, pairs: list[tuple[PromptLabel, PromptLabel]],
                    vocabulary: tuple[str, ...]) -> "ConfusionMatrix":
        c = len(vocabulary) + 1
        counts = np.zeros((c, c), dtype=np.int64)
        for true, pred in pairs:
            counts[class_index(true, vocabulary), class_index(pred, vocabulary)] += 1
        return cls(counts=counts, classes=tuple(vocabulary) + ("mispronounced",))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class: tuple[ClassMetrics, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def metric(self, name: str) -> float:
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_f1": self.macro_f1}[name]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "zero_division": ZERO_DIVISION_CONVENTION,
            "per_class": [
                {"name": c.name, "precision": c.precision, "recall": c.recall,
                 "f1": c.f1, "support": c.support}
                for c in self.per_class
            ],
        }


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise EmptyInputError("confusion matrix holds no observations")
    tp = np.diag(counts).astype(np.float64)
    pred_totals = counts.sum(axis=0).astype(np.float64)
    true_totals = counts.sum(axis=1).astype(np.float64)
    per_class = []
    for i, name in enumerate(cm.classes):
        precision = tp[i] / pred_totals[i] if pred_totals[i] > 0 else 0.0
        recall = tp[i] / true_totals[i] if true_totals[i] > 0 else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if (precision + recall) > 0 else 0.0)
        per_class.append(ClassMetrics(name=name, precision=float(precision),
                                      recall=float(recall), f1=float(f1),
                                      support=int(true_totals[i])))
    return MetricsReport(
        accuracy=float(tp.sum() / total),
        per_class=tuple(per_class),
        macro_precision=float(np.mean([c.precision for c in per_class])),
        macro_recall=float(np.mean([c.recall for c in per_class])),
        macro_f1=float(np.mean([c.f1 for c in per_class])))


SUMMARY_METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass(frozen=True)
class CvSummary:
    per_fold: tuple[MetricsReport, ...]
    fold_names: tuple[str, ...]
    mean: dict
    std: dict

    @classmethod
    def from_folds(cls, reports: list[MetricsReport], names: list[str]) -> "CvSummary":
        mean = {}
        std = {}
        for metric in SUMMARY_METRICS:
            values = np.array([r.metric(metric) for r in reports], dtype=np.float64)
            mean[metric] = float(values.mean())
            std[metric] = float(values.std())  # population: dispersion of the full fold set
        return cls(per_fold=tuple(reports), fold_names=tuple(names), mean=mean, std=std)

    def to_dict(self) -> dict:
        return {
            "folds": [
                {"test_speaker": name, **report.to_dict()}
                for name, report in zip(self.fold_names, self.per_fold)
            ],
            "mean": self.mean,
            "std": self.std,
        }
