"""Confusion counts and accuracy / precision / recall / F1.

A 0/0 denominator yields 0 and the metric name is added to ``zero_division_flags``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class EmptyCounts(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division_flags: frozenset[str] = field(default_factory=frozenset)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "zero_division_flags": sorted(self.zero_division_flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            float(d["accuracy"]),
            float(d["precision"]),
            float(d["recall"]),
            float(d["f1"]),
            frozenset(d.get("zero_division_flags", ())),
        )


def confusion(probabilities, labels, threshold: float = 0.5) -> ConfusionCounts:
    """Tally predictions (``probability >= threshold`` means ASD) against 0/1 labels."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} probabilities vs {y.size} labels")
    if p.size == 0:
        raise EmptyInput("no samples to evaluate")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0 = TD, 1 = ASD)")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float, name: str, flags: set) -> float:
    if den == 0:
        flags.add(name)
        return 0.0
    return num / den


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    if c.total < 1:
        raise EmptyCounts("confusion counts are all zero")
    flags: set[str] = set()
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    accuracy = (c.tp + c.tn) / c.total
    return MetricsReport(accuracy, precision, recall, f1, frozenset(flags))


def evaluate(probabilities, labels, threshold: float = 0.5) -> tuple[ConfusionCounts, MetricsReport]:
    counts = confusion(probabilities, labels, threshold)
    return counts, compute_metrics(counts)
