"""Confusion matrices and per-class / macro-averaged precision and recall."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    """Counts indexed ``[true][predicted]``."""

    class_names: tuple[str, ...]
    counts: np.ndarray

    @classmethod
    def empty(cls, class_names: Sequence[str]) -> "ConfusionMatrix":
        k = len(class_names)
        return cls(tuple(class_names), np.zeros((k, k), dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(pairs: Iterable[tuple[str, str]], class_names: Sequence[str],
               cm: ConfusionMatrix | None = None) -> ConfusionMatrix:
    """Count ``(true, predicted)`` class-name pairs, optionally into an existing matrix."""
    index = {name: i for i, name in enumerate(class_names)}
    if cm is None:
        cm = ConfusionMatrix.empty(class_names)
    counts = cm.counts.copy()
    for true, pred in pairs:
        for name in (true, pred):
            if name not in index:
                raise KeyError(f"unknown class {name!r}; known classes: {list(class_names)}")
        counts[index[true], index[pred]] += 1
    return ConfusionMatrix(tuple(class_names), counts)


@dataclass
class ClassScores:
    name: str
    tp: int
    fp: int
    fn: int
    precision: float | None  # None when the class was never predicted
    recall: float | None  # None when the class never occurs


@dataclass
class PrecisionRecall:
    per_class: list[ClassScores]
    mean_precision: float | None
    mean_recall: float | None

    @property
    def undefined(self) -> list[str]:
        """Flags for every undefined per-class value, e.g. ``"cone:precision"``."""
        flags = []
        for c in self.per_class:
            if c.precision is None:
                flags.append(f"{c.name}:precision")
            if c.recall is None:
                flags.append(f"{c.name}:recall")
        return flags


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def precision_recall(cm: ConfusionMatrix) -> PrecisionRecall:
    counts = cm.counts
    diag = np.diag(counts)
    fp = counts.sum(axis=0) - diag
    fn = counts.sum(axis=1) - diag
    per = [ClassScores(name, int(tp), int(p), int(n), _ratio(int(tp), int(tp + p)), _ratio(int(tp), int(tp + n)))
           for name, tp, p, n in zip(cm.class_names, diag, fp, fn)]
    return PrecisionRecall(per, _mean(c.precision for c in per), _mean(c.recall for c in per))
