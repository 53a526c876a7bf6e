"""Pooled binary confusion counts and the four reported percentages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_labels(cls, truth, pred) -> "MetricsReport":
        y = np.asarray(truth).astype(bool)
        p = np.asarray(pred).astype(bool)
        if y.shape != p.shape:
            raise ValueError(f"label shapes differ: {y.shape} vs {p.shape}")
        return cls(int((y & p).sum()), int((~y & p).sum()), int((~y & ~p).sum()), int((y & ~p).sum()))

    def __add__(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    # percentages; an empty denominator counts as 0
    @property
    def accuracy(self) -> float:
        return 100.0 * (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return 100.0 * self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return 100.0 * self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "recall": self.recall, "precision": self.precision,
                "f1": self.f1, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}

    def block(self, name: str) -> str:
        """Table-style text block: four percentages at two decimals plus raw counts."""
        return (f"[{name}]\n"
                f"accuracy = {self.accuracy:.2f}\n"
                f"recall = {self.recall:.2f}\n"
                f"precision = {self.precision:.2f}\n"
                f"f1 = {self.f1:.2f}\n"
                f"tp = {self.tp}\nfp = {self.fp}\ntn = {self.tn}\nfn = {self.fn}\n")


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s else 0.0


def table(rows) -> str:
    """Aligned Model | Accuracy | Recall | Precision | F1 table for (name, report) pairs."""
    lines = [f"{'Model':<16}{'Accuracy(%)':>12}{'Recall(%)':>12}{'Precision(%)':>14}{'F1-Score(%)':>13}"]
    for name, r in rows:
        lines.append(f"{name:<16}{r.accuracy:>12.2f}{r.recall:>12.2f}{r.precision:>14.2f}{r.f1:>13.2f}")
    return "\n".join(lines)
