"""K-nearest-neighbour baseline in grid space.

A query takes the label vectors of the k recorded training grids closest in
Euclidean distance (ties by (h, w) lexicographic order) and votes per time
point; a tied vote counts as congestion.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .grid import QueryLocation
from .metrics import MetricsReport
from .rfpm import PredictionVector


class KNNBaseline:
    def __init__(self, train_records, k: int):
        if not train_records:
            raise ConfigError("KNN baseline needs a non-empty training set")
        if not 1 <= k <= len(train_records):
            raise ConfigError(f"k must lie in [1, {len(train_records)}], got {k}")
        self.k = k
        self.coords = np.array([[r.location.h, r.location.w] for r in train_records], dtype=np.int64)
        self.labels = np.stack([r.labels for r in train_records]).astype(np.int64)

    def neighbours(self, q: QueryLocation) -> np.ndarray:
        d2 = (self.coords[:, 0] - q.h) ** 2 + (self.coords[:, 1] - q.w) ** 2
        # lexsort: last key is primary
        return np.lexsort((self.coords[:, 1], self.coords[:, 0], d2))[:self.k]

    def predict(self, q: QueryLocation) -> PredictionVector:
        votes = self.labels[self.neighbours(q)].sum(axis=0)
        return PredictionVector(q, (2 * votes >= self.k).astype(np.float32), 0.5)


def knn_baseline(train_records, query: QueryLocation, k: int) -> PredictionVector:
    return KNNBaseline(train_records, k).predict(query)


def evaluate_knn(train_records, eval_records, k: int) -> MetricsReport:
    model = KNNBaseline(train_records, k)
    report = MetricsReport(0, 0, 0, 0)
    for r in eval_records:
        report = report + MetricsReport.from_labels(r.labels, model.predict(r.location).binarize())
    return report
