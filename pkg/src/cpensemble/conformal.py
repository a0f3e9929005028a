"""Transductive conformal prediction over a single training bag.

For each candidate label the test example is appended to the bag with that
label, the naive Bayes model is refit on the augmented bag, and every member
is scored under the refit model.  The p-value is the fraction of augmented
members whose nonconformity is at least the test example's own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, DatasetError, Example, FeatureSpec, UNLABELED
from . import _kernels as K
from .naive_bayes import check_fit_inputs, schema_arrays


@dataclass(frozen=True)
class ForcedPrediction:
    label: str
    credibility: float
    confidence: float


@dataclass(frozen=True, eq=False)
class ConformalPredictor:
    """One conformal predictor: a training bag restricted to ``feature_subset``.

    ``bag_X`` holds only the subset's columns; test examples are given in the
    full schema and projected before scoring.
    """

    bag_X: np.ndarray
    bag_y: np.ndarray
    feature_subset: tuple[int, ...]
    schema: tuple[FeatureSpec, ...]
    class_set: tuple[str, ...]
    smoothing: float = 1.0
    variance_floor: float | None = None
    _sub_schema: tuple[FeatureSpec, ...] = field(init=False, repr=False)

    def __post_init__(self):
        subset = tuple(int(j) for j in self.feature_subset)
        if len(set(subset)) != len(subset) or not subset:
            raise DatasetError("feature_subset must be non-empty with unique indices")
        if min(subset) < 0 or max(subset) >= len(self.schema):
            raise DatasetError("feature_subset index outside the schema")
        bag_X = np.array(self.bag_X, dtype=float)
        bag_y = np.array(self.bag_y, dtype=np.int64)
        if bag_X.shape != (len(bag_y), len(subset)):
            raise DatasetError("bag_X must have one column per subset feature")
        counts = np.bincount(bag_y[bag_y != UNLABELED], minlength=len(self.class_set))
        if len(bag_y) == 0 or np.any(bag_y == UNLABELED) or np.any(counts == 0):
            raise DatasetError("training bag must be non-empty, labeled, and contain every class")
        check_fit_inputs(bag_y, self.class_set, self.smoothing, self.variance_floor)
        bag_X.setflags(write=False)
        bag_y.setflags(write=False)
        object.__setattr__(self, "bag_X", bag_X)
        object.__setattr__(self, "bag_y", bag_y)
        object.__setattr__(self, "feature_subset", subset)
        object.__setattr__(self, "class_set", tuple(self.class_set))
        object.__setattr__(self, "_sub_schema", tuple(self.schema[j] for j in subset))

    @classmethod
    def from_dataset(
        cls,
        bag: Dataset,
        feature_subset: Sequence[int] | None = None,
        smoothing: float = 1.0,
        variance_floor: float | None = None,
    ) -> "ConformalPredictor":
        subset = tuple(range(bag.n_features)) if feature_subset is None else tuple(feature_subset)
        if any(not 0 <= j < bag.n_features for j in subset):
            raise DatasetError("feature_subset index outside the schema")
        return cls(
            bag.X[:, list(subset)],
            bag.y,
            subset,
            bag.schema,
            bag.class_set,
            smoothing,
            variance_floor,
        )

    @property
    def bag_size(self) -> int:
        return len(self.bag_y)

    def project(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.schema):
            raise DatasetError(f"expected {len(self.schema)} features, got {X.shape[1]}")
        return X[:, list(self.feature_subset)]

    def p_value_counts(self, X_sub: np.ndarray) -> np.ndarray:
        """Integer p-value numerators for projected test rows, shape (n_test, n_classes)."""
        X_sub = np.ascontiguousarray(X_sub, dtype=float)
        if X_sub.ndim != 2 or X_sub.shape[1] != len(self.feature_subset):
            raise DatasetError("test rows must be projected onto the feature subset")
        cat, n_cat, k_max = schema_arrays(self._sub_schema)
        counts = np.empty((len(X_sub), len(self.class_set)), dtype=np.int64)
        abs_floor = -1.0 if self.variance_floor is None else float(self.variance_floor)
        K.transductive_counts_kernel(
            self.bag_X, self.bag_y, X_sub, len(self.class_set), cat, n_cat, k_max,
            float(self.smoothing), abs_floor, counts,
        )
        return counts

    def p_values_batch(self, X: np.ndarray) -> np.ndarray:
        """p-values for every row of ``X`` (full schema), shape (n_test, n_classes)."""
        return self.p_value_counts(self.project(X)) / (self.bag_size + 1)


def _row(cp: ConformalPredictor, test: Example | np.ndarray) -> np.ndarray:
    if isinstance(test, Example):
        return np.array([np.nan if v is None else float(v) for v in test.values])
    return np.asarray(test, dtype=float)


def p_values(cp: ConformalPredictor, test: Example | np.ndarray) -> np.ndarray:
    """Per-label p-values for one test example, aligned with ``cp.class_set``.

    Every value is ``k / (bag_size + 1)`` for an integer ``1 <= k <= bag_size + 1``.
    """
    return cp.p_values_batch(_row(cp, test)[None, :])[0]


def region_from_p_values(p: np.ndarray, class_set: Sequence[str], epsilon: float) -> set[str]:
    """Labels whose p-value strictly exceeds ``epsilon``."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return {c for c, pv in zip(class_set, p) if pv > epsilon}


def forced_from_p_values(p: np.ndarray, class_set: Sequence[str]) -> ForcedPrediction:
    """Forced prediction from a p-value vector; ties go to the earliest label in ``class_set``."""
    if len(p) < 2:
        raise ValueError("forced prediction needs at least two candidate labels")
    best = int(np.argmax(p))
    runner_up = float(np.max(np.delete(p, best)))
    return ForcedPrediction(class_set[best], float(p[best]), 1.0 - runner_up)


def forced_prediction(cp: ConformalPredictor, test: Example | np.ndarray) -> ForcedPrediction:
    return forced_from_p_values(p_values(cp, test), cp.class_set)


def prediction_region(cp: ConformalPredictor, test: Example | np.ndarray, epsilon: float) -> set[str]:
    """Prediction region at significance ``epsilon``; may be empty."""
    return region_from_p_values(p_values(cp, test), cp.class_set, epsilon)
