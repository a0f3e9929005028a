"""Naive Bayes with Gaussian numeric and Laplace-smoothed categorical features.

The nonconformity of an example/label pair is ``-ln P(label | x)`` under the
fitted model.  Scores are accumulated in the log domain and normalized with
log-sum-exp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .data import Dataset, Example, FeatureSpec, UNLABELED

FORMAT_NAME = "cpensemble-naive-bayes"
FORMAT_VERSION = 1

POSTERIOR_FLOOR = K.POSTERIOR_FLOOR
MAX_NONCONFORMITY = K.MAX_NONCONFORMITY


class ModelError(ValueError):
    """Raised when a model cannot be fitted, applied or deserialized."""


def schema_arrays(schema) -> tuple[np.ndarray, np.ndarray, int]:
    """Categorical mask, category counts and the widest category count (>= 1)."""
    cat = np.array([f.is_categorical for f in schema], dtype=np.bool_)
    n_cat = np.array([f.n_categories for f in schema], dtype=np.int64)
    return cat, n_cat, int(max(n_cat.max(initial=0), 1))


@dataclass(frozen=True, eq=False)
class NaiveBayesModel:
    """Fitted class priors and per-(class, feature) conditional distributions.

    ``means``/``variances`` have shape (n_classes, n_features); entries for
    categorical features are placeholders (0 and 1).  ``category_probs[j]``
    is the (n_classes, n_categories) table of categorical feature ``j`` and
    ``None`` for numeric features.  ``variance_floor`` is per feature (0 for
    categorical ones).
    """

    schema: tuple[FeatureSpec, ...]
    class_set: tuple[str, ...]
    class_priors: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    category_probs: tuple[np.ndarray | None, ...]
    smoothing: float
    variance_floor: np.ndarray
    _derived: tuple = field(init=False, repr=False)

    def __post_init__(self):
        C, d = len(self.class_set), len(self.schema)
        priors = np.ascontiguousarray(self.class_priors, dtype=float)
        means = np.ascontiguousarray(self.means, dtype=float)
        variances = np.ascontiguousarray(self.variances, dtype=float)
        floor = np.ascontiguousarray(self.variance_floor, dtype=float)
        if priors.shape != (C,) or means.shape != (C, d) or variances.shape != (C, d):
            raise ModelError("parameter shapes do not match schema and class_set")
        if len(self.category_probs) != d:
            raise ModelError("one category table slot per feature required")
        cat, n_cat, k_max = schema_arrays(self.schema)
        tables = np.zeros((C, d, k_max))
        for j, (spec, t) in enumerate(zip(self.schema, self.category_probs)):
            if spec.is_categorical:
                if t is None or np.shape(t) != (C, spec.n_categories):
                    raise ModelError(f"bad category table for feature {spec.name!r}")
                tables[:, j, : spec.n_categories] = t
            elif t is not None:
                raise ModelError(f"numeric feature {spec.name!r} cannot carry a category table")
        log_priors = np.empty(C)
        log_norm = np.empty((C, d))
        inv_two_var = np.empty((C, d))
        log_cat = np.empty((C, d, k_max))
        K.derive_kernel(priors, variances, tables, cat, n_cat, log_priors, log_norm, inv_two_var, log_cat)
        for arr in (priors, means, variances, floor):
            arr.setflags(write=False)
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "variance_floor", floor)
        object.__setattr__(self, "_derived", (log_priors, means, log_norm, inv_two_var, log_cat, cat, n_cat))

    @property
    def n_classes(self) -> int:
        return len(self.class_set)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    # ----------------------------------------------------------------- scoring

    def joint_log_likelihood(self, X: np.ndarray) -> np.ndarray:
        """``log P(c) + sum_j log p(x_j | c)`` per row, shape (n, n_classes).

        Missing values, and category indices the model has never seen, add nothing.
        """
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features, got array of shape {X.shape}")
        out = np.empty((len(X), self.n_classes))
        K.log_joint_kernel(X, *self._derived, out)
        return out

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        s = self.joint_log_likelihood(X)
        out = np.empty_like(s)
        K.posterior_kernel(s, out)
        return out

    def nonconformity_scores(self, X: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """``-ln P(label_i | x_i)`` per row, capped at ``-ln(1e-300)``."""
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        s = self.joint_log_likelihood(X)
        if labels.shape != (len(s),) or np.any((labels < 0) | (labels >= self.n_classes)):
            raise ModelError("one valid label index per row required")
        out = np.empty(len(s))
        K.nonconformity_kernel(s, labels, out)
        return out

    # ----------------------------------------------------------- serialization

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "class_set": list(self.class_set),
            "schema": [
                {"name": f.name, "kind": f.kind.value, "categories": list(f.categories)}
                for f in self.schema
            ],
            "smoothing": self.smoothing,
            "class_priors": self.class_priors.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "variance_floor": self.variance_floor.tolist(),
            "category_probs": [None if t is None else np.asarray(t).tolist() for t in self.category_probs],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "NaiveBayesModel":
        if payload.get("format") != FORMAT_NAME:
            raise ModelError(f"not a naive Bayes model record: {payload.get('format')!r}")
        if payload.get("version") != FORMAT_VERSION:
            raise ModelError(
                f"unsupported naive Bayes model version {payload.get('version')!r} "
                f"(this build reads version {FORMAT_VERSION})"
            )
        try:
            schema = tuple(
                FeatureSpec(f["name"], f["kind"], tuple(f["categories"])) for f in payload["schema"]
            )
            return cls(
                schema=schema,
                class_set=tuple(payload["class_set"]),
                class_priors=np.array(payload["class_priors"], dtype=float),
                means=np.array(payload["means"], dtype=float),
                variances=np.array(payload["variances"], dtype=float),
                category_probs=tuple(
                    None if t is None else np.array(t, dtype=float) for t in payload["category_probs"]
                ),
                smoothing=float(payload["smoothing"]),
                variance_floor=np.array(payload["variance_floor"], dtype=float),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed naive Bayes model record: {exc}") from exc


def check_fit_inputs(y, class_set, smoothing, variance_floor) -> None:
    if not smoothing > 0:
        raise ModelError("smoothing must be positive")
    if variance_floor is not None and not variance_floor > 0:
        raise ModelError("variance_floor must be positive")
    if len(y) == 0:
        raise ModelError("cannot fit on an empty training set")
    if np.any(y == UNLABELED):
        raise ModelError("training examples must all be labeled")
    counts = np.bincount(y, minlength=len(class_set))
    if np.any(counts == 0):
        missing = [class_set[c] for c in np.flatnonzero(counts == 0)]
        raise ModelError(f"classes absent from training data: {missing}")


def fit_arrays(
    X: np.ndarray,
    y: np.ndarray,
    schema: tuple[FeatureSpec, ...],
    class_set: tuple[str, ...],
    smoothing: float = 1.0,
    variance_floor: float | None = None,
) -> NaiveBayesModel:
    """Fit on raw arrays (``NaN`` = missing, ``y`` = class indices)."""
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=np.int64)
    check_fit_inputs(y, class_set, smoothing, variance_floor)
    C, d = len(class_set), len(schema)
    if X.shape != (len(y), d):
        raise ModelError(f"expected array of shape ({len(y)}, {d}), got {X.shape}")
    cat, n_cat, k_max = schema_arrays(schema)
    priors = np.empty(C)
    means = np.zeros((C, d))
    variances = np.ones((C, d))
    tables = np.zeros((C, d, k_max))
    floor = np.empty(d)
    abs_floor = -1.0 if variance_floor is None else float(variance_floor)
    K.fit_kernel(X, y, C, cat, n_cat, float(smoothing), abs_floor, priors, means, variances, tables, floor)
    return NaiveBayesModel(
        schema=tuple(schema),
        class_set=tuple(class_set),
        class_priors=priors,
        means=means,
        variances=variances,
        category_probs=tuple(
            tables[:, j, : f.n_categories].copy() if f.is_categorical else None
            for j, f in enumerate(schema)
        ),
        smoothing=float(smoothing),
        variance_floor=floor,
    )


def fit(train: Dataset, smoothing: float = 1.0, variance_floor: float | None = None) -> NaiveBayesModel:
    """Fit a naive Bayes model.

    Parameters
    ----------
    train : Dataset
        Every example labeled, every class present at least once.
    smoothing : float, default=1.0
        Laplace pseudo-count for categorical features.
    variance_floor : float, optional
        Absolute lower bound on Gaussian variances.  By default each feature
        uses ``max(1e-9 * global variance, 1e-12)``.

    Notes
    -----
    Variances use the maximum-likelihood divisor ``n``.  A (class, numeric
    feature) pair with no observed values falls back to the feature's global
    mean and variance.
    """
    return fit_arrays(train.X, train.y, train.schema, train.class_set, smoothing, variance_floor)


def _as_row(model: NaiveBayesModel, example: Example | np.ndarray) -> np.ndarray:
    values = example.values if isinstance(example, Example) else example
    if len(values) != model.n_features:
        raise ModelError(f"example has {len(values)} values, model expects {model.n_features}")
    return np.array([[np.nan if v is None else float(v) for v in values]])


def posterior(model: NaiveBayesModel, example: Example | np.ndarray) -> np.ndarray:
    """Class posterior vector aligned with ``model.class_set``."""
    return model.predict_proba(_as_row(model, example))[0]


def nonconformity(model: NaiveBayesModel, example: Example | np.ndarray, candidate: str | int) -> float:
    """``-ln P(candidate | example)``, with the posterior floored at 1e-300."""
    if isinstance(candidate, str):
        if candidate not in model.class_set:
            raise ModelError(f"unknown label {candidate!r}")
        candidate = model.class_set.index(candidate)
    if not 0 <= candidate < model.n_classes:
        raise ModelError(f"label index {candidate} outside class_set")
    return float(model.nonconformity_scores(_as_row(model, example), np.array([candidate]))[0])
