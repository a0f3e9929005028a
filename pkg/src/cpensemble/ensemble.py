"""Random-Patches ensembles with credibility-gated majority voting.

Each base estimator sees a bootstrap sample of the training examples and a
global random subset of the features.  At prediction time only trustworthy
estimators (uncertainty score strictly above the threshold) vote; when none
is trustworthy the example is left unpredictable.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .conformal import ConformalPredictor
from .data import Dataset, DatasetError, Example, FeatureSpec, round_half_up
from .naive_bayes import ModelError, NaiveBayesModel, fit_arrays

FORMAT_NAME = "cpensemble-ensemble"
FORMAT_VERSION = 1

MAX_BOOTSTRAP_REDRAWS = 10

_KEEP = object()


class BaseMode(str, enum.Enum):
    """How a base estimator reports the uncertainty that gates its vote."""

    CONFORMAL = "conformal"  # conformal predictor, gated on credibility
    POSTERIOR = "posterior"  # plain naive Bayes, gated on max posterior
    PLAIN = "plain"  # plain naive Bayes, never filtered


@dataclass(frozen=True)
class EnsembleConfig:
    n_estimators: int = 50
    feature_fraction: float = 0.75
    bootstrap_fraction: float = 1.0
    credibility_threshold: float | None = None
    base_mode: BaseMode = BaseMode.CONFORMAL
    seed: int = 0
    feature_report_fraction: float = 0.8
    bootstrap: bool = True
    smoothing: float = 1.0
    variance_floor: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "base_mode", BaseMode(self.base_mode))
        if int(self.n_estimators) != self.n_estimators or self.n_estimators < 1:
            raise ValueError("n_estimators must be a positive integer")
        if not 0.0 < self.feature_fraction <= 1.0:
            raise ValueError("feature_fraction must lie in (0, 1]")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")
        if self.credibility_threshold is not None and not 0.0 <= self.credibility_threshold < 1.0:
            raise ValueError("credibility_threshold must lie in [0, 1)")
        if not 0.0 < self.feature_report_fraction <= 1.0:
            raise ValueError("feature_report_fraction must lie in (0, 1]")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if not self.smoothing > 0:
            raise ValueError("smoothing must be positive")

    def n_subset_features(self, n_features: int) -> int:
        # round() guards against products like 0.1 * 30 = 3.0000000000000004
        return max(1, math.ceil(round(self.feature_fraction * n_features, 9)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_mode"] = self.base_mode.value
        return d


@dataclass(frozen=True, eq=False)
class BaseEstimator:
    bag: np.ndarray
    feature_subset: tuple[int, ...]
    predictor: ConformalPredictor | NaiveBayesModel


@dataclass(frozen=True, eq=False)
class ConformalEnsemble:
    train: Dataset
    config: EnsembleConfig
    estimators: tuple[BaseEstimator, ...]

    @property
    def schema(self) -> tuple[FeatureSpec, ...]:
        return self.train.schema

    @property
    def class_set(self) -> tuple[str, ...]:
        return self.train.class_set


@dataclass(frozen=True)
class EnsembleVerdict:
    """Outcome for one example; ``label is None`` means unpredictable."""

    example_id: str
    label: str | None
    mean_credibility: float | None
    mean_confidence: float | None
    trustworthy_fraction: float
    vote_counts: dict[str, int]
    frequent_features: tuple[str, ...]

    @property
    def unpredictable(self) -> bool:
        return self.label is None


@dataclass(frozen=True)
class EstimatorOutputs:
    """Per-estimator forced predictions on a batch, each array shaped (n_estimators, n_test)."""

    labels: np.ndarray
    credibility: np.ndarray
    confidence: np.ndarray
    score: np.ndarray

    def head(self, n: int) -> "EstimatorOutputs":
        return EstimatorOutputs(self.labels[:n], self.credibility[:n], self.confidence[:n], self.score[:n])


# -------------------------------------------------------------------- building


def estimator_rng(seed: int, index: int) -> np.random.Generator:
    """Child generator for estimator ``index``; independent of build order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _draw_bag(rng: np.random.Generator, y: np.ndarray, n_classes: int, config: EnsembleConfig) -> np.ndarray:
    n = len(y)
    if not config.bootstrap:
        return np.arange(n)
    size = max(1, round_half_up(config.bootstrap_fraction * n))
    for _ in range(1 + MAX_BOOTSTRAP_REDRAWS):
        bag = rng.integers(0, n, size=size)
        if len(np.unique(y[bag])) == n_classes:
            return bag
    # stratified fallback: sample within each class in proportion to its size
    parts = []
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        k = max(1, round_half_up(size * len(members) / n))
        parts.append(members[rng.integers(0, len(members), size=k)])
    return np.concatenate(parts)


def build(train: Dataset, config: EnsembleConfig) -> ConformalEnsemble:
    """Train ``config.n_estimators`` base estimators on bootstrap/feature patches of ``train``."""
    if not train.is_labeled:
        raise DatasetError("training data must be fully labeled")
    counts = train.class_counts()
    if np.any(counts == 0):
        raise DatasetError("every class needs at least one training example")
    d = train.n_features
    n_sub = config.n_subset_features(d)
    estimators = []
    for i in range(config.n_estimators):
        rng = estimator_rng(config.seed, i)
        bag = _draw_bag(rng, train.y, len(train.class_set), config)
        subset = tuple(sorted(int(j) for j in rng.choice(d, size=n_sub, replace=False)))
        estimators.append(_make_estimator(train, bag, subset, config))
    return ConformalEnsemble(train, config, tuple(estimators))


def _make_estimator(train: Dataset, bag: np.ndarray, subset: tuple[int, ...], config: EnsembleConfig) -> BaseEstimator:
    cols = list(subset)
    bag_X = train.X[bag][:, cols]
    bag_y = train.y[bag]
    if config.base_mode is BaseMode.CONFORMAL:
        predictor = ConformalPredictor(
            bag_X, bag_y, subset, train.schema, train.class_set, config.smoothing, config.variance_floor
        )
    else:
        predictor = fit_arrays(
            bag_X, bag_y, tuple(train.schema[j] for j in cols), train.class_set,
            config.smoothing, config.variance_floor,
        )
    return BaseEstimator(np.asarray(bag, dtype=np.int64), subset, predictor)


# ------------------------------------------------------------------ prediction


def _forced(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Argmax (first on ties), max and 1 - runner-up for each row of ``scores``."""
    labels = np.argmax(scores, axis=1)
    top = scores[np.arange(len(scores)), labels]
    rest = scores.copy()
    rest[np.arange(len(scores)), labels] = -np.inf
    return labels, top, 1.0 - rest.max(axis=1)


def _as_matrix(ensemble: ConformalEnsemble, tests) -> tuple[np.ndarray, list[str]]:
    if isinstance(tests, Dataset):
        if tests.schema != ensemble.schema:
            raise DatasetError("test data schema does not match the ensemble's training schema")
        return tests.X, list(tests.ids)
    tests = list(tests)
    d = ensemble.train.n_features
    X = np.full((len(tests), d), np.nan)
    for i, ex in enumerate(tests):
        if len(ex.values) != d:
            raise DatasetError(f"example {ex.id!r} has {len(ex.values)} values, schema has {d}")
        X[i] = [np.nan if v is None else float(v) for v in ex.values]
    return X, [ex.id for ex in tests]


def estimator_outputs(ensemble: ConformalEnsemble, X: np.ndarray) -> EstimatorOutputs:
    """Forced prediction and gating score of every estimator on every row of ``X``."""
    X = np.asarray(X, dtype=float)
    E, T = len(ensemble.estimators), len(X)
    labels = np.empty((E, T), dtype=np.int64)
    cred = np.empty((E, T))
    conf = np.empty((E, T))
    score = np.empty((E, T))
    mode = ensemble.config.base_mode
    for e, est in enumerate(ensemble.estimators):
        if T == 0:
            continue
        if mode is BaseMode.CONFORMAL:
            values = est.predictor.p_values_batch(X)
        else:
            values = est.predictor.predict_proba(X[:, list(est.feature_subset)])
        labels[e], cred[e], conf[e] = _forced(values)
        score[e] = 1.0 if mode is BaseMode.PLAIN else cred[e]
    return EstimatorOutputs(labels, cred, conf, score)


def aggregate(
    outputs: EstimatorOutputs,
    threshold: float | None,
    class_set: Sequence[str],
    subsets: Sequence[Sequence[int]],
    feature_names: Sequence[str],
    ids: Sequence[str],
    report_fraction: float = 0.8,
) -> list[EnsembleVerdict]:
    """Combine per-estimator outputs into verdicts at one threshold.

    Vote ties are broken by the larger summed credibility of the tied labels,
    then by ``class_set`` order.
    """
    E, T = outputs.labels.shape
    trusted = np.ones((E, T), dtype=bool) if threshold is None else outputs.score > threshold
    membership = np.zeros((E, len(feature_names)), dtype=np.int64)
    for e, subset in enumerate(subsets[:E]):
        membership[e, list(subset)] = 1
    verdicts = []
    for t in range(T):
        who = trusted[:, t]
        n_trust = int(who.sum())
        votes = np.bincount(outputs.labels[who, t], minlength=len(class_set))
        counts = {c: int(v) for c, v in zip(class_set, votes)}
        if n_trust == 0:
            verdicts.append(EnsembleVerdict(ids[t], None, None, None, 0.0, counts, ()))
            continue
        cred_sum = np.bincount(outputs.labels[who, t], weights=outputs.credibility[who, t], minlength=len(class_set))
        tied = np.flatnonzero(votes == votes.max())
        winner = int(tied[np.argmax(cred_sum[tied])])
        freq = membership[who].sum(axis=0)
        chosen = [j for j in range(len(feature_names)) if freq[j] >= report_fraction * n_trust - 1e-9]
        chosen.sort(key=lambda j: (-freq[j], feature_names[j]))
        verdicts.append(
            EnsembleVerdict(
                example_id=ids[t],
                label=class_set[winner],
                mean_credibility=float(outputs.credibility[who, t].mean()),
                mean_confidence=float(outputs.confidence[who, t].mean()),
                trustworthy_fraction=n_trust / E,
                vote_counts=counts,
                frequent_features=tuple(feature_names[j] for j in chosen),
            )
        )
    return verdicts


def predict_batch(ensemble: ConformalEnsemble, tests, threshold=_KEEP) -> list[EnsembleVerdict]:
    """Verdicts for a list of :class:`Example` (or a :class:`Dataset`), in input order.

    ``threshold`` overrides the configured credibility threshold when given;
    pass ``None`` explicitly to make every estimator trustworthy.
    """
    X, ids = _as_matrix(ensemble, tests)
    if threshold is _KEEP:
        threshold = ensemble.config.credibility_threshold
    outputs = estimator_outputs(ensemble, X)
    return aggregate(
        outputs,
        threshold,
        ensemble.class_set,
        [est.feature_subset for est in ensemble.estimators],
        ensemble.train.feature_names,
        ids,
        ensemble.config.feature_report_fraction,
    )


def predict(ensemble: ConformalEnsemble, test: Example, threshold=_KEEP) -> EnsembleVerdict:
    return predict_batch(ensemble, [test], threshold)[0]


# --------------------------------------------------------------- serialization


def _dataset_to_dict(ds: Dataset) -> dict:
    return {
        "schema": [{"name": f.name, "kind": f.kind.value, "categories": list(f.categories)} for f in ds.schema],
        "class_set": list(ds.class_set),
        "ids": list(ds.ids),
        "X": [[None if np.isnan(v) else float(v) for v in row] for row in ds.X],
        "y": ds.y.tolist(),
    }


def _dataset_from_dict(d: dict) -> Dataset:
    schema = tuple(FeatureSpec(f["name"], f["kind"], tuple(f["categories"])) for f in d["schema"])
    X = np.array([[np.nan if v is None else v for v in row] for row in d["X"]], dtype=float)
    return Dataset(schema, X.reshape(len(d["y"]), len(schema)), np.array(d["y"]), tuple(d["class_set"]), tuple(d["ids"]))


def to_dict(ensemble: ConformalEnsemble) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": ensemble.config.to_dict(),
        "train": _dataset_to_dict(ensemble.train),
        "estimators": [
            {
                "bag": est.bag.tolist(),
                "features": list(est.feature_subset),
                "model": None if isinstance(est.predictor, ConformalPredictor) else est.predictor.to_dict(),
            }
            for est in ensemble.estimators
        ],
    }


def from_dict(payload: dict) -> ConformalEnsemble:
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
        raise ModelError("not a conformal ensemble model file")
    if payload.get("version") != FORMAT_VERSION:
        raise ModelError(
            f"model file version {payload.get('version')!r} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    try:
        config = EnsembleConfig(**payload["config"])
        train = _dataset_from_dict(payload["train"])
        estimators = []
        for rec in payload["estimators"]:
            bag = np.array(rec["bag"], dtype=np.int64)
            subset = tuple(int(j) for j in rec["features"])
            if config.base_mode is BaseMode.CONFORMAL:
                est = _make_estimator(train, bag, subset, config)
            else:
                est = BaseEstimator(bag, subset, NaiveBayesModel.from_dict(rec["model"]))
            estimators.append(est)
    except ModelError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelError(f"malformed model file: {exc}") from exc
    if len(estimators) != config.n_estimators:
        raise ModelError("estimator count does not match the stored configuration")
    return ConformalEnsemble(train, config, tuple(estimators))


def save(ensemble: ConformalEnsemble, path: str | Path) -> None:
    """Write the ensemble as a versioned JSON text file."""
    Path(path).write_text(json.dumps(to_dict(ensemble), indent=1) + "\n", encoding="utf-8")


def load(path: str | Path) -> ConformalEnsemble:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read model file {path}: {exc}") from exc
    return from_dict(payload)


def with_threshold(config: EnsembleConfig, threshold: float | None) -> EnsembleConfig:
    return replace(config, credibility_threshold=threshold)
