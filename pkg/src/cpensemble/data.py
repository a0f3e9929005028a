"""Tabular datasets: schema, CSV ingestion, synthetic cohorts and stratified folds.

Feature values are held in a dense float matrix where ``NaN`` marks a missing
cell and categorical features store the index of their category.  Labels are
integer indices into ``Dataset.class_set``; ``-1`` marks an unlabeled example.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

UNLABELED = -1

_DECIMAL = re.compile(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$")


class DatasetError(ValueError):
    """Raised for malformed input data or schema violations."""


class FeatureKind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: FeatureKind
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind is FeatureKind.CATEGORICAL and len(self.categories) < 2:
            raise DatasetError(
                f"categorical feature {self.name!r} needs at least 2 categories, "
                f"got {list(self.categories)}"
            )
        if self.kind is FeatureKind.NUMERIC and self.categories:
            raise DatasetError(f"numeric feature {self.name!r} cannot declare categories")
        if len(set(self.categories)) != len(self.categories):
            raise DatasetError(f"duplicate categories in feature {self.name!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind is FeatureKind.CATEGORICAL

    @property
    def n_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class Example:
    """A single row: optional feature values aligned to the schema, plus an optional label."""

    values: tuple[float | int | None, ...]
    label: str | None
    id: str


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labeled tabular examples.

    Parameters
    ----------
    schema : sequence of FeatureSpec
    X : ndarray of shape (n_examples, n_features)
        Feature values, ``NaN`` for missing, category index for categorical.
    y : ndarray of shape (n_examples,)
        Label indices into ``class_set``; ``-1`` for unlabeled rows.
    class_set : sequence of str
    ids : sequence of str
    """

    schema: tuple[FeatureSpec, ...]
    X: np.ndarray
    y: np.ndarray
    class_set: tuple[str, ...]
    ids: tuple[str, ...]
    _kinds: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        schema = tuple(self.schema)
        X = np.array(self.X, dtype=float, copy=True)
        y = np.array(self.y, dtype=np.int64, copy=True)
        if X.ndim == 1:
            X = X.reshape(-1, len(schema)) if len(schema) else X.reshape(len(y), 0)
        names = [f.name for f in schema]
        if len(set(names)) != len(names):
            raise DatasetError("feature names must be unique")
        if X.shape != (len(y), len(schema)):
            raise DatasetError(
                f"value matrix shape {X.shape} does not match "
                f"{len(y)} examples x {len(schema)} features"
            )
        if len(self.ids) != len(y):
            raise DatasetError("one id per example required")
        class_set = tuple(self.class_set)
        if len(set(class_set)) != len(class_set) or len(class_set) < 2:
            raise DatasetError(f"class_set must hold >= 2 distinct labels, got {class_set}")
        if np.any((y < UNLABELED) | (y >= len(class_set))):
            raise DatasetError("label index outside class_set")
        for j, spec in enumerate(schema):
            if not spec.is_categorical:
                continue
            col = X[:, j]
            col = col[~np.isnan(col)]
            if np.any((col < 0) | (col >= spec.n_categories) | (col != np.floor(col))):
                raise DatasetError(f"category index out of range in feature {spec.name!r}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "schema", schema)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "class_set", class_set)
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        kinds = np.array([f.is_categorical for f in schema], dtype=bool)
        kinds.setflags(write=False)
        object.__setattr__(self, "_kinds", kinds)

    def __len__(self) -> int:
        return len(self.y)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.class_set == other.class_set
            and self.ids == other.ids
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X, equal_nan=True)
        )

    __hash__ = None

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.schema]

    @property
    def categorical_mask(self) -> np.ndarray:
        return self._kinds

    @property
    def n_categories(self) -> np.ndarray:
        return np.array([f.n_categories for f in self.schema], dtype=np.int64)

    @property
    def is_labeled(self) -> bool:
        return bool(np.all(self.y != UNLABELED))

    def class_counts(self) -> np.ndarray:
        labeled = self.y[self.y != UNLABELED]
        return np.bincount(labeled, minlength=len(self.class_set))

    def example(self, i: int) -> Example:
        values = []
        for spec, v in zip(self.schema, self.X[i]):
            if np.isnan(v):
                values.append(None)
            elif spec.is_categorical:
                values.append(int(v))
            else:
                values.append(float(v))
        label = None if self.y[i] == UNLABELED else self.class_set[self.y[i]]
        return Example(tuple(values), label, self.ids[i])

    @property
    def examples(self) -> list[Example]:
        return [self.example(i) for i in range(len(self))]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.schema,
            self.X[indices],
            self.y[indices],
            self.class_set,
            tuple(self.ids[i] for i in indices),
        )

    @classmethod
    def from_examples(
        cls,
        schema: Sequence[FeatureSpec],
        examples: Sequence[Example],
        class_set: Sequence[str],
    ) -> "Dataset":
        schema = tuple(schema)
        X = np.full((len(examples), len(schema)), np.nan)
        y = np.full(len(examples), UNLABELED, dtype=np.int64)
        class_index = {c: k for k, c in enumerate(class_set)}
        for i, ex in enumerate(examples):
            if len(ex.values) != len(schema):
                raise DatasetError(
                    f"example {ex.id!r} has {len(ex.values)} values, schema has {len(schema)}"
                )
            for j, v in enumerate(ex.values):
                if v is not None:
                    X[i, j] = v
            if ex.label is not None:
                if ex.label not in class_index:
                    raise DatasetError(f"label {ex.label!r} not in class_set {tuple(class_set)}")
                y[i] = class_index[ex.label]
        return cls(schema, X, y, tuple(class_set), tuple(ex.id for ex in examples))


def fingerprint(dataset: Dataset) -> str:
    """SHA-256 of the dataset's canonical CSV rendering."""
    import hashlib

    buf = io.StringIO()
    _write_rows(dataset, buf, label_column="label")
    return hashlib.sha256(buf.getvalue().encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------- CSV


def _is_decimal(cell: str) -> bool:
    return bool(_DECIMAL.match(cell.strip()))


def load_csv(
    path: str | Path,
    label_column: str | None = "label",
    schema_hints: Mapping[str, str | FeatureKind] | None = None,
    class_set: Sequence[str] | None = None,
    id_column: str = "id",
    categories: Mapping[str, Sequence[str]] | None = None,
) -> Dataset:
    """Read a headed CSV file into a :class:`Dataset`.

    A column is numeric iff every non-empty cell parses as a decimal number,
    unless ``schema_hints`` overrides it.  Empty cells become missing values.
    Categories are sorted unless fixed through ``categories``; values outside
    a fixed category list are read as missing.  When ``class_set`` is given,
    any label outside it is an error; otherwise the sorted set of observed
    labels is used.  Empty label cells give unlabeled examples; with
    ``label_column=None`` the file has no labels and ``class_set`` is required.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise DatasetError(f"{path}: duplicate header names {dupes}")
    if label_column is None:
        if class_set is None:
            raise DatasetError("class_set is required when the file has no label column")
    elif label_column not in header:
        raise DatasetError(f"{path}: label column {label_column!r} not found in header")
    if not body:
        raise DatasetError(f"{path}: no data rows")
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DatasetError(f"{path}: row {lineno} has {len(r)} fields, expected {len(header)}")

    schema_hints = {k: FeatureKind(v) for k, v in (schema_hints or {}).items()}
    categories = dict(categories or {})
    unknown = set(schema_hints) - set(header)
    if unknown:
        raise DatasetError(f"schema hints name unknown columns {sorted(unknown)}")

    label_idx = header.index(label_column) if label_column is not None else None
    id_idx = header.index(id_column) if id_column in header and id_column != label_column else None
    feature_cols = [j for j in range(len(header)) if j not in (label_idx, id_idx)]

    schema = []
    X = np.full((len(body), len(feature_cols)), np.nan)
    for out_j, j in enumerate(feature_cols):
        name = header[j]
        cells = [r[j].strip() for r in body]
        present = [c for c in cells if c != ""]
        kind = schema_hints.get(name)
        if kind is None:
            kind = (
                FeatureKind.CATEGORICAL
                if name in categories or not all(_is_decimal(c) for c in present)
                else FeatureKind.NUMERIC
            )
        if kind is FeatureKind.NUMERIC:
            for i, c in enumerate(cells):
                if c == "":
                    continue
                if not _is_decimal(c):
                    raise DatasetError(f"{path}: column {name!r} row {i + 2}: {c!r} is not numeric")
                X[i, out_j] = float(c)
            schema.append(FeatureSpec(name, FeatureKind.NUMERIC))
        else:
            cats = tuple(categories[name]) if name in categories else tuple(sorted(set(present)))
            lookup = {c: k for k, c in enumerate(cats)}
            for i, c in enumerate(cells):
                if c in lookup:
                    X[i, out_j] = lookup[c]
            schema.append(FeatureSpec(name, FeatureKind.CATEGORICAL, cats))

    raw_labels = [r[label_idx].strip() if label_idx is not None else "" for r in body]
    if class_set is None:
        class_set = tuple(sorted({lab for lab in raw_labels if lab}))
    else:
        class_set = tuple(class_set)
        for i, lab in enumerate(raw_labels):
            if lab and lab not in class_set:
                raise DatasetError(
                    f"{path}: row {i + 2}: label {lab!r} not among declared classes {class_set}"
                )
    if len(class_set) < 2:
        raise DatasetError(f"{path}: need at least 2 classes, found {class_set}")
    lookup = {c: k for k, c in enumerate(class_set)}
    y = np.array([lookup[lab] if lab else UNLABELED for lab in raw_labels], dtype=np.int64)
    ids = [r[id_idx].strip() for r in body] if id_idx is not None else [str(i) for i in range(len(body))]
    return Dataset(tuple(schema), X, y, class_set, tuple(ids))


def _format_value(spec: FeatureSpec, v: float) -> str:
    if np.isnan(v):
        return ""
    if spec.is_categorical:
        return spec.categories[int(v)]
    return repr(float(v))


def _write_rows(dataset: Dataset, fh, label_column: str) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["id", *dataset.feature_names, label_column])
    for i in range(len(dataset)):
        label = "" if dataset.y[i] == UNLABELED else dataset.class_set[dataset.y[i]]
        writer.writerow(
            [
                dataset.ids[i],
                *(_format_value(s, v) for s, v in zip(dataset.schema, dataset.X[i])),
                label,
            ]
        )


def write_csv(dataset: Dataset, path, label_column: str = "label") -> None:
    """Write ``dataset`` as CSV (id column first, label column last, full float precision).

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_rows(dataset, path, label_column)
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_rows(dataset, fh, label_column)


# --------------------------------------------------------------------- synthetic


def generate_synthetic(
    n_examples: int = 402,
    n_features: int = 41,
    class_balance: float = 0.56,
    separation: float = 1.0,
    noise_rate: float = 0.0,
    seed: int = 0,
    class_names: tuple[str, str] = ("sMCI", "cMCI"),
) -> Dataset:
    """Two-class Gaussian cohort.

    ``round(n_examples * class_balance)`` rows belong to the first class.
    Class means sit at ``-separation/2`` (first class) and ``+separation/2``
    (second class) on every feature with unit variance.  A ``noise_rate``
    fraction of labels, chosen uniformly without replacement, is then flipped.
    """
    if n_examples < 2:
        raise DatasetError("n_examples must be >= 2")
    if n_features < 1:
        raise DatasetError("n_features must be >= 1")
    if not 0.0 < class_balance < 1.0:
        raise DatasetError("class_balance must lie strictly between 0 and 1")
    if not 0.0 <= noise_rate <= 1.0:
        raise DatasetError("noise_rate must lie in [0, 1]")
    if separation < 0 or not math.isfinite(separation):
        raise DatasetError("separation must be a non-negative real")

    rng = np.random.default_rng(seed)
    n0 = round_half_up(n_examples * class_balance)
    y_true = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n_examples - n0, dtype=np.int64)])
    means = np.where(y_true == 0, -separation / 2.0, separation / 2.0)
    X = rng.standard_normal((n_examples, n_features)) + means[:, None]
    y = y_true.copy()
    n_flip = round_half_up(n_examples * noise_rate)
    if n_flip:
        flip = rng.choice(n_examples, size=n_flip, replace=False)
        y[flip] = 1 - y[flip]
    width = len(str(n_features))
    schema = tuple(FeatureSpec(f"f{j + 1:0{width}d}", FeatureKind.NUMERIC) for j in range(n_features))
    ids = tuple(str(i + 1) for i in range(n_examples))
    return Dataset(schema, X, y, tuple(class_names), ids)


# ------------------------------------------------------------------------- folds


def stratified_folds(dataset: Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold split.

    Each class's indices are shuffled with a generator seeded by ``seed`` and
    dealt round-robin into the folds, the deal continuing where the previous
    class stopped so fold sizes stay balanced too.

    Returns
    -------
    list of (train_indices, test_indices), both sorted ascending.
    """
    if k < 2:
        raise DatasetError("k must be >= 2 (a single fold leaves no held-out data)")
    if not dataset.is_labeled:
        raise DatasetError("stratified folds need every example labeled")
    counts = dataset.class_counts()
    for c, n_c in zip(dataset.class_set, counts):
        if n_c < k:
            raise DatasetError(f"class {c!r} has {n_c} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(dataset), dtype=np.int64)
    offset = 0
    for c in range(len(dataset.class_set)):
        members = np.flatnonzero(dataset.y == c)
        members = members[rng.permutation(len(members))]
        assignment[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    everything = np.arange(len(dataset))
    return [(everything[assignment != f], everything[assignment == f]) for f in range(k)]
