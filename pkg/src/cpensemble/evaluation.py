"""Repeated stratified cross-validation, grid evaluation and significance tests."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.special import gammaincc
from scipy.stats import rankdata

from .data import Dataset, stratified_folds
from .ensemble import (
    BaseMode,
    EnsembleConfig,
    EnsembleVerdict,
    aggregate,
    build,
    estimator_outputs,
    predict_batch,
)

EXACT_WILCOXON_MAX_N = 20
MODE_ORDER = {BaseMode.CONFORMAL: 0, BaseMode.POSTERIOR: 1, BaseMode.PLAIN: 2}


# --------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class FoldMetrics:
    """Metrics of one test fold.  Undefined metrics are ``None``."""

    f_measure: float | None
    sensitivity: float | None
    specificity: float | None
    empty_rate: float
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


def compute_metrics(
    verdicts: Sequence[EnsembleVerdict], truths: Sequence[str], positive: str = "cMCI"
) -> FoldMetrics:
    """Confusion-matrix metrics over predicted examples; unpredictable ones count only toward ``empty_rate``.

    With no predicted positives F is 0; sensitivity (specificity) is ``None``
    when the predicted subset holds no actual positives (negatives).
    """
    if len(verdicts) == 0:
        raise ValueError("no verdicts to score")
    if len(verdicts) != len(truths):
        raise ValueError("verdicts and truths must be aligned")
    tp = fp = tn = fn = empty = 0
    for v, truth in zip(verdicts, truths):
        if v.unpredictable:
            empty += 1
        elif v.label == positive:
            tp += truth == positive
            fp += truth != positive
        else:
            fn += truth == positive
            tn += truth != positive
    empty_rate = empty / len(verdicts)
    if empty == len(verdicts):
        return FoldMetrics(None, None, None, empty_rate)
    sensitivity = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    precision = tp / (tp + fp) if tp + fp else None
    if precision is None or not tp:
        f_measure = 0.0
    else:
        recall = tp / (tp + fn)
        f_measure = 2 * precision * recall / (precision + recall)
    return FoldMetrics(f_measure, sensitivity, specificity, empty_rate, tp, fp, tn, fn)


@dataclass(frozen=True)
class Summary:
    mean: float | None
    sd: float | None
    n: int

    def fmt(self, scale: float = 1.0, digits: int = 3) -> str:
        if self.mean is None:
            return "n/a"
        return f"{self.mean * scale:.{digits}f}±{self.sd * scale:.{digits}f}"


def summarize(values: Iterable[float | None]) -> Summary:
    """Mean and sample standard deviation of the defined values."""
    vals = np.array([v for v in values if v is not None], dtype=float)
    if len(vals) == 0:
        return Summary(None, None, 0)
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return Summary(float(np.mean(vals)), sd, len(vals))


@dataclass(frozen=True)
class MetricsReport:
    f_measure: Summary
    sensitivity: Summary
    specificity: Summary
    empty_rate_pct: Summary
    n_iterations: int
    folds: tuple[FoldMetrics, ...]

    @classmethod
    def from_folds(cls, folds: Sequence[FoldMetrics]) -> "MetricsReport":
        folds = tuple(folds)
        return cls(
            f_measure=summarize(f.f_measure for f in folds),
            sensitivity=summarize(f.sensitivity for f in folds),
            specificity=summarize(f.specificity for f in folds),
            empty_rate_pct=summarize(100.0 * f.empty_rate for f in folds),
            n_iterations=len(folds),
            folds=folds,
        )

    def fold_f_measures(self) -> list[float | None]:
        return [f.f_measure for f in self.folds]


# ----------------------------------------------------------------- CV protocol


def _child_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def fold_plan(dataset: Dataset, k: int, repeats: int, seed: int):
    """Fold assignments for every repeat; repeat ``r`` reshuffles with a seed derived from ``(seed, r)``."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    return [stratified_folds(dataset, k, _child_seed(seed, r)) for r in range(repeats)]


def _truths(dataset: Dataset, idx: np.ndarray) -> list[str]:
    return [dataset.class_set[c] for c in dataset.y[idx]]


def _check_positive(dataset: Dataset, positive: str) -> None:
    if positive not in dataset.class_set:
        raise ValueError(f"positive class {positive!r} not in {dataset.class_set}")


def run_cv(
    dataset: Dataset,
    config: EnsembleConfig,
    k: int = 5,
    repeats: int = 10,
    seed: int = 0,
    positive: str = "cMCI",
    n_jobs: int = 1,
) -> MetricsReport:
    """Repeated stratified k-fold evaluation of one configuration.

    The ensemble for repeat ``r``, fold ``f`` is built with seed derived from
    ``(seed, r, f)``; ``config.seed`` is not used.
    """
    _check_positive(dataset, positive)
    plan = fold_plan(dataset, k, repeats, seed)
    jobs = [
        (r, f, train_idx, test_idx)
        for r, folds in enumerate(plan)
        for f, (train_idx, test_idx) in enumerate(folds)
    ]

    def one(r, f, train_idx, test_idx):
        cfg = replace(config, seed=_child_seed(seed, r, f))
        ensemble = build(dataset.subset(train_idx), cfg)
        verdicts = predict_batch(ensemble, dataset.subset(test_idx))
        return compute_metrics(verdicts, _truths(dataset, test_idx), positive)

    results = _run_jobs(one, jobs, n_jobs)
    return MetricsReport.from_folds(results)


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs == 1:
        return [fn(*job) for job in jobs]
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*job) for job in jobs)


# ------------------------------------------------------------------------ grid


@dataclass(frozen=True)
class GridCell:
    base_mode: BaseMode
    n_estimators: int
    feature_fraction: float
    threshold: float | None
    bootstrap: bool = True

    def sort_key(self):
        return (
            MODE_ORDER[BaseMode(self.base_mode)],
            not self.bootstrap,
            self.n_estimators,
            self.feature_fraction,
            -1.0 if self.threshold is None else self.threshold,
        )

    @property
    def name(self) -> str:
        if not self.bootstrap:
            return "simple NB"
        th = "none" if self.threshold is None else f"{self.threshold:g}"
        return f"{self.base_mode.value} t={self.n_estimators} f={self.feature_fraction:g} th={th}"

    def config(self, base: EnsembleConfig) -> EnsembleConfig:
        return replace(
            base,
            base_mode=self.base_mode,
            n_estimators=self.n_estimators,
            feature_fraction=self.feature_fraction,
            credibility_threshold=self.threshold,
            bootstrap=self.bootstrap,
        )


SIMPLE_NB = GridCell(BaseMode.PLAIN, 1, 1.0, None, bootstrap=False)


@dataclass(frozen=True)
class GridResult:
    """Metrics per grid cell, all cells evaluated on identical fold assignments."""

    cells: dict[GridCell, MetricsReport]

    def sorted_cells(self) -> list[GridCell]:
        return sorted(self.cells, key=GridCell.sort_key)

    def __getitem__(self, cell: GridCell) -> MetricsReport:
        return self.cells[cell]

    def __len__(self) -> int:
        return len(self.cells)

    def best_cell(self) -> GridCell:
        ranked = [c for c in self.sorted_cells() if self.cells[c].f_measure.mean is not None]
        return max(ranked, key=lambda c: self.cells[c].f_measure.mean)


def grid_cells(
    n_estimators: Sequence[int],
    feature_fractions: Sequence[float],
    thresholds: Sequence[float],
    base_modes: Sequence[BaseMode | str],
    include_baselines: bool = True,
) -> list[GridCell]:
    """Cells of the grid.

    Gated modes (conformal, posterior) get one cell per threshold; the plain
    mode gets a single unthresholded cell per (n_estimators, feature_fraction).
    Baselines add the unthresholded plain ensembles and the simple (single,
    full-data) naive Bayes.
    """
    if not (n_estimators and feature_fractions and base_modes):
        raise ValueError("grid axes must be non-empty")
    modes = [BaseMode(m) for m in base_modes]
    cells = []
    for mode in modes:
        for t in n_estimators:
            for ff in feature_fractions:
                if mode is BaseMode.PLAIN:
                    cells.append(GridCell(mode, int(t), float(ff), None))
                else:
                    if not thresholds:
                        raise ValueError("gated modes need at least one threshold")
                    cells.extend(GridCell(mode, int(t), float(ff), float(th)) for th in thresholds)
    if include_baselines:
        for t in n_estimators:
            for ff in feature_fractions:
                cells.append(GridCell(BaseMode.PLAIN, int(t), float(ff), None))
        cells.append(SIMPLE_NB)
    return sorted(set(cells), key=GridCell.sort_key)


def _grid_fold(dataset, cells, base, train_idx, test_idx, ens_seed, positive):
    """Metrics of every cell on one fold.

    Estimator ``i`` depends only on ``(seed, i)`` and the feature fraction, so
    one ensemble with the largest size serves every smaller size by prefix,
    and one set of estimator outputs serves every threshold.
    """
    train = dataset.subset(train_idx)
    test = dataset.subset(test_idx)
    truths = _truths(dataset, test_idx)
    groups: dict[tuple, list[GridCell]] = {}
    for cell in cells:
        groups.setdefault((cell.base_mode, cell.feature_fraction, cell.bootstrap), []).append(cell)
    out = {}
    for (mode, ff, boot), members in groups.items():
        n_max = max(c.n_estimators for c in members)
        cfg = replace(
            base, base_mode=mode, feature_fraction=ff, bootstrap=boot, n_estimators=n_max, seed=ens_seed
        )
        ensemble = build(train, cfg)
        outputs = estimator_outputs(ensemble, test.X)
        subsets = [est.feature_subset for est in ensemble.estimators]
        for cell in members:
            verdicts = aggregate(
                outputs.head(cell.n_estimators),
                cell.threshold,
                train.class_set,
                subsets[: cell.n_estimators],
                train.feature_names,
                test.ids,
                base.feature_report_fraction,
            )
            out[cell] = compute_metrics(verdicts, truths, positive)
    return out


def run_grid(
    dataset: Dataset,
    n_estimators: Sequence[int] = (25, 50, 100),
    feature_fractions: Sequence[float] = (0.25, 0.50, 0.75),
    thresholds: Sequence[float] = (0.75, 0.80, 0.85, 0.90, 0.95),
    base_modes: Sequence[BaseMode | str] = (BaseMode.CONFORMAL, BaseMode.POSTERIOR),
    k: int = 5,
    repeats: int = 10,
    seed: int = 0,
    positive: str = "cMCI",
    include_baselines: bool = True,
    base_config: EnsembleConfig | None = None,
    n_jobs: int = 1,
) -> GridResult:
    """Evaluate every grid cell on the same repeated stratified folds (paired design)."""
    _check_positive(dataset, positive)
    base = base_config or EnsembleConfig()
    cells = grid_cells(n_estimators, feature_fractions, thresholds, base_modes, include_baselines)
    plan = fold_plan(dataset, k, repeats, seed)
    jobs = [
        (dataset, cells, base, train_idx, test_idx, _child_seed(seed, r, f), positive)
        for r, folds in enumerate(plan)
        for f, (train_idx, test_idx) in enumerate(folds)
    ]
    per_fold = _run_jobs(_grid_fold, jobs, n_jobs)
    return GridResult({cell: MetricsReport.from_folds([fold[cell] for fold in per_fold]) for cell in cells})


# --------------------------------------------------------------------- export

CSV_COLUMNS = [
    "base_mode", "n_estimators", "feature_fraction", "threshold", "bootstrap",
    "f_measure_mean", "f_measure_sd", "sensitivity_mean", "sensitivity_sd",
    "specificity_mean", "specificity_sd", "empty_pct_mean", "empty_pct_sd", "n_iterations",
]


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def grid_to_csv(result: GridResult) -> str:
    """One row per cell, sorted by configuration, full float precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for cell in result.sorted_cells():
        rep = result.cells[cell]
        w.writerow([
            cell.base_mode.value, cell.n_estimators, repr(cell.feature_fraction),
            "" if cell.threshold is None else repr(cell.threshold), str(cell.bootstrap).lower(),
            _num(rep.f_measure.mean), _num(rep.f_measure.sd),
            _num(rep.sensitivity.mean), _num(rep.sensitivity.sd),
            _num(rep.specificity.mean), _num(rep.specificity.sd),
            _num(rep.empty_rate_pct.mean), _num(rep.empty_rate_pct.sd),
            rep.n_iterations,
        ])
    return buf.getvalue()


def write_grid_csv(result: GridResult, path: str | Path) -> None:
    Path(path).write_text(grid_to_csv(result), encoding="utf-8")


def format_table(result: GridResult) -> str:
    """Human-readable table, three decimals, ``mean±sd``."""
    header = f"{'configuration':<42} {'F-measure':>13} {'sensitivity':>13} {'specificity':>13} {'empty %':>13}"
    lines = [header, "-" * len(header)]
    for cell in result.sorted_cells():
        rep = result.cells[cell]
        lines.append(
            f"{cell.name:<42} {rep.f_measure.fmt():>13} {rep.sensitivity.fmt():>13} "
            f"{rep.specificity.fmt():>13} {rep.empty_rate_pct.fmt(digits=2):>13}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------- significance tests


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float | None
    p_value: float
    n: int
    w_plus: float
    w_minus: float
    exact: bool


def _signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of 2*W+ (ranks doubled to stay integral)."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    reach = 0
    for r in doubled_ranks:
        r = int(r)
        counts[r: reach + r + 1] = counts[r: reach + r + 1] + counts[: reach + 1].copy()
        reach += r
    return counts


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied |differences| get average ranks.
    With at most 20 non-zero differences the p-value comes from the exact
    permutation distribution of the (tied) ranks; beyond that a normal
    approximation with tie and continuity corrections is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(None, 1.0, 0, 0.0, 0.0, True)
    if n < 5:
        raise ValueError(f"need at least 5 non-zero paired differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _signed_rank_null_counts(doubled)
        k = int(round(2 * w_plus))
        lower = int(sum(counts[: k + 1]))
        upper = int(sum(counts[k:]))
        p = min(1.0, 2 * min(lower, upper) / 2**n)
        return WilcoxonResult(statistic, p, n, w_plus, w_minus, True)
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(statistic, p, n, w_plus, w_minus, False)


@dataclass(frozen=True)
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: tuple[float, ...]


def chi2_sf(x: float, dof: int) -> float:
    """Upper tail of the chi-square distribution (regularized upper incomplete gamma)."""
    if x <= 0:
        return 1.0
    return float(gammaincc(dof / 2.0, x / 2.0))


def friedman_test(matrix) -> FriedmanResult:
    """Friedman rank test on a (treatments x blocks) matrix, with tie correction.

    Ranks are taken across treatments within each block; the statistic is
    referred to a chi-square distribution with ``treatments - 1`` degrees of freedom.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("expected a 2-D treatments x blocks matrix")
    k, n = m.shape
    if k < 3 or n < 2:
        raise ValueError("need at least 3 treatments and 2 blocks")
    ranks = np.apply_along_axis(rankdata, 0, m)
    rank_sums = ranks.sum(axis=1)
    ties = 0.0
    for col in m.T:
        _, t = np.unique(col, return_counts=True)
        ties += float(np.sum(t**3 - t))
    correction = 1.0 - ties / (n * k * (k * k - 1))
    mean_ranks = tuple(float(r) for r in rank_sums / n)
    if correction <= 0:
        return FriedmanResult(0.0, 1.0, mean_ranks)
    stat = (12.0 / (n * k * (k + 1)) * float(np.sum(rank_sums**2)) - 3.0 * n * (k + 1)) / correction
    stat = max(stat, 0.0)
    return FriedmanResult(stat, chi2_sf(stat, k - 1), mean_ranks)


def paired_f_measures(reports: Sequence[MetricsReport]) -> np.ndarray:
    """Fold-aligned F-measure matrix (reports x folds), keeping folds where every report is defined."""
    vectors = [r.fold_f_measures() for r in reports]
    if len({len(v) for v in vectors}) != 1:
        raise ValueError("reports were not evaluated on the same folds")
    keep = [i for i in range(len(vectors[0])) if all(v[i] is not None for v in vectors)]
    return np.array([[v[i] for i in keep] for v in vectors], dtype=float).reshape(len(vectors), len(keep))
