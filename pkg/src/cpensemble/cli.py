"""Command-line interface.

Exit codes: 0 success, 2 usage error, 3 data or model error.  Diagnostics go
to stderr; when an output path is omitted the requested artifact is written
to stdout.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import ensemble as ens
from .data import Dataset, DatasetError, FeatureKind, fingerprint, generate_synthetic, load_csv, round_half_up, write_csv
from .ensemble import BaseMode, EnsembleConfig
from .evaluation import (
    format_table,
    friedman_test,
    grid_to_csv,
    paired_f_measures,
    run_cv,
    run_grid,
    wilcoxon_signed_rank,
)
from .naive_bayes import ModelError

log = logging.getLogger("cpensemble")

EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- arg helpers


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1], got {value}")
    return value


def _threshold(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a threshold in [0, 1), got {value}")
    return value


def _open_fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {value}")
    return value


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {value}")
    return value


def _non_negative(text: str) -> float:
    value = float(text)
    if not value >= 0.0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {value}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("seed must be non-negative")
    return value


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, type=Path, help="input CSV (header row required)")
    p.add_argument("--label-column", default="label")
    p.add_argument(
        "--categorical", nargs="*", default=[], metavar="COLUMN",
        help="force these columns to be categorical",
    )
    p.add_argument(
        "--numeric", nargs="*", default=[], metavar="COLUMN",
        help="force these columns to be numeric",
    )


def _add_ensemble_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=[m.value for m in BaseMode], default="conformal")
    p.add_argument("--estimators", type=_positive_int, default=50)
    p.add_argument("--features", type=_fraction, default=0.75, help="fraction of features per estimator")
    p.add_argument("--bootstrap-fraction", type=_fraction, default=1.0)
    p.add_argument("--threshold", type=_threshold, default=None, help="credibility threshold (default: none)")
    p.add_argument("--report-fraction", type=_fraction, default=0.8)
    p.add_argument("--smoothing", type=float, default=1.0)


def _hints(args) -> dict:
    hints = {c: FeatureKind.CATEGORICAL for c in args.categorical}
    hints.update({c: FeatureKind.NUMERIC for c in args.numeric})
    return hints


def _load(args) -> Dataset:
    return load_csv(args.data, label_column=args.label_column, schema_hints=_hints(args))


def _config(args, seed: int) -> EnsembleConfig:
    return EnsembleConfig(
        n_estimators=args.estimators,
        feature_fraction=args.features,
        bootstrap_fraction=args.bootstrap_fraction,
        credibility_threshold=args.threshold,
        base_mode=BaseMode(args.mode),
        seed=seed,
        feature_report_fraction=args.report_fraction,
        smoothing=args.smoothing,
    )


def _manifest(command: str, args, dataset: Dataset | None, config: dict | None = None) -> dict:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {
        "command": command,
        "configuration": config if config is not None else resolved,
        "arguments": resolved,
        "seed": getattr(args, "seed", None),
        "dataset_sha256": None if dataset is None else fingerprint(dataset),
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _write_manifest(out: Path, manifest: dict) -> None:
    Path(str(out) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    ds = generate_synthetic(
        n_examples=args.n, n_features=args.features, class_balance=args.balance,
        separation=args.separation, noise_rate=args.noise, seed=args.seed,
    )
    if args.out is None:
        write_csv(ds, sys.stdout)
    else:
        write_csv(ds, args.out)
        _write_manifest(args.out, _manifest("gen-data", args, ds))
        log.info("wrote %d examples to %s", len(ds), args.out)
    return 0


def cmd_train(args) -> int:
    ds = _load(args)
    config = _config(args, args.seed)
    ensemble = ens.build(ds, config)
    ens.save(ensemble, args.model_out)
    _write_manifest(args.model_out, _manifest("train", args, ds, config.to_dict()))
    log.info("trained %d %s estimators on %d examples", config.n_estimators, config.base_mode.value, len(ds))
    return 0


def _load_for_model(args, ensemble: ens.ConformalEnsemble) -> Dataset:
    schema = ensemble.schema
    with Path(args.data).open(newline="", encoding="utf-8") as fh:
        header = [h.strip() for h in next(csv.reader(fh), [])]
    label_column = args.label_column if args.label_column in header else None
    ds = load_csv(
        args.data,
        label_column=label_column,
        schema_hints={f.name: f.kind for f in schema if f.name in header},
        class_set=ensemble.class_set,
        categories={f.name: f.categories for f in schema if f.is_categorical and f.name in header},
    )
    if ds.schema != schema:
        want = [f.name for f in schema]
        raise DatasetError(f"data columns {ds.feature_names} do not match the model's features {want}")
    return ds


def _pct(fraction: float) -> str:
    return f"{round_half_up(100 * fraction)}%"


def verdict_row(v: ens.EnsembleVerdict) -> list[str]:
    """Per-patient report row: id, trustworthy %, prediction, credibility, confidence, features."""
    if v.unpredictable:
        return [v.example_id, _pct(v.trustworthy_fraction), "UNPREDICTABLE", "", "", "[]"]
    return [
        v.example_id,
        _pct(v.trustworthy_fraction),
        v.label,
        f"{v.mean_credibility:.3f}",
        f"{v.mean_confidence:.3f}",
        "[" + ", ".join(v.frequent_features) + "]",
    ]


def verdict_record(v: ens.EnsembleVerdict) -> dict:
    return {
        "id": v.example_id,
        "trustworthy_pct": round(100.0 * v.trustworthy_fraction, 9),
        "outcome": "unpredictable" if v.unpredictable else "predicted",
        "prediction": v.label,
        "credibility": v.mean_credibility,
        "confidence": v.mean_confidence,
        "frequent_features": list(v.frequent_features),
        "vote_counts": v.vote_counts,
    }


def cmd_predict(args) -> int:
    ensemble = ens.load(args.model)
    ds = _load_for_model(args, ensemble)
    verdicts = ens.predict_batch(ensemble, ds, threshold=args.threshold)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "trustworthy_pct", "prediction", "credibility", "confidence", "frequent_features"])
    for v in verdicts:
        w.writerow(verdict_row(v))
    _emit(buf.getvalue(), args.out)
    if args.jsonl is not None:
        args.jsonl.write_text("".join(json.dumps(verdict_record(v)) + "\n" for v in verdicts), encoding="utf-8")
    if args.out is not None:
        _write_manifest(args.out, _manifest("predict", args, ds))
    return 0


def _check_cv_args(args) -> None:
    if args.k < 2:
        raise UsageError("--k must be at least 2")


def cmd_evaluate(args) -> int:
    _check_cv_args(args)
    ds = _load(args)
    result = run_grid(
        ds,
        n_estimators=args.estimators,
        feature_fractions=args.features,
        thresholds=args.thresholds,
        base_modes=args.modes,
        k=args.k,
        repeats=args.repeats,
        seed=args.seed,
        positive=args.positive_class,
        include_baselines=not args.no_baselines,
        base_config=EnsembleConfig(
            bootstrap_fraction=args.bootstrap_fraction,
            feature_report_fraction=args.report_fraction,
            smoothing=args.smoothing,
        ),
        n_jobs=args.jobs,
    )
    _emit(grid_to_csv(result), args.out)
    best = result.best_cell()
    summary = (
        format_table(result)
        + f"\n\nbest cell by mean F-measure: {best.name} "
        f"(F = {result[best].f_measure.fmt()}, empty = {result[best].empty_rate_pct.fmt(digits=2)}%)\n"
    )
    (sys.stdout if args.out is not None else sys.stderr).write(summary)
    if args.out is not None:
        _write_manifest(args.out, _manifest("evaluate", args, ds))
    return 0


_SPEC_KEYS = {"mode", "estimators", "features", "threshold", "bootstrap", "bootstrap_fraction", "name"}


def parse_config_spec(spec: str) -> tuple[str, EnsembleConfig]:
    """Parse ``mode=conformal,estimators=50,features=0.75,threshold=0.85`` into a configuration."""
    fields = {}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        if "=" not in part:
            raise UsageError(f"config item {part!r} is not key=value")
        key, value = (s.strip() for s in part.split("=", 1))
        if key not in _SPEC_KEYS:
            raise UsageError(f"unknown config key {key!r} (allowed: {sorted(_SPEC_KEYS)})")
        fields[key] = value
    try:
        threshold = fields.get("threshold", "none")
        config = EnsembleConfig(
            base_mode=BaseMode(fields.get("mode", "conformal")),
            n_estimators=int(fields.get("estimators", 50)),
            feature_fraction=float(fields.get("features", 0.75)),
            credibility_threshold=None if threshold.lower() == "none" else float(threshold),
            bootstrap=fields.get("bootstrap", "true").lower() not in ("false", "0", "no"),
            bootstrap_fraction=float(fields.get("bootstrap_fraction", 1.0)),
        )
    except ValueError as exc:
        raise UsageError(f"invalid config {spec!r}: {exc}") from exc
    return fields.get("name", spec), config


def compare_report(names, reports) -> str:
    matrix = paired_f_measures(reports)
    lines = ["per-iteration F-measure (folds where every configuration predicted something)"]
    lines.append("iteration," + ",".join(f'"{n}"' for n in names))
    for i in range(matrix.shape[1]):
        lines.append(f"{i + 1}," + ",".join(f"{x:.6f}" for x in matrix[:, i]))
    lines.append("")
    for n, r in zip(names, reports):
        lines.append(f"{n}: mean F = {r.f_measure.fmt()}, empty = {r.empty_rate_pct.fmt(digits=2)}%")
    try:
        w = wilcoxon_signed_rank(matrix[0], matrix[1])
        stat = "undefined" if w.statistic is None else f"{w.statistic:g}"
        lines.append(
            f"Wilcoxon signed-rank ({names[0]} vs {names[1]}): W = {stat}, p = {w.p_value:.6g}, "
            f"n = {w.n} ({'exact' if w.exact else 'normal approximation'})"
        )
    except ValueError as exc:
        lines.append(f"Wilcoxon signed-rank: not computed ({exc})")
    means = [float(row.mean()) if len(row) else float("nan") for row in matrix]
    winner = max(range(len(names)), key=lambda i: means[i])
    lines.append(f"winner by mean F-measure: {names[winner]}")
    if len(reports) >= 3:
        try:
            fr = friedman_test(matrix)
            lines.append(f"Friedman across {len(reports)} configurations: chi2 = {fr.statistic:.6g}, p = {fr.p_value:.6g}")
        except ValueError as exc:
            lines.append(f"Friedman: not computed ({exc})")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    if len(args.config) < 2:
        raise UsageError("give at least two --config specifications")
    _check_cv_args(args)
    parsed = [parse_config_spec(s) for s in args.config]
    ds = _load(args)
    reports = [
        run_cv(ds, cfg, k=args.k, repeats=args.repeats, seed=args.seed, positive=args.positive_class, n_jobs=args.jobs)
        for _, cfg in parsed
    ]
    _emit(compare_report([n for n, _ in parsed], reports), args.out)
    if args.out is not None:
        _write_manifest(args.out, _manifest("compare", args, ds))
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpensemble", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic two-class cohort as CSV")
    p.add_argument("--n", type=_positive_int, default=402)
    p.add_argument("--features", type=_positive_int, default=41)
    p.add_argument("--balance", type=_open_fraction, default=0.56, help="fraction of the first class (sMCI)")
    p.add_argument("--separation", type=_non_negative, default=1.0)
    p.add_argument("--noise", type=_unit_interval, default=0.0, help="fraction of labels flipped")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="build an ensemble and save it")
    _add_data_args(p)
    _add_ensemble_args(p)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--model-out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-example verdicts from a saved ensemble")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--label-column", default="label", help="ignored if absent from the data")
    p.add_argument("--threshold", type=_threshold, default=None, help="omit to count every estimator as trustworthy")
    p.add_argument("--out", type=Path, default=None, help="CSV report (default: stdout)")
    p.add_argument("--jsonl", type=Path, default=None, help="also write JSON lines here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="repeated stratified CV over a parameter grid")
    _add_data_args(p)
    p.add_argument("--positive-class", default="cMCI")
    p.add_argument("--estimators", type=_positive_int, nargs="+", default=[25, 50, 100])
    p.add_argument("--features", type=_fraction, nargs="+", default=[0.25, 0.50, 0.75])
    p.add_argument("--thresholds", type=_threshold, nargs="+", default=[0.75, 0.80, 0.85, 0.90, 0.95])
    p.add_argument("--modes", choices=[m.value for m in BaseMode], nargs="+", default=["conformal", "posterior"])
    p.add_argument("--no-baselines", action="store_true", help="skip plain-ensemble and simple-NB cells")
    p.add_argument("--bootstrap-fraction", type=_fraction, default=1.0)
    p.add_argument("--report-fraction", type=_fraction, default=0.8)
    p.add_argument("--smoothing", type=float, default=1.0)
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=None, help="grid CSV (default: stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired significance tests between configurations")
    _add_data_args(p)
    p.add_argument("--positive-class", default="cMCI")
    p.add_argument(
        "--config", action="append", default=[], metavar="SPEC",
        help="e.g. mode=conformal,estimators=50,features=0.75,threshold=0.85 (repeat >= 2 times)",
    )
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cpensemble: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ModelError, OSError) as exc:
        print(f"cpensemble: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"cpensemble: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
