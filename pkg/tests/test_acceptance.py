"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS n: ...`` or ``FAIL n: ...`` line; the lines are
also collected in the pytest terminal summary.
"""

import itertools
import math
import time

import numpy as np
from scipy.stats import norm

from cpensemble import cli, evaluation
from cpensemble.conformal import ConformalPredictor, p_values, prediction_region
from cpensemble.data import Dataset, FeatureKind, FeatureSpec, generate_synthetic, write_csv
from cpensemble.ensemble import BaseMode, EnsembleConfig, build, predict_batch
from cpensemble.evaluation import GridCell, friedman_test, run_cv, run_grid, wilcoxon_signed_rank
from cpensemble.naive_bayes import fit

from oracles import brute_force_p_counts, friedman_closed_form, wilcoxon_enumerated

CLASSES = ("sMCI", "cMCI")
THRESHOLDS = (0.75, 0.80, 0.85, 0.90, 0.95)


# ------------------------------------------------------------------ 1. oracle


def _tiny_instance(rng):
    n = int(rng.integers(2, 9))
    d = int(rng.integers(1, 3))
    kinds = rng.choice(["numeric", "categorical"], size=d)
    schema = tuple(
        FeatureSpec(f"f{j}", k, ("a", "b", "c") if k == "categorical" else ()) for j, k in enumerate(kinds)
    )

    def draw(kind):
        if rng.random() < 0.1:
            return np.nan
        if kind == "categorical":
            return float(rng.integers(0, 3))
        # coarse values make exact score ties common
        return float(rng.integers(-3, 4)) if rng.random() < 0.5 else float(rng.normal(scale=2))

    X = np.array([[draw(k) for k in kinds] for _ in range(n)])
    y = rng.integers(0, 2, size=n)
    y[:2] = rng.permutation([0, 1])
    bag = Dataset(schema, X, y, CLASSES, tuple(map(str, range(n))))
    return bag, np.array([draw(k) for k in kinds])


def test_1_p_values_match_brute_force(criterion):
    rng = np.random.default_rng(20240101)
    instances = [_tiny_instance(rng) for _ in range(200)]
    # compile outside the timed region
    p_values(ConformalPredictor.from_dataset(instances[0][0]), instances[0][1])
    start = time.perf_counter()
    mismatches = 0
    for bag, test in instances:
        counts = np.rint(p_values(ConformalPredictor.from_dataset(bag), test) * (len(bag) + 1)).astype(int)
        oracle = brute_force_p_counts(bag, tuple(None if np.isnan(v) else v for v in test))
        mismatches += not np.array_equal(counts, oracle)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    criterion(1, "p-values equal brute-force counts", ok, f"{mismatches}/200 mismatches, {elapsed:.2f}s")
    assert ok


# ------------------------------------------------------- 2/3. validity, calibration


def _true_label_p_values(n_trials, seed_base, bag_size=40, n_features=5):
    """p-value of the true label for one fresh exchangeable draw per trial.

    Each trial generates ``bag_size + 1`` examples and holds out one chosen
    uniformly at random, so test point and bag are exchangeable.
    """
    out = np.empty(n_trials)
    for t in range(n_trials):
        ds = generate_synthetic(bag_size + 1, n_features, 0.56, separation=1.0, noise_rate=0.0, seed=seed_base + t)
        hold = int(np.random.default_rng(seed_base + t).integers(0, bag_size + 1))
        rest = np.delete(np.arange(bag_size + 1), hold)
        cp = ConformalPredictor.from_dataset(ds.subset(rest))
        out[t] = p_values(cp, ds.X[hold])[ds.y[hold]]
    return out


def test_2_region_validity(criterion):
    start = time.perf_counter()
    n = 1000
    errors = {eps: 0 for eps in (0.05, 0.10, 0.25)}
    for t in range(n):
        ds = generate_synthetic(41, 5, 0.56, separation=1.0, noise_rate=0.0, seed=10_000 + t)
        hold = int(np.random.default_rng(10_000 + t).integers(0, 41))
        cp = ConformalPredictor.from_dataset(ds.subset(np.delete(np.arange(41), hold)))
        truth = ds.class_set[ds.y[hold]]
        for eps in errors:
            errors[eps] += truth not in prediction_region(cp, ds.X[hold], eps)
    elapsed = time.perf_counter() - start
    rates = {eps: e / n for eps, e in errors.items()}
    ok = all(rates[eps] <= eps + 3 * math.sqrt(eps * (1 - eps) / n) for eps in rates) and elapsed < 120
    detail = ", ".join(f"eps={eps}: {r:.3f}" for eps, r in rates.items()) + f", {elapsed:.1f}s"
    criterion(2, "region error rate within binomial slack of eps", ok, detail)
    assert ok


def test_3_credibility_calibration(criterion):
    p_true = _true_label_p_values(1000, seed_base=50_000)
    rates = {eps: float(np.mean(p_true <= eps)) for eps in (0.1, 0.2, 0.5)}
    ok = all(r <= eps + 0.04 for eps, r in rates.items())
    criterion(3, "P(p_true <= eps) <= eps + 0.04", ok, ", ".join(f"eps={e}: {r:.3f}" for e, r in rates.items()))
    assert ok


# --------------------------------------------------------- 4. monotonicity


def test_4_unpredictable_sets_nest(criterion):
    violations = 0
    rates = []
    for mode, seed in [(BaseMode.CONFORMAL, 0), (BaseMode.CONFORMAL, 1), (BaseMode.POSTERIOR, 2)]:
        ds = generate_synthetic(300, 12, separation=0.5, noise_rate=0.15, seed=seed)
        ens = build(ds.subset(range(200)), EnsembleConfig(n_estimators=25, feature_fraction=0.5, base_mode=mode, seed=seed))
        test = ds.subset(range(200, 300))
        previous = set()
        for theta in THRESHOLDS:
            empty = {v.example_id for v in predict_batch(ens, test, threshold=theta) if v.unpredictable}
            violations += not previous <= empty
            previous = empty
            if mode is BaseMode.CONFORMAL and seed == 0:
                rates.append(len(empty))
    ok = violations == 0
    criterion(4, "unpredictable sets nest as the threshold rises", ok,
              f"{violations} violations; empty counts {rates} of 100")
    assert ok


# --------------------------------------------------------- 5. qualitative trend


def test_5_noisy_trend(criterion):
    start = time.perf_counter()
    high_beats_low = cp_beats_plain = 0
    cells = {
        "cp75": GridCell(BaseMode.CONFORMAL, 50, 0.75, 0.75),
        "cp85": GridCell(BaseMode.CONFORMAL, 50, 0.75, 0.85),
        "cp95": GridCell(BaseMode.CONFORMAL, 50, 0.75, 0.95),
        "plain": GridCell(BaseMode.PLAIN, 50, 0.75, None),
    }
    rows = []
    for run in range(10):
        ds = generate_synthetic(400, 41, 0.56, separation=0.3, noise_rate=0.15, seed=run)
        grid = run_grid(ds, [50], [0.75], [0.75, 0.85, 0.95], ["conformal", "plain"],
                        k=5, repeats=1, seed=run, include_baselines=False)
        f = {name: grid[cell].f_measure.mean for name, cell in cells.items()}
        rows.append(f)
        high_beats_low += f["cp95"] > f["cp75"]
        cp_beats_plain += f["cp85"] > f["plain"]
    elapsed = time.perf_counter() - start
    ok = high_beats_low >= 8 and cp_beats_plain >= 8 and elapsed < 600
    mean = {k: np.mean([r[k] for r in rows]) for k in cells}
    detail = (f"F(0.95) > F(0.75) in {high_beats_low}/10, CP(0.85) > plain in {cp_beats_plain}/10; "
              f"mean F cp75={mean['cp75']:.3f} cp85={mean['cp85']:.3f} cp95={mean['cp95']:.3f} "
              f"plain={mean['plain']:.3f}; {elapsed:.0f}s")
    criterion(5, "higher thresholds and CP gating raise F on noisy data", ok, detail)
    assert ok


# ------------------------------------------------------------- 6. NB analytic


def test_6_posterior_matches_closed_form(criterion):
    rng = np.random.default_rng(6)
    schema = (FeatureSpec("x", FeatureKind.NUMERIC),)
    worst = 0.0
    for _ in range(100):
        n0, n1 = (int(v) for v in rng.integers(2, 30, size=2))
        a = rng.normal(rng.normal(0, 2), rng.uniform(0.3, 3), n0)
        b = rng.normal(rng.normal(0, 2), rng.uniform(0.3, 3), n1)
        ds = Dataset(schema, np.concatenate([a, b])[:, None], np.array([0] * n0 + [1] * n1),
                     CLASSES, tuple(map(str, range(n0 + n1))))
        x = rng.normal(0, 3)
        da = n0 / (n0 + n1) * norm.pdf(x, a.mean(), a.std())
        db = n1 / (n0 + n1) * norm.pdf(x, b.mean(), b.std())
        expected = da / (da + db)
        worst = max(worst, abs(fit(ds).predict_proba(np.array([[x]]))[0, 0] - expected))
    ok = worst <= 1e-9
    criterion(6, "NB posterior equals two-Gaussian Bayes rule", ok, f"max abs error {worst:.2e}")
    assert ok


# -------------------------------------------------------------- 7. Wilcoxon


def test_7_wilcoxon_exact_enumeration(criterion):
    cases = [np.array(signs) * np.arange(1, 6) for signs in itertools.product((-1, 1), repeat=5)]
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(5, 11))
        cases.append(rng.integers(1, 7, size=n) * rng.choice([-1, 1], size=n))
    mismatches = sum(
        wilcoxon_signed_rank(d, np.zeros(len(d))).p_value != wilcoxon_enumerated(d) for d in cases
    )
    ok = mismatches == 0
    criterion(7, "Wilcoxon p equals 2^n enumeration", ok, f"{mismatches}/{len(cases)} mismatches")
    assert ok


# -------------------------------------------------------------- 8. Friedman


def test_8_friedman_closed_form(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(50):
        k, n = int(rng.integers(3, 7)), int(rng.integers(2, 30))
        m = rng.random((k, n))
        worst = max(worst, abs(friedman_test(m).statistic - friedman_closed_form(m)))
    unanimous = friedman_test(np.tile(np.arange(3.0)[:, None], (1, 10)))
    ok = worst <= 1e-9 and abs(unanimous.statistic - 20.0) <= 1e-9
    criterion(8, "Friedman statistic equals closed form", ok,
              f"max abs error {worst:.1e}; unanimous k=3 n=10: {unanimous.statistic:g}, p={unanimous.p_value:.2e}")
    assert ok


# ------------------------------------------------------------ 9. determinism


def test_9_evaluate_output_is_byte_identical(tmp_path, criterion, capsys):
    data = tmp_path / "cohort.csv"
    write_csv(generate_synthetic(80, 6, separation=0.8, noise_rate=0.1, seed=9), data)
    outputs = []
    for run, jobs in enumerate((1, 1, 2)):
        out = tmp_path / f"grid{run}.csv"
        code = cli.main(["evaluate", "--data", str(data), "--estimators", "3", "6", "--features", "0.5",
                         "--thresholds", "0.6", "0.8", "--k", "3", "--repeats", "2", "--seed", "5",
                         "--jobs", str(jobs), "--out", str(out)])
        assert code == 0
        outputs.append(out.read_bytes())
    capsys.readouterr()
    ok = outputs[0] == outputs[1] == outputs[2]
    criterion(9, "evaluate CSV identical across runs and job counts", ok,
              f"{len(outputs[0])} bytes, jobs 1/1/2")
    assert ok


# --------------------------------------------------------- 10. protocol shape


def test_10_fifty_fold_evaluations(monkeypatch, criterion):
    calls = {"build": 0, "metrics": 0}
    real_build, real_metrics = evaluation.build, evaluation.compute_metrics

    def counting_build(*args, **kwargs):
        calls["build"] += 1
        return real_build(*args, **kwargs)

    def counting_metrics(*args, **kwargs):
        calls["metrics"] += 1
        return real_metrics(*args, **kwargs)

    monkeypatch.setattr(evaluation, "build", counting_build)
    monkeypatch.setattr(evaluation, "compute_metrics", counting_metrics)
    ds = generate_synthetic(60, 4, seed=10)
    report = run_cv(ds, EnsembleConfig(n_estimators=2, credibility_threshold=0.5), k=5, repeats=10, seed=0)
    ok = calls["build"] == calls["metrics"] == report.n_iterations == 50
    criterion(10, "k=5 x 10 repeats runs exactly 50 fold evaluations", ok,
              f"{calls['build']} builds, {calls['metrics']} metric evaluations, n_iterations={report.n_iterations}")
    assert ok
