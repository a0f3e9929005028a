import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from cpensemble.data import Dataset, Example, FeatureKind, FeatureSpec
from cpensemble.naive_bayes import (
    MAX_NONCONFORMITY,
    ModelError,
    NaiveBayesModel,
    fit,
    fit_arrays,
    nonconformity,
    posterior,
)

NUM = FeatureSpec("x", FeatureKind.NUMERIC)
CLASSES = ("A", "B")


def _numeric(values, labels, classes=CLASSES):
    X = np.asarray(values, dtype=float).reshape(len(labels), -1)
    schema = tuple(FeatureSpec(f"x{j}", FeatureKind.NUMERIC) for j in range(X.shape[1]))
    return Dataset(schema, X, np.asarray(labels), classes, tuple(map(str, range(len(labels)))))


def test_priors_are_class_frequencies():
    model = fit(_numeric([0, 1, 2, 3], [0, 0, 1, 1]))
    np.testing.assert_allclose(model.class_priors, [0.5, 0.5])


def test_means_and_ml_variances():
    model = fit(_numeric([0, 2, 10, 12], [0, 0, 1, 1]))
    np.testing.assert_allclose(model.means[:, 0], [1.0, 11.0])
    np.testing.assert_allclose(model.variances[:, 0], [1.0, 1.0])


def test_laplace_smoothing():
    schema = (FeatureSpec("c", FeatureKind.CATEGORICAL, ("x", "y")),)
    ds = Dataset(schema, np.array([[0.0], [0.0], [1.0]]), np.array([0, 0, 1]), CLASSES, ("1", "2", "3"))
    table = fit(ds).category_probs[0]
    np.testing.assert_allclose(table[0], [0.75, 0.25])
    np.testing.assert_allclose(table[1], [1 / 3, 2 / 3])


def test_all_missing_example_gives_priors():
    model = fit(_numeric([0, 1, 2, 3, 4, 5], [0, 0, 0, 0, 1, 1]))
    np.testing.assert_allclose(posterior(model, Example((None,), None, "t")), [2 / 3, 1 / 3])


def test_symmetric_model_gives_half():
    model = fit(_numeric([-3, -1, 1, 3], [0, 0, 1, 1]))
    np.testing.assert_allclose(posterior(model, np.array([0.0])), [0.5, 0.5], atol=1e-15)


def test_analytic_two_gaussian_example():
    # class A ~ N(0, 1), class B ~ N(2, 1) from the 2-point samples {-1, 1} and {1, 3}
    model = fit(_numeric([-1, 1, 1, 3], [0, 0, 1, 1]))
    p = posterior(model, np.array([0.0]))
    assert p[0] == pytest.approx(1 / (1 + math.exp(-2)), abs=1e-12)
    assert p[0] == pytest.approx(0.8808, abs=1e-4)


def test_nonconformity_closed_forms():
    model = fit(_numeric([-3, -1, 1, 3], [0, 0, 1, 1]))
    assert nonconformity(model, np.array([0.0]), "A") == pytest.approx(math.log(2))
    # a point far in B's tail drives P(A|x) below 1e-300
    far = np.array([1e4])
    assert nonconformity(model, far, "B") == pytest.approx(0.0, abs=1e-12)
    assert nonconformity(model, far, 0) == MAX_NONCONFORMITY == pytest.approx(-math.log(1e-300))


def test_missing_category_and_numeric_are_skipped(tiny_mixed):
    model = fit(tiny_mixed)
    only_age = fit(tiny_mixed.subset(range(6)))  # same model, sanity
    p_missing = posterior(model, Example((None, None), None, "t"))
    np.testing.assert_allclose(p_missing, model.class_priors)
    np.testing.assert_allclose(posterior(only_age, np.array([65.0, np.nan])), posterior(model, np.array([65.0, np.nan])))


def test_all_missing_cell_falls_back_to_global():
    ds = _numeric([np.nan, np.nan, 1.0, 3.0], [0, 0, 1, 1])
    model = fit(ds)
    assert model.means[0, 0] == pytest.approx(2.0)
    assert model.variances[0, 0] == pytest.approx(1.0)


def test_variance_floor():
    model = fit(_numeric([5, 5, 1, 3], [0, 0, 1, 1]))
    assert model.variances[0, 0] == pytest.approx(1e-9 * np.var([5, 5, 1, 3]))
    assert fit(_numeric([5, 5, 1, 3], [0, 0, 1, 1]), variance_floor=0.5).variances[0, 0] == 0.5


@pytest.mark.parametrize(
    "labels, kwargs",
    [([0, 0, 0, 0], {}), ([0, 0, 1, 1], {"smoothing": 0}), ([0, 0, 1, 1], {"variance_floor": -1.0})],
)
def test_fit_errors(labels, kwargs):
    with pytest.raises(ModelError):
        fit(_numeric([0, 1, 2, 3], labels), **kwargs)


def test_schema_mismatch_and_unknown_label():
    model = fit(_numeric([0, 1, 2, 3], [0, 0, 1, 1]))
    with pytest.raises(ModelError):
        posterior(model, np.array([0.0, 1.0]))
    with pytest.raises(ModelError):
        nonconformity(model, np.array([0.0]), "Z")


def test_serialization_round_trip(tiny_mixed):
    model = fit(tiny_mixed)
    back = NaiveBayesModel.from_dict(model.to_dict())
    X = np.array([[66.0, 1], [np.nan, 0], [71.0, np.nan]])
    np.testing.assert_array_equal(back.predict_proba(X), model.predict_proba(X))


def test_version_mismatch_refused(tiny_mixed):
    payload = fit(tiny_mixed).to_dict()
    payload["version"] = 99
    with pytest.raises(ModelError, match="version"):
        NaiveBayesModel.from_dict(payload)


def test_fit_is_pure(tiny_mixed):
    a, b = fit(tiny_mixed), fit(tiny_mixed)
    assert a.to_dict() == b.to_dict()


finite = st.floats(-50, 50, allow_nan=False)


@st.composite
def mixed_problem(draw):
    n = draw(st.integers(4, 20))
    d = draw(st.integers(1, 4))
    kinds = draw(st.lists(st.booleans(), min_size=d, max_size=d))
    cols, schema = [], []
    for j, is_cat in enumerate(kinds):
        if is_cat:
            schema.append(FeatureSpec(f"c{j}", FeatureKind.CATEGORICAL, ("p", "q", "r")))
            col = draw(st.lists(st.sampled_from([0.0, 1.0, 2.0, np.nan]), min_size=n, max_size=n))
        else:
            schema.append(FeatureSpec(f"n{j}", FeatureKind.NUMERIC))
            col = draw(st.lists(finite | st.just(np.nan), min_size=n, max_size=n))
        cols.append(col)
    y = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    y[:3] = [0, 1, 2]
    X = np.array(cols, dtype=float).T
    test = np.array(
        [draw(st.sampled_from([0.0, 1.0, 2.0])) if c else draw(finite) for c in kinds], dtype=float
    )
    ds = Dataset(tuple(schema), X, np.array(y), ("a", "b", "c"), tuple(map(str, range(n))))
    return ds, test


@settings(max_examples=150, deadline=None)
@given(mixed_problem())
def test_posterior_normalized_and_ranking(problem):
    ds, test = problem
    model = fit(ds)
    p = posterior(model, test)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)
    scores = [nonconformity(model, test, c) for c in ds.class_set]
    assert all(s >= 0 for s in scores)
    if np.max(p) > 1e-300:
        assert int(np.argmin(scores)) == int(np.argmax(p))


def _closed_form(ds, x):
    """Two-Gaussian Bayes rule from ML sample statistics, computed with scipy."""
    y, v = ds.y, ds.X[:, 0]
    dens = []
    for c in (0, 1):
        vc = v[y == c]
        dens.append(np.mean(y == c) * norm.pdf(x, vc.mean(), np.sqrt(vc.var())))
    return dens[0] / (dens[0] + dens[1])


def test_matches_closed_form_on_random_cases():
    rng = np.random.default_rng(2024)
    for _ in range(30):
        n0, n1 = rng.integers(3, 15, size=2)
        v = np.concatenate([rng.normal(rng.normal(), rng.uniform(0.5, 2), n0), rng.normal(rng.normal(), rng.uniform(0.5, 2), n1)])
        ds = _numeric(v, [0] * n0 + [1] * n1)
        x = rng.normal()
        assert posterior(fit(ds), np.array([x]))[0] == pytest.approx(_closed_form(ds, x), abs=1e-9)


def test_fit_arrays_shape_check():
    with pytest.raises(ModelError):
        fit_arrays(np.zeros((3, 2)), np.array([0, 1, 0]), (NUM,), CLASSES)
