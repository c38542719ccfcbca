import math

import numpy as np
import pytest

from augsearch.gram import FeatureSpace, GramRing
from augsearch.proxy import (ModelError, ProxyModel, accuracy, cross_validate, evaluate, load_model, predict,
                             save_model, solve_ridge, train)


def gram(X, y, names=None):
    names = names or [f"x{i}" for i in range(X.shape[1])]
    return GramRing.from_rows(np.column_stack([X, y]), FeatureSpace(tuple(names) + ("y",)))


def test_solve_ridge_two_by_two():
    x, pinv = solve_ridge(np.array([[39.0, 11.0], [11.0, 4.0]]), np.array([40.0, 14.0]))
    np.testing.assert_allclose(x, [6 / 35, 106 / 35], rtol=1e-12)
    assert not pinv


def test_solve_ridge_falls_back_on_singular():
    x, pinv = solve_ridge(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([2.0, 2.0]))
    assert pinv
    np.testing.assert_allclose(x, [1.0, 1.0])


def test_exact_line():
    x = np.arange(10.0)
    m = train(gram(x[:, None], 2 * x), "y", lam=0.0)
    assert abs(m.coef[0] - 2) < 1e-10 and abs(m.intercept) < 1e-9
    res = evaluate(m, gram(x[:, None], 2 * x))
    assert res.sse < 1e-12 and abs(res.r2 - 1) < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_matches_least_squares(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(100, 4)) * rng.uniform(0.1, 10, 4) + rng.normal(size=4) * 5
    y = X @ rng.normal(size=4) + 3 + rng.normal(size=100)
    m = train(gram(X, y), "y", lam=0.0)
    ref, *_ = np.linalg.lstsq(np.column_stack([np.ones(100), X]), y, rcond=None)
    np.testing.assert_allclose(m.theta, ref, rtol=1e-8, atol=1e-8)
    res = evaluate(m, gram(X, y))
    resid = y - ref[0] - X @ ref[1:]
    assert abs(res.sse - resid @ resid) <= 1e-8 * (resid @ resid)
    assert abs(res.r2 - (1 - resid @ resid / ((y - y.mean()) @ (y - y.mean())))) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_ridge_gradient_vanishes(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3)) * [1, 4, 0.5]
    y = X @ [1.0, -2.0, 0.3] + rng.normal(size=60)
    lam = 0.3
    m = train(gram(X, y), "y", lam=lam)
    mu, sd = X.mean(0), X.std(0)
    Z = (X - mu) / sd
    beta = m.coef * sd
    grad = Z.T @ (Z @ beta - (y - y.mean())) / len(y) + lam * beta
    assert np.abs(grad).max() < 1e-10
    assert abs(m.intercept - (y.mean() - m.coef @ mu)) < 1e-10


def test_constant_target_gives_undefined_r2():
    X = np.arange(8.0)[:, None]
    m = train(gram(X, np.full(8, 3.0)), "y")
    res = evaluate(m, gram(X, np.full(8, 3.0)))
    assert math.isnan(res.r2) and not res.defined
    assert res.to_json()["r2"] is None


def test_scaling_features_keeps_r2():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 2))
    y = X @ [1.0, 2.0] + rng.normal(size=80)
    a = evaluate(train(gram(X, y), "y"), gram(X, y)).r2
    b = evaluate(train(gram(X * 1000, y), "y"), gram(X * 1000, y)).r2
    assert abs(a - b) < 1e-9


def test_zero_variance_feature_gets_zero_coefficient():
    X = np.column_stack([np.arange(10.0), np.full(10, 7.0)])
    m = train(gram(X, 3 * np.arange(10.0)), "y", lam=0.0)
    assert m.coef[1] == 0.0 and abs(m.coef[0] - 3) < 1e-9


def test_feature_subset_and_errors():
    rng = np.random.default_rng(0)
    g = gram(rng.normal(size=(20, 3)), rng.normal(size=20))
    assert train(g, "y", features=["x1"]).features == ["x1"]
    with pytest.raises(ModelError):
        train(g, "nope")
    with pytest.raises(ModelError):
        train(GramRing.zero(g.space), "y")
    with pytest.raises(ModelError):
        evaluate(train(g, "y"), GramRing.zero(g.space))
    with pytest.raises(ModelError):
        evaluate(train(g, "y"), g.project(["x0", "y"]))


def test_predict_examples():
    m = ProxyModel("y", ["x"], np.array([2.0, 0.0]), {"x": (0.0, 1.0)})
    assert predict(m, [[3.0]]).tolist() == [2.0]
    m = ProxyModel("y", ["x"], np.array([0.0, 2.0]), {"x": (0.0, 1.0)})
    assert predict(m, [3.0]).tolist() == [6.0]
    c = ProxyModel("y", ["x"], np.array([0.0, 1.0]), {"x": (0.0, 1.0)}, task="classification")
    assert predict(c, [[0.7], [0.2]]).tolist() == [1.0, 0.0]
    assert accuracy(c, [[0.7], [0.2]], [1, 1]) == 0.5
    with pytest.raises(ModelError):
        predict(m, [[1.0, 2.0]])


def test_sse_is_never_negative():
    x = np.linspace(0, 1, 5)
    g = gram(x[:, None] * 1e8, x * 3e8 + 1e12)
    res = evaluate(train(g, "y", lam=0.0), g)
    assert res.sse >= 0.0


def test_model_json_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    m = train(gram(rng.normal(size=(30, 2)), rng.normal(size=30)), "y")
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(back.theta, m.theta) and back.features == m.features


@pytest.mark.parametrize("seed", range(5))
def test_cross_validate_matches_explicit_folds(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(50, 2))
    y = X @ [1.0, -1.0] + rng.normal(size=50)
    fold = np.arange(50) % 5
    space = FeatureSpace(("x0", "x1", "y"))
    parts = [gram(X[fold == f], y[fold == f]) for f in range(5)] + [GramRing.zero(space)]
    res = cross_validate(parts, "y", 5, lam=0.0)
    num = 0.0
    for f in range(5):
        tr, te = fold != f, fold == f
        ref, *_ = np.linalg.lstsq(np.column_stack([np.ones(tr.sum()), X[tr]]), y[tr], rcond=None)
        r = y[te] - ref[0] - X[te] @ ref[1:]
        num += te.sum() * (1 - r @ r / ((y[te] - y[te].mean()) @ (y[te] - y[te].mean())))
    assert abs(res.r2 - num / 50) < 1e-9


def test_cross_validate_uses_holdout():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(40, 1)), rng.normal(size=40)
    space = FeatureSpace(("x0", "y"))
    parts = [gram(X[i::4], y[i::4]) for i in range(4)] + [GramRing.zero(space), gram(X[:10] + 1, y[:10])]
    res = cross_validate(parts, "y", 4)
    expect = evaluate(train(gram(X, y), "y"), parts[-1])
    assert abs(res.r2 - expect.r2) < 1e-12
    with pytest.raises(ModelError):
        cross_validate([parts[0]] + [GramRing.zero(space)] * 4, "y", 4)
