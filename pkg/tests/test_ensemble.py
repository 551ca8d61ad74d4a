import numpy as np
import pytest

from polycast.core import FrameError
from polycast.ensemble import (
    BoostParams,
    ForestParams,
    TreeParams,
    fit_cart,
    fit_gbdt,
    fit_random_forest,
    fit_variant,
    fit_xgb,
    load_model,
    predict,
    save_model,
    staged_predict,
)
from polycast.ensemble.models import model_from_dict, model_to_dict
from polycast.ensemble.params import resolve_subsample
from polycast.evaluate import rmse

X4 = np.array([[0.0], [1.0], [2.0], [3.0]])
Y4 = np.array([0.0, 0.0, 1.0, 1.0])


def _noisy(n, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, d))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2 + 0.3 * rng.standard_normal(n)
    return X, y


def test_params_validation():
    with pytest.raises(FrameError):
        TreeParams(max_depth=0)
    with pytest.raises(FrameError):
        TreeParams(min_samples_leaf=0)
    with pytest.raises(FrameError):
        ForestParams(n_trees=0)
    with pytest.raises(FrameError):
        BoostParams(learning_rate=0.0)
    with pytest.raises(FrameError):
        BoostParams(learning_rate=1.5)
    with pytest.raises(FrameError):
        BoostParams(l2_lambda=-1)
    with pytest.raises(FrameError):
        BoostParams.from_dict({"n_round": 3})
    assert ForestParams().n_trees == 300 and BoostParams().n_rounds == 500
    assert resolve_subsample("third", 10) == 3 and resolve_subsample("third", 2) == 1
    assert resolve_subsample(0.5, 9) == 4 and resolve_subsample(None, 7) == 7


def test_cart_step_fixture():
    m = fit_cart(X4, Y4, TreeParams(max_depth=1, min_samples_leaf=1))
    t = m.trees[0]
    assert t.feature[0] == 0 and t.threshold[0] == 1.5
    assert sorted(t.value[t.feature < 0].tolist()) == [0.0, 1.0]
    np.testing.assert_array_equal(predict(m, X4), Y4)


def test_cart_constant_target_single_leaf():
    m = fit_cart(np.array([[1.0], [2.0], [3.0]]), np.array([5.0, 5.0, 5.0]), TreeParams(min_samples_leaf=1))
    assert m.trees[0].n_nodes == 1
    np.testing.assert_array_equal(predict(m, np.array([[0.0], [9.0]])), [5.0, 5.0])


def test_cart_memorizes_distinct_values():
    rng = np.random.default_rng(2)
    x = rng.permutation(50).astype(float).reshape(-1, 1)
    y = np.exp(x[:, 0] / 10)
    m = fit_cart(x, y, TreeParams(max_depth=None, min_samples_leaf=1))
    assert rmse(predict(m, x), y) == 0.0


def test_cart_too_few_rows():
    with pytest.raises(FrameError, match="at least"):
        fit_cart(X4[:3], Y4[:3], TreeParams(min_samples_leaf=2))
    with pytest.raises(FrameError, match="missing"):
        fit_cart(np.array([[np.nan], [1.0]]), np.array([1.0, 2.0]), TreeParams(min_samples_leaf=1))


def test_thresholds_between_observed_values():
    X, y = _noisy(80)
    m = fit_random_forest(X, y, ForestParams(n_trees=5, min_samples_leaf=2))
    for t in m.trees:
        for f, thr in zip(t.feature, t.threshold):
            if f < 0:
                continue
            col = np.unique(X[:, f])
            pos = np.searchsorted(col, thr)
            assert col[pos - 1] <= thr < col[pos]


def test_min_samples_leaf_respected():
    X, y = _noisy(100)
    m = fit_cart(X, y, TreeParams(max_depth=None, min_samples_leaf=7))
    leaves = m.trees[0].apply(X)
    assert np.bincount(leaves)[np.unique(leaves)].min() >= 7


def test_forest_degenerates_to_cart():
    X, y = _noisy(60, d=3)
    rf = fit_random_forest(
        X, y, ForestParams(n_trees=1, bootstrap=False, feature_subsample=None, min_samples_leaf=3, seed=4)
    )
    cart = fit_cart(X, y, TreeParams(max_depth=None, min_samples_leaf=3), seed=4)
    np.testing.assert_array_equal(predict(rf, X), predict(cart, X))


def test_forest_deterministic_and_thread_invariant():
    X, y = _noisy(120)
    p = ForestParams(n_trees=12, min_samples_leaf=3, seed=9)
    a = predict(fit_random_forest(X, y, p), X)
    b = predict(fit_random_forest(X, y, p, n_jobs=4), X)
    np.testing.assert_array_equal(a, b)
    c = predict(fit_random_forest(X, y, ForestParams(n_trees=12, min_samples_leaf=3, seed=10)), X)
    assert not np.array_equal(a, c)


def test_forest_tree_order_invariant():
    X, y = _noisy(100)
    m = fit_random_forest(X, y, ForestParams(n_trees=15, min_samples_leaf=2, seed=1))
    base = predict(m, X)
    m.trees = m.trees[::-1]
    np.testing.assert_array_equal(predict(m, X), base)
    m.trees = [m.trees[i] for i in np.random.default_rng(0).permutation(15)]
    np.testing.assert_array_equal(predict(m, X), base)


def test_forest_beats_single_tree_on_noise():
    X, y = _noisy(600, seed=3)
    Xt, yt = _noisy(400, seed=4)
    tree = fit_cart(X, y, TreeParams(max_depth=None, min_samples_leaf=1))
    rf = fit_random_forest(X, y, ForestParams(n_trees=200, min_samples_leaf=1, feature_subsample=None))
    assert rmse(predict(rf, Xt), yt) <= rmse(predict(tree, Xt), yt)


def test_gbdt_hand_trace():
    X = np.array([[1.0], [2.0], [3.0]])
    y = np.array([1.0, 2.0, 3.0])
    m = fit_gbdt(X, y, BoostParams(n_rounds=1, learning_rate=1.0, max_depth=2, min_samples_leaf=1))
    assert m.base == 2.0
    np.testing.assert_array_equal(predict(m, X), y)


def test_gbdt_zero_rounds_is_mean():
    m = fit_gbdt(X4, Y4, BoostParams(n_rounds=0, min_samples_leaf=1))
    np.testing.assert_array_equal(predict(m, X4), [0.5] * 4)


def test_gbdt_history_non_increasing():
    X, y = _noisy(150, seed=8)
    m = fit_gbdt(X, y, BoostParams(n_rounds=100, learning_rate=0.3, min_samples_leaf=2))
    h = np.array(m.history)
    assert len(h) == 101 and (np.diff(h) <= 1e-12).all()
    staged = list(staged_predict(m, X))
    assert len(staged) == 101
    np.testing.assert_allclose(staged[-1], predict(m, X), rtol=0, atol=1e-12)


def test_xgb_regularization_limit():
    X, y = _noisy(80)
    m = fit_xgb(X, y, BoostParams(n_rounds=5, learning_rate=1.0, l2_lambda=1e15, min_samples_leaf=2))
    np.testing.assert_allclose(predict(m, X), np.mean(y), atol=1e-9)


def test_xgb_gamma_gate():
    # root gain at 1.5 with lambda 1 is (1/3 + 1/3 - 0) / 2 = 1/3
    p = dict(n_rounds=1, learning_rate=1.0, max_depth=1, min_samples_leaf=1, l2_lambda=1.0)
    stump = fit_xgb(X4, Y4, BoostParams(min_split_gain=0.33, **p))
    assert stump.trees[0].n_nodes == 3
    np.testing.assert_allclose(predict(stump, X4), 0.5 + np.array([-1, -1, 1, 1]) / 3)
    leaf = fit_xgb(X4, Y4, BoostParams(min_split_gain=0.34, **p))
    assert leaf.trees[0].n_nodes == 1


def test_xgb_lambda0_matches_gbdt():
    X, y = _noisy(60, d=3, seed=11)
    p = dict(n_rounds=10, learning_rate=0.5, max_depth=3, min_samples_leaf=2, l2_lambda=0.0)
    a, b = fit_gbdt(X, y, BoostParams(**p)), fit_xgb(X, y, BoostParams(**p))
    for ta, tb in zip(a.trees, b.trees):
        np.testing.assert_array_equal(ta.feature, tb.feature)
        np.testing.assert_array_equal(ta.threshold, tb.threshold)


def test_early_stopping_truncates():
    X, y = _noisy(200, seed=5)
    m = fit_gbdt(X, y, BoostParams(n_rounds=300, learning_rate=0.5, early_stopping_rounds=5, min_samples_leaf=2))
    assert 0 < len(m.trees) < 300
    assert len(m.history) == len(m.trees) + 1


def test_predict_row_permutation_and_schema():
    X, y = _noisy(50)
    m = fit_gbdt(X, y, BoostParams(n_rounds=20, min_samples_leaf=2), feature_names=list("abcd"))
    perm = np.random.default_rng(0).permutation(50)
    np.testing.assert_array_equal(predict(m, X[perm]), predict(m, X)[perm])
    with pytest.raises(FrameError, match="expects 4"):
        predict(m, X[:, :3])
    with pytest.raises(FrameError, match="names"):
        predict(m, X, feature_names=list("abdc"))


def test_monotone_feature_map_keeps_partitions():
    X, y = _noisy(80, d=2)
    Z = np.column_stack([np.exp(X[:, 0]), X[:, 1] ** 3])
    a = fit_cart(X, y, TreeParams(max_depth=4, min_samples_leaf=3))
    b = fit_cart(Z, y, TreeParams(max_depth=4, min_samples_leaf=3))
    np.testing.assert_array_equal(a.trees[0].apply(X), b.trees[0].apply(Z))
    np.testing.assert_array_equal(a.trees[0].feature, b.trees[0].feature)


@pytest.mark.parametrize("variant", ["cart", "rf", "gbdt", "xgb"])
def test_serialization_round_trip(tmp_path, variant):
    X, y = _noisy(60)
    params = {"min_samples_leaf": 2}
    if variant == "rf":
        params["n_trees"] = 4
    elif variant != "cart":
        params["n_rounds"] = 6
    m = fit_variant(variant, X, y, params, seed=3)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.variant == variant
    np.testing.assert_array_equal(predict(back, X), predict(m, X))
    assert model_to_dict(model_from_dict(model_to_dict(m))) == model_to_dict(m)


def test_fit_variant_unknown():
    with pytest.raises(FrameError):
        fit_variant("svm", X4, Y4, {}, 0)
