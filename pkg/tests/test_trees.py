"""Tree and forest learner checks, including exhaustive split oracles."""

import math

import numpy as np
import pytest

from trialimpute.rng import derive_stream
from trialimpute.trees import AllInBagWarning, CartRegressor, ForestRegressor


def _node_ss(y):
    return float(((y - y.mean()) ** 2).sum())


def _exhaustive_root_split(X, y, minbucket):
    """Brute-force best (gain, threshold, feature) with the production tie rule:
    highest gain, then lowest threshold, then lowest feature index."""
    n, p = X.shape
    yc = y - y.mean()
    s = yc.sum()
    node_term = s * s / n
    best = None
    for f in range(p):
        order = np.argsort(X[:, f], kind="mergesort")
        xs = X[order, f]
        ys = yc[order]
        sum_l = 0.0
        for i in range(n - 1):
            sum_l += ys[i]
            nl, nr = i + 1, n - i - 1
            if nl < minbucket or nr < minbucket or xs[i + 1] <= xs[i]:
                continue
            gain = sum_l**2 / nl + (s - sum_l) ** 2 / nr - node_term
            thr = xs[i] + 0.5 * (xs[i + 1] - xs[i])
            key = (gain, -thr, -f)
            if best is None or key > best[0]:
                best = (key, gain, thr, f)
    return best


def test_cart_step_function_single_split_in_gap():
    rng = np.random.default_rng(42)
    x = rng.normal(size=200)
    y = 5.0 * (x > 0) + rng.normal(scale=0.01, size=200)
    cart = CartRegressor(minbucket=5, cp=1e-4).fit(x.reshape(-1, 1), y)
    tree = cart.tree_
    assert tree.n_nodes == 3 and tree.n_leaves == 2
    lo = x[x <= 0].max()
    hi = x[x > 0].min()
    assert lo < tree.threshold[0] < hi
    # the chosen split attains the exhaustive-search optimum
    _, gain, thr, f = _exhaustive_root_split(x.reshape(-1, 1), y, 5)
    assert tree.feature[0] == f
    assert tree.threshold[0] == pytest.approx(thr, rel=1e-12)


def test_cart_constant_y_is_root_only():
    X = np.arange(40, dtype=float).reshape(-1, 1)
    cart = CartRegressor().fit(X, np.full(40, 7.5))
    assert cart.tree_.n_nodes == 1
    assert cart.predict([[3.0]])[0] == pytest.approx(7.5)


def test_cart_too_few_rows_is_root_only():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(9, 2))
    y = rng.normal(size=9)
    cart = CartRegressor(minbucket=5).fit(X, y)
    assert cart.tree_.n_nodes == 1
    assert cart.predict([[0.0, 0.0]])[0] == pytest.approx(y.mean(), rel=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_cart_root_split_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 61))
    p = int(rng.integers(1, 4))
    X = rng.normal(size=(n, p))
    y = 2.0 * X[:, 0] + rng.normal(size=n)
    cart = CartRegressor(minbucket=5, cp=0.0).fit(X, y)
    tree = cart.tree_
    oracle = _exhaustive_root_split(X, y, 5)
    if tree.feature[0] < 0:
        assert oracle is None or oracle[1] <= 0.0
        return
    assert oracle is not None
    assert tree.feature[0] == oracle[3]
    assert tree.threshold[0] == pytest.approx(oracle[2], rel=1e-12)


def test_cart_structural_invariants():
    rng = np.random.default_rng(5)
    n, minbucket, cp = 300, 5, 1e-4
    X = rng.normal(size=(n, 3))
    y = 10.0 * np.sin(X[:, 0]) + X[:, 1] ** 2 + rng.normal(size=n)
    cart = CartRegressor(minbucket=minbucket, cp=cp).fit(X, y)
    tree = cart.tree_
    root_ss = _node_ss(y)
    seen = np.zeros(n, dtype=int)
    for leaf in tree.leaf_ids():
        mem = tree.members_of(leaf)
        assert len(mem) >= minbucket
        seen[mem] += 1
        # replay: every member routes back to its leaf
        assert np.all(tree.route(X[mem]) == leaf)
        # leaf value is the member mean
        assert tree.value[leaf] == pytest.approx(y[mem].mean(), rel=1e-10)
    assert np.all(seen == 1)
    for node in range(tree.n_nodes):
        if tree.feature[node] < 0:
            continue
        drop = (
            _node_ss(y[tree.members_of(node)])
            - _node_ss(y[tree.members_of(tree.left[node])])
            - _node_ss(y[tree.members_of(tree.right[node])])
        )
        assert drop >= cp * root_ss - 1e-7 * root_ss


def test_cart_cp_monotone_in_leaves():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(250, 2))
    y = 4.0 * X[:, 0] + rng.normal(size=250)
    leaves = [
        CartRegressor(minbucket=5, cp=cp).fit(X, y).tree_.n_leaves
        for cp in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0]
    ]
    assert all(a >= b for a, b in zip(leaves, leaves[1:]))
    assert leaves[-1] == 1


def test_cart_depth_cap():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 1))
    y = X[:, 0] + rng.normal(scale=0.1, size=400)
    cart = CartRegressor(minbucket=5, cp=0.0, max_depth=1).fit(X, y)
    assert cart.tree_.n_nodes <= 3


def test_cart_leaf_members_step_example():
    rng = np.random.default_rng(42)
    x = rng.normal(size=200)
    y = 5.0 * (x > 0) + rng.normal(scale=0.01, size=200)
    cart = CartRegressor(minbucket=5).fit(x.reshape(-1, 1), y)
    thr = cart.tree_.threshold[0]
    members = cart.leaf_members([3.0])
    np.testing.assert_array_equal(np.sort(members), np.flatnonzero(x > thr))
    assert len(cart.leaf_members([-3.0])) >= 5


def test_cart_deterministic_refit():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(120, 2))
    y = X[:, 0] - X[:, 1] + rng.normal(size=120)
    t1 = CartRegressor().fit(X, y).tree_
    t2 = CartRegressor().fit(X, y).tree_
    for a, b in [(t1.feature, t2.feature), (t1.threshold, t2.threshold), (t1.members, t2.members)]:
        np.testing.assert_array_equal(a, b)


def test_cart_permutation_invariant_predictions():
    rng = np.random.default_rng(21)
    X = rng.normal(size=(150, 2))
    y = 3.0 * X[:, 0] + rng.normal(size=150)
    perm = rng.permutation(150)
    p1 = CartRegressor().fit(X, y).predict(X)
    p2 = CartRegressor().fit(X[perm], y[perm]).predict(X)
    np.testing.assert_allclose(p1, p2, atol=1e-10)


# ---------------------------------------------------------------------------
# Forests


def test_forest_identity_bootstrap_equals_single_cart():
    rng = np.random.default_rng(33)
    X = rng.normal(size=(80, 2))
    y = 2.0 * X[:, 0] + rng.normal(size=80)
    forest = ForestRegressor(ntree=1, mtry=2).fit(
        X, y, bootstrap_indices=np.arange(80).reshape(1, -1)
    )
    cart = CartRegressor().fit(X, y)
    np.testing.assert_allclose(forest.predict(X), cart.predict(X), atol=1e-12)


def test_forest_oob_matches_hand_computation():
    rng = np.random.default_rng(64)
    n = 40
    X = rng.normal(size=(n, 2))
    y = X[:, 0] + rng.normal(size=n)
    boot = rng.integers(0, n, size=(3, n))
    forest = ForestRegressor(ntree=3, mtry=2).fit(X, y, bootstrap_indices=boot)
    # independent oob computation
    preds = np.zeros(n)
    counts = np.zeros(n)
    for t, tree in enumerate(forest.trees_):
        oob_rows = np.setdiff1d(np.arange(n), boot[t])
        leaf = tree.route(X[oob_rows])
        preds[oob_rows] += tree.value[leaf]
        counts[oob_rows] += 1
    keep = counts > 0
    expected = float(np.mean((y[keep] - preds[keep] / counts[keep]) ** 2))
    assert forest.oob_mse_ == pytest.approx(expected, rel=1e-12)
    assert not forest.oob_is_in_sample_


def test_forest_pure_noise_oob_band():
    rng = np.random.default_rng(7)
    n, sd = 500, 2.0
    X = rng.normal(size=(n, 3))
    y = rng.normal(scale=sd, size=n)
    forest = ForestRegressor().fit(X, y, stream=derive_stream(10, [("rep", 0)]))
    assert 0.8 * sd**2 < forest.oob_mse_ < 1.4 * sd**2


def test_forest_step_prediction_and_range():
    rng = np.random.default_rng(13)
    x = rng.normal(size=500)
    y = 5.0 * (x > 0) + rng.normal(scale=0.5, size=500)
    forest = ForestRegressor().fit(x.reshape(-1, 1), y, stream=derive_stream(4, [("rep", 1)]))
    pred = forest.predict([[2.0], [-2.0]])
    assert abs(pred[0] - 5.0) < 0.5
    assert abs(pred[1] - 0.0) < 0.5
    grid = np.linspace(-3, 3, 50).reshape(-1, 1)
    assert np.all(forest.predict(grid) >= y.min())
    assert np.all(forest.predict(grid) <= y.max())


def test_forest_bitwise_deterministic_by_stream():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 4))
    y = X @ np.array([1.0, -1.0, 0.5, 0.0]) + rng.normal(size=100)
    f1 = ForestRegressor().fit(X, y, stream=derive_stream(77, [("rep", 5)]))
    f2 = ForestRegressor().fit(X, y, stream=derive_stream(77, [("rep", 5)]))
    f3 = ForestRegressor().fit(X, y, stream=derive_stream(77, [("rep", 6)]))
    np.testing.assert_array_equal(f1.bootstrap_indices_, f2.bootstrap_indices_)
    for t1, t2 in zip(f1.trees_, f2.trees_):
        np.testing.assert_array_equal(t1.feature, t2.feature)
        np.testing.assert_array_equal(t1.threshold, t2.threshold)
        np.testing.assert_array_equal(t1.members, t2.members)
    assert any(
        not np.array_equal(t1.threshold, t3.threshold) for t1, t3 in zip(f1.trees_, f3.trees_)
    )


def test_forest_leaf_size_invariant_and_mtry_default():
    rng = np.random.default_rng(19)
    X = rng.normal(size=(200, 5))
    y = X[:, 0] + rng.normal(size=200)
    forest = ForestRegressor(minbucket=5).fit(X, y, stream=derive_stream(1, [("rep", 2)]))
    assert forest.mtry_ == math.ceil(math.sqrt(5))
    for tree in forest.trees_:
        for leaf in tree.leaf_ids():
            assert tree.node_end[leaf] - tree.node_start[leaf] >= 5


def test_forest_prediction_permutation_invariant_in_tree_order():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(150, 2))
    y = X[:, 0] ** 2 + rng.normal(size=150)
    forest = ForestRegressor().fit(X, y, stream=derive_stream(2, [("rep", 3)]))
    grid = rng.normal(size=(20, 2))
    per_tree = np.array([tree.value[tree.route(grid)] for tree in forest.trees_])
    shuffled = per_tree[rng.permutation(forest.ntree)]
    np.testing.assert_allclose(shuffled.mean(axis=0), forest.predict(grid), atol=1e-12)


def test_forest_leaf_members_keep_bootstrap_multiplicity():
    rng = np.random.default_rng(44)
    X = rng.normal(size=(30, 1))
    y = rng.normal(size=30)
    boot = np.zeros((1, 30), dtype=np.int64)  # row 0 drawn 30 times
    forest = ForestRegressor(ntree=1, mtry=1, minbucket=5).fit(X, y, bootstrap_indices=boot)
    members = forest.leaf_members(0, X[0])
    assert np.all(members == 0)
    assert len(members) == 30


def test_forest_all_in_bag_falls_back_with_warning():
    rng = np.random.default_rng(50)
    X = rng.normal(size=(6, 1))
    y = rng.normal(size=6)
    boot = np.tile(np.arange(6), (2, 1))
    with pytest.warns(AllInBagWarning):
        forest = ForestRegressor(ntree=2, mtry=1).fit(X, y, bootstrap_indices=boot)
    assert forest.oob_is_in_sample_
    expected = float(np.mean((y - forest.predict(X)) ** 2))
    assert forest.oob_mse_ == pytest.approx(expected, rel=1e-12)


def test_forest_parameter_validation():
    X = np.zeros((10, 2))
    y = np.zeros(10)
    with pytest.raises(ValueError):
        ForestRegressor(mtry=3).fit(X, y, stream=derive_stream(0, [("rep", 0)]))
    with pytest.raises(ValueError):
        ForestRegressor().fit(X, y)  # no stream
    with pytest.raises(ValueError):
        ForestRegressor(ntree=0).fit(X, y, stream=derive_stream(0, [("rep", 0)]))
