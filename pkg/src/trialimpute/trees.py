"""CART and random-forest learners used as imputation engines.

Greedy sum-of-squares regression trees in the rpart mold: candidate
thresholds are midpoints between consecutive sorted distinct values, both
children must hold at least ``minbucket`` rows, and a split must improve
within-node SS by at least ``cp`` times the root SS. Forests bootstrap rows
per tree and sample ``mtry`` predictors at every split.

The split scan and routing loops are numba-compiled; everything stochastic is
keyed to the caller's stream: bootstrap rows come from the stream itself and
per-split predictor sampling uses a counter-style generator seeded by
(tree seed, node depth, node row range) so a node's draw never depends on
which other nodes were visited.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .rng import RngStream

__all__ = [
    "RegressionTree",
    "CartRegressor",
    "ForestRegressor",
    "AllInBagWarning",
]


class AllInBagWarning(UserWarning):
    """Every row was in-bag for every tree; OOB error fell back to in-sample."""


_U64 = np.uint64


@njit(cache=True, inline="always")
def _mix64(z):
    # splitmix64 finalizer; good 64-bit avalanche for seed derivation
    z = (z + _U64(0x9E3779B97F4A7C15)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)) & _U64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)) & _U64(0xFFFFFFFFFFFFFFFF)
    return z ^ (z >> _U64(31))


@njit(cache=True, inline="always")
def _next_u64(state):
    # xorshift64*; state must be nonzero
    s = state
    s ^= s >> _U64(12)
    s = (s ^ (s << _U64(25))) & _U64(0xFFFFFFFFFFFFFFFF)
    s ^= s >> _U64(27)
    return s, (s * _U64(0x2545F4914F6CDD1D)) & _U64(0xFFFFFFFFFFFFFFFF)


@njit(cache=True)
def _build_kernel(X, y, minbucket, cp, max_depth, mtry, seed):
    n, p = X.shape
    max_nodes = 2 * n + 1
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    value = np.zeros(max_nodes)
    node_start = np.zeros(max_nodes, np.int64)
    node_end = np.zeros(max_nodes, np.int64)
    members = np.arange(n)

    ybar = 0.0
    for i in range(n):
        ybar += y[i]
    ybar /= n
    yc = np.empty(n)
    for i in range(n):
        yc[i] = y[i] - ybar

    root_ss = 0.0
    for i in range(n):
        root_ss += yc[i] * yc[i]
    min_gain = cp * root_ss

    stack_node = np.empty(max_nodes, np.int64)
    stack_depth = np.empty(max_nodes, np.int64)
    node_start[0] = 0
    node_end[0] = n
    stack_node[0] = 0
    stack_depth[0] = 0
    top = 0
    n_nodes = 1

    feat_pool = np.empty(p, np.int64)
    xs = np.empty(n)
    ys = np.empty(n)
    tmp_left = np.empty(n, np.int64)
    tmp_right = np.empty(n, np.int64)

    while top >= 0:
        node = stack_node[top]
        depth = stack_depth[top]
        top -= 1
        start = node_start[node]
        end = node_end[node]
        ns = end - start

        s = 0.0
        ymin = yc[members[start]]
        ymax = ymin
        for i in range(start, end):
            v = yc[members[i]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = s / ns + ybar
        if ns < 2 * minbucket or depth >= max_depth or ymax == ymin:
            continue
        node_ss_term = s * s / ns

        m = p
        for j in range(p):
            feat_pool[j] = j
        if mtry < p:
            # node-local generator: draws do not depend on traversal history
            state = _mix64(
                seed
                ^ _mix64(_U64(depth) + _U64(0x51A9))
                ^ _mix64(_U64(start) + _U64(0xC3D1))
                ^ _mix64(_U64(end))
            )
            if state == _U64(0):
                state = _U64(0x9E3779B97F4A7C15)
            m = mtry
            for i in range(m):
                state, r = _next_u64(state)
                # modulo bias is ~(p-i)/2^53, irrelevant at these sizes
                j = i + int((r >> _U64(11)) % _U64(p - i))
                t = feat_pool[i]
                feat_pool[i] = feat_pool[j]
                feat_pool[j] = t

        best_gain = -1.0
        best_feat = -1
        best_thr = 0.0
        for c in range(m):
            f = feat_pool[c]
            for i in range(ns):
                r_i = members[start + i]
                xs[i] = X[r_i, f]
                ys[i] = yc[r_i]
            order = np.argsort(xs[:ns], kind="mergesort")
            sum_l = 0.0
            for i in range(ns - 1):
                sum_l += ys[order[i]]
                nl = i + 1
                nr = ns - nl
                if nl < minbucket:
                    continue
                if nr < minbucket:
                    break
                xi = xs[order[i]]
                xn = xs[order[i + 1]]
                if xn <= xi:
                    continue
                sum_r = s - sum_l
                gain = sum_l * sum_l / nl + sum_r * sum_r / nr - node_ss_term
                thr = xi + 0.5 * (xn - xi)
                better = False
                if gain > best_gain:
                    better = True
                elif gain == best_gain:
                    if thr < best_thr:
                        better = True
                    elif thr == best_thr and f < best_feat:
                        better = True
                if better:
                    best_gain = gain
                    best_feat = f
                    best_thr = thr

        if best_feat < 0 or best_gain < min_gain or best_gain <= 0.0:
            continue

        nl = 0
        nr = 0
        for i in range(start, end):
            r_i = members[i]
            if X[r_i, best_feat] <= best_thr:
                tmp_left[nl] = r_i
                nl += 1
            else:
                tmp_right[nr] = r_i
                nr += 1
        for i in range(nl):
            members[start + i] = tmp_left[i]
        for i in range(nr):
            members[start + nl + i] = tmp_right[i]

        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[node] = best_feat
        threshold[node] = best_thr
        left[node] = lid
        right[node] = rid
        node_start[lid] = start
        node_end[lid] = start + nl
        node_start[rid] = start + nl
        node_end[rid] = end
        top += 1
        stack_node[top] = lid
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = rid
        stack_depth[top] = depth + 1

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
        node_start[:n_nodes].copy(),
        node_end[:n_nodes].copy(),
        members,
    )


@njit(cache=True)
def _route_kernel(feature, threshold, left, right, Xq):
    nq = Xq.shape[0]
    out = np.empty(nq, np.int64)
    for i in range(nq):
        node = 0
        while feature[node] >= 0:
            if Xq[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass(frozen=True)
class RegressionTree:
    """Flat-array binary regression tree.

    Internal nodes have feature >= 0; leaves have feature == -1. Rows of the
    training set covered by node k are members[node_start[k]:node_end[k]].
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    node_start: np.ndarray
    node_end: np.ndarray
    members: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)

    def route(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _route_kernel(self.feature, self.threshold, self.left, self.right, X)

    def members_of(self, node_id: int) -> np.ndarray:
        return self.members[self.node_start[node_id] : self.node_end[node_id]]


def _fit_tree(X, y, minbucket, cp, max_depth, mtry, seed) -> RegressionTree:
    arrays = _build_kernel(
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.float64),
        np.int64(minbucket),
        np.float64(cp),
        np.int64(max_depth),
        np.int64(mtry),
        _U64(seed),
    )
    return RegressionTree(*arrays)


def _check_tree_params(minbucket, cp, max_depth):
    if minbucket < 1:
        raise ValueError(f"minbucket must be >= 1, got {minbucket}")
    if cp < 0:
        raise ValueError(f"cp must be >= 0, got {cp}")
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")


class CartRegressor(BaseEstimator, RegressorMixin):
    """Greedy SS-minimizing regression tree."""

    def __init__(self, minbucket: int = 5, cp: float = 1e-4, max_depth: int = 30):
        self.minbucket = minbucket
        self.cp = cp
        self.max_depth = max_depth

    def fit(self, X, y):
        _check_tree_params(self.minbucket, self.cp, self.max_depth)
        X, y = check_X_y(X, y, dtype=np.float64, order="C", y_numeric=True)
        self.n_features_in_ = X.shape[1]
        # all predictors at every split, so no randomness is consumed
        self.tree_ = _fit_tree(X, y, self.minbucket, self.cp, self.max_depth, X.shape[1], 0)
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64, order="C")
        return self.tree_.value[self.tree_.route(X)]

    def apply(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64, order="C")
        return self.tree_.route(X)

    def leaf_members(self, x) -> np.ndarray:
        """Training-row indices in the leaf that the single row ``x`` routes to."""
        check_is_fitted(self, "tree_")
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        leaf = int(self.tree_.route(x)[0])
        return self.tree_.members_of(leaf).copy()


class ForestRegressor(BaseEstimator, RegressorMixin):
    """Bootstrap ensemble of SS-minimizing trees with per-split mtry sampling.

    ``mtry=None`` means ceil(sqrt(p)). Fitting requires a stream; each tree
    derives its own ("boot", t) child so results are schedule-independent.
    """

    def __init__(
        self,
        ntree: int = 10,
        mtry: int | None = None,
        minbucket: int = 5,
        cp: float = 1e-4,
        max_depth: int = 30,
    ):
        self.ntree = ntree
        self.mtry = mtry
        self.minbucket = minbucket
        self.cp = cp
        self.max_depth = max_depth

    def fit(self, X, y, stream: RngStream = None, bootstrap_indices=None):
        _check_tree_params(self.minbucket, self.cp, self.max_depth)
        if self.ntree < 1:
            raise ValueError(f"ntree must be >= 1, got {self.ntree}")
        X, y = check_X_y(X, y, dtype=np.float64, order="C", y_numeric=True)
        n, p = X.shape
        if n < 2:
            raise ValueError(f"forest fitting needs n >= 2 rows, got {n}")
        mtry = int(np.ceil(np.sqrt(p))) if self.mtry is None else self.mtry
        if not 1 <= mtry <= p:
            raise ValueError(f"mtry must be in [1, {p}], got {mtry}")
        if stream is None and (bootstrap_indices is None or mtry < p):
            raise ValueError("forest fitting requires a stream")

        if bootstrap_indices is None:
            boot = np.empty((self.ntree, n), dtype=np.int64)
        else:
            boot = np.asarray(bootstrap_indices, dtype=np.int64)
            if boot.shape != (self.ntree, n):
                raise ValueError(f"bootstrap_indices must have shape {(self.ntree, n)}")

        trees = []
        for t in range(self.ntree):
            tree_stream = stream.child("boot", t) if stream is not None else None
            if bootstrap_indices is None:
                boot[t] = tree_stream.gen.integers(0, n, size=n)
            seed = int(tree_stream.gen.integers(0, 2**63)) if tree_stream is not None else t + 1
            trees.append(
                _fit_tree(X[boot[t]], y[boot[t]], self.minbucket, self.cp, self.max_depth, mtry, seed)
            )

        self.n_features_in_ = p
        self.mtry_ = mtry
        self.trees_ = trees
        self.bootstrap_indices_ = boot
        self._train_y = y.copy()
        self._compute_oob(X, y)
        return self

    def _compute_oob(self, X, y):
        n = X.shape[0]
        pred_sum = np.zeros(n)
        pred_cnt = np.zeros(n, dtype=np.int64)
        for t, tree in enumerate(self.trees_):
            in_bag = np.zeros(n, dtype=bool)
            in_bag[self.bootstrap_indices_[t]] = True
            oob = ~in_bag
            if not oob.any():
                continue
            pred_sum[oob] += tree.value[tree.route(X[oob])]
            pred_cnt[oob] += 1
        has_oob = pred_cnt > 0
        if has_oob.any():
            resid = y[has_oob] - pred_sum[has_oob] / pred_cnt[has_oob]
            self.oob_mse_ = float(np.mean(resid**2))
            self.oob_is_in_sample_ = False
        else:
            resid = y - self.predict(X)
            self.oob_mse_ = float(np.mean(resid**2))
            self.oob_is_in_sample_ = True
            warnings.warn(
                "every row was in-bag for every tree; oob_mse_ is the in-sample MSE",
                AllInBagWarning,
            )

    def predict(self, X):
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64, order="C")
        total = np.zeros(X.shape[0])
        for tree in self.trees_:
            total += tree.value[tree.route(X)]
        return total / self.ntree

    def apply(self, X):
        """Leaf ids per row per tree, shape (n_rows, ntree)."""
        check_is_fitted(self, "trees_")
        X = check_array(X, dtype=np.float64, order="C")
        return np.column_stack([tree.route(X) for tree in self.trees_])

    def leaf_members(self, tree_index: int, x) -> np.ndarray:
        """Original training-row indices in the leaf ``x`` reaches in one tree.

        Indices keep bootstrap multiplicity: a row drawn twice into the
        tree's bag appears twice, so donor draws weight it accordingly.
        """
        check_is_fitted(self, "trees_")
        tree = self.trees_[tree_index]
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        leaf = int(tree.route(x)[0])
        return self.bootstrap_indices_[tree_index][tree.members_of(leaf)]
