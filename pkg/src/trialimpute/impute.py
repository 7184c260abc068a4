"""Multiple-imputation engine.

Five per-variable imputation methods (normal regression, predictive mean
matching, tree donors, forest donors, forest + normal residuals), applied
separately by treatment arm for the single-outcome design and through
wide-format chained equations for the four-week design. Each (arm,
imputation) pair consumes its own derived stream, so imputations are
reproducible and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from .datagen import RepeatedDataset, TrialDataset, to_frame
from .regress import InsufficientDataError, SingularDesignError, draw_posterior, ols_fit
from .rng import RngStream, normal, uniform_int
from .trees import CartRegressor, ForestRegressor

METHOD_KINDS = ("norm", "pmm", "cart", "rf_doove", "rf_caliber")
LEAF_DRAWS = ("uniform", "bootstrap")


class ImputationError(RuntimeError):
    """An arm (or arm-week) cannot be imputed; the replicate is a failure."""


@dataclass(frozen=True)
class TreeParams:
    minbucket: int = 5
    cp: float = 1e-4
    max_depth: int = 30

    def make(self) -> CartRegressor:
        return CartRegressor(minbucket=self.minbucket, cp=self.cp, max_depth=self.max_depth)


@dataclass(frozen=True)
class ForestParams:
    ntree: int = 10
    mtry: int | None = None
    minbucket: int = 5
    cp: float = 1e-4
    max_depth: int = 30

    def make(self) -> ForestRegressor:
        return ForestRegressor(
            ntree=self.ntree,
            mtry=self.mtry,
            minbucket=self.minbucket,
            cp=self.cp,
            max_depth=self.max_depth,
        )


@dataclass(frozen=True)
class MiMethod:
    """Configuration for one per-variable imputation method."""

    kind: str
    donors: int = 5
    leaf_draw: str = "uniform"
    tree_params: TreeParams = TreeParams()
    forest_params: ForestParams = ForestParams()

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown imputation method {self.kind!r}; known: {METHOD_KINDS}")
        if self.donors < 1:
            raise ValueError(f"donors must be >= 1, got {self.donors}")
        if self.leaf_draw not in LEAF_DRAWS:
            raise ValueError(f"leaf_draw must be one of {LEAF_DRAWS}, got {self.leaf_draw!r}")


@dataclass(frozen=True)
class CompletedSet:
    """m completed copies of one incomplete dataset."""

    m: int
    datasets: tuple
    method: MiMethod
    by_arm: bool = True


# ---------------------------------------------------------------------------
# Per-variable imputation methods. All take observed predictor rows, observed
# outcomes, and the predictor rows needing imputation; 1-d predictors are a
# single column. The draw order within each method is part of its contract
# (tests replay it).


def _check_triplet(x_obs, y_obs, x_mis):
    X_obs = np.asarray(x_obs, dtype=float)
    X_mis = np.asarray(x_mis, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    if X_obs.ndim == 1:
        X_obs = X_obs.reshape(-1, 1)
    if X_mis.ndim == 1:
        X_mis = X_mis.reshape(-1, 1)
    if X_obs.ndim != 2 or X_mis.ndim != 2 or X_obs.shape[1] != X_mis.shape[1]:
        raise ValueError(
            f"predictor blocks disagree: observed {X_obs.shape}, missing {X_mis.shape}"
        )
    if y_obs.shape != (X_obs.shape[0],):
        raise ValueError(f"y_obs shape {y_obs.shape} does not match {X_obs.shape[0]} rows")
    return X_obs, y_obs, X_mis


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def impute_norm(x_obs, y_obs, x_mis, stream: RngStream) -> np.ndarray:
    """Normal-regression imputation: one posterior draw, then mean + noise."""
    X_obs, y_obs, X_mis = _check_triplet(x_obs, y_obs, x_mis)
    if X_mis.shape[0] == 0:
        return np.empty(0)
    D_obs = _with_intercept(X_obs)
    try:
        fit = ols_fit(D_obs, y_obs)
        draw = draw_posterior(fit, D_obs, y_obs, stream)
    except (InsufficientDataError, SingularDesignError) as exc:
        raise ImputationError(f"normal-model imputation failed: {exc}") from exc
    mean = _with_intercept(X_mis) @ draw.beta_star
    if draw.sigma2_star == 0.0:
        return mean
    return mean + normal(stream, 0.0, math.sqrt(draw.sigma2_star), size=mean.shape[0])


def impute_pmm(x_obs, y_obs, x_mis, donors: int = 5, stream: RngStream = None) -> np.ndarray:
    """Predictive mean matching, type-1.

    Observed predictions come from the OLS estimate, missing-row predictions
    from one posterior draw; each missing row draws uniformly among the
    `donors` observed rows with the closest predictions (ties broken by row
    index) and takes that donor's observed outcome.
    """
    X_obs, y_obs, X_mis = _check_triplet(x_obs, y_obs, x_mis)
    if donors < 1:
        raise ValueError(f"donors must be >= 1, got {donors}")
    if X_mis.shape[0] == 0:
        return np.empty(0)
    if X_obs.shape[0] < donors:
        raise ImputationError(
            f"pmm needs at least donors={donors} observed rows, got {X_obs.shape[0]}"
        )
    D_obs = _with_intercept(X_obs)
    try:
        fit = ols_fit(D_obs, y_obs)
        draw = draw_posterior(fit, D_obs, y_obs, stream)
    except (InsufficientDataError, SingularDesignError) as exc:
        raise ImputationError(f"pmm imputation failed: {exc}") from exc
    obs_pred = D_obs @ fit.coef
    mis_pred = _with_intercept(X_mis) @ draw.beta_star
    out = np.empty(mis_pred.shape[0])
    for i in range(mis_pred.shape[0]):
        pool = np.argsort(np.abs(obs_pred - mis_pred[i]), kind="stable")[:donors]
        out[i] = y_obs[pool[uniform_int(stream, 0, donors - 1)]]
    return out


def impute_cart(
    x_obs,
    y_obs,
    x_mis,
    params: TreeParams = TreeParams(),
    leaf_draw: str = "uniform",
    stream: RngStream = None,
) -> np.ndarray:
    """Tree-donor imputation: route each missing row to its leaf, draw a donor.

    uniform mode draws one leaf member; bootstrap mode resamples the leaf
    members with replacement first, then draws from the resample.
    """
    if leaf_draw not in LEAF_DRAWS:
        raise ValueError(f"leaf_draw must be one of {LEAF_DRAWS}, got {leaf_draw!r}")
    X_obs, y_obs, X_mis = _check_triplet(x_obs, y_obs, x_mis)
    if X_mis.shape[0] == 0:
        return np.empty(0)
    if X_obs.shape[0] < 1:
        raise ImputationError("tree imputation needs at least one observed row")
    est = params.make().fit(X_obs, y_obs)
    out = np.empty(X_mis.shape[0])
    for i in range(X_mis.shape[0]):
        members = est.leaf_members(X_mis[i])
        k = members.size
        if leaf_draw == "bootstrap":
            members = members[stream.gen.integers(0, k, size=k)]
        out[i] = y_obs[members[uniform_int(stream, 0, k - 1)]]
    return out


def impute_rf_doove(
    x_obs, y_obs, x_mis, params: ForestParams = ForestParams(), stream: RngStream = None
) -> np.ndarray:
    """Forest-donor imputation: per missing row, draw one tree uniformly,
    route to its leaf, draw one of the leaf's training members (bootstrap
    multiplicity included) and take that row's observed outcome."""
    X_obs, y_obs, X_mis = _check_triplet(x_obs, y_obs, x_mis)
    if X_mis.shape[0] == 0:
        return np.empty(0)
    try:
        est = params.make().fit(X_obs, y_obs, stream=stream)
    except ValueError as exc:
        raise ImputationError(f"forest imputation failed: {exc}") from exc
    out = np.empty(X_mis.shape[0])
    for i in range(X_mis.shape[0]):
        t = int(uniform_int(stream, 0, est.ntree - 1))
        members = est.leaf_members(t, X_mis[i])
        out[i] = y_obs[members[uniform_int(stream, 0, members.size - 1)]]
    return out


def impute_rf_caliber(
    x_obs, y_obs, x_mis, params: ForestParams = ForestParams(), stream: RngStream = None
) -> np.ndarray:
    """Forest + normal residuals: bootstrap the observed rows, fit a forest,
    then draw Normal(forest prediction, out-of-bag MSE) per missing row."""
    X_obs, y_obs, X_mis = _check_triplet(x_obs, y_obs, x_mis)
    if X_mis.shape[0] == 0:
        return np.empty(0)
    if X_obs.shape[0] < 2:
        raise ImputationError("forest imputation needs at least two observed rows")
    boot = stream.gen.integers(0, X_obs.shape[0], size=X_obs.shape[0])
    try:
        est = params.make().fit(X_obs[boot], y_obs[boot], stream=stream)
    except ValueError as exc:
        raise ImputationError(f"forest imputation failed: {exc}") from exc
    preds = est.predict(X_mis)
    if est.oob_mse_ == 0.0:
        return preds
    return preds + normal(stream, 0.0, math.sqrt(est.oob_mse_), size=preds.shape[0])


def impute_values(method: MiMethod, x_obs, y_obs, x_mis, stream: RngStream) -> np.ndarray:
    """Dispatch one block of imputations to the configured method."""
    if method.kind == "norm":
        return impute_norm(x_obs, y_obs, x_mis, stream)
    if method.kind == "pmm":
        return impute_pmm(x_obs, y_obs, x_mis, donors=method.donors, stream=stream)
    if method.kind == "cart":
        return impute_cart(
            x_obs, y_obs, x_mis, params=method.tree_params, leaf_draw=method.leaf_draw, stream=stream
        )
    if method.kind == "rf_doove":
        return impute_rf_doove(x_obs, y_obs, x_mis, params=method.forest_params, stream=stream)
    return impute_rf_caliber(x_obs, y_obs, x_mis, params=method.forest_params, stream=stream)


# ---------------------------------------------------------------------------
# Dataset-level engines


def _require_stream(stream):
    if stream is None:
        raise ValueError("a stream is required")


def mi_by_arm(ds: TrialDataset, method: MiMethod, m: int = 30, stream: RngStream = None) -> CompletedSet:
    """m imputations of the single-outcome dataset, each arm independently.

    Imputation i of arm a consumes the ("arm", a) -> ("imp", i) child stream,
    so completions are independent of evaluation order. Observed cells are
    copied verbatim into every completion.
    """
    _require_stream(stream)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    datasets = []
    for i in range(m):
        y = ds.y.copy()
        for a in (0, 1):
            arm = ds.z == a
            mis = arm & ~ds.observed
            if not mis.any():
                continue
            obs = arm & ds.observed
            sub = stream.child("arm", a).child("imp", i)
            try:
                y[mis] = impute_values(method, ds.x[obs], ds.y[obs], ds.x[mis], sub)
            except ImputationError as exc:
                raise ImputationError(f"arm {a}, imputation {i + 1}: {exc}") from exc
        datasets.append(replace(ds, y=y, observed=np.ones(ds.n, dtype=bool)))
    return CompletedSet(m=m, datasets=tuple(datasets), method=method)


def mice_wide(
    ds: RepeatedDataset,
    method: MiMethod,
    m: int = 30,
    maxit: int = 10,
    stream: RngStream = None,
    visit: str = "ascending",
) -> CompletedSet:
    """Chained-equations imputation of the four weekly outcomes, by arm.

    Per arm and imputation: missing cells start as uniform draws from the
    week's observed values, then maxit sweeps re-impute each week from the
    baseline covariate and the other weeks' current values. The ascending
    visit order (week 1 to 4) is the default; "by_missingness" visits weeks
    by increasing missing count.
    """
    _require_stream(stream)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if maxit < 1:
        raise ValueError(f"maxit must be >= 1, got {maxit}")
    if visit not in ("ascending", "by_missingness"):
        raise ValueError(f"unknown visit order {visit!r}")
    n_weeks = ds.yweek.shape[1]
    if ds.week_observed.all():
        return CompletedSet(m=m, datasets=tuple(replace(ds) for _ in range(m)), method=method)

    need = (1 + (n_weeks - 1)) + 2  # predictors: x plus the other weeks
    for a in (0, 1):
        arm = ds.z == a
        if not arm.any():
            continue
        counts = ds.week_observed[arm].sum(axis=0)
        if counts.min() < need:
            raise ImputationError(
                f"arm {a} week {int(counts.argmin()) + 1} has {int(counts.min())} observed "
                f"rows, fewer than the {need} the chained model needs"
            )

    datasets = []
    for i in range(m):
        yweek = ds.yweek.copy()
        for a in (0, 1):
            arm = ds.z == a
            if not arm.any():
                continue
            O = ds.week_observed[arm]
            if O.all():
                continue
            sub = stream.child("arm", a).child("imp", i)
            Y = ds.yweek[arm].copy()
            x = ds.x[arm]
            for w in range(n_weeks):
                mis = ~O[:, w]
                if not mis.any():
                    continue
                pool = Y[O[:, w], w]
                Y[mis, w] = pool[uniform_int(sub, 0, pool.size - 1, size=int(mis.sum()))]
            if visit == "ascending":
                order = list(range(n_weeks))
            else:
                order = list(np.argsort((~O).sum(axis=0), kind="stable"))
            for _ in range(maxit):
                for w in order:
                    mis = ~O[:, w]
                    if not mis.any():
                        continue
                    others = [k for k in range(n_weeks) if k != w]
                    P = np.column_stack([x] + [Y[:, k] for k in others])
                    try:
                        Y[mis, w] = impute_values(method, P[O[:, w]], Y[O[:, w], w], P[mis], sub)
                    except ImputationError as exc:
                        raise ImputationError(
                            f"arm {a}, week {w + 1}, imputation {i + 1}: {exc}"
                        ) from exc
            yweek[arm] = Y
        datasets.append(
            replace(ds, yweek=yweek, week_observed=np.ones_like(ds.week_observed))
        )
    return CompletedSet(m=m, datasets=tuple(datasets), method=method)


def complete_cases(ds):
    """Drop incomplete rows: study-1 rows with withheld y, study-2
    participants with any withheld week."""
    if isinstance(ds, TrialDataset):
        keep = ds.observed
        if not keep.any():
            raise ImputationError("no complete cases remain")
        return replace(
            ds,
            x=ds.x[keep],
            z=ds.z[keep],
            y=ds.y[keep],
            observed=np.ones(int(keep.sum()), dtype=bool),
        )
    if isinstance(ds, RepeatedDataset):
        keep = ds.week_observed.all(axis=1)
        if not keep.any():
            raise ImputationError("no complete cases remain")
        return replace(
            ds,
            x=ds.x[keep],
            z=ds.z[keep],
            yweek=ds.yweek[keep],
            week_observed=np.ones((int(keep.sum()), ds.yweek.shape[1]), dtype=bool),
        )
    raise TypeError(f"complete_cases expects a trial dataset, got {type(ds).__name__}")


def export_completed(cs: CompletedSet, path) -> None:
    """Write all m completions as one CSV, long over an `imp` index column."""
    frames = []
    for i, d in enumerate(cs.datasets):
        frame = to_frame(d)
        frame.insert(0, "imp", i + 1)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
