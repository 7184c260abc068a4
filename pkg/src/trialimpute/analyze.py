"""Trial analysis models.

Two fitters: baseline-adjusted OLS (outcome on intercept, treatment,
baseline; for the four-week design the outcome is the mean of the weekly
means) and a repeated-measures GLS/REML model with unstructured
within-participant covariance. Estimands come out as named contrasts.

The stacked weekly design carries intercept, baseline, week indicators,
treatment, treatment-by-week and baseline-by-week interactions (12 columns
for four weeks). With the baseline slope free per week, every week's
regressor set is (1, x, z), so the GLS fixed effects reduce to per-week
least squares for any covariance and the collapsed weekly contrast agrees
with the baseline-adjusted OLS estimate on completed data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import RepeatedDataset, TrialDataset
from .regress import (
    EstimandFit,
    InsufficientDataError,
    SingularDesignError,
    contrast,
    ols_fit,
    reml_fit_mmrm,
)

N_WEEKS = 4
ESTIMAND_IDS = ("ate", "mmrm_week1", "mmrm_week2", "mmrm_week3", "mmrm_week4", "mmrm_collapsed")


class AnalysisError(RuntimeError):
    """The analysis model cannot be fit on this dataset; the replicate fails."""


@dataclass(frozen=True)
class AnalysisResult:
    fits: tuple
    n_used: int
    converged: bool

    def fit_for(self, estimand_id: str) -> EstimandFit:
        for f in self.fits:
            if f.estimand_id == estimand_id:
                return f
        raise KeyError(f"estimand {estimand_id!r} not in result")


def _ancova_columns(ds):
    if isinstance(ds, TrialDataset):
        if not ds.observed.all():
            raise ValueError("fit_ancova expects completed or complete-case data")
        return ds.x, ds.z, ds.y
    if isinstance(ds, RepeatedDataset):
        if not ds.week_observed.all():
            raise ValueError("fit_ancova expects completed or complete-case data")
        return ds.x, ds.z, ds.yweek.mean(axis=1)
    raise TypeError(f"fit_ancova expects a trial dataset, got {type(ds).__name__}")


def fit_ancova(ds) -> AnalysisResult:
    """OLS of the outcome on (1, z, x); the treatment coefficient is the ate."""
    x, z, y = _ancova_columns(ds)
    n = x.shape[0]
    if n < 4:
        raise AnalysisError(f"baseline-adjusted fit needs at least 4 rows, got {n}")
    if not ((z == 0).any() and (z == 1).any()):
        raise AnalysisError("baseline-adjusted fit needs both arms represented")
    X = np.column_stack([np.ones(n), z, x])
    try:
        fit = ols_fit(X, y)
    except (InsufficientDataError, SingularDesignError) as exc:
        raise AnalysisError(f"baseline-adjusted fit failed: {exc}") from exc
    return AnalysisResult(
        fits=(contrast(fit, [0.0, 1.0, 0.0], "ate"),), n_used=n, converged=True
    )


def week_design(x: float, z: float, n_weeks: int = N_WEEKS) -> np.ndarray:
    """Stacked (n_weeks, 3*n_weeks) design for one participant."""
    rows = np.zeros((n_weeks, 3 * n_weeks))
    for w in range(n_weeks):
        rows[w, 0] = 1.0
        rows[w, 1] = x
        rows[w, n_weeks + 1] = z
        if w >= 1:
            rows[w, 1 + w] = 1.0  # week indicator
            rows[w, n_weeks + 1 + w] = z  # treatment-by-week
            rows[w, 2 * n_weeks + w] = x  # baseline-by-week
    return rows


def mmrm_contrasts(n_weeks: int = N_WEEKS) -> dict:
    """Contrast vectors for the weekly effects and their average."""
    p = 3 * n_weeks
    treat = n_weeks + 1
    out = {}
    for j in range(1, n_weeks + 1):
        c = np.zeros(p)
        c[treat] = 1.0
        if j >= 2:
            c[treat + j - 1] = 1.0
        out[f"mmrm_week{j}"] = c
    c = np.zeros(p)
    c[treat] = 1.0
    c[treat + 1 : treat + n_weeks] = 1.0 / n_weeks
    out["mmrm_collapsed"] = c
    return out


def _closed_form_sigma(x, z, yweek):
    # with (1, x, z) regressors in every week, the REML maximizer is the
    # per-week residual cross-product over (n - 3)
    n = x.shape[0]
    U = np.column_stack([np.ones(n), x, z])
    resid = np.empty_like(yweek)
    for w in range(yweek.shape[1]):
        resid[:, w] = yweek[:, w] - U @ ols_fit(U, yweek[:, w]).coef
    return resid.T @ resid / (n - U.shape[1])


def fit_mmrm(ds: RepeatedDataset, sigma=None, max_iter: int = 500) -> AnalysisResult:
    """Repeated-measures fit; includes everyone with at least one observed week.

    Complete data takes the closed-form covariance path; incomplete data runs
    the REML optimizer. Passing ``sigma`` fixes the covariance (no
    optimization), which tests use to probe the GLS solution directly.
    """
    if not isinstance(ds, RepeatedDataset):
        raise TypeError(f"fit_mmrm expects the four-week design, got {type(ds).__name__}")
    included = np.flatnonzero(ds.week_observed.any(axis=1))
    n_used = included.size
    p = 3 * N_WEEKS
    if n_used <= p:
        raise AnalysisError(f"repeated-measures fit needs more than {p} participants, got {n_used}")
    z_used = ds.z[included]
    if not ((z_used == 0).any() and (z_used == 1).any()):
        raise AnalysisError("repeated-measures fit needs both arms represented")

    participants = []
    for i in included:
        weeks = np.flatnonzero(ds.week_observed[i])
        D = week_design(ds.x[i], ds.z[i])
        participants.append((weeks, D[weeks], ds.yweek[i, weeks]))

    try:
        if sigma is not None:
            fit = reml_fit_mmrm(participants, sigma=sigma, max_iter=max_iter)
        elif ds.week_observed[included].all():
            sig = _closed_form_sigma(ds.x[included], z_used, ds.yweek[included])
            fit = reml_fit_mmrm(participants, sigma=sig)
        else:
            fit = reml_fit_mmrm(participants, max_iter=max_iter)
    except (InsufficientDataError, SingularDesignError, np.linalg.LinAlgError) as exc:
        raise AnalysisError(f"repeated-measures fit failed: {exc}") from exc
    if not fit.converged:
        raise AnalysisError("restricted-likelihood optimization did not converge")

    fits = tuple(contrast(fit, c, eid) for eid, c in mmrm_contrasts().items())
    return AnalysisResult(fits=fits, n_used=n_used, converged=True)
