"""Per-replicate records and Monte Carlo performance summaries.

One record per (scenario, replicate, method, estimand); failed replicates
keep their reason and are counted, never redrawn. Summaries report bias,
empirical and model-based SE, coverage, MSE, and rejection rate, each with
its Monte Carlo standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SUMMARY_ALPHA = 0.05


@dataclass(frozen=True)
class ReplicateRecord:
    scenario_id: str
    replicate_index: int
    method_id: str
    estimand_id: str
    estimate: float | None = None
    se: float | None = None
    df: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None
    p_value: float | None = None
    failed: bool = False
    failure_reason: str | None = None

    def __post_init__(self):
        numeric = (self.estimate, self.se, self.df, self.ci_low, self.ci_high, self.p_value)
        if self.failed:
            if any(v is not None for v in numeric):
                raise ValueError("failed records carry no numeric fields")
        else:
            if any(v is None for v in numeric):
                raise ValueError("successful records need all numeric fields")


def success_record(scenario_id, replicate_index, method_id, estimand_id, fit) -> ReplicateRecord:
    """Record from anything exposing estimate/se/df plus a CI and p-value.

    Accepts an EstimandFit (CI built here from its t reference) or a
    PooledEstimate (CI and p already pooled).
    """
    from scipy import stats

    if hasattr(fit, "qbar"):
        return ReplicateRecord(
            scenario_id=scenario_id,
            replicate_index=replicate_index,
            method_id=method_id,
            estimand_id=estimand_id,
            estimate=float(fit.qbar),
            se=float(fit.se),
            df=float(fit.df),
            ci_low=float(fit.ci_low),
            ci_high=float(fit.ci_high),
            p_value=float(fit.p_value),
        )
    if fit.se > 0:
        tcrit = float(stats.t.ppf(1.0 - SUMMARY_ALPHA / 2.0, fit.df))
        half = tcrit * fit.se
        p = float(2.0 * stats.t.sf(abs(fit.estimate / fit.se), fit.df))
    else:
        half = 0.0
        p = 1.0 if fit.estimate == 0 else 0.0
    return ReplicateRecord(
        scenario_id=scenario_id,
        replicate_index=replicate_index,
        method_id=method_id,
        estimand_id=estimand_id,
        estimate=float(fit.estimate),
        se=float(fit.se),
        df=float(fit.df),
        ci_low=float(fit.estimate - half),
        ci_high=float(fit.estimate + half),
        p_value=p,
    )


def failure_record(scenario_id, replicate_index, method_id, estimand_id, reason) -> ReplicateRecord:
    return ReplicateRecord(
        scenario_id=scenario_id,
        replicate_index=replicate_index,
        method_id=method_id,
        estimand_id=estimand_id,
        failed=True,
        failure_reason=str(reason),
    )


@dataclass(frozen=True)
class PerformanceSummary:
    n_reps_used: int
    n_failed: int
    bias: float
    empirical_se: float
    mean_model_se: float
    se_ratio: float
    coverage: float
    mse: float
    rejection_rate: float
    mcse_bias: float
    mcse_coverage: float
    mcse_mse: float
    mcse_emp_se: float
    mcse_model_se: float
    mcse_se_ratio: float
    mcse_rejection_rate: float
    available: bool = True


def _unavailable(n_used: int, n_failed: int) -> PerformanceSummary:
    nan = float("nan")
    return PerformanceSummary(
        n_reps_used=n_used,
        n_failed=n_failed,
        bias=nan,
        empirical_se=nan,
        mean_model_se=nan,
        se_ratio=nan,
        coverage=nan,
        mse=nan,
        rejection_rate=nan,
        mcse_bias=nan,
        mcse_coverage=nan,
        mcse_mse=nan,
        mcse_emp_se=nan,
        mcse_model_se=nan,
        mcse_se_ratio=nan,
        mcse_rejection_rate=nan,
        available=False,
    )


def summarize(records, truth: float, exclude_above: float = None) -> PerformanceSummary:
    """Fold records for one (scenario, method, estimand) cell.

    ``exclude_above`` optionally drops replicates with |estimate| over the
    threshold (off by default); exclusions are counted with the failures.
    Fewer than two usable records gives a summary flagged unavailable.
    """
    usable = [r for r in records if not r.failed]
    n_failed = len(records) - len(usable)
    if exclude_above is not None:
        kept = [r for r in usable if abs(r.estimate) <= exclude_above]
        n_failed += len(usable) - len(kept)
        usable = kept
    n = len(usable)
    if n < 2:
        return _unavailable(n, n_failed)

    est = np.array([r.estimate for r in usable])
    se = np.array([r.se for r in usable])
    p = np.array([r.p_value for r in usable])
    covered = np.array([r.ci_low <= truth <= r.ci_high for r in usable])

    bias = float(est.mean() - truth)
    emp_se = float(est.std(ddof=1))
    mean_model_se = float(se.mean())
    if emp_se > 0:
        se_ratio = mean_model_se / emp_se
    else:
        se_ratio = math.inf if mean_model_se > 0 else math.nan
    coverage = float(covered.mean())
    sq_err = (est - truth) ** 2
    mse = float(sq_err.mean())
    rejection = float((p < SUMMARY_ALPHA).mean())

    var_model_se = float(se.var(ddof=1))
    if emp_se > 0 and mean_model_se > 0:
        mcse_se_ratio = se_ratio * math.sqrt(
            var_model_se / (n * mean_model_se**2) + 1.0 / (2.0 * (n - 1))
        )
    else:
        mcse_se_ratio = math.nan
    return PerformanceSummary(
        n_reps_used=n,
        n_failed=n_failed,
        bias=bias,
        empirical_se=emp_se,
        mean_model_se=mean_model_se,
        se_ratio=se_ratio,
        coverage=coverage,
        mse=mse,
        rejection_rate=rejection,
        mcse_bias=emp_se / math.sqrt(n),
        mcse_coverage=math.sqrt(coverage * (1.0 - coverage) / n),
        mcse_mse=float(sq_err.std(ddof=1)) / math.sqrt(n),
        mcse_emp_se=emp_se / math.sqrt(2.0 * (n - 1)),
        mcse_model_se=math.sqrt(var_model_se / n),
        mcse_se_ratio=mcse_se_ratio,
        mcse_rejection_rate=math.sqrt(rejection * (1.0 - rejection) / n),
    )
