"""Combining per-imputation estimates: Rubin's rules with the
Barnard-Rubin small-sample degrees of freedom."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class PooledEstimate:
    qbar: float
    within: float
    between: float
    total_var: float
    df: float
    ci_low: float
    ci_high: float
    p_value: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.total_var) if self.total_var > 0 else 0.0


def rubin_pool(
    estimates,
    variances,
    df_com: float,
    alpha: float = 0.05,
    null_value: float = 0.0,
) -> PooledEstimate:
    """Pool M point estimates and their squared SEs.

    qbar and W are means, B is the sample variance of the estimates
    (divisor M - 1), T = W + (1 + 1/M) B. The t reference uses the
    Barnard-Rubin df: the harmonic combination of (M-1)/lambda^2 and
    ((df_com+1)/(df_com+3)) df_com (1-lambda), with lambda = (1+1/M) B / T.
    No between-imputation spread means lambda = 0 and the observed-data
    term alone; T = 0 degenerates to a point interval at qbar.
    """
    est = np.asarray(estimates, dtype=float)
    var = np.asarray(variances, dtype=float)
    if est.ndim != 1 or var.shape != est.shape:
        raise ValueError(f"estimates {est.shape} and variances {var.shape} must be equal-length vectors")
    m = est.shape[0]
    if m < 2:
        raise ValueError(f"pooling needs at least 2 imputations, got {m}")
    if (var < 0).any():
        raise ValueError("variances must be nonnegative")
    if not df_com > 0:
        raise ValueError(f"df_com must be positive, got {df_com}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")

    qbar = float(est.mean())
    within = float(var.mean())
    between = float(est.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between

    df_obs_full = (df_com + 1.0) / (df_com + 3.0) * df_com
    if total > 0:
        lam = (1.0 + 1.0 / m) * between / total
    else:
        lam = 0.0
    df_obs = df_obs_full * (1.0 - lam)
    if lam > 0:
        df_old = (m - 1.0) / lam**2
        df = 1.0 / (1.0 / df_old + 1.0 / df_obs) if df_obs > 0 else 0.0
    else:
        df = df_obs

    if total > 0:
        se = math.sqrt(total)
        tcrit = float(stats.t.ppf(1.0 - alpha / 2.0, df)) if df > 0 else math.inf
        ci_low, ci_high = qbar - tcrit * se, qbar + tcrit * se
        tstat = (qbar - null_value) / se
        p_value = float(2.0 * stats.t.sf(abs(tstat), df)) if df > 0 else 1.0
    else:
        ci_low = ci_high = qbar
        p_value = 1.0 if qbar == null_value else 0.0

    return PooledEstimate(
        qbar=qbar,
        within=within,
        between=between,
        total_var=total,
        df=float(df),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_value=p_value,
        m=m,
    )
