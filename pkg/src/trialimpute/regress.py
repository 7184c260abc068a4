"""Linear-model numerics.

Ordinary least squares with classical covariance, Bayesian posterior draws
used by the normal imputation method, and REML-fitted generalized least
squares for repeated-measures (MMRM) analyses with participants observed at
arbitrary subsets of the scheduled weeks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .rng import RngStream, chi_square


class SingularDesignError(ValueError):
    """Design matrix is rank deficient (or fixed effects inestimable)."""


class InsufficientDataError(ValueError):
    """Too few rows for the requested fit."""


# ---------------------------------------------------------------------------
# Ordinary least squares


@dataclass(frozen=True)
class OlsFit:
    """Classical OLS fit with the pieces posterior draws need.

    ``r_factor`` is the upper-triangular R from the thin QR of the design;
    (X'X)^-1 = R^-1 R^-T, so correlated normal draws reduce to one
    triangular solve.
    """

    coef: np.ndarray
    coef_cov: np.ndarray
    sigma2_hat: float
    df_resid: int
    n_obs: int
    sse: float = field(repr=False, default=0.0)
    r_factor: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class PosteriorDraw:
    beta_star: np.ndarray
    sigma2_star: float


@dataclass(frozen=True)
class EstimandFit:
    """A scalar estimate with its model SE and the df used for t inference."""

    estimand_id: str
    estimate: float
    se: float
    df: float


def _as_design(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"design must be 2-d, got shape {X.shape}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError(f"outcome shape {y.shape} does not match design {X.shape}")
    return X, y


def ols_fit(X, y) -> OlsFit:
    """Least-squares fit via thin QR; never forms normal equations.

    Raises InsufficientDataError when n <= p and SingularDesignError when
    the design is rank deficient.
    """
    X, y = _as_design(X, y)
    n, p = X.shape
    if n <= p:
        raise InsufficientDataError(f"need more rows than columns, got {n} rows, {p} columns")
    q, r = scipy.linalg.qr(X, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.min() <= max(n, p) * np.finfo(float).eps * max(diag.max(), 1e-300):
        raise SingularDesignError("design matrix is rank deficient")
    coef = scipy.linalg.solve_triangular(r, q.T @ y)
    resid = y - X @ coef
    sse = float(resid @ resid)
    df_resid = n - p
    sigma2_hat = sse / df_resid
    r_inv = scipy.linalg.solve_triangular(r, np.eye(p))
    xtx_inv = r_inv @ r_inv.T
    return OlsFit(
        coef=coef,
        coef_cov=sigma2_hat * xtx_inv,
        sigma2_hat=sigma2_hat,
        df_resid=df_resid,
        n_obs=n,
        sse=sse,
        r_factor=r,
    )


def draw_posterior(fit: OlsFit, X, y, stream: RngStream) -> PosteriorDraw:
    """One draw from the conjugate Bayesian linear-regression posterior.

    sigma2_star = SSE / g with g ~ chi-square(n - p), then
    beta_star ~ Normal(coef, sigma2_star (X'X)^-1). A perfect fit (SSE = 0)
    degenerates to the point posterior at the OLS solution.
    """
    if fit.df_resid < 1:
        raise InsufficientDataError("posterior draw needs at least 1 residual df")
    if fit.sse == 0.0:
        return PosteriorDraw(beta_star=fit.coef.copy(), sigma2_star=0.0)
    g = chi_square(stream, fit.df_resid)
    sigma2_star = fit.sse / g
    z = stream.gen.standard_normal(fit.coef.shape[0])
    # R^-1 z has covariance (X'X)^-1
    beta_star = fit.coef + np.sqrt(sigma2_star) * scipy.linalg.solve_triangular(fit.r_factor, z)
    return PosteriorDraw(beta_star=beta_star, sigma2_star=float(sigma2_star))


def contrast(fit, c, estimand_id: str = "contrast") -> EstimandFit:
    """Linear combination c'coef with its model SE and the fit's df rule."""
    c = np.asarray(c, dtype=float)
    if isinstance(fit, OlsFit):
        coef, cov, df = fit.coef, fit.coef_cov, float(fit.df_resid)
    elif isinstance(fit, MmrmFit):
        coef, cov, df = fit.fixed_coef, fit.fixed_cov, float(fit.df)
    else:
        raise TypeError(f"contrast expects an OlsFit or MmrmFit, got {type(fit).__name__}")
    if c.shape != coef.shape:
        raise ValueError(f"contrast length {c.shape} does not match {coef.shape} coefficients")
    var = float(c @ cov @ c)
    return EstimandFit(
        estimand_id=estimand_id,
        estimate=float(c @ coef),
        se=float(np.sqrt(max(var, 0.0))),
        df=df,
    )


# ---------------------------------------------------------------------------
# REML for the repeated-measures model
#
# Participants are (weeks, X, y) triples: integer week indices in
# [0, n_weeks), the design rows for those weeks, and the observed outcomes.
# The within-participant covariance is a single unstructured n_weeks x n_weeks
# matrix, subset to each participant's observed weeks. Sigma is parameterized
# by its Cholesky factor with log diagonal (log-Cholesky), giving an
# unconstrained smooth problem solved by L-BFGS-B with the analytic gradient.


@dataclass(frozen=True)
class MmrmFit:
    fixed_coef: np.ndarray
    fixed_cov: np.ndarray
    sigma: np.ndarray
    reml_loglik: float
    converged: bool
    n_iter: int
    df: float
    n_participants: int


def _chol_param_index(n_weeks):
    # theta layout: log-diagonal entries first, then strict lower triangle
    # in row-major order.
    pairs = [(i, j) for i in range(n_weeks) for j in range(i)]
    return pairs


def theta_to_sigma(theta, n_weeks):
    theta = np.asarray(theta, dtype=float)
    L = np.zeros((n_weeks, n_weeks))
    L[np.diag_indices(n_weeks)] = np.exp(theta[:n_weeks])
    for k, (i, j) in enumerate(_chol_param_index(n_weeks)):
        L[i, j] = theta[n_weeks + k]
    return L @ L.T, L


def sigma_to_theta(sigma, n_weeks):
    L = np.linalg.cholesky(np.asarray(sigma, dtype=float))
    theta = np.empty(n_weeks * (n_weeks + 1) // 2)
    theta[:n_weeks] = np.log(np.diag(L))
    for k, (i, j) in enumerate(_chol_param_index(n_weeks)):
        theta[n_weeks + k] = L[i, j]
    return theta


@dataclass(frozen=True)
class _PatternGroup:
    weeks: tuple
    X: np.ndarray  # (m, k, p)
    y: np.ndarray  # (m, k)


def _group_patterns(participants, n_weeks):
    if not participants:
        raise InsufficientDataError("no participants to fit")
    p = np.asarray(participants[0][1]).shape[1]
    buckets: dict = {}
    for weeks, X, y in participants:
        weeks = tuple(int(w) for w in weeks)
        if len(weeks) == 0:
            raise ValueError("participants must contribute at least one observed week")
        if any(w < 0 or w >= n_weeks for w in weeks) or len(set(weeks)) != len(weeks):
            raise ValueError(f"invalid week indices {weeks}")
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.shape != (len(weeks), p) or y.shape != (len(weeks),):
            raise ValueError("design/outcome rows must match the observed weeks")
        buckets.setdefault(weeks, ([], []))
        buckets[weeks][0].append(X)
        buckets[weeks][1].append(y)
    groups = [
        _PatternGroup(weeks=w, X=np.stack(xs), y=np.stack(ys))
        for w, (xs, ys) in sorted(buckets.items())
    ]
    return groups, p


def _dot_l_matrices(L, n_weeks):
    # dSigma/dtheta_j = Ldot_j L' + L Ldot_j' for each of the
    # n_weeks (n_weeks + 1) / 2 parameters.
    n_theta = n_weeks * (n_weeks + 1) // 2
    dots = np.zeros((n_theta, n_weeks, n_weeks))
    for j in range(n_weeks):
        dots[j, j, j] = L[j, j]  # d exp(t)/dt = exp(t)
    for k, (i, j) in enumerate(_chol_param_index(n_weeks)):
        dots[n_weeks + k, i, j] = 1.0
    return dots


def reml_neg_loglik(theta, groups, p, n_weeks, want_grad=True, want_fit=False):
    """Negative restricted log-likelihood (and gradient) at log-Cholesky theta.

    The gradient uses the envelope property: beta is profiled out at its GLS
    value, where the quadratic form is stationary in beta.
    """
    sigma, L = theta_to_sigma(theta, n_weeks)
    n_theta = theta.shape[0]

    S = np.zeros((p, p))
    rhs = np.zeros(p)
    total_logdet = 0.0
    n_rows = 0
    pattern_cache = []
    for g in groups:
        ix = np.asarray(g.weeks)
        V = sigma[np.ix_(ix, ix)]
        try:
            cho = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            return (np.inf, np.zeros(n_theta)) if want_grad else np.inf
        Vinv = scipy.linalg.cho_solve((cho, True), np.eye(len(ix)))
        m = g.X.shape[0]
        total_logdet += m * 2.0 * float(np.sum(np.log(np.diag(cho))))
        n_rows += m * len(ix)
        XtVinv = np.einsum("aki,kl->ail", g.X, Vinv)
        S += np.einsum("ail,alj->ij", XtVinv, g.X)
        rhs += np.einsum("ail,al->i", XtVinv, g.y)
        pattern_cache.append((g, ix, Vinv))

    try:
        S_cho = scipy.linalg.cho_factor(S)
    except scipy.linalg.LinAlgError:
        raise SingularDesignError("fixed effects are not estimable from the observed weeks")
    beta = scipy.linalg.cho_solve(S_cho, rhs)
    S_inv = scipy.linalg.cho_solve(S_cho, np.eye(p))
    logdet_S = 2.0 * float(np.sum(np.log(np.abs(np.diag(S_cho[0])))))

    quad = 0.0
    resids = []
    for g, ix, Vinv in pattern_cache:
        r = g.y - g.X @ beta
        quad += float(np.einsum("ak,kl,al->", r, Vinv, r))
        resids.append(r)

    loglik = -0.5 * ((n_rows - p) * np.log(2.0 * np.pi) + total_logdet + logdet_S + quad)

    extras = {"beta": beta, "fixed_cov": S_inv, "loglik": float(loglik), "sigma": sigma}
    if not want_grad:
        return (float(-loglik), extras) if want_fit else float(-loglik)

    dots = _dot_l_matrices(L, n_weeks)
    d_sigma = np.einsum("jab,cb->jac", dots, L)
    d_sigma = d_sigma + np.transpose(d_sigma, (0, 2, 1))

    grad = np.zeros(n_theta)
    for (g, ix, Vinv), r in zip(pattern_cache, resids):
        m = g.X.shape[0]
        d_sub = d_sigma[:, ix[:, None], ix[None, :]]  # (n_theta, k, k)
        M = np.einsum("kl,jlm,mn->jkn", Vinv, d_sub, Vinv)
        grad += m * np.einsum("kl,jlk->j", Vinv, d_sub)  # d log|V| terms
        A = np.einsum("aki,jkl,alm->jim", g.X, M, g.X)
        grad -= np.einsum("ij,kji->k", S_inv, A)  # d log|S| terms
        grad -= np.einsum("ak,jkl,al->j", r, M, r)  # d quadratic form
    grad *= -0.5  # gradient of loglik
    neg_grad = -grad

    if want_fit:
        return float(-loglik), neg_grad, extras
    return float(-loglik), neg_grad


def _start_theta(groups, n_weeks):
    # Per-week available-case variances give the initial diagonal Sigma.
    values = [[] for _ in range(n_weeks)]
    for g in groups:
        for pos, w in enumerate(g.weeks):
            values[w].extend(g.y[:, pos].tolist())
    pooled = np.concatenate([np.asarray(v) for v in values if v])
    fallback = float(np.var(pooled, ddof=1)) if pooled.size > 1 else 1.0
    fallback = max(fallback, 1e-8)
    variances = np.array(
        [
            np.var(np.asarray(v), ddof=1) if len(v) > 1 else fallback
            for v in values
        ]
    )
    variances = np.maximum(variances, 1e-8)
    theta = np.zeros(n_weeks * (n_weeks + 1) // 2)
    theta[:n_weeks] = 0.5 * np.log(variances)
    return theta


def _warm_theta(groups, p, n_weeks, theta_diag):
    # Pairwise residual covariance at the diagonal-start GLS fit. Starting
    # the optimizer with the right correlations cuts its iteration count
    # several-fold on strongly correlated outcomes; the maximizer is the
    # same either way.
    _, extras = reml_neg_loglik(theta_diag, groups, p, n_weeks, want_grad=False, want_fit=True)
    beta = extras["beta"]
    cross = np.zeros((n_weeks, n_weeks))
    counts = np.zeros((n_weeks, n_weeks))
    for g in groups:
        r = g.y - g.X @ beta
        idx = np.asarray(g.weeks)
        cross[np.ix_(idx, idx)] += r.T @ r
        counts[np.ix_(idx, idx)] += r.shape[0]
    if np.any(counts < 2):
        return theta_diag
    sigma = cross / counts
    vals, vecs = np.linalg.eigh(sigma)
    floor = max(1e-8, 1e-6 * float(vals.max()))
    sigma = (vecs * np.maximum(vals, floor)) @ vecs.T
    return sigma_to_theta(sigma, n_weeks)


def reml_fit_mmrm(
    participants,
    n_weeks: int = 4,
    sigma=None,
    max_iter: int = 500,
    rel_tol: float = 1e-8,
) -> MmrmFit:
    """REML fit of the unstructured-covariance repeated-measures model.

    ``participants`` is a sequence of (weeks, X, y) triples; each participant
    contributes only their observed weeks, with the covariance subset to those
    weeks. When ``sigma`` is given, no optimization runs: the fixed effects
    are the GLS solution at that covariance (callers use this when the REML
    maximizer is available in closed form).
    """
    groups, p = _group_patterns(participants, n_weeks)
    n_participants = sum(g.X.shape[0] for g in groups)
    if n_participants <= p:
        raise InsufficientDataError(
            f"need more participants than fixed effects, got {n_participants} and {p}"
        )

    if sigma is not None:
        theta = sigma_to_theta(sigma, n_weeks)
        _, extras = reml_neg_loglik(theta, groups, p, n_weeks, want_grad=False, want_fit=True)
        return MmrmFit(
            fixed_coef=extras["beta"],
            fixed_cov=extras["fixed_cov"],
            sigma=extras["sigma"],
            reml_loglik=extras["loglik"],
            converged=True,
            n_iter=0,
            df=float(n_participants - p),
            n_participants=n_participants,
        )

    theta0 = _warm_theta(groups, p, n_weeks, _start_theta(groups, n_weeks))
    res = scipy.optimize.minimize(
        reml_neg_loglik,
        theta0,
        args=(groups, p, n_weeks),
        jac=True,
        method="L-BFGS-B",
        # gradient-driven stop: the ftol test alone can quit with the
        # restricted-loglik gradient still ~1e-4, which fails downstream
        # stationarity checks
        options={"maxiter": max_iter, "ftol": 2.2e-14, "gtol": 1e-7},
    )
    _, grad, extras = reml_neg_loglik(res.x, groups, p, n_weeks, want_fit=True)
    converged = bool(res.success) or float(np.max(np.abs(grad))) < 1e-5
    return MmrmFit(
        fixed_coef=extras["beta"],
        fixed_cov=extras["fixed_cov"],
        sigma=extras["sigma"],
        reml_loglik=extras["loglik"],
        converged=converged,
        n_iter=int(res.nit),
        df=float(n_participants - p),
        n_participants=n_participants,
    )


def reml_objective_for_tests(theta, participants, n_weeks=4, want_grad=True):
    """Evaluate the REML objective on raw participant triples.

    Exists so tests can finite-difference the gradient and probe alternate
    covariance values without re-deriving the pattern grouping.
    """
    groups, p = _group_patterns(participants, n_weeks)
    return reml_neg_loglik(theta, groups, p, n_weeks, want_grad=want_grad)
