"""Trial data generators and missingness mechanisms.

Study 1: a single continuous outcome y = m_z(x) + Normal(0, resid_sd) with
five covariate-outcome shapes and four treatment-interaction settings, each
calibrated analytically so the marginal average treatment effect equals
beta1 exactly. Outcomes are withheld via a logistic model in (x, z).

Study 2: four weekly means of 28 daily lognormal activity values with a
2:1 allocation, and week-level missingness applied to a 30% selection of
participants with week probabilities (0.25, 0.5, 0.75, 0.85).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from scipy.special import expit

from .rng import RngStream, bernoulli, lognormal_by_moments, normal

RELATIONSHIPS = ("linear", "two_tier", "flattening", "quadratic", "harmonic")
INTERACTIONS = ("none", "small", "large", "different_shapes", "absent_one_arm")
MISS_KINDS = ("MCAR", "MAR_X", "MAR_Z")

# Week-level withholding probabilities for selected study-2 participants.
WEEK_MISS_PROBS = (0.25, 0.50, 0.75, 0.85)


class StratumExhaustedWarning(UserWarning):
    """A missingness stratum was smaller than its selection quota."""


@dataclass(frozen=True)
class Study1Config:
    n: int
    relationship: str = "linear"
    interaction: str = "none"
    beta1: float = 0.0
    resid_sd: float = 42.0

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 4):
            raise ValueError(f"n must be an integer >= 4, got {self.n}")
        if self.relationship not in RELATIONSHIPS:
            raise ValueError(f"unknown relationship {self.relationship!r}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"unknown interaction {self.interaction!r}")
        if self.interaction != "none" and self.relationship != "linear":
            # the relationship grid and the interaction grid are disjoint;
            # interaction settings define both arms' mean functions themselves
            raise ValueError(
                "interaction settings fix the covariate-outcome shape; leave relationship='linear'"
            )
        if not np.isfinite(self.beta1):
            raise ValueError(f"beta1 must be finite, got {self.beta1}")
        if not self.resid_sd > 0:
            raise ValueError(f"resid_sd must be > 0, got {self.resid_sd}")


@dataclass(frozen=True)
class MissMechanism:
    kind: str
    target_rate: float
    alpha0: float
    alpha1: float
    alpha2: float

    def __post_init__(self):
        if self.kind not in MISS_KINDS:
            raise ValueError(f"unknown missingness kind {self.kind!r}")
        if self.kind == "MCAR" and not (self.alpha1 == 0 and self.alpha2 == 0):
            raise ValueError("MCAR requires alpha1 = alpha2 = 0")
        if self.kind == "MAR_X" and self.alpha2 != 0:
            raise ValueError("MAR_X requires alpha2 = 0")
        if self.kind == "MAR_Z" and self.alpha1 != 0:
            raise ValueError("MAR_Z requires alpha1 = 0")


# Logistic coefficients calibrated to the target marginal rates, by
# (kind, target_rate).
TABLE_MECHANISMS = {
    ("MCAR", 0.10): MissMechanism("MCAR", 0.10, -2.197, 0.0, 0.0),
    ("MCAR", 0.30): MissMechanism("MCAR", 0.30, -0.847, 0.0, 0.0),
    ("MAR_X", 0.10): MissMechanism("MAR_X", 0.10, -2.5, -1.0, 0.0),
    ("MAR_X", 0.30): MissMechanism("MAR_X", 0.30, -1.0, -1.0, 0.0),
    ("MAR_Z", 0.10): MissMechanism("MAR_Z", 0.10, -1.55, 0.0, -1.9),
    ("MAR_Z", 0.30): MissMechanism("MAR_Z", 0.30, -0.4, 0.0, -1.0),
}


def table_mechanism(kind: str, target_rate: float) -> MissMechanism:
    try:
        return TABLE_MECHANISMS[(kind, target_rate)]
    except KeyError:
        raise ValueError(
            f"no mechanism for kind={kind!r} at rate {target_rate}; "
            f"available: {sorted(TABLE_MECHANISMS)}"
        ) from None


@dataclass(frozen=True)
class TrialDataset:
    """Study-1 data; x and z are always fully observed, y may be withheld."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    observed: np.ndarray
    true_ate: float
    config: Study1Config

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class RepeatedDataset:
    """Study-2 data: baseline x, treatment z, and four weekly mean outcomes."""

    x: np.ndarray
    z: np.ndarray
    yweek: np.ndarray
    week_observed: np.ndarray
    true_effect: float = 12.0
    n_u_resamples: int = 0

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _arm_means(cfg: Study1Config, x: np.ndarray):
    """Mean outcome per arm. Constants are chosen so E[m1(X) - m0(X)] = beta1."""
    b1 = cfg.beta1
    if cfg.interaction == "none":
        f = {
            "linear": lambda v: 25.0 * v,
            "two_tier": lambda v: 50.0 * (v > 0),
            "flattening": lambda v: 60.0 * (1 - np.exp(-1.5 * v)) / (1 + np.exp(-1.5 * v)),
            "quadratic": lambda v: 25.0 * (v**2 - 1.0),
            "harmonic": lambda v: 40.0 * np.sin(2.5 * v),
        }[cfg.relationship](x)
        return f, f + b1
    if cfg.interaction == "small":
        return 25.0 * x, 35.0 * x + b1  # E[10 X] = 0
    if cfg.interaction == "large":
        return 25.0 * x, -25.0 * x + b1  # E[-50 X] = 0; conditional effect flips sign
    if cfg.interaction == "different_shapes":
        # E[e^X] = e^(1/2) for X ~ N(0,1)
        return 25.0 * x, 25.0 * np.exp(x) + b1 - 25.0 * math.exp(0.5)
    # absent_one_arm: x = W^2 so E[X] = 1; no covariate effect in the treated arm
    return 25.0 * x, np.full_like(x, b1 + 25.0)


def gen_study1(cfg: Study1Config, stream: RngStream) -> TrialDataset:
    n = cfg.n
    if cfg.interaction == "absent_one_arm":
        x = normal(stream, 0.0, 1.0, size=n) ** 2
    else:
        x = normal(stream, 0.0, 1.0, size=n)
    z = bernoulli(stream, 0.5, size=n)
    m0, m1 = _arm_means(cfg, x)
    y = np.where(z == 1, m1, m0) + normal(stream, 0.0, cfg.resid_sd, size=n)
    return TrialDataset(
        x=x,
        z=z,
        y=y,
        observed=np.ones(n, dtype=bool),
        true_ate=float(cfg.beta1),
        config=cfg,
    )


def apply_missingness(ds: TrialDataset, mech: MissMechanism, stream: RngStream) -> TrialDataset:
    """Withhold y[i] with probability expit(alpha0 + alpha1 x + alpha2 z).

    Only the observed flags change; y values stay in place so tests can
    recover the completed oracle dataset.
    """
    if not ds.observed.all():
        raise ValueError("missingness is applied to fully observed datasets")
    p = expit(mech.alpha0 + mech.alpha1 * ds.x + mech.alpha2 * ds.z)
    withheld = stream.gen.random(ds.n) < p
    return replace(ds, observed=~withheld)


def gen_study2(n: int = 145, stream: RngStream = None, delta: float = 12.0) -> RepeatedDataset:
    """Baseline activity, 2:1 allocation, and four weekly means of 28 daily values.

    mu_i = x_i + delta z_i + u_i with u_i ~ Normal(0, sd 2); a nonpositive
    mu_i (far lower tail) resamples that participant's u_i, counting draws.
    """
    if n < 10:
        raise ValueError(f"study-2 generation needs n >= 10, got {n}")
    if stream is None:
        raise ValueError("gen_study2 requires a stream")
    x = lognormal_by_moments(stream, 77.0, 52.0, size=n)
    z = bernoulli(stream, 2.0 / 3.0, size=n)
    u = normal(stream, 0.0, 2.0, size=n)
    mu = x + delta * z + u
    n_resamples = 0
    for _ in range(1000):
        bad = mu <= 0
        if not bad.any():
            break
        n_resamples += int(bad.sum())
        u[bad] = normal(stream, 0.0, 2.0, size=int(bad.sum()))
        mu = x + delta * z + u
    else:
        raise RuntimeError("mu stayed nonpositive after 1000 resampling rounds")

    # vectorized form of moments_to_lognormal(mu_i, 46)
    scale2 = np.log1p((46.0 / mu) ** 2)
    loc = np.log(mu) - scale2 / 2.0
    scale = np.sqrt(scale2)
    daily = stream.gen.lognormal(mean=loc[:, None], sigma=scale[:, None], size=(n, 28))
    yweek = daily.reshape(n, 4, 7).mean(axis=2)
    return RepeatedDataset(
        x=x,
        z=z,
        yweek=yweek,
        week_observed=np.ones((n, 4), dtype=bool),
        true_effect=float(delta),
        n_u_resamples=n_resamples,
    )


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _draw_quota(stream: RngStream, candidates: np.ndarray, quota: int, label: str) -> np.ndarray:
    if quota > candidates.size:
        warnings.warn(
            f"stratum {label} has {candidates.size} participants, fewer than its "
            f"quota of {quota}; selecting the whole stratum",
            StratumExhaustedWarning,
        )
        return candidates.copy()
    return stream.gen.choice(candidates, size=quota, replace=False)


def apply_week_missingness(ds: RepeatedDataset, kind: str, stream: RngStream) -> RepeatedDataset:
    """Select 30% of participants and withhold their weeks independently.

    MCAR selects uniformly; MAR_X takes 10% of the sample from x > mean(x)
    and 20% from x <= mean(x); MAR_Z takes 10% from z = 1 and 20% from z = 0.
    Selected participants lose weeks 1-4 with probabilities (.25, .5, .75, .85).
    """
    if kind not in MISS_KINDS:
        raise ValueError(f"unknown missingness kind {kind!r}")
    if not ds.week_observed.all():
        raise ValueError("week missingness is applied to fully observed datasets")
    n = ds.n
    ids = np.arange(n)
    if kind == "MCAR":
        selected = _draw_quota(stream, ids, _round_half_up(0.30 * n), "all")
    elif kind == "MAR_X":
        high = ids[ds.x > ds.x.mean()]
        low = ids[ds.x <= ds.x.mean()]
        selected = np.concatenate(
            [
                _draw_quota(stream, high, _round_half_up(0.10 * n), "x > mean"),
                _draw_quota(stream, low, _round_half_up(0.20 * n), "x <= mean"),
            ]
        )
    else:
        treated = ids[ds.z == 1]
        control = ids[ds.z == 0]
        selected = np.concatenate(
            [
                _draw_quota(stream, treated, _round_half_up(0.10 * n), "z = 1"),
                _draw_quota(stream, control, _round_half_up(0.20 * n), "z = 0"),
            ]
        )
    withheld = stream.gen.random((selected.size, 4)) < np.asarray(WEEK_MISS_PROBS)
    week_observed = np.ones((n, 4), dtype=bool)
    week_observed[selected] = ~withheld
    return replace(ds, week_observed=week_observed)


def to_frame(ds) -> pd.DataFrame:
    """Flat table form (one row per participant) for CSV export."""
    if isinstance(ds, TrialDataset):
        return pd.DataFrame(
            {"id": np.arange(ds.n), "x": ds.x, "z": ds.z, "y": ds.y, "observed": ds.observed}
        )
    cols = {"id": np.arange(ds.n), "x": ds.x, "z": ds.z}
    for w in range(4):
        cols[f"yweek{w + 1}"] = ds.yweek[:, w]
    for w in range(4):
        cols[f"week_observed{w + 1}"] = ds.week_observed[:, w]
    return pd.DataFrame(cols)


def export_csv(ds, path) -> None:
    to_frame(ds).to_csv(path, index=False)
