"""Deterministic, splittable random-number streams plus the distribution
samplers used everywhere else in the package.

Streams are identified by ``(master_seed, path)`` where ``path`` is a list of
labeled indices such as ``[("rep", 17), ("arm", 1), ("imp", 4)]``.  The pair is
mapped onto a ``numpy.random.SeedSequence`` spawn key, so equal pairs always
reproduce the identical draw sequence and distinct paths give statistically
independent streams no matter which order (or process) they are consumed in.
That property is what makes the replication loop schedule-independent.

The label vocabulary is fixed so that an external reimplementation can match
streams exactly: see ``PATH_LABELS``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PATH_LABELS",
    "RngStream",
    "derive_stream",
    "LogNormalMoments",
    "moments_to_lognormal",
    "normal",
    "lognormal_by_moments",
    "bernoulli",
    "uniform_int",
    "chi_square",
]

# Fixed label vocabulary, in code order 1..6.  The integer codes are part of
# the determinism contract: spawn_key = (code_0, index_0, code_1, index_1, ...).
PATH_LABELS = ("rep", "arm", "imp", "boot", "miss", "datagen")
_LABEL_CODE = {name: i + 1 for i, name in enumerate(PATH_LABELS)}


@dataclass(frozen=True)
class RngStream:
    """A labeled, reproducible random stream.

    ``gen`` is the live numpy Generator; ``master_seed`` and ``path`` record
    how it was derived, so child streams can be derived without threading any
    extra state around.
    """

    master_seed: int
    path: tuple[tuple[str, int], ...]
    gen: np.random.Generator = field(repr=False, compare=False)

    def child(self, label: str, index: int) -> "RngStream":
        """Derive the sub-stream at ``path + [(label, index)]``."""
        return derive_stream(self.master_seed, self.path + ((label, int(index)),))


def _spawn_key(path) -> tuple[int, ...]:
    key = []
    for label, index in path:
        code = _LABEL_CODE.get(label)
        if code is None:
            raise ValueError(
                f"unknown stream label {label!r}; allowed: {PATH_LABELS}"
            )
        index = int(index)
        if index < 0:
            raise ValueError(f"stream index must be >= 0, got {index} for {label!r}")
        key.append(code)
        key.append(index)
    return tuple(key)


def derive_stream(master_seed: int, path=()) -> RngStream:
    """Create the stream identified by ``(master_seed, path)``.

    Repeated calls with equal arguments return streams that produce identical
    sequences; streams with different paths are independent sub-streams.
    """
    master_seed = int(master_seed)
    if master_seed < 0:
        raise ValueError("master_seed must be a non-negative integer")
    norm_path = tuple((label, int(index)) for label, index in path)
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=_spawn_key(norm_path))
    return RngStream(master_seed, norm_path, np.random.Generator(np.random.PCG64(ss)))


@dataclass(frozen=True)
class LogNormalMoments:
    """Natural-scale (mean, sd) of a lognormal together with the log-scale
    (location, scale) parameters that realize them."""

    mean: float
    sd: float
    location: float
    scale: float


def moments_to_lognormal(mean: float, sd: float) -> LogNormalMoments:
    """Invert natural-scale moments to log-scale parameters.

    scale^2 = ln(1 + sd^2/mean^2),  location = ln(mean) - scale^2 / 2.
    """
    mean = float(mean)
    sd = float(sd)
    if mean <= 0 or sd <= 0:
        raise ValueError(f"lognormal moments require mean > 0 and sd > 0, got ({mean}, {sd})")
    scale2 = math.log1p((sd / mean) ** 2)
    location = math.log(mean) - scale2 / 2.0
    return LogNormalMoments(mean=mean, sd=sd, location=location, scale=math.sqrt(scale2))


def normal(stream: RngStream, mean: float, sd: float, size=None):
    """Normal(mean, sd) draw(s); sd is the standard deviation."""
    if not sd > 0:
        raise ValueError(f"normal sd must be > 0, got {sd}")
    return stream.gen.normal(loc=mean, scale=sd, size=size)


def lognormal_by_moments(stream: RngStream, mean: float, sd: float, size=None):
    """Lognormal draw(s) with natural-scale mean and sd (not log-scale)."""
    params = moments_to_lognormal(mean, sd)
    return stream.gen.lognormal(mean=params.location, sigma=params.scale, size=size)


def bernoulli(stream: RngStream, p: float, size=None):
    """Bernoulli(p) draw(s) as integer 0/1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bernoulli p must lie in [0, 1], got {p}")
    u = stream.gen.random(size=size)
    if size is None:
        return int(u < p)
    return (u < p).astype(np.int64)


def uniform_int(stream: RngStream, low: int, high: int, size=None):
    """Uniform integer on the inclusive range [low, high]."""
    if low > high:
        raise ValueError(f"uniform_int requires low <= high, got [{low}, {high}]")
    return stream.gen.integers(low, high + 1, size=size)


def chi_square(stream: RngStream, df: float, size=None):
    """Chi-square(df) draw(s)."""
    if not df >= 1:
        raise ValueError(f"chi_square df must be >= 1, got {df}")
    return stream.gen.chisquare(df, size=size)
