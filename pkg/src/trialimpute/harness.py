"""Scenario registry and the replication loop.

A Scenario pins one simulation cell: generator config, missingness
mechanism, the method list, and the replication count. Every replicate
derives all of its randomness from (master_seed, rep index), so scenarios
can run with any parallelism and resume deterministically. Methods within
a replicate share the derived (arm, imputation) stream family, which pairs
their imputation noise for sharper method contrasts.

Method failures (too few observed rows, inestimable fits, non-convergence)
become failed records; the replicate is never redrawn.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

from joblib import Parallel, delayed

from .analyze import ESTIMAND_IDS, AnalysisError, fit_ancova, fit_mmrm
from .datagen import (
    MISS_KINDS,
    MissMechanism,
    Study1Config,
    TABLE_MECHANISMS,
    apply_missingness,
    apply_week_missingness,
    gen_study1,
    gen_study2,
)
from .impute import ImputationError, MiMethod, complete_cases, mi_by_arm, mice_wide
from .metrics import failure_record, success_record, summarize
from .pool import rubin_pool
from .rng import derive_stream

MMRM_ESTIMANDS = tuple(e for e in ESTIMAND_IDS if e.startswith("mmrm_"))
METHOD_KINDS = ("cc", "mmrm_default", "mi")
DEFAULT_SEED = 20260819
DEFAULT_REPS = 5000


@dataclass(frozen=True)
class MethodSpec:
    method_id: str
    kind: str
    mi: MiMethod | None = None
    m: int = 30

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; known: {METHOD_KINDS}")
        if self.kind == "mi" and self.mi is None:
            raise ValueError(f"method {self.method_id!r} is mi but has no imputation config")
        if self.kind != "mi" and self.mi is not None:
            raise ValueError(f"method {self.method_id!r} is {self.kind} and takes no imputation config")
        if self.m < 2:
            raise ValueError(f"m must be >= 2, got {self.m}")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    study: str
    methods: tuple
    study1_config: Study1Config | None = None
    mechanism: MissMechanism | None = None
    week_mechanism: str | None = None
    study2_n: int = 145
    study2_delta: float = 12.0
    analyses: tuple = ("ancova",)
    n_reps: int = DEFAULT_REPS
    master_seed: int = DEFAULT_SEED
    description: str = ""

    def __post_init__(self):
        if self.study not in ("study1", "study2"):
            raise ValueError(f"unknown study {self.study!r}")
        if not self.methods:
            raise ValueError("a scenario needs at least one method")
        ids = [m.method_id for m in self.methods]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate method ids: {ids}")
        if self.n_reps < 0:
            raise ValueError(f"n_reps must be >= 0, got {self.n_reps}")
        if self.master_seed < 0:
            raise ValueError("master_seed must be >= 0")
        if self.study == "study1":
            if self.study1_config is None or self.mechanism is None:
                raise ValueError("study1 scenarios need study1_config and mechanism")
            if self.analyses != ("ancova",):
                raise ValueError("study1 pairs only with the ancova analysis")
            if any(m.kind == "mmrm_default" for m in self.methods):
                raise ValueError("mmrm_default pairs only with study2")
        else:
            if self.week_mechanism not in MISS_KINDS:
                raise ValueError(f"study2 scenarios need a week mechanism from {MISS_KINDS}")
            if not self.analyses or any(a not in ("ancova", "mmrm") for a in self.analyses):
                raise ValueError(f"study2 analyses must be a nonempty subset of (ancova, mmrm)")
            if self.study2_n < 10:
                raise ValueError(f"study2_n must be >= 10, got {self.study2_n}")


@dataclass(frozen=True)
class ScenarioResult:
    scenario: Scenario
    summaries: tuple  # ordered (method_id, estimand_id, PerformanceSummary) triples
    records: tuple
    wall_time_s: float

    def summary_for(self, method_id: str, estimand_id: str):
        for mid, eid, summary in self.summaries:
            if mid == method_id and eid == estimand_id:
                return summary
        raise KeyError(f"no summary for ({method_id}, {estimand_id})")


def true_effect(sc: Scenario) -> float:
    return sc.study1_config.beta1 if sc.study == "study1" else sc.study2_delta


def method_estimands(sc: Scenario, spec: MethodSpec) -> tuple:
    if sc.study == "study1" or spec.kind == "cc":
        return ("ate",)
    if spec.kind == "mmrm_default":
        return MMRM_ESTIMANDS
    out = ()
    if "ancova" in sc.analyses:
        out += ("ate",)
    if "mmrm" in sc.analyses:
        out += MMRM_ESTIMANDS
    return out


def _run_method(sc: Scenario, spec: MethodSpec, miss, root, rep_index):
    estimands = method_estimands(sc, spec)
    sid = sc.scenario_id
    try:
        if spec.kind == "cc":
            fit = fit_ancova(complete_cases(miss)).fit_for("ate")
            return [success_record(sid, rep_index, spec.method_id, "ate", fit)]
        if spec.kind == "mmrm_default":
            res = fit_mmrm(miss)
            return [
                success_record(sid, rep_index, spec.method_id, eid, res.fit_for(eid))
                for eid in estimands
            ]
        if sc.study == "study1":
            cs = mi_by_arm(miss, spec.mi, m=spec.m, stream=root)
        else:
            cs = mice_wide(miss, spec.mi, m=spec.m, stream=root)
        estimates = {eid: [] for eid in estimands}
        variances = {eid: [] for eid in estimands}
        df_com = {}
        want_mmrm = any(eid in MMRM_ESTIMANDS for eid in estimands)
        for comp in cs.datasets:
            if "ate" in estimates:
                f = fit_ancova(comp).fit_for("ate")
                estimates["ate"].append(f.estimate)
                variances["ate"].append(f.se**2)
                df_com["ate"] = f.df
            if want_mmrm:
                res = fit_mmrm(comp)
                for eid in MMRM_ESTIMANDS:
                    if eid in estimates:
                        f = res.fit_for(eid)
                        estimates[eid].append(f.estimate)
                        variances[eid].append(f.se**2)
                        df_com[eid] = f.df
        out = []
        for eid in estimands:
            pooled = rubin_pool(estimates[eid], variances[eid], df_com=df_com[eid])
            out.append(success_record(sid, rep_index, spec.method_id, eid, pooled))
        return out
    except (ImputationError, AnalysisError) as exc:
        return [failure_record(sid, rep_index, spec.method_id, eid, exc) for eid in estimands]


def run_replicate(sc: Scenario, rep_index: int):
    """One generate -> mask -> (impute ->) analyze -> pool pass; one record
    per (method, estimand)."""
    root = derive_stream(sc.master_seed, [("rep", rep_index)])
    if sc.study == "study1":
        ds = gen_study1(sc.study1_config, root.child("datagen", 0))
        miss = apply_missingness(ds, sc.mechanism, root.child("miss", 0))
    else:
        ds = gen_study2(sc.study2_n, root.child("datagen", 0), sc.study2_delta)
        miss = apply_week_missingness(ds, sc.week_mechanism, root.child("miss", 0))
    records = []
    for spec in sc.methods:
        records.extend(_run_method(sc, spec, miss, root, rep_index))
    return records


def run_scenario(sc: Scenario, parallelism: int = 1) -> ScenarioResult:
    """All replicates, optionally in parallel; output is scheduling-invariant."""
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    t0 = time.monotonic()
    if parallelism > 1 and sc.n_reps > 1:
        batches = Parallel(n_jobs=parallelism)(
            delayed(run_replicate)(sc, i) for i in range(sc.n_reps)
        )
    else:
        batches = [run_replicate(sc, i) for i in range(sc.n_reps)]
    records = [r for batch in batches for r in batch]
    records.sort(key=lambda r: (r.replicate_index, r.method_id, r.estimand_id))
    truth = true_effect(sc)
    summaries = []
    for spec in sc.methods:
        for eid in method_estimands(sc, spec):
            cell = [r for r in records if r.method_id == spec.method_id and r.estimand_id == eid]
            summaries.append((spec.method_id, eid, summarize(cell, truth)))
    return ScenarioResult(
        scenario=sc,
        summaries=tuple(summaries),
        records=tuple(records),
        wall_time_s=time.monotonic() - t0,
    )


def config_hash(sc: Scenario) -> str:
    """Stable hash of everything that determines a scenario's output."""
    payload = asdict(sc)
    payload.pop("description")
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Built-in registry

STUDY1_NS = (50, 100, 200, 500)
STUDY1_SETTINGS = (
    ("linear", "none"),
    ("two_tier", "none"),
    ("flattening", "none"),
    ("quadratic", "none"),
    ("harmonic", "none"),
    ("linear", "small"),
    ("linear", "large"),
    ("linear", "different_shapes"),
    ("linear", "absent_one_arm"),
)
ALT_EFFECT = 40.0


def default_methods_study1() -> tuple:
    return (
        MethodSpec("cc", "cc"),
        MethodSpec("mi_norm", "mi", mi=MiMethod("norm")),
        MethodSpec("mi_pmm", "mi", mi=MiMethod("pmm")),
        MethodSpec("mi_cart", "mi", mi=MiMethod("cart")),
        MethodSpec("mi_rf", "mi", mi=MiMethod("rf_doove")),
        MethodSpec("mi_rf_caliber", "mi", mi=MiMethod("rf_caliber")),
    )


def default_methods_study2() -> tuple:
    return (MethodSpec("cc", "cc"), MethodSpec("mmrm_default", "mmrm_default")) + tuple(
        spec for spec in default_methods_study1() if spec.kind == "mi"
    )


def _setting_label(relationship: str, interaction: str) -> str:
    return relationship if interaction == "none" else f"ix_{interaction}"


def _mech_label(key) -> str:
    kind, rate = key
    return f"{kind}{int(round(rate * 100))}"


def study1_scenario(
    relationship: str,
    interaction: str,
    effect: str,
    mech_key,
    n: int,
    n_reps: int = DEFAULT_REPS,
    master_seed: int = DEFAULT_SEED,
    methods=None,
) -> Scenario:
    beta1 = ALT_EFFECT if effect == "alt" else 0.0
    label = _setting_label(relationship, interaction)
    return Scenario(
        scenario_id=f"s1-{label}-{effect}-{_mech_label(mech_key)}-n{n}",
        study="study1",
        methods=tuple(methods) if methods is not None else default_methods_study1(),
        study1_config=Study1Config(
            n=n, relationship=relationship, interaction=interaction, beta1=beta1
        ),
        mechanism=TABLE_MECHANISMS[mech_key],
        n_reps=n_reps,
        master_seed=master_seed,
        description=f"single outcome, {label}, {effect} effect, {_mech_label(mech_key)}, n={n}",
    )


def study2_scenario(
    kind: str,
    n_reps: int = DEFAULT_REPS,
    master_seed: int = DEFAULT_SEED,
    methods=None,
    analyses=("ancova", "mmrm"),
) -> Scenario:
    return Scenario(
        scenario_id=f"s2-{kind}",
        study="study2",
        methods=tuple(methods) if methods is not None else default_methods_study2(),
        week_mechanism=kind,
        analyses=tuple(analyses),
        n_reps=n_reps,
        master_seed=master_seed,
        description=f"four weekly outcomes, n=145, week-level {kind} missingness",
    )


def _study1_grid(effects, ns, n_reps, master_seed=DEFAULT_SEED):
    out = []
    for n in ns:
        for relationship, interaction in STUDY1_SETTINGS:
            setting_effects = effects if interaction == "none" else [e for e in effects if e == "alt"]
            for effect in setting_effects:
                for key in sorted(TABLE_MECHANISMS):
                    out.append(
                        study1_scenario(
                            relationship, interaction, effect, key, n,
                            n_reps=n_reps, master_seed=master_seed,
                        )
                    )
    return tuple(out)


def build_preset(name: str, n_reps: int = None, master_seed: int = None) -> tuple:
    """Expand a named preset into its scenarios; reps/seed override the preset."""
    seed = DEFAULT_SEED if master_seed is None else master_seed

    def reps_or(default):
        return default if n_reps is None else n_reps

    if name == "study1_grid":
        return _study1_grid(("null", "alt"), STUDY1_NS, reps_or(DEFAULT_REPS), seed)
    if name == "study1_null_n200":
        return _study1_grid(("null",), (200,), reps_or(2000), seed)
    if name == "study1_alt_n200":
        return _study1_grid(("alt",), (200,), reps_or(2000), seed)
    if name == "study1_desk":
        reps = reps_or(500)
        out = []
        for relationship in ("linear", "quadratic"):
            for effect in ("null", "alt"):
                for key in (("MCAR", 0.30), ("MAR_Z", 0.30)):
                    out.append(
                        study1_scenario(relationship, "none", effect, key, 200,
                                        n_reps=reps, master_seed=seed)
                    )
        return tuple(out)
    if name == "study2_full":
        return tuple(study2_scenario(k, reps_or(DEFAULT_REPS), seed) for k in MISS_KINDS)
    if name == "study2_desk":
        return tuple(study2_scenario(k, reps_or(1000), seed) for k in MISS_KINDS)
    raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESET_DESCRIPTIONS)}")


PRESET_DESCRIPTIONS = {
    "study1_grid": "full single-outcome grid: 9 settings x effects x 6 mechanisms x 4 sample sizes",
    "study1_null_n200": "single outcome, null effect, all mechanisms, n=200",
    "study1_alt_n200": "single outcome, effect 40, all settings and mechanisms, n=200",
    "study1_desk": "small spot-check grid at 500 replicates",
    "study2_full": "four-week design, all three week-missingness mechanisms",
    "study2_desk": "four-week design at 1000 replicates",
}


def all_preset_scenarios() -> dict:
    return {name: build_preset(name) for name in PRESET_DESCRIPTIONS}
