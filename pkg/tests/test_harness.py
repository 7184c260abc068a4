"""Scenario construction, the replicate loop, and scheduling invariance."""

import numpy as np
import pytest

from trialimpute.datagen import MissMechanism, Study1Config, TABLE_MECHANISMS
from trialimpute.harness import (
    DEFAULT_REPS,
    MMRM_ESTIMANDS,
    MethodSpec,
    Scenario,
    build_preset,
    config_hash,
    default_methods_study1,
    default_methods_study2,
    method_estimands,
    run_replicate,
    run_scenario,
    study1_scenario,
    study2_scenario,
    true_effect,
    PRESET_DESCRIPTIONS,
)
from trialimpute.impute import MiMethod

NO_MISS = MissMechanism("MCAR", 0.10, -50.0, 0.0, 0.0)


def _tiny_study1(methods, mechanism=None, n=60, n_reps=3, seed=99, **cfg):
    cfg.setdefault("relationship", "linear")
    cfg.setdefault("interaction", "none")
    cfg.setdefault("beta1", 40.0)
    return Scenario(
        scenario_id="t-study1",
        study="study1",
        methods=tuple(methods),
        study1_config=Study1Config(n=n, **cfg),
        mechanism=mechanism or TABLE_MECHANISMS[("MCAR", 0.30)],
        n_reps=n_reps,
        master_seed=seed,
    )


def test_no_missingness_makes_all_methods_agree_with_cc():
    # With nothing to impute, every MI method reduces to the complete-data
    # analysis: same point estimate and same standard error.
    sc = _tiny_study1(default_methods_study1(), mechanism=NO_MISS, n_reps=3)
    res = run_scenario(sc)
    for rep in range(sc.n_reps):
        rows = {r.method_id: r for r in res.records if r.replicate_index == rep}
        assert not any(r.failed for r in rows.values())
        cc = rows["cc"]
        for mid, r in rows.items():
            assert r.estimate == pytest.approx(cc.estimate, abs=1e-12)
            assert r.se == pytest.approx(cc.se, abs=1e-12)


def test_record_count_and_estimand_sets_study2():
    sc = study2_scenario("MCAR", n_reps=2, master_seed=5)
    per_rep = sum(len(method_estimands(sc, m)) for m in sc.methods)
    assert per_rep == 1 + 5 + 5 * 6
    res = run_scenario(sc)
    assert len(res.records) == sc.n_reps * per_rep
    mmrm_rows = {r.estimand_id for r in res.records if r.method_id == "mmrm_default"}
    assert mmrm_rows == set(MMRM_ESTIMANDS)
    cc_rows = {r.estimand_id for r in res.records if r.method_id == "cc"}
    assert cc_rows == {"ate"}
    assert len(res.summaries) == per_rep


def test_replicate_determinism_and_scenario_slicing():
    sc = _tiny_study1(
        (MethodSpec("cc", "cc"), MethodSpec("mi_pmm", "mi", mi=MiMethod("pmm"))),
        n_reps=4,
    )
    res = run_scenario(sc)
    direct = run_replicate(sc, 2)
    direct.sort(key=lambda r: (r.replicate_index, r.method_id, r.estimand_id))
    from_run = [r for r in res.records if r.replicate_index == 2]
    assert [(r.method_id, r.estimate, r.se) for r in direct] == [
        (r.method_id, r.estimate, r.se) for r in from_run
    ]
    again = run_scenario(sc)
    assert [(r.estimate, r.se, r.p_value) for r in res.records] == [
        (r.estimate, r.se, r.p_value) for r in again.records
    ]


def test_methods_do_not_perturb_each_other():
    # Dropping a method from the list leaves the remaining method's records
    # bit-identical: each method derives its own streams from the replicate
    # root rather than consuming a shared cursor.
    both = _tiny_study1(
        (MethodSpec("cc", "cc"), MethodSpec("mi_pmm", "mi", mi=MiMethod("pmm"))),
        n_reps=3,
    )
    alone = _tiny_study1((MethodSpec("mi_pmm", "mi", mi=MiMethod("pmm")),), n_reps=3)
    recs_both = [r for r in run_scenario(both).records if r.method_id == "mi_pmm"]
    recs_alone = [r for r in run_scenario(alone).records if r.method_id == "mi_pmm"]
    assert [(r.estimate, r.se) for r in recs_both] == [
        (r.estimate, r.se) for r in recs_alone
    ]


def test_parallel_and_serial_runs_are_identical():
    sc = _tiny_study1(
        (MethodSpec("cc", "cc"), MethodSpec("mi_norm", "mi", mi=MiMethod("norm"))),
        n_reps=6,
    )
    serial = run_scenario(sc, parallelism=1)
    parallel = run_scenario(sc, parallelism=2)
    assert [(r.replicate_index, r.method_id, r.estimate, r.se, r.p_value)
            for r in serial.records] == [
        (r.replicate_index, r.method_id, r.estimate, r.se, r.p_value)
        for r in parallel.records
    ]


def test_zero_reps_yields_flagged_empty_summaries():
    sc = _tiny_study1((MethodSpec("cc", "cc"),), n_reps=0)
    res = run_scenario(sc)
    assert res.records == ()
    assert len(res.summaries) == 1
    summary = res.summary_for("cc", "ate")
    assert not summary.available
    assert summary.n_reps_used == 0
    assert np.isnan(summary.bias)


def test_failures_are_recorded_not_raised():
    # 8 participants with near-90% missingness: complete-case analysis and the
    # per-arm regressions are inestimable, so every record is a failure.
    heavy = MissMechanism("MCAR", 0.85, 2.0, 0.0, 0.0)
    sc = _tiny_study1(
        (MethodSpec("cc", "cc"), MethodSpec("mi_norm", "mi", mi=MiMethod("norm"))),
        mechanism=heavy, n=8, n_reps=5,
    )
    res = run_scenario(sc)
    assert len(res.records) == 10
    assert all(r.failed for r in res.records)
    assert all(r.failure_reason for r in res.records)
    assert all(r.estimate is None for r in res.records)
    summary = res.summary_for("cc", "ate")
    assert not summary.available and summary.n_failed == 5


def test_mixed_failure_accounting_conserves_records():
    sc = _tiny_study1(
        (MethodSpec("cc", "cc"), MethodSpec("mi_norm", "mi", mi=MiMethod("norm"))),
        n=10, n_reps=30,
    )
    res = run_scenario(sc)
    assert len(res.records) == 60
    for mid in ("cc", "mi_norm"):
        s = res.summary_for(mid, "ate")
        n_rows = sum(1 for r in res.records if r.method_id == mid)
        assert n_rows == 30
        assert s.n_reps_used + s.n_failed == 30


def test_scenario_validation():
    cc = (MethodSpec("cc", "cc"),)
    cfg = Study1Config(n=50, relationship="linear", interaction="none", beta1=0.0)
    mech = TABLE_MECHANISMS[("MCAR", 0.10)]
    with pytest.raises(ValueError, match="ancova"):
        Scenario("x", "study1", cc, study1_config=cfg, mechanism=mech, analyses=("mmrm",))
    with pytest.raises(ValueError, match="study2"):
        Scenario("x", "study1", cc + (MethodSpec("mmrm_default", "mmrm_default"),),
                 study1_config=cfg, mechanism=mech)
    with pytest.raises(ValueError, match="duplicate"):
        Scenario("x", "study1", cc + cc, study1_config=cfg, mechanism=mech)
    with pytest.raises(ValueError, match="week mechanism"):
        Scenario("x", "study2", cc, week_mechanism="sometimes")
    with pytest.raises(ValueError, match="study1_config"):
        Scenario("x", "study1", cc, mechanism=mech)
    with pytest.raises(ValueError, match="imputation config"):
        MethodSpec("mi_norm", "mi")
    with pytest.raises(ValueError, match="kind"):
        MethodSpec("x", "bayes")
    with pytest.raises(ValueError, match="n_reps"):
        Scenario("x", "study1", cc, study1_config=cfg, mechanism=mech, n_reps=-1)


def test_registry_grid_and_presets():
    grid = build_preset("study1_grid")
    assert len(grid) == 336
    ids = [s.scenario_id for s in grid]
    assert len(set(ids)) == 336
    assert "s1-linear-null-MCAR30-n200" in ids
    assert "s1-ix_large-alt-MAR_X30-n500" in ids
    assert all(s.n_reps == DEFAULT_REPS for s in grid)
    assert all(s.analyses == ("ancova",) for s in grid)

    null200 = build_preset("study1_null_n200")
    assert len(null200) == 30
    assert all(s.study1_config.beta1 == 0.0 for s in null200)

    alt200 = build_preset("study1_alt_n200")
    assert len(alt200) == 54
    assert all(s.study1_config.beta1 == 40.0 for s in alt200)

    s2 = build_preset("study2_full", n_reps=77)
    assert [s.scenario_id for s in s2] == ["s2-MCAR", "s2-MAR_X", "s2-MAR_Z"]
    assert all(s.n_reps == 77 for s in s2)
    assert all(s.analyses == ("ancova", "mmrm") for s in s2)

    assert len(PRESET_DESCRIPTIONS) >= 2
    with pytest.raises(KeyError, match="unknown preset"):
        build_preset("study3_grid")


def test_true_effect_and_method_defaults():
    sc = study1_scenario("harmonic", "none", "null", ("MAR_Z", 0.30), 100)
    assert true_effect(sc) == 0.0
    assert [m.method_id for m in default_methods_study1()] == [
        "cc", "mi_norm", "mi_pmm", "mi_cart", "mi_rf", "mi_rf_caliber"
    ]
    s2 = study2_scenario("MAR_Z")
    assert true_effect(s2) == 12.0
    assert [m.method_id for m in default_methods_study2()][:2] == ["cc", "mmrm_default"]
    assert method_estimands(s2, s2.methods[2]) == ("ate",) + MMRM_ESTIMANDS


def test_config_hash_tracks_content():
    a = study1_scenario("linear", "none", "alt", ("MCAR", 0.30), 200, n_reps=10)
    b = study1_scenario("linear", "none", "alt", ("MCAR", 0.30), 200, n_reps=10)
    c = study1_scenario("linear", "none", "alt", ("MCAR", 0.30), 200, n_reps=11)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)
    assert config_hash(a) != config_hash(
        study1_scenario("linear", "none", "alt", ("MCAR", 0.30), 200, n_reps=10, master_seed=1)
    )
