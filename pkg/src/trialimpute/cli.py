"""Command-line interface: configure scenarios, run them, and emit
plot-ready tables.

Output discipline: for a fixed config and seed, ``summary.csv``,
``summary.json``, and ``records.csv`` are byte-identical across reruns;
wall-clock information lives only in ``manifest.json``. A scenario whose
manifest already matches the requested configuration is skipped, so
re-running a finished preset is a no-op.
"""

from __future__ import annotations

import csv
import datetime
import json
import math
import os
import re
import sys
from pathlib import Path

import click
import yaml

from . import __version__
from .datagen import MISS_KINDS, MissMechanism, Study1Config, TABLE_MECHANISMS
from .harness import (
    DEFAULT_REPS,
    DEFAULT_SEED,
    MMRM_ESTIMANDS,
    MethodSpec,
    PRESET_DESCRIPTIONS,
    Scenario,
    build_preset,
    config_hash,
    default_methods_study1,
    default_methods_study2,
    method_estimands,
    run_scenario,
    true_effect,
)
from .impute import MiMethod

SUMMARY_COLUMNS = (
    "scenario_id", "study", "relationship/interaction", "mechanism", "miss_pct",
    "n", "true_effect", "method", "estimand", "n_reps", "n_failed",
    "bias", "mcse_bias", "emp_se", "model_se", "se_ratio", "coverage",
    "mcse_coverage", "mse", "mcse_mse", "rejection_rate",
    "mcse_rejection_rate", "mcse_emp_se", "mcse_model_se", "mcse_se_ratio",
)
RECORD_COLUMNS = (
    "scenario_id", "replicate_index", "method", "estimand", "estimate", "se",
    "df", "ci_low", "ci_high", "p_value", "failed", "failure_reason",
)
FIGURES = ("fig3", "fig4", "fig5")
RELATIONSHIPS = ("linear", "two_tier", "flattening", "quadratic", "harmonic")
MECH_LABELS = ("MCAR10", "MCAR30", "MAR_X10", "MAR_X30", "MAR_Z10", "MAR_Z30")

METHOD_BUILDERS = {
    "cc": lambda: MethodSpec("cc", "cc"),
    "mmrm_default": lambda: MethodSpec("mmrm_default", "mmrm_default"),
    "mi_norm": lambda: MethodSpec("mi_norm", "mi", mi=MiMethod("norm")),
    "mi_pmm": lambda: MethodSpec("mi_pmm", "mi", mi=MiMethod("pmm")),
    "mi_cart": lambda: MethodSpec("mi_cart", "mi", mi=MiMethod("cart")),
    "mi_rf": lambda: MethodSpec("mi_rf", "mi", mi=MiMethod("rf_doove")),
    "mi_rf_caliber": lambda: MethodSpec("mi_rf_caliber", "mi", mi=MiMethod("rf_caliber")),
}


class ConfigError(Exception):
    """Invalid run configuration; the message names the offending key."""


# ---------------------------------------------------------------------------
# Config parsing

_TOP_KEYS = {"preset", "scenarios", "n_reps", "master_seed", "parallelism",
             "out", "dump_records"}
_SCENARIO_KEYS = {"id", "study", "relationship", "interaction", "effect", "beta1",
                  "mechanism", "n", "delta", "methods", "analyses", "n_reps",
                  "master_seed"}


def _reject_unknown(mapping, allowed, where):
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}{key}'")


def _parse_mechanism(value, where):
    if isinstance(value, str):
        m = re.fullmatch(r"(MCAR|MAR_X|MAR_Z)(10|30)", value)
        if not m:
            raise ConfigError(
                f"key '{where}mechanism': unknown label {value!r}; "
                f"expected one of {MECH_LABELS} or a mapping"
            )
        return TABLE_MECHANISMS[(m.group(1), int(m.group(2)) / 100)]
    if isinstance(value, dict):
        _reject_unknown(value, {"kind", "target_rate", "alpha0", "alpha1", "alpha2"},
                        where + "mechanism.")
        try:
            return MissMechanism(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key '{where}mechanism': {exc}") from exc
    raise ConfigError(f"key '{where}mechanism': expected a label or mapping")


def _parse_methods(value, study, where):
    if value is None:
        return default_methods_study1() if study == "study1" else default_methods_study2()
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"key '{where}methods': expected a nonempty list")
    specs = []
    for mid in value:
        if mid not in METHOD_BUILDERS:
            raise ConfigError(
                f"key '{where}methods': unknown method {mid!r}; "
                f"known: {sorted(METHOD_BUILDERS)}"
            )
        specs.append(METHOD_BUILDERS[mid]())
    return tuple(specs)


def _parse_scenario(entry, index, defaults):
    where = f"scenarios[{index}]."
    if not isinstance(entry, dict):
        raise ConfigError(f"key 'scenarios[{index}]': expected a mapping")
    _reject_unknown(entry, _SCENARIO_KEYS, where)
    if "study" not in entry:
        raise ConfigError(f"missing required key '{where}study'")
    study = entry["study"]
    if study not in ("study1", "study2"):
        raise ConfigError(f"key '{where}study': expected study1 or study2, got {study!r}")
    n_reps = entry.get("n_reps", defaults["n_reps"])
    seed = entry.get("master_seed", defaults["master_seed"])
    methods = _parse_methods(entry.get("methods"), study, where)
    try:
        if study == "study1":
            if "mechanism" not in entry:
                raise ConfigError(f"missing required key '{where}mechanism'")
            if "n" not in entry:
                raise ConfigError(f"missing required key '{where}n'")
            if "effect" in entry and "beta1" in entry:
                raise ConfigError(f"key '{where}effect': give effect or beta1, not both")
            effect = entry.get("effect", "alt" if "beta1" in entry else "null")
            if effect is None:  # YAML parses a bare `null` to None
                effect = "null"
            if effect not in ("null", "alt"):
                raise ConfigError(f"key '{where}effect': expected null or alt, got {effect!r}")
            beta1 = float(entry.get("beta1", 40.0 if effect == "alt" else 0.0))
            cfg = Study1Config(
                n=int(entry["n"]),
                relationship=entry.get("relationship", "linear"),
                interaction=entry.get("interaction", "none"),
                beta1=beta1,
            )
            mech = _parse_mechanism(entry["mechanism"], where)
            label = cfg.relationship if cfg.interaction == "none" else f"ix_{cfg.interaction}"
            default_id = (
                f"s1-{label}-{'null' if beta1 == 0 else 'alt'}"
                f"-{mech.kind}{int(round(mech.target_rate * 100))}-n{cfg.n}"
            )
            return Scenario(
                scenario_id=entry.get("id", default_id),
                study="study1",
                methods=methods,
                study1_config=cfg,
                mechanism=mech,
                n_reps=int(n_reps),
                master_seed=int(seed),
            )
        mech = entry.get("mechanism")
        if mech is None:
            raise ConfigError(f"missing required key '{where}mechanism'")
        if mech not in MISS_KINDS:
            raise ConfigError(f"key '{where}mechanism': expected one of {MISS_KINDS}")
        analyses = entry.get("analyses", ("ancova", "mmrm"))
        if isinstance(analyses, str):
            analyses = (analyses,)
        return Scenario(
            scenario_id=entry.get("id", f"s2-{mech}"),
            study="study2",
            methods=methods,
            week_mechanism=mech,
            study2_n=int(entry.get("n", 145)),
            study2_delta=float(entry.get("delta", 12.0)),
            analyses=tuple(analyses),
            n_reps=int(n_reps),
            master_seed=int(seed),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key '{where.rstrip('.')}': {exc}") from exc


def load_config(config: str, reps=None, seed=None, parallelism=None,
                out=None, dump_records=None):
    """Resolve --config (preset name or YAML path) plus overrides into
    (scenarios, settings)."""
    raw = {}
    if config in PRESET_DESCRIPTIONS:
        raw["preset"] = config
    else:
        path = Path(config)
        if not path.exists():
            raise ConfigError(
                f"config {config!r} is neither a preset ({sorted(PRESET_DESCRIPTIONS)}) "
                f"nor a file"
            )
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {config!r} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {config!r} must be a mapping at the top level")
        raw = loaded
    _reject_unknown(raw, _TOP_KEYS, "")
    if ("preset" in raw) == ("scenarios" in raw):
        raise ConfigError("config needs exactly one of the keys 'preset' or 'scenarios'")

    defaults = {
        "n_reps": raw.get("n_reps", DEFAULT_REPS) if reps is None else reps,
        "master_seed": raw.get("master_seed", DEFAULT_SEED) if seed is None else seed,
    }
    if int(defaults["n_reps"]) < 0:
        raise ConfigError("key 'n_reps': must be >= 0")

    try:
        if "preset" in raw:
            name = raw["preset"]
            if name not in PRESET_DESCRIPTIONS:
                raise ConfigError(
                    f"key 'preset': unknown preset {name!r}; known: {sorted(PRESET_DESCRIPTIONS)}"
                )
            scenarios = build_preset(
                name,
                n_reps=None if reps is None and "n_reps" not in raw else defaults["n_reps"],
                master_seed=defaults["master_seed"],
            )
        else:
            if not isinstance(raw["scenarios"], list) or not raw["scenarios"]:
                raise ConfigError("key 'scenarios': expected a nonempty list")
            scenarios = tuple(
                _parse_scenario(entry, i, defaults) for i, entry in enumerate(raw["scenarios"])
            )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key 'scenarios': {exc}") from exc
    ids = [sc.scenario_id for sc in scenarios]
    if len(set(ids)) != len(ids):
        raise ConfigError("key 'scenarios': duplicate scenario ids")

    settings = {
        "parallelism": parallelism if parallelism is not None else int(raw.get("parallelism", 1)),
        "out": out if out is not None else raw.get("out", "results"),
        "dump_records": dump_records if dump_records is not None else bool(raw.get("dump_records", False)),
    }
    if settings["parallelism"] < 1:
        raise ConfigError("key 'parallelism': must be >= 1")
    return scenarios, settings


# ---------------------------------------------------------------------------
# Output writers

def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _setting_label(sc: Scenario) -> str:
    if sc.study == "study2":
        return "four_week"
    cfg = sc.study1_config
    return cfg.relationship if cfg.interaction == "none" else f"ix_{cfg.interaction}"


def _mech_label(sc: Scenario) -> str:
    if sc.study == "study2":
        return sc.week_mechanism
    m = sc.mechanism
    return f"{m.kind}{int(round(m.target_rate * 100))}"


def summary_rows(sc: Scenario, result) -> list:
    miss_pct = 30 if sc.study == "study2" else int(round(sc.mechanism.target_rate * 100))
    n = sc.study2_n if sc.study == "study2" else sc.study1_config.n
    rows = []
    for method_id, estimand_id, s in result.summaries:
        rows.append({
            "scenario_id": sc.scenario_id,
            "study": sc.study,
            "relationship/interaction": _setting_label(sc),
            "mechanism": _mech_label(sc),
            "miss_pct": miss_pct,
            "n": n,
            "true_effect": true_effect(sc),
            "method": method_id,
            "estimand": estimand_id,
            "n_reps": s.n_reps_used + s.n_failed,
            "n_failed": s.n_failed,
            "bias": s.bias,
            "mcse_bias": s.mcse_bias,
            "emp_se": s.empirical_se,
            "model_se": s.mean_model_se,
            "se_ratio": s.se_ratio,
            "coverage": s.coverage,
            "mcse_coverage": s.mcse_coverage,
            "mse": s.mse,
            "mcse_mse": s.mcse_mse,
            "rejection_rate": s.rejection_rate,
            "mcse_rejection_rate": s.mcse_rejection_rate,
            "mcse_emp_se": s.mcse_emp_se,
            "mcse_model_se": s.mcse_model_se,
            "mcse_se_ratio": s.mcse_se_ratio,
        })
    return rows


def _write_csv(path: Path, columns, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def write_scenario_outputs(sc, result, out_dir: Path, dump_records: bool,
                           parallelism: int, wall_time_s: float):
    sc_dir = out_dir / sc.scenario_id
    sc_dir.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(sc, result)
    _write_csv(sc_dir / "summary.csv", SUMMARY_COLUMNS, rows)
    payload = {
        "scenario_id": sc.scenario_id,
        "study": sc.study,
        "setting": _setting_label(sc),
        "mechanism": _mech_label(sc),
        "n_reps": sc.n_reps,
        "master_seed": sc.master_seed,
        "true_effect": true_effect(sc),
        "summaries": [
            {("setting" if k == "relationship/interaction" else k): _jsonable(v)
             for k, v in row.items()}
            for row in rows
        ],
    }
    (sc_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    )
    if dump_records:
        rec_rows = [
            {
                "scenario_id": r.scenario_id,
                "replicate_index": r.replicate_index,
                "method": r.method_id,
                "estimand": r.estimand_id,
                "estimate": r.estimate,
                "se": r.se,
                "df": r.df,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "p_value": r.p_value,
                "failed": r.failed,
                "failure_reason": r.failure_reason or "",
            }
            for r in result.records
        ]
        _write_csv(sc_dir / "records.csv", RECORD_COLUMNS, rec_rows)
    manifest = {
        "scenario_id": sc.scenario_id,
        "config_hash": config_hash(sc),
        "master_seed": sc.master_seed,
        "n_reps": sc.n_reps,
        "parallelism": parallelism,
        "dump_records": dump_records,
        "software_version": __version__,
        "wall_time_s": wall_time_s,
        "written_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (sc_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _already_done(sc, sc_dir: Path, dump_records: bool) -> bool:
    manifest_path = sc_dir / "manifest.json"
    if not manifest_path.exists() or not (sc_dir / "summary.csv").exists():
        return False
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("config_hash") != config_hash(sc):
        return False
    if dump_records and not (sc_dir / "records.csv").exists():
        return False
    return True


# ---------------------------------------------------------------------------
# Commands

@click.group()
@click.version_option(version=__version__)
def main():
    """Simulation harness for missing-outcome methods in randomized trials."""


@main.command("run")
@click.option("--config", required=True,
              help="Built-in preset name or path to a YAML run config.")
@click.option("--reps", type=int, default=None, help="Override replicate count.")
@click.option("--seed", type=int, default=None, help="Override master seed.")
@click.option("--parallelism", type=int, default=None, help="Worker processes.")
@click.option("--out", envvar="TRIALIMPUTE_OUT", default=None,
              help="Output directory (env: TRIALIMPUTE_OUT).")
@click.option("--dump-records/--no-dump-records", default=None,
              help="Also write per-replicate records.csv.")
def cmd_run(config, reps, seed, parallelism, out, dump_records):
    """Run the configured scenarios and write summary tables."""
    try:
        scenarios, settings = load_config(
            config, reps=reps, seed=seed, parallelism=parallelism,
            out=out, dump_records=dump_records,
        )
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    out_dir = Path(settings["out"])
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for sc in scenarios:
            sc_dir = out_dir / sc.scenario_id
            if _already_done(sc, sc_dir, settings["dump_records"]):
                click.echo(f"{sc.scenario_id}: up to date, skipping")
                continue
            result = run_scenario(sc, parallelism=settings["parallelism"])
            write_scenario_outputs(
                sc, result, out_dir, settings["dump_records"],
                settings["parallelism"], result.wall_time_s,
            )
            click.echo(
                f"{sc.scenario_id}: {sc.n_reps} replicates, "
                f"{len(result.records)} records, {result.wall_time_s:.1f}s"
            )
    except OSError as exc:
        click.echo(f"error: I/O failure: {exc}", err=True)
        sys.exit(3)
    sys.exit(0)


@main.command("list-scenarios")
@click.option("--format", "fmt", type=click.Choice(["plain", "json"]), default="plain")
def cmd_list_scenarios(fmt):
    """Print the built-in scenario registry. Ids are stable across releases."""
    registry = {}
    for name in sorted(PRESET_DESCRIPTIONS):
        scenarios = build_preset(name)
        registry[name] = {
            "description": PRESET_DESCRIPTIONS[name],
            "n_scenarios": len(scenarios),
            "scenarios": [
                {
                    "id": sc.scenario_id,
                    "study": sc.study,
                    "setting": _setting_label(sc),
                    "mechanism": _mech_label(sc),
                    "n": sc.study2_n if sc.study == "study2" else sc.study1_config.n,
                    "true_effect": true_effect(sc),
                    "n_reps": sc.n_reps,
                    "description": sc.description,
                }
                for sc in scenarios
            ],
        }
    if fmt == "json":
        click.echo(json.dumps(registry, indent=2, sort_keys=True))
    else:
        for name, info in registry.items():
            click.echo(f"{name}: {info['description']} ({info['n_scenarios']} scenarios)")
            for sc in info["scenarios"]:
                click.echo(f"  {sc['id']}: {sc['description']}")
    sys.exit(0)


FIGURE_MEASURES = {
    "fig3": (("bias", "bias", "mcse_bias"),
             ("se_ratio", "se_ratio", "mcse_se_ratio"),
             ("type_i_error", "rejection_rate", "mcse_rejection_rate")),
    "fig4": (("bias", "bias", "mcse_bias"),
             ("se_ratio", "se_ratio", "mcse_se_ratio"),
             ("power", "rejection_rate", "mcse_rejection_rate")),
    "fig5": (("bias", "bias", "mcse_bias"),
             ("coverage", "coverage", "mcse_coverage"),
             ("se_ratio", "se_ratio", "mcse_se_ratio"),
             ("power", "rejection_rate", "mcse_rejection_rate")),
}


def _figure_scenario_ids(figure):
    if figure == "fig3":
        return [f"s1-{rel}-null-{mech}-n200" for rel in RELATIONSHIPS for mech in MECH_LABELS]
    if figure == "fig4":
        return [f"s1-{rel}-alt-{mech}-n200" for rel in RELATIONSHIPS for mech in MECH_LABELS]
    return [f"s2-{kind}" for kind in MISS_KINDS]


@main.command("plotdata")
@click.argument("results_dir", type=click.Path())
@click.option("--figure", required=True, type=click.Choice(FIGURES))
@click.option("--out", default=None, help="Output CSV path (default: RESULTS_DIR/<figure>_data.csv).")
def cmd_plotdata(results_dir, figure, out):
    """Reshape finished scenario summaries into one tidy long table."""
    results = Path(results_dir)
    wanted = _figure_scenario_ids(figure)
    missing = [sid for sid in wanted if not (results / sid / "summary.csv").exists()]
    if missing:
        click.echo(
            f"error: {len(missing)} scenario(s) absent from {results_dir}: "
            + ", ".join(missing),
            err=True,
        )
        sys.exit(4)
    tidy = []
    for sid in wanted:
        with (results / sid / "summary.csv").open(newline="") as fh:
            for row in csv.DictReader(fh):
                if figure in ("fig3", "fig4"):
                    if row["estimand"] != "ate":
                        continue
                    method = row["method"]
                else:
                    if row["estimand"] == "ate":
                        method = f"{row['method']}/ancova"
                    elif row["estimand"] == "mmrm_collapsed":
                        method = f"{row['method']}/mmrm"
                    else:
                        continue
                for measure, value_col, mcse_col in FIGURE_MEASURES[figure]:
                    tidy.append({
                        "scenario": sid,
                        "method": method,
                        "mechanism": row["mechanism"],
                        "measure": measure,
                        "value": row[value_col],
                        "mcse": row[mcse_col],
                    })
    out_path = Path(out) if out else results / f"{figure}_data.csv"
    try:
        with out_path.open("w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=("scenario", "method", "mechanism", "measure", "value", "mcse"),
                lineterminator="\n",
            )
            writer.writeheader()
            writer.writerows(tidy)
    except OSError as exc:
        click.echo(f"error: I/O failure: {exc}", err=True)
        sys.exit(3)
    click.echo(f"wrote {len(tidy)} rows to {out_path}")
    sys.exit(0)


if __name__ == "__main__":
    main()
