"""Pipeline orchestration: config file -> ingest -> panel -> instruments -> estimates -> tables.

The config file is INI-style. [inputs] points at the six CSVs (or [synthetic]
describes a generated market), [panel] sets aggregation options, [model]
holds the default column specification, [instruments] maps endogenous columns
to distance cutoffs and [column.*] sections override [model] per table
column. Outputs are pure functions of config and input bytes; logs go to
stderr only.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import diagnostics, estimators, instruments, panel, report, synthlab
from .ingest import (
    CarrierClass,
    parse_capacities,
    parse_city_registry,
    parse_codeshare,
    parse_flights,
    parse_traffic,
)

log = logging.getLogger(__name__)

REGRESSAND_COLUMNS = {
    "ODDS": "odds",
    "MINS": "mins",
    "MINS_GT": "mins_gt_threshold",
    "ODDSD": "odds_dep",
    "MINSD": "mins_dep",
    "MINSD_GT": "mins_dep_gt_threshold",
}

DEFAULT_REGRESSORS = [
    "n_congested", "n_uncongested", "prop_weather", "prop_incident",
    "prop_connection", "max_city_delay_prop", "codeshare", "hhi_pair",
    "hhi_max_city", "lcc_pair", "lcc_max_city",
]
DEFAULT_ENDOGENOUS = ["hhi_pair", "hhi_max_city"]

INPUT_KEYS = ("flights", "traffic", "cities", "airports", "capacity", "codeshare")


class ConfigError(Exception):
    """Configuration problem, reported with the offending field path."""


@dataclass
class ColumnSpec:
    label: str
    regressand: str = "ODDS"
    regressors: list[str] = field(default_factory=lambda: list(DEFAULT_REGRESSORS))
    endogenous: list[str] = field(default_factory=lambda: list(DEFAULT_ENDOGENOUS))
    estimator: str = "gmm2s"
    unit_effects: bool = True
    time_effects: bool = True
    hac_bandwidth: int | None = None
    dof_correction: bool = True

    def validate(self, path: str):
        if self.regressand not in REGRESSAND_COLUMNS:
            raise ConfigError(f"{path}.regressand: unknown regressand {self.regressand!r}")
        if self.estimator not in estimators.ESTIMATORS:
            raise ConfigError(f"{path}.estimator: unknown estimator {self.estimator!r}")
        unknown = [r for r in self.regressors if r not in panel.NUMERIC_COLUMNS]
        if unknown:
            raise ConfigError(f"{path}.regressors: unknown columns {unknown}")
        outside = [e for e in self.endogenous if e not in self.regressors]
        if outside:
            raise ConfigError(f"{path}.endogenous: not among regressors: {outside}")


@dataclass
class RunConfig:
    input_paths: dict[str, str] | None
    scenario: synthlab.MarketScenario | None
    panel_config: panel.PanelConfig
    instrument_cutoffs: dict[str, list[float]]
    columns: list[ColumnSpec]

    def validate(self):
        if (self.input_paths is None) == (self.scenario is None):
            raise ConfigError("exactly one of [inputs] and [synthetic] must be given")
        if not self.columns:
            raise ConfigError("at least one estimation column is required")
        for i, spec in enumerate(self.columns, start=1):
            spec.validate(f"column.{i}")
            for target in spec.endogenous:
                if spec.estimator != "ols" and target not in self.instrument_cutoffs:
                    raise ConfigError(
                        f"column.{i}.endogenous: no [instruments] cutoffs for {target!r}")


def _parse_bool(raw: str, path: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "yes", "1"):
        return True
    if value in ("false", "no", "0"):
        return False
    raise ConfigError(f"{path}: expected a boolean, got {raw!r}")


def _parse_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _column_from_section(section, path: str, base: ColumnSpec) -> ColumnSpec:
    spec = replace(base, regressors=list(base.regressors), endogenous=list(base.endogenous))
    if "label" in section:
        spec.label = section["label"]
    if "regressand" in section:
        spec.regressand = section["regressand"].strip()
    if "regressors" in section:
        spec.regressors = _parse_list(section["regressors"])
    if "endogenous" in section:
        spec.endogenous = _parse_list(section["endogenous"])
    if "estimator" in section:
        spec.estimator = section["estimator"].strip()
    if "unit_effects" in section:
        spec.unit_effects = _parse_bool(section["unit_effects"], f"{path}.unit_effects")
    if "time_effects" in section:
        spec.time_effects = _parse_bool(section["time_effects"], f"{path}.time_effects")
    if "hac_bandwidth" in section:
        raw = section["hac_bandwidth"].strip().lower()
        spec.hac_bandwidth = None if raw == "rule" else int(raw)
    if "dof_correction" in section:
        spec.dof_correction = _parse_bool(section["dof_correction"], f"{path}.dof_correction")
    return spec


def _scenario_from_section(section) -> synthlab.MarketScenario:
    cities = []
    for item in _parse_list(section.get("cities", "")):
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"synthetic.cities: expected ID:lat:lon, got {item!r}")
        cities.append((parts[0], float(parts[1]), float(parts[2])))
    if not cities:
        raise ConfigError("synthetic.cities: at least one city required")
    carriers = []
    for item in _parse_list(section.get("carriers", "TA:FSC,VG:FSC")):
        code, _, klass = item.partition(":")
        if klass not in ("FSC", "LCC"):
            raise ConfigError(f"synthetic.carriers: class must be FSC or LCC in {item!r}")
        carriers.append((code, klass))
    entry = {}
    for item in _parse_list(section.get("lcc_entry", "")):
        pair_part, _, month_part = item.rpartition(":")
        origin, _, destination = pair_part.partition("-")
        entry[(origin, destination)] = int(month_part)
    return synthlab.MarketScenario(
        cities=tuple(cities),
        carriers=tuple(carriers),
        n_months=section.getint("n_months", 12),
        start_year=section.getint("start_year", 2010),
        flights_per_pair_day=section.getint("flights_per_pair_day", 2),
        hourly_capacity=section.getint("hourly_capacity", 10),
        base_delay_rate=section.getfloat("base_delay_rate", 0.2),
        congestion_sensitivity=section.getfloat("congestion_sensitivity", 0.5),
        mean_monthly_pax=section.getint("mean_monthly_pax", 500),
        lcc_entry_month=entry,
        seed=section.getint("seed", 0),
    )


def load_config(path: str) -> RunConfig:
    """Parse and validate a run configuration file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    input_paths = None
    if parser.has_section("inputs"):
        section = parser["inputs"]
        base = os.path.dirname(os.path.abspath(path))
        if "panel" in section:
            # pre-built panel CSV: skip ingest, keep cities for distances
            input_paths = {"panel": os.path.join(base, section["panel"])}
            if "cities" in section:
                input_paths["cities"] = os.path.join(base, section["cities"])
        else:
            missing = [key for key in INPUT_KEYS if key not in section]
            if missing:
                raise ConfigError(f"inputs: missing file paths {missing}")
            input_paths = {key: os.path.join(base, section[key]) for key in INPUT_KEYS}

    scenario = None
    if parser.has_section("synthetic"):
        scenario = _scenario_from_section(parser["synthetic"])

    panel_section = parser["panel"] if parser.has_section("panel") else {}
    carrier_class = panel_section.get("carrier_class", "FSC")
    try:
        carrier_class = CarrierClass(carrier_class)
    except ValueError:
        raise ConfigError(f"panel.carrier_class: unknown class {carrier_class!r}") from None
    panel_config = panel.PanelConfig(
        delay_threshold=int(panel_section.get("delay_threshold", "15")),
        carrier_class=carrier_class,
        odds_continuity_correction=_parse_bool(
            panel_section.get("odds_continuity_correction", "false"),
            "panel.odds_continuity_correction"),
    )

    cutoffs: dict[str, list[float]] = {}
    if parser.has_section("instruments"):
        for target, raw in parser["instruments"].items():
            values = [float(v) for v in _parse_list(raw)]
            if not values:
                raise ConfigError(f"instruments.{target}: empty cutoff list")
            cutoffs[target] = values

    base_spec = ColumnSpec(label="(1)")
    if parser.has_section("model"):
        base_spec = _column_from_section(parser["model"], "model", base_spec)

    columns = []
    column_sections = sorted(
        (name for name in parser.sections() if name.startswith("column.")),
        key=lambda name: name.split(".", 1)[1])
    if column_sections:
        for i, name in enumerate(column_sections, start=1):
            spec = _column_from_section(parser[name], name, base_spec)
            if "label" not in parser[name]:
                spec.label = f"({i}) {spec.regressand}"
            columns.append(spec)
    else:
        if base_spec.label == "(1)":
            base_spec.label = f"(1) {base_spec.regressand}"
        columns = [base_spec]

    config = RunConfig(
        input_paths=input_paths,
        scenario=scenario,
        panel_config=panel_config,
        instrument_cutoffs=cutoffs,
        columns=columns,
    )
    config.validate()
    return config


@dataclass
class PanelBundle:
    """Everything shared by the columns of one run."""

    observations: list[panel.PanelObservation]
    instrument_matrix: np.ndarray
    instrument_labels: list[str]
    rejected_flights: int


def build_bundle(config: RunConfig, seed_override: int | None = None) -> PanelBundle:
    """Ingest (or generate) the inputs and build the shared panel and instruments."""
    rejected = 0
    registry = None
    if config.input_paths is not None and "panel" in config.input_paths:
        observations = panel.panel_from_csv(_read_file(config.input_paths["panel"]))
        if "cities" in config.input_paths:
            registry = parse_city_registry(
                _read_file(config.input_paths["cities"]), _identity_airports(
                    _read_file(config.input_paths["cities"])))
    else:
        if config.scenario is not None:
            scenario = config.scenario
            if seed_override is not None:
                scenario = replace(scenario, seed=seed_override)
            files = synthlab.generate_market(scenario)
            raw = {key: getattr(files, key) for key in INPUT_KEYS}
        else:
            raw = {key: _read_file(file_path)
                   for key, file_path in config.input_paths.items()}

        registry = parse_city_registry(raw["cities"], raw["airports"])
        flights_report = parse_flights(raw["flights"], registry)
        rejected = len(flights_report.rejected)
        if rejected:
            log.warning("%d flight rows rejected", rejected)
        observations = panel.build_panel(
            flights_report.accepted, parse_traffic(raw["traffic"]), registry,
            parse_capacities(raw["capacity"]), parse_codeshare(raw["codeshare"]),
            config.panel_config)

    if not observations:
        raise ConfigError("panel is empty; nothing to estimate")

    specs = [instruments.InstrumentSpec(target, tuple(values))
             for target, values in sorted(config.instrument_cutoffs.items())]
    if specs:
        if registry is None:
            raise ConfigError(
                "inputs.cities is required to build distance-cutoff instruments")
        distances = instruments.DistanceMatrix.from_registry(registry)
        matrix, labels = instruments.build_instrument_matrix(observations, specs, distances)
    else:
        matrix = np.empty((len(observations), 0))
        labels = []
    return PanelBundle(observations, matrix, labels, rejected_flights=rejected)


def _read_file(path: str) -> str:
    with open(path, "r", encoding="utf-8") as handle:
        return handle.read()


def _identity_airports(cities_csv: str) -> str:
    # a panel file carries city ids already; synthesize the identity map
    lines = cities_csv.strip().splitlines()[1:]
    rows = ["airport_code,city_id"]
    rows += [f"{line.split(',')[0]},{line.split(',')[0]}" for line in lines]
    return "\n".join(rows) + "\n"


def build_problem(bundle: PanelBundle, spec: ColumnSpec) -> estimators.EstimationProblem:
    """Assemble one column's estimation problem, dropping incomplete rows."""
    obs = bundle.observations
    y = np.asarray(panel.column(obs, REGRESSAND_COLUMNS[spec.regressand]))
    X = np.column_stack([panel.column(obs, name) for name in spec.regressors])

    if spec.estimator == "ols":
        endogenous: tuple[int, ...] = ()
        Z = X.copy()
        z_names = list(spec.regressors)
    else:
        endogenous = tuple(spec.regressors.index(name) for name in spec.endogenous)
        z_cols, z_names = [], []
        for target in spec.endogenous:
            for cutoff in bundle_cutoffs(bundle, target):
                label = f"{target}__ge{instruments._format_km(cutoff)}km"
                z_cols.append(bundle.instrument_matrix[:, bundle.instrument_labels.index(label)])
                z_names.append(label)
        exog_names = [name for name in spec.regressors if name not in spec.endogenous]
        for name in exog_names:
            z_cols.append(np.asarray(panel.column(obs, name)))
            z_names.append(name)
        Z = np.column_stack(z_cols)

    keep = ~(np.isnan(y) | np.isnan(X).any(axis=1) | np.isnan(Z).any(axis=1))
    dropped = int((~keep).sum())
    if dropped:
        log.info("column %s: dropped %d incomplete rows", spec.label, dropped)
    if int(keep.sum()) <= X.shape[1]:
        raise ValueError(
            f"only {int(keep.sum())} complete rows remain after dropping cells with "
            f"undefined regressand or missing instruments ({dropped} dropped); "
            f"loosen the instrument cutoffs or the column specification")
    unit_ids = np.asarray([o.pair_id for o in obs])[keep]
    time_ids = np.asarray([o.month for o in obs])[keep]
    return estimators.EstimationProblem(
        y=y[keep], X=X[keep], Z=Z[keep],
        x_names=list(spec.regressors), z_names=z_names,
        endogenous=endogenous, unit_ids=unit_ids, time_ids=time_ids,
        fe=estimators.FixedEffectsSpec(spec.unit_effects, spec.time_effects),
        hac_bandwidth=spec.hac_bandwidth,
        dof_correction=spec.dof_correction,
    )


def bundle_cutoffs(bundle: PanelBundle, target: str) -> list[float]:
    cutoffs = []
    prefix = f"{target}__ge"
    for label in bundle.instrument_labels:
        if label.startswith(prefix):
            cutoffs.append(float(label[len(prefix):-2]))
    if not cutoffs:
        raise ConfigError(f"no instrument columns for endogenous target {target!r}")
    return cutoffs


def estimate_column(bundle: PanelBundle, spec: ColumnSpec) -> dict:
    """Run one column spec end to end; failures come back annotated with their stage."""
    stage = "input assembly"
    try:
        problem = build_problem(bundle, spec)
        stage = f"estimation ({spec.estimator})"
        result = estimators.ESTIMATORS[spec.estimator](problem)
        stage = "diagnostics"
        result.diagnostics = diagnostics.standard_battery(result)
        return report.result_to_dict(result, spec.label, spec.regressand,
                                     spec.unit_effects, spec.time_effects)
    except (ValueError, ConfigError, np.linalg.LinAlgError) as exc:
        log.error("column %s failed in %s: %s", spec.label, stage, exc)
        return {"label": spec.label, "error": f"{stage}: {exc}"}


def replicate_suite(bundle: PanelBundle, specs: list[ColumnSpec],
                    threads: int = 1) -> list[dict]:
    """Estimate every column spec against the shared panel, in parallel when asked."""
    if not specs:
        raise ConfigError("empty column specification set")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda spec: estimate_column(bundle, spec), specs))
    return [estimate_column(bundle, spec) for spec in specs]


def run(config: RunConfig, out_dir: str, formats: str = "all",
        seed_override: int | None = None, threads: int = 1) -> int:
    """Execute the pipeline and write the requested artifacts; nonzero on any failure."""
    try:
        bundle = build_bundle(config, seed_override)
        columns = replicate_suite(bundle, config.columns, threads)
    except (ConfigError, Exception) as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1

    os.makedirs(out_dir, exist_ok=True)
    wrote_text = formats in ("text", "all")
    wrote_json = formats in ("json", "all")
    wrote_csv = formats in ("csv", "all")

    if wrote_text:
        table = report.render_regression_table(columns)
        _write(os.path.join(out_dir, "table.txt"), table)
        names = [c for c in panel.NUMERIC_COLUMNS
                 if not math.isnan(_first_defined(bundle.observations, c))]
        stats = panel.descriptive_statistics(bundle.observations, names)
        _write(os.path.join(out_dir, "descriptives.txt"),
               report.render_descriptive_stats(stats))
    if wrote_json:
        payload = json.dumps({"columns": columns}, indent=2, sort_keys=True)
        _write(os.path.join(out_dir, "results.json"), payload + "\n")
    if wrote_csv:
        _write(os.path.join(out_dir, "panel.csv"), panel.panel_to_csv(bundle.observations))
        _write(os.path.join(out_dir, "instruments.csv"),
               _instruments_csv(bundle))

    failed = [c for c in columns if "error" in c]
    return 2 if failed else 0


def _first_defined(observations, name: str) -> float:
    for obs in observations:
        value = float(getattr(obs, name))
        if not math.isnan(value):
            return value
    return math.nan


def _instruments_csv(bundle: PanelBundle) -> str:
    lines = [",".join(["pair_id", "month"] + bundle.instrument_labels)]
    for row, obs in enumerate(bundle.observations):
        cells = [obs.pair_id, obs.month]
        for col in range(bundle.instrument_matrix.shape[1]):
            value = bundle.instrument_matrix[row, col]
            cells.append("" if math.isnan(value) else repr(float(value)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _write(path: str, content: str):
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(content)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="delaypanel",
        description="Build the route-month delay panel and estimate the delay model.")
    parser.add_argument("--config", required=True, help="run configuration file (INI)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--format", default="all", choices=["text", "json", "csv", "all"])
    parser.add_argument("--seed", type=int, default=None,
                        help="override the synthetic scenario seed")
    parser.add_argument("--threads", type=int, default=1,
                        help="parallel estimation columns")
    args = parser.parse_args(argv)

    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return run(config, args.out, args.format, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
