"""CSV ingestion with schema validation and cross-table checks.

Each pipeline reads a fixed set of UTF-8 CSV tables by standard filename
from a data directory.  Validation collects structured problems (file, row,
column, reason) instead of failing on the first; loading returns typed
tables with complete zero-filled grids where the schemas require them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .infection import PopulationTable, WeeklyPanel


class ValidationFailure(ValueError):
    def __init__(self, report: "ValidationReport"):
        self.report = report
        super().__init__(str(report))


@dataclass
class Problem:
    file: str
    row: int | None
    column: str | None
    reason: str

    def __str__(self):
        loc = self.file
        if self.row is not None:
            loc += f":row {self.row}"
        if self.column:
            loc += f":{self.column}"
        return f"{loc}: {self.reason}"


@dataclass
class ValidationReport:
    problems: list[Problem] = field(default_factory=list)

    def add(self, file, row, column, reason):
        self.problems.append(Problem(file, row, column, reason))

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self):
        if self.ok:
            return "validation passed"
        return "\n".join(str(p) for p in self.problems)

    def raise_if_failed(self):
        if not self.ok:
            raise ValidationFailure(self)


SCENARIO_FILES = {
    "infection": ("panel.csv", "population.csv"),
    "nowcast": ("hosp_linelist.csv",),
    "hosp": ("hosp_panel.csv", "population_g.csv", "district_coords.csv"),
    "icu": ("icu_panel.csv", "incidence.csv", "district_coords.csv"),
}

_SCHEMAS = {
    "panel.csv": {
        "columns": ("week", "district", "age_group", "count"),
        "numeric": {"count": ("int", 0)},
    },
    "population.csv": {
        "columns": ("district", "age_group", "population"),
        "numeric": {"population": ("float", 1e-9)},
    },
    "hosp_linelist.csv": {
        "columns": ("case_id", "admission_date", "infection_report_date",
                    "registry_report_date", "age_group", "gender", "district"),
        "dates": ("registry_report_date",),
        "optional_dates": ("admission_date", "infection_report_date"),
    },
    "hosp_panel.csv": {
        "columns": ("date", "district", "age_group", "gender", "reported_count"),
        "numeric": {"reported_count": ("int", 0)},
        "dates": ("date",),
    },
    "population_g.csv": {
        "columns": ("district", "age_group", "gender", "population"),
        "numeric": {"population": ("float", 1e-9)},
    },
    "district_coords.csv": {
        "columns": ("district", "lon", "lat"),
        "numeric": {"lon": ("float", None), "lat": ("float", None)},
    },
    "icu_panel.csv": {
        "columns": ("week", "district", "beds_free", "beds_covid", "beds_noncovid"),
        "numeric": {"beds_free": ("float", 0), "beds_covid": ("float", 0),
                    "beds_noncovid": ("float", 0)},
    },
    "incidence.csv": {
        "columns": ("week", "district", "age_group", "incidence_per_100k"),
        "numeric": {"incidence_per_100k": ("float", 0)},
    },
}

_DUPLICATE_KEYS = {
    "panel.csv": ("week", "district", "age_group"),
    "population.csv": ("district", "age_group"),
    "population_g.csv": ("district", "age_group", "gender"),
    "district_coords.csv": ("district",),
    "icu_panel.csv": ("week", "district"),
    "incidence.csv": ("week", "district", "age_group"),
    "hosp_panel.csv": ("date", "district", "age_group", "gender"),
}


@dataclass
class DatasetBundle:
    scenario: str
    tables: dict[str, pd.DataFrame]
    report: ValidationReport

    def __getitem__(self, name: str) -> pd.DataFrame:
        return self.tables[name]


def _validate_table(name: str, df: pd.DataFrame, report: ValidationReport) -> pd.DataFrame:
    schema = _SCHEMAS[name]
    missing_cols = [c for c in schema["columns"] if c not in df.columns]
    for c in missing_cols:
        report.add(name, None, c, "missing column")
    if missing_cols:
        return df
    df = df.loc[:, list(schema["columns"])].copy()
    for col, (kind, lower) in schema.get("numeric", {}).items():
        values = pd.to_numeric(df[col], errors="coerce")
        for i in df.index[values.isna() & df[col].notna()]:
            report.add(name, int(i) + 2, col, f"not numeric: {df.at[i, col]!r}")
        for i in df.index[df[col].isna()]:
            report.add(name, int(i) + 2, col, "missing value")
        if lower is not None:
            for i in df.index[values < lower]:
                bound = "non-negative" if lower == 0 else "strictly positive"
                report.add(name, int(i) + 2, col, f"must be {bound}: {values[i]!r}")
        if kind == "int":
            frac = values.dropna() % 1
            for i in frac.index[frac != 0]:
                report.add(name, int(i) + 2, col, f"not an integer: {values[i]!r}")
        df[col] = values
    for col in schema.get("dates", ()):
        parsed = pd.to_datetime(df[col], errors="coerce", format="ISO8601")
        for i in df.index[parsed.isna()]:
            report.add(name, int(i) + 2, col, f"not an ISO date: {df.at[i, col]!r}")
        df[col] = parsed
    for col in schema.get("optional_dates", ()):
        raw = df[col]
        parsed = pd.to_datetime(raw, errors="coerce", format="ISO8601")
        bad = parsed.isna() & raw.notna() & (raw.astype(str).str.strip() != "")
        for i in df.index[bad]:
            report.add(name, int(i) + 2, col, f"not an ISO date: {raw[i]!r}")
        df[col] = parsed
    key = _DUPLICATE_KEYS.get(name)
    if key:
        dup = df.duplicated(list(key), keep="first")
        for i in df.index[dup]:
            report.add(name, int(i) + 2, None, f"duplicate key {tuple(df.loc[i, list(key)])}")
    return df


def _check_foreign_keys(scenario: str, tables: dict, report: ValidationReport):
    def missing(child, child_col, parent, parent_col):
        have = set(tables[parent][parent_col])
        for value in pd.unique(tables[child][child_col]):
            if value not in have:
                report.add(child, None, child_col,
                           f"{value!r} not present in {parent}:{parent_col}")

    if scenario == "infection":
        missing("panel.csv", "district", "population.csv", "district")
        missing("panel.csv", "age_group", "population.csv", "age_group")
    elif scenario == "hosp":
        missing("hosp_panel.csv", "district", "district_coords.csv", "district")
        missing("hosp_panel.csv", "district", "population_g.csv", "district")
    elif scenario == "icu":
        missing("icu_panel.csv", "district", "district_coords.csv", "district")
        missing("incidence.csv", "district", "district_coords.csv", "district")


def validate_and_load(data_dir: str | Path, scenario: str) -> DatasetBundle:
    """Load and validate one scenario's tables from a directory.

    Raises :class:`ValidationFailure` carrying the structured report when
    any check fails.
    """
    if scenario not in SCENARIO_FILES:
        raise ValueError(f"unknown scenario {scenario!r}; pick from {sorted(SCENARIO_FILES)}")
    data_dir = Path(data_dir)
    report = ValidationReport()
    tables: dict[str, pd.DataFrame] = {}
    for name in SCENARIO_FILES[scenario]:
        path = data_dir / name
        if not path.exists():
            report.add(name, None, None, f"file not found under {data_dir}")
            continue
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        df = df.replace({"": None})
        tables[name] = _validate_table(name, df, report)
    if report.ok:
        _check_foreign_keys(scenario, tables, report)
    report.raise_if_failed()
    return DatasetBundle(scenario, tables, report)


def infection_panel_from_bundle(bundle: DatasetBundle) -> tuple[WeeklyPanel, PopulationTable]:
    """Typed infection panel with the complete grid zero-filled."""
    panel_df = bundle["panel.csv"]
    pop_df = bundle["population.csv"]
    weeks = tuple(sorted(panel_df["week"].unique()))
    districts = tuple(sorted(pop_df["district"].unique()))
    ages = tuple(sorted(pop_df["age_group"].unique()))
    w_ix = {w: i for i, w in enumerate(weeks)}
    r_ix = {r: i for i, r in enumerate(districts)}
    a_ix = {a: i for i, a in enumerate(ages)}
    counts = np.zeros((len(weeks), len(districts), len(ages)))
    for week, district, age, count in panel_df.itertuples(index=False, name=None):
        counts[w_ix[week], r_ix[district], a_ix[age]] = count
    pop = np.zeros((len(districts), len(ages)))
    for district, age, population in pop_df.itertuples(index=False, name=None):
        pop[r_ix[district], a_ix[age]] = population
    return (WeeklyPanel(weeks, districts, ages, counts),
            PopulationTable(districts, ages, pop))
