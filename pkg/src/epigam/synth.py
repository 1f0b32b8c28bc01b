"""Synthetic data generators for the three pipelines.

Each scenario draws from the corresponding model class with known ground
truth, returns the ingestion-schema tables plus a truth record, and is
bitwise deterministic in the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
import pandas as pd

from .infection import InfectionParams, PopulationTable, simulate_infection_panel
from .nowcast import AGE_GROUPS
from .rng import substream


def _expit(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


# ---------------------------------------------------------------- infection

@dataclass
class InfectionScenario:
    n_districts: int = 12
    n_weeks: int = 16
    age_groups: tuple[str, ...] = ("0-4", "5-11", "12-20", "21-39", "40-65", "65+")
    nb_theta: float = 10.0
    target_level: float = 120.0
    lag_diag: float = 0.5
    lag_off: float = 0.06


def simulate_infection_scenario(scenario: InfectionScenario, seed: int):
    """Weekly panel + population tables from the autoregressive NB model."""
    rng = substream(seed, "infection-scenario")
    a_n = len(scenario.age_groups)
    pop_vals = rng.uniform(1.5e4, 8e4, size=(scenario.n_districts, a_n))
    pop = PopulationTable(
        districts=tuple(f"d{i:03d}" for i in range(scenario.n_districts)),
        age_groups=scenario.age_groups,
        pop=pop_vals,
    )
    lag = np.full((a_n, a_n), scenario.lag_off)
    np.fill_diagonal(lag, scenario.lag_diag)
    row_sum = lag.sum(axis=1).mean()
    log_t = math.log(scenario.target_level)
    wk = np.full(scenario.n_weeks - 1,
                 log_t - row_sum * math.log(scenario.target_level + 1.0)
                 - float(np.log(pop_vals).mean()))
    params = InfectionParams(
        week_intercepts=wk, lag_matrix=lag, nb_theta=scenario.nb_theta,
        initial_counts=np.full((scenario.n_districts, a_n), scenario.target_level),
    )
    week_labels = tuple(f"2021-W{w:02d}" for w in range(1, scenario.n_weeks + 1))
    panel = simulate_infection_panel(params, pop, scenario.n_weeks, seed=seed,
                                     week_labels=week_labels)
    truth = {
        "scenario": "infection",
        "week_intercepts": wk.tolist(),
        "lag_matrix": lag.tolist(),
        "nb_theta": scenario.nb_theta,
        "delta": 1.0,
    }
    return panel, pop, truth


def infection_tables(panel, pop) -> dict[str, pd.DataFrame]:
    rows = []
    for wi, w in enumerate(panel.weeks):
        for ri, r in enumerate(panel.districts):
            for ai, a in enumerate(panel.age_groups):
                rows.append((w, r, a, int(panel.counts[wi, ri, ai])))
    panel_df = pd.DataFrame(rows, columns=["week", "district", "age_group", "count"])
    pop_rows = []
    for ri, r in enumerate(pop.districts):
        for ai, a in enumerate(pop.age_groups):
            pop_rows.append((r, a, float(pop.pop[ri, ai])))
    pop_df = pd.DataFrame(pop_rows, columns=["district", "age_group", "population"])
    return {"panel.csv": panel_df, "population.csv": pop_df}


# ------------------------------------------------------------------ nowcast

@dataclass
class NowcastScenario:
    """Line-list generator with a sequential-logistic delay law.

    The conditional delay probabilities follow
    logit p(d) = intercept + slope * (d - 2) + age_shift * 1{60+}
    + time_slope * (t - T/2); admissions per day are Poisson around a smooth
    level curve.
    """

    n_days: int = 70  # T: analysis day; admissions occur on days 1..T-1
    d_max: int = 25
    daily_level: float = 900.0
    share_older: float = 0.45
    delay_intercept: float = -0.1
    delay_slope: float = -0.28
    age_shift: float = -0.35
    time_slope: float = 0.004
    trend_amplitude: float = 0.5
    start: date = date(2021, 9, 1)


def _delay_pmf(scenario: NowcastScenario, t: int, age_index: int) -> np.ndarray:
    d = np.arange(2, scenario.d_max + 1, dtype=float)
    eta = (scenario.delay_intercept + scenario.delay_slope * (d - 2.0)
           + scenario.age_shift * float(age_index == 1)
           + scenario.time_slope * (t - scenario.n_days / 2.0))
    p = np.concatenate([[1.0], _expit(eta)])
    f = np.ones(scenario.d_max)
    f[:-1] = np.cumprod((1.0 - p[1:])[::-1])[::-1]
    return p * f


def true_delay_cdf(scenario: NowcastScenario, t: int, age_index: int) -> np.ndarray:
    return np.cumsum(_delay_pmf(scenario, t, age_index))


def simulate_nowcast_linelist(scenario: NowcastScenario, seed: int):
    """Line list + truth for the nowcast pipeline.

    Returns (line_list_df, truth) where truth carries the final daily counts
    per age group, the generating delay CDF at the analysis day, and the
    triangle the generator counted internally (for round-trip checks).
    """
    rng = substream(seed, "nowcast-scenario")
    t_last = scenario.n_days - 1
    level = scenario.daily_level
    days = np.arange(1, t_last + 1)
    curve = level * np.exp(scenario.trend_amplitude
                           * np.sin(2.0 * math.pi * days / (1.5 * scenario.n_days)))
    h_true = np.zeros((2, t_last))
    triangle = np.zeros((2, scenario.n_days, scenario.d_max))
    records = []
    case = 0
    for t in days:
        total = rng.poisson(curve[t - 1])
        n_old = rng.binomial(total, scenario.share_older)
        for age_index, n_events in ((0, total - n_old), (1, n_old)):
            if n_events == 0:
                continue
            h_true[age_index, t - 1] = n_events
            pmf = _delay_pmf(scenario, t, age_index)
            delays = rng.choice(np.arange(1, scenario.d_max + 1), size=n_events, p=pmf / pmf.sum())
            for d in delays:
                triangle[age_index, t - 1, d - 1] += 1
                adm = scenario.start + timedelta(days=int(t) - 1)
                rep = adm + timedelta(days=int(d))
                records.append((
                    f"c{case:07d}", adm.isoformat(), adm.isoformat(), rep.isoformat(),
                    AGE_GROUPS[age_index], "f" if case % 2 else "m", "d000",
                ))
                case += 1
    line_list = pd.DataFrame(records, columns=[
        "case_id", "admission_date", "infection_report_date", "registry_report_date",
        "age_group", "gender", "district",
    ])
    truth = {
        "scenario": "nowcast",
        "start": scenario.start.isoformat(),
        "as_of": (scenario.start + timedelta(days=scenario.n_days - 1)).isoformat(),
        "d_max": scenario.d_max,
        "h_true": h_true.tolist(),
        "true_cdf_last_day": [true_delay_cdf(scenario, t_last, a).tolist() for a in (0, 1)],
        "triangle_internal": triangle.tolist(),
    }
    return line_list, truth


# --------------------------------------------------------------------- hosp

@dataclass
class HospScenario:
    """Daily hospitalisation counts with delayed reporting.

    True counts are NB around exp(intercept + age/gender effects + weekday
    effects + smooth time trend + spatial surface + district effect +
    log population); the reported counts thin each day's total by the true
    delay CDF evaluated at its current age.
    """

    n_districts: int = 20
    n_days: int = 60
    d_max: int = 25
    ages: tuple[str, ...] = ("0-14", "15-34", "35-59", "60-79", "80+")
    genders: tuple[str, ...] = ("m", "f")
    intercept: float = -9.8
    nb_theta: float = 12.0
    tau_district: float = 0.25
    trend_amplitude: float = 0.8
    spatial_amplitude: float = 0.4
    delay_intercept: float = -0.1
    delay_slope: float = -0.28
    age_shift: float = -0.35
    start: date = date(2021, 9, 24)

    age_effects: dict = field(default_factory=lambda: {
        "0-14": -1.0, "15-34": 0.0, "35-59": 0.7, "60-79": 1.6, "80+": 2.1,
    })
    gender_effects: dict = field(default_factory=lambda: {"m": 0.0, "f": -0.15})
    interaction: dict = field(default_factory=lambda: {
        ("0-14", "f"): 0.25, ("35-59", "f"): -0.2, ("60-79", "f"): -0.25, ("80+", "f"): 0.35,
    })
    weekday_effects: tuple = (0.0, 0.02, -0.01, 0.0, -0.05, -0.35, -0.4)

    coarse_map: dict = field(default_factory=lambda: {
        "0-14": "0-59", "15-34": "0-59", "35-59": "0-59", "60-79": "60+", "80+": "60+",
    })


def hosp_time_trend(scenario: HospScenario, t: np.ndarray) -> np.ndarray:
    x = np.asarray(t, dtype=float) / scenario.n_days
    return scenario.trend_amplitude * (x - 0.5 + 0.4 * np.sin(2.0 * math.pi * x * 0.9))


def hosp_true_f(scenario: HospScenario, d: np.ndarray, age_index: int) -> np.ndarray:
    """Delay CDF F(d) of the generating sequential-logistic law."""
    dd = np.arange(2, scenario.d_max + 1, dtype=float)
    eta = (scenario.delay_intercept + scenario.delay_slope * (dd - 2.0)
           + scenario.age_shift * float(age_index == 1))
    p = np.concatenate([[1.0], _expit(eta)])
    f = np.ones(scenario.d_max)
    f[:-1] = np.cumprod((1.0 - p[1:])[::-1])[::-1]
    d = np.asarray(d, dtype=int)
    out = np.ones(d.shape, dtype=float)
    inside = (d >= 1) & (d < scenario.d_max)
    out[inside] = f[d[inside] - 1]
    out[d < 1] = np.nan
    return out


def simulate_hosp_scenario(scenario: HospScenario, seed: int):
    """Panel of reported counts plus population, coordinates and truth."""
    rng = substream(seed, "hosp-scenario")
    r_n = scenario.n_districts
    coords = np.column_stack([rng.uniform(10.0, 13.5, r_n), rng.uniform(47.3, 50.5, r_n)])
    u_r = rng.normal(0.0, scenario.tau_district, r_n)
    districts = [f"d{i:03d}" for i in range(r_n)]
    lon_c, lat_c = coords[:, 0].mean(), coords[:, 1].mean()
    spatial = scenario.spatial_amplitude * (
        np.sin(1.5 * (coords[:, 0] - lon_c)) + 0.8 * (coords[:, 1] - lat_c) / 2.0
    )
    pop_rows, panel_rows = [], []
    t_grid = np.arange(1, scenario.n_days + 1)
    trend = hosp_time_trend(scenario, t_grid)
    as_of = scenario.start + timedelta(days=scenario.n_days)
    weekday_idx = np.array([
        (scenario.start + timedelta(days=int(t) - 1)).weekday() for t in t_grid
    ])
    weekday_add = np.asarray(scenario.weekday_effects)[weekday_idx]
    day_labels = [(scenario.start + timedelta(days=int(t) - 1)).isoformat() for t in t_grid]
    f_by_day = {
        0: hosp_true_f(scenario, scenario.n_days - t_grid + 1, 0),
        1: hosp_true_f(scenario, scenario.n_days - t_grid + 1, 1),
    }
    theta = scenario.nb_theta
    for ri, district in enumerate(districts):
        for age in scenario.ages:
            age_index = 1 if scenario.coarse_map[age] == "60+" else 0
            for gender in scenario.genders:
                pop = float(rng.uniform(4e3, 3e4))
                pop_rows.append((district, age, gender, pop))
                eta_base = (
                    scenario.intercept
                    + scenario.age_effects[age]
                    + scenario.gender_effects[gender]
                    + scenario.interaction.get((age, gender), 0.0)
                    + spatial[ri] + u_r[ri]
                )
                mu = pop * np.exp(eta_base + weekday_add + trend)
                h = rng.negative_binomial(theta, theta / (theta + mu))
                reported = rng.binomial(h, f_by_day[age_index])
                panel_rows.extend(
                    (day_labels[i], district, age, gender, int(reported[i]), int(h[i]))
                    for i in range(scenario.n_days)
                )
    panel_df = pd.DataFrame(
        panel_rows,
        columns=["date", "district", "age_group", "gender", "reported_count", "final_count"],
    )
    pop_df = pd.DataFrame(pop_rows, columns=["district", "age_group", "gender", "population"])
    coords_df = pd.DataFrame(
        {"district": districts, "lon": coords[:, 0], "lat": coords[:, 1]}
    )
    truth = {
        "scenario": "hosp",
        "start": scenario.start.isoformat(),
        "as_of": as_of.isoformat(),
        "intercept": scenario.intercept,
        "age_effects": scenario.age_effects,
        "gender_effects": scenario.gender_effects,
        "interaction": {f"{a}|{g}": v for (a, g), v in scenario.interaction.items()},
        "weekday_effects": list(scenario.weekday_effects),
        "time_trend": trend.tolist(),
        "district_effects": dict(zip(districts, (spatial + u_r).tolist())),
        "nb_theta": scenario.nb_theta,
        # F(T - t) per day t = 1..n_days: recent days have small F
        "true_f_by_age": {
            "0-59": hosp_true_f(scenario, scenario.n_days - t_grid + 1, 0).tolist(),
            "60+": hosp_true_f(scenario, scenario.n_days - t_grid + 1, 1).tolist(),
        },
    }
    return panel_df, pop_df, coords_df, truth


# ---------------------------------------------------------------------- icu

@dataclass
class IcuScenario:
    """Weekly three-category bed occupancy driven by lagged shares and incidence."""

    n_districts: int = 40
    n_weeks: int = 24
    beds_low: int = 25
    beds_high: int = 60
    intercepts: tuple[float, float] = (0.35, 0.55)  # (free, non-COVID) vs COVID
    ar_free: tuple[float, float] = (1.6, 0.9)
    ar_covid: tuple[float, float] = (-1.2, -0.8)
    incidence_coef: tuple[float, float] = (-0.5, -0.35)  # shared across age groups
    tau_district: float = 0.20
    spatial_amplitude: float = 0.25
    incidence_ages: tuple[str, ...] = ("15-34", "35-59", "60-79", "80+")
    wave_period: float = 26.0
    incidence_noise: float = 0.25

    def incidence_series(self, rng, n_weeks: int, n_districts: int) -> np.ndarray:
        """Log-AR(1) incidence per 100k around a shared seasonal wave."""
        a_n = len(self.incidence_ages)
        base = np.array([3.6, 3.9, 3.2, 2.8])[:a_n]
        out = np.zeros((n_weeks, n_districts, a_n))
        wave = 1.1 * np.sin(2.0 * math.pi * np.arange(n_weeks) / self.wave_period)
        dev = rng.normal(0, 0.3, (n_districts, a_n))
        for w in range(n_weeks):
            dev = 0.75 * dev + rng.normal(0, self.incidence_noise, (n_districts, a_n))
            out[w] = np.exp(base + wave[w] + dev)
        return out


def simulate_icu_scenario(scenario: IcuScenario, seed: int):
    """ICU panel, incidence and coordinates tables plus the generating truth."""
    rng = substream(seed, "icu-scenario")
    r_n, w_n = scenario.n_districts, scenario.n_weeks
    districts = [f"d{i:03d}" for i in range(r_n)]
    coords = np.column_stack([rng.uniform(6.0, 14.5, r_n), rng.uniform(47.5, 54.5, r_n)])
    beds = rng.integers(scenario.beds_low, scenario.beds_high + 1, r_n)
    u = rng.normal(0.0, scenario.tau_district, (r_n, 2))
    lon_c, lat_c = coords[:, 0].mean(), coords[:, 1].mean()
    spatial = scenario.spatial_amplitude * np.column_stack([
        np.sin(0.8 * (coords[:, 0] - lon_c)),
        np.cos(0.6 * (coords[:, 1] - lat_c)) - math.cos(0.0) + (coords[:, 1] - lat_c) * 0.3,
    ])
    incidence = scenario.incidence_series(rng, w_n, r_n)

    z = np.zeros((w_n, r_n, 3), dtype=int)
    start_pi = np.array([0.45, 0.15, 0.40])
    for ri in range(r_n):
        z[0, ri] = rng.multinomial(beds[ri], start_pi)
    # incidence enters with equal per-age coefficients incidence_coef[j] / A
    a_n = len(scenario.incidence_ages)
    for w in range(1, w_n):
        shares = z[w - 1, :, :2] / beds[:, None]  # (free, covid) shares
        log_inc = np.log(incidence[w - 1] + 1.0)
        for ri in range(r_n):
            eta = np.zeros(3)
            for j, cat in enumerate((0, 2)):  # free and non-COVID logits vs COVID
                eta[cat] = (
                    scenario.intercepts[j]
                    + scenario.ar_free[j] * shares[ri, 0]
                    + scenario.ar_covid[j] * shares[ri, 1]
                    + (scenario.incidence_coef[j] / a_n) * log_inc[ri].sum()
                    + spatial[ri, j] + u[ri, j]
                )
            pi = np.exp(eta - eta.max())
            pi /= pi.sum()
            z[w, ri] = rng.multinomial(beds[ri], pi)

    icu_rows, inc_rows = [], []
    weeks = [f"2021-W{w:02d}" for w in range(1, w_n + 1)]
    for w in range(w_n):
        for ri, district in enumerate(districts):
            icu_rows.append((weeks[w], district, int(z[w, ri, 0]), int(z[w, ri, 1]),
                             int(z[w, ri, 2])))
            for ai, age in enumerate(scenario.incidence_ages):
                inc_rows.append((weeks[w], district, age, float(incidence[w, ri, ai])))
    icu_df = pd.DataFrame(icu_rows, columns=[
        "week", "district", "beds_free", "beds_covid", "beds_noncovid",
    ])
    inc_df = pd.DataFrame(inc_rows, columns=[
        "week", "district", "age_group", "incidence_per_100k",
    ])
    coords_df = pd.DataFrame({"district": districts, "lon": coords[:, 0], "lat": coords[:, 1]})
    truth = {
        "scenario": "icu",
        "intercepts": list(scenario.intercepts),
        "ar_free": list(scenario.ar_free),
        "ar_covid": list(scenario.ar_covid),
        "incidence_coef": list(scenario.incidence_coef),
        "incidence_coef_per_age": [c / len(scenario.incidence_ages)
                                   for c in scenario.incidence_coef],
        "tau_district": scenario.tau_district,
    }
    return icu_df, inc_df, coords_df, truth
