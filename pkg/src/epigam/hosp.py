"""Daily hospitalisation-incidence model with a nowcast-derived offset.

Reported counts C(t, r, g) are modelled as negative binomial with offset
log(population * F(T - t)), where F is the reporting-delay CDF of the
coarse age group containing g.  The linear predictor carries age and gender
main and interaction effects, weekday dummies, a smooth time trend, a 2-D
thin-plate surface over district coordinates and district random intercepts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import pandas as pd

from .bases import BSplineSpec, ThinPlateSpec
from .design import (
    DesignSpec,
    FactorTerm,
    InteractionTerm,
    RandomInterceptTerm,
    SmoothTerm,
    build_design,
)
from .glm import FitResult, fit_negative_binomial
from .nowcast import WEEKDAYS, DelayModelFit, delay_cdf_grid

DEFAULT_COARSE_MAP = {
    "0-14": "0-59", "15-34": "0-59", "35-59": "0-59", "60-79": "60+", "80+": "60+",
}
REFERENCE_AGE = "15-34"
REFERENCE_GENDER = "m"


@dataclass
class HospPanel:
    """Reported counts per (day, district, age, gender) with populations and coords."""

    frame: pd.DataFrame  # date, district, age_group, gender, reported_count
    population: pd.DataFrame  # district, age_group, gender, population
    coords: pd.DataFrame  # district, lon, lat
    as_of: date

    def __post_init__(self):
        if (self.frame["reported_count"] < 0).any():
            raise ValueError("reported counts must be non-negative")


@dataclass
class HospDesignBundle:
    spec: DesignSpec
    response: np.ndarray
    offset: np.ndarray
    rows: pd.DataFrame
    dropped_zero_pop: int
    spatial_dropped: bool
    t_max: int
    origin: date


def _f_lookup_from_delay_model(model: DelayModelFit, origin: date, t_max: int,
                               as_of: date):
    """F per panel day and coarse age group from a fitted delay model.

    Panel day t (date ``origin + t - 1``) is translated onto the delay
    model's own day axis so calendar and weekday effects line up even when
    the two datasets start on different dates.
    """
    panel_days = [origin + timedelta(days=t - 1) for t in range(1, t_max + 1)]
    model_t = np.array([
        float(np.clip((d - model.origin).days + 1, 1, model.as_of_day))
        for d in panel_days
    ])
    grid = {}
    for ai, age in enumerate(model.age_groups):
        f_mat = delay_cdf_grid(model, model_t, ai)
        vals = np.ones(t_max)
        for t in range(1, t_max + 1):
            d = (as_of - panel_days[t - 1]).days
            if d >= model.d_max:
                vals[t - 1] = 1.0
            elif d >= 1:
                vals[t - 1] = f_mat[t - 1, d - 1]
            else:
                vals[t - 1] = np.nan
        grid[age] = vals
    return grid


def build_hosp_design(panel: HospPanel, f_source,
                      coarse_map: dict | None = None,
                      time_basis_dim: int = 10, spatial_rank: int = 30,
                      d_max: int = 40) -> HospDesignBundle:
    """Assemble the NB design with the delay-corrected offset.

    ``f_source`` is either a fitted :class:`DelayModelFit` or a mapping
    {coarse age: array of F(T - t) indexed by day}.  Rows with zero
    population are dropped with a diagnostic; the spatial smooth is dropped
    with a warning when fewer than four distinct districts exist.
    """
    coarse_map = dict(DEFAULT_COARSE_MAP if coarse_map is None else coarse_map)
    df = panel.frame.copy()
    df["date"] = pd.to_datetime(df["date"]).dt.date
    origin = df["date"].min()
    df["t"] = df["date"].map(lambda d: (d - origin).days + 1)
    t_max = int(df["t"].max())
    as_of_day = (panel.as_of - origin).days + 1

    pop = panel.population.set_index(["district", "age_group", "gender"])["population"]
    df = df.join(pop, on=["district", "age_group", "gender"])
    if df["population"].isna().any():
        missing = df[df["population"].isna()].iloc[0]
        raise ValueError(
            f"no population for ({missing['district']}, {missing['age_group']}, "
            f"{missing['gender']})"
        )
    dropped = int((df["population"] <= 0).sum())
    if dropped:
        warnings.warn(f"dropping {dropped} rows with zero population", stacklevel=2)
        df = df[df["population"] > 0]
    df = df.reset_index(drop=True)

    unknown = set(df["age_group"]) - set(coarse_map)
    if unknown:
        raise ValueError(f"age groups {sorted(unknown)} missing from the coarse-age map")

    if isinstance(f_source, DelayModelFit):
        f_grid = _f_lookup_from_delay_model(f_source, origin, t_max, panel.as_of)
        d_max = f_source.d_max
    else:
        f_grid = {k: np.asarray(v, dtype=float) for k, v in f_source.items()}

    coarse = df["age_group"].map(coarse_map)
    t_idx = df["t"].to_numpy()
    f_vals = np.ones(len(df))
    for cg in coarse.unique():
        sel = (coarse == cg).to_numpy()
        f_vals[sel] = f_grid[cg][t_idx[sel] - 1]
    f_vals = np.where(as_of_day - t_idx >= d_max, 1.0, f_vals)
    if np.any(~np.isfinite(f_vals)) or np.any(f_vals <= 0):
        raise ValueError("non-finite or non-positive F values in the offset")
    offset = np.log(df["population"].to_numpy() * f_vals)

    coords = panel.coords.drop_duplicates("district").set_index("district")
    lonlat = coords.loc[df["district"], ["lon", "lat"]].to_numpy()
    distinct = np.unique(coords[["lon", "lat"]].to_numpy(), axis=0)
    weekday = df["date"].map(lambda d: WEEKDAYS[d.weekday()]).to_numpy(dtype=object)

    age_levels = tuple(sorted(df["age_group"].unique(), key=list(coarse_map).index))
    gender_levels = tuple(sorted(df["gender"].unique()))
    age_term = FactorTerm("age_group", df["age_group"].to_numpy(dtype=object),
                          reference=REFERENCE_AGE, levels=age_levels)
    gender_term = FactorTerm("gender", df["gender"].to_numpy(dtype=object),
                             reference=REFERENCE_GENDER, levels=gender_levels)
    terms = [
        age_term,
        gender_term,
        InteractionTerm(age_term, gender_term),
        FactorTerm("weekday", weekday, reference="Mon", levels=WEEKDAYS),
        SmoothTerm("t", BSplineSpec(3, time_basis_dim, (1.0, float(t_max))),
                   df["t"].to_numpy(dtype=float), center=True),
    ]
    spatial_dropped = False
    if distinct.shape[0] >= 4:
        rank = min(spatial_rank, distinct.shape[0])
        terms.append(SmoothTerm("lonlat", ThinPlateSpec(tuple(map(tuple, distinct)), rank),
                                lonlat, center=True))
    else:
        spatial_dropped = True
        warnings.warn("fewer than 4 distinct districts: spatial smooth dropped (rank 0)",
                      stacklevel=2)
    terms.append(RandomInterceptTerm("district", df["district"].to_numpy(dtype=object)))

    spec = DesignSpec(terms=terms, intercept=True, offset=offset)
    response = df["reported_count"].to_numpy(dtype=float)
    return HospDesignBundle(spec, response, offset, df, dropped, spatial_dropped,
                            t_max, origin)


def fit_hosp_model(bundle: HospDesignBundle, lam="select") -> FitResult:
    """NB fit with estimated dispersion; sandwich grouped by district."""
    return fit_negative_binomial(bundle.spec, bundle.response, lam=lam,
                                 groups=bundle.rows["district"].to_numpy(dtype=object))


def emit_effect_grids(fit: FitResult, bundle: HospDesignBundle) -> dict[str, pd.DataFrame]:
    """Plot-ready tables for the fitted effects."""
    names = fit.names
    beta = fit.beta
    se = np.sqrt(np.diag(fit.cov_sandwich))

    def rows_for(prefix):
        return [(n, i) for i, n in enumerate(names)
                if n.startswith(prefix) and ":" not in n]

    age_gender = []
    for n, i in rows_for("age_group[") + rows_for("gender["):
        age_gender.append({"effect": n, "estimate": beta[i], "se": se[i]})
    df = bundle.rows
    for a in df["age_group"].unique():
        for g in df["gender"].unique():
            cell = f"age_group[{a}]:gender[{g}]"
            if cell in names:
                i = names.index(cell)
                age_gender.append({"effect": cell, "estimate": beta[i], "se": se[i]})
    reference_cell = f"{REFERENCE_AGE}|{REFERENCE_GENDER}"
    age_gender.append({"effect": f"reference[{reference_cell}]", "estimate": 0.0, "se": 0.0})
    age_gender_df = pd.DataFrame(age_gender)

    t_grid = np.arange(1, bundle.t_max + 1, dtype=float)
    smooth_cols = [i for i, n in enumerate(names) if n.startswith("t.")]
    basis = fit.design.encoders[[e.label for e in fit.design.encoders].index("t")]
    x_t = basis.encode({"t": t_grid})
    est_t = x_t @ beta[smooth_cols]
    var_t = np.einsum("ij,jk,ik->i", x_t, fit.cov_sandwich[np.ix_(smooth_cols, smooth_cols)], x_t)
    se_t = np.sqrt(np.clip(var_t, 0, None))
    time_df = pd.DataFrame({
        "t": t_grid.astype(int),
        "date": [(bundle.origin + timedelta(days=int(t) - 1)).isoformat() for t in t_grid],
        "estimate": est_t,
        "ci_lo": est_t - 1.96 * se_t,
        "ci_hi": est_t + 1.96 * se_t,
    })

    weekday_rows = [{"weekday": "Mon", "estimate": 0.0, "se": 0.0}]
    for wd in WEEKDAYS[1:]:
        n = f"weekday[{wd}]"
        i = names.index(n)
        weekday_rows.append({"weekday": wd, "estimate": beta[i], "se": se[i]})
    weekday_df = pd.DataFrame(weekday_rows)

    spatial_df = pd.DataFrame(columns=["lon", "lat", "estimate"])
    if not bundle.spatial_dropped:
        labels = [e.label for e in fit.design.encoders]
        enc = fit.design.encoders[labels.index("lonlat")]
        spat_cols = [i for i, n in enumerate(names) if n.startswith("lonlat.")]
        centers = enc.term.spec.distinct_centers()
        x_s = enc.encode({"lonlat": centers})
        est_s = x_s @ beta[spat_cols]
        spatial_df = pd.DataFrame({
            "lon": centers[:, 0], "lat": centers[:, 1], "estimate": est_s,
        })

    re_rows = []
    for i, n in enumerate(names):
        if n.startswith("district[RE:"):
            re_rows.append({"district": n[len("district[RE:"):-1], "u": beta[i]})
    re_df = pd.DataFrame(re_rows)

    return {
        "age_gender_effects.csv": age_gender_df,
        "time_smooth.csv": time_df,
        "weekday_effects.csv": weekday_df,
        "spatial_surface.csv": spatial_df,
        "district_random_effects.csv": re_df,
    }
