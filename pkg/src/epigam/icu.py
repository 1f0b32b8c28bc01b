"""Weekly multinomial ICU-bed occupancy models and forecast evaluation.

Beds split into (free, COVID, non-COVID); weekly district counts follow a
multinomial whose two logits (against the COVID reference) carry lagged
occupancy shares, normalized lagged log-incidences of four age groups, a
thin-plate spatial surface and district random intercepts.  The rolling
one-week-ahead harness refits nested model variants on sliding training
windows, scores them with the logarithmic score and compares them to the
full model by paired permutation tests.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .bases import ThinPlateSpec
from .design import (
    DesignSpec,
    LinearTerm,
    RandomInterceptTerm,
    SmoothTerm,
    build_design,
)
from .multinomial import (
    MultinomialData,
    MultinomialFit,
    fit_multinomial,
    log_score,
    multinomial_sandwich,
    permutation_test,
    predict_probs,
)

CATEGORIES = ("free", "covid", "noncovid")
REFERENCE_CATEGORY = "covid"
VARIANTS = ("full", "no_ar", "no_infection", "linear", "intercept_only")
VARIANT_OMITS = {
    "full": "-",
    "no_ar": "theta_AR(1)",
    "no_infection": "theta_I",
    "linear": "s_j(lon,lat), u_rj",
    "intercept_only": "all but theta_0",
}


class NormalizationError(ValueError):
    pass


@dataclass
class NormalizationStats:
    mean: float
    sd: float  # population convention (divisor n)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.sd


def normalize(x) -> tuple[np.ndarray, NormalizationStats]:
    """Center and scale by the population standard deviation (divisor n)."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 2:
        raise NormalizationError("need at least two values to normalize")
    mean = float(x.mean())
    sd = float(np.sqrt(np.mean((x - mean) ** 2)))
    if sd == 0.0:
        raise NormalizationError("constant covariate cannot be normalized")
    stats = NormalizationStats(mean, sd)
    return stats.apply(x), stats


@dataclass
class IcuPanel:
    """Weekly (free, covid, noncovid) bed counts with incidences and coordinates."""

    weeks: tuple
    districts: tuple
    beds: np.ndarray  # (W, R, 3) integers
    incidence: np.ndarray  # (W, R, A) per 100k
    incidence_ages: tuple[str, ...]
    coords: np.ndarray  # (R, 2) lon, lat

    def __post_init__(self):
        self.beds = np.asarray(self.beds)
        self.incidence = np.asarray(self.incidence, dtype=float)
        w, r = len(self.weeks), len(self.districts)
        if self.beds.shape != (w, r, 3):
            raise ValueError(f"beds shape {self.beds.shape} != {(w, r, 3)}")
        if self.incidence.shape[:2] != (w, r):
            raise ValueError("incidence shape mismatch")
        if np.any(self.beds < 0):
            raise ValueError("bed counts must be non-negative")

    @property
    def trials(self) -> np.ndarray:
        return self.beds.sum(axis=2)


def panel_from_frames(icu_df: pd.DataFrame, incidence_df: pd.DataFrame,
                      coords_df: pd.DataFrame) -> IcuPanel:
    """Assemble the panel from the three ingestion tables.

    Weekly averages that arrive as floats are rounded half-to-even; week
    labels must form a gap-free consecutive run per district.
    """
    weeks = sorted(icu_df["week"].unique())
    _check_week_gaps(weeks)
    districts = sorted(icu_df["district"].unique())
    ages = tuple(sorted(incidence_df["age_group"].unique()))
    w_ix = {w: i for i, w in enumerate(weeks)}
    r_ix = {r: i for i, r in enumerate(districts)}
    beds = np.zeros((len(weeks), len(districts), 3))
    for row in icu_df.itertuples(index=False):
        beds[w_ix[row.week], r_ix[row.district]] = (
            row.beds_free, row.beds_covid, row.beds_noncovid
        )
    beds = np.rint(beds).astype(int)
    incidence = np.zeros((len(weeks), len(districts), len(ages)))
    a_ix = {a: i for i, a in enumerate(ages)}
    for row in incidence_df.itertuples(index=False):
        if row.week in w_ix:
            incidence[w_ix[row.week], r_ix[row.district], a_ix[row.age_group]] = (
                row.incidence_per_100k
            )
    coords = coords_df.drop_duplicates("district").set_index("district")
    lonlat = coords.loc[list(districts), ["lon", "lat"]].to_numpy(dtype=float)
    return IcuPanel(tuple(weeks), tuple(districts), beds, incidence, ages, lonlat)


def _check_week_gaps(weeks) -> None:
    idx = []
    for w in weeks:
        if isinstance(w, str) and "-W" in w:
            year, num = w.split("-W")
            idx.append(int(year) * 53 + int(num))
        else:
            idx.append(int(w))
    idx = sorted(idx)
    missing = [i for i in range(idx[0], idx[-1] + 1) if i not in set(idx)]
    if missing:
        raise ValueError(f"week gaps detected: missing week indices {missing}")


@dataclass
class IcuDesignResult:
    data: MultinomialData
    stats: dict[str, NormalizationStats]
    rows: pd.DataFrame
    dropped_covariates: list[str]


def build_icu_design(panel: IcuPanel, delta: float = 1.0,
                     weeks: slice | None = None,
                     stats: dict[str, NormalizationStats] | None = None,
                     variant: str = "full",
                     spatial_rank: int = 10) -> IcuDesignResult:
    """Multinomial rows for response weeks ``weeks`` (default 2..W).

    Covariates are lagged one week: the two occupancy shares, the four
    logged incidences (all normalized; training stats are reused for
    prediction when supplied), plus spatial smooth and district random
    intercepts unless the variant omits them.  COVID beds are the reference
    category.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    w_n, r_n = len(panel.weeks), len(panel.districts)
    if weeks is None:
        weeks = slice(1, w_n)
    week_idx = range(*weeks.indices(w_n))
    if len(week_idx) == 0 or week_idx[0] < 1:
        raise ValueError("response weeks must start at the second week at the earliest")

    rows = []
    for w in week_idx:
        for r in range(r_n):
            n_prev = panel.beds[w - 1, r].sum()
            rows.append({
                "week": panel.weeks[w],
                "district": panel.districts[r],
                "share_free": panel.beds[w - 1, r, 0] / n_prev if n_prev > 0 else 0.0,
                "share_covid": panel.beds[w - 1, r, 1] / n_prev if n_prev > 0 else 0.0,
                **{
                    f"loginc[{a}]": math.log(panel.incidence[w - 1, r, ai] + delta)
                    for ai, a in enumerate(panel.incidence_ages)
                },
                "lon": panel.coords[r, 0],
                "lat": panel.coords[r, 1],
            })
    frame = pd.DataFrame(rows)
    counts = np.concatenate([panel.beds[w][None] for w in week_idx]).reshape(-1, 3)

    covariates = []
    if variant not in ("intercept_only", "no_ar"):
        covariates += ["share_free", "share_covid"]
    if variant not in ("intercept_only", "no_infection"):
        covariates += [f"loginc[{a}]" for a in panel.incidence_ages]

    terms = []
    fit_stats: dict[str, NormalizationStats] = {}
    dropped = []
    for cov in covariates:
        values = frame[cov].to_numpy()
        if stats is not None:
            st = stats[cov]
            terms.append(LinearTerm(cov, st.apply(values)))
            fit_stats[cov] = st
        else:
            try:
                z, st = normalize(values)
            except NormalizationError:
                dropped.append(cov)
                continue
            terms.append(LinearTerm(cov, z))
            fit_stats[cov] = st
    if dropped:
        warnings.warn(f"dropping constant covariates: {dropped}", stacklevel=2)

    if variant not in ("intercept_only", "linear"):
        distinct = np.unique(panel.coords, axis=0)
        if distinct.shape[0] >= 4:
            rank = min(spatial_rank, distinct.shape[0])
            lonlat = frame[["lon", "lat"]].to_numpy()
            terms.append(SmoothTerm("lonlat", ThinPlateSpec(tuple(map(tuple, distinct)), rank),
                                    lonlat, center=True))
        terms.append(RandomInterceptTerm("district", frame["district"].to_numpy(dtype=object),
                                         levels=tuple(panel.districts)))

    spec = DesignSpec(terms=terms, intercept=True)
    design = build_design(spec, n_rows=len(frame))
    data = MultinomialData(counts, design, reference=CATEGORIES.index(REFERENCE_CATEGORY),
                           categories=CATEGORIES)
    return IcuDesignResult(data, fit_stats, frame, dropped)


def fit_icu_model(result: IcuDesignResult, lam="select") -> MultinomialFit:
    """Fit the multinomial model; sandwich covariance grouped by district."""
    groups = result.rows["district"].to_numpy(dtype=object)
    fit = fit_multinomial(result.data, lam=lam, groups=groups)
    fit.cov_sandwich = multinomial_sandwich(fit, groups)
    return fit


def coefficient_table(fit: MultinomialFit) -> pd.DataFrame:
    """Linear-effect estimates with sandwich CIs per logit (vs COVID beds)."""
    names = fit.coef_names
    se = np.sqrt(np.diag(fit.cov_sandwich))
    rows = []
    for i, name in enumerate(names):
        cat, coef = name.split("|", 1)
        if coef.startswith(("lonlat.", "district[RE:")):
            continue
        rows.append({
            "logit": f"{cat}_vs_{REFERENCE_CATEGORY}",
            "covariate": coef,
            "estimate": fit.beta[i],
            "se_sandwich": se[i],
            "ci_lo": fit.beta[i] - 1.96 * se[i],
            "ci_hi": fit.beta[i] + 1.96 * se[i],
        })
    return pd.DataFrame(rows)


@dataclass
class ForecastRecord:
    week: object
    variant: str
    probs: np.ndarray
    observed: np.ndarray
    trials: np.ndarray
    score: float


def rolling_forecast(panel: IcuPanel, window: int = 8,
                     variants: tuple[str, ...] = VARIANTS,
                     lam_policy: str = "first-window-gcv",
                     spatial_rank: int = 10) -> list[ForecastRecord]:
    """One-week-ahead forecasts in a rolling window.

    For target week w the model trains on response weeks w-window..w-1
    (their lagged covariates reach back one week further), normalization
    statistics are frozen from the training rows, and the predicted
    probabilities for week w are scored against the observed occupancy.
    Smoothing parameters are selected by GCV on each variant's first window
    and held fixed afterwards ("first-window-gcv"), or pinned at 1
    ("unit").  A variant failing in a window is recorded as missing.
    """
    w_n = len(panel.weeks)
    if w_n < window + 2:
        raise ValueError(f"panel spans {w_n} weeks; need at least {window + 2}")
    records: list[ForecastRecord] = []
    lam_cache: dict[str, dict] = {}
    for target in range(window + 1, w_n):
        for variant in variants:
            try:
                train = build_icu_design(panel, weeks=slice(target - window, target),
                                         variant=variant, spatial_rank=spatial_rank)
                if lam_policy == "first-window-gcv":
                    lam = lam_cache.get(variant, "select")
                elif lam_policy == "unit":
                    lam = 1.0
                else:
                    raise ValueError(f"unknown lam policy {lam_policy!r}")
                fit = fit_multinomial(train.data, lam=lam)
                if variant not in lam_cache:
                    lam_cache[variant] = fit.lam
                test = build_icu_design(panel, weeks=slice(target, target + 1),
                                        variant=variant, stats=train.stats,
                                        spatial_rank=spatial_rank)
                probs = predict_probs(fit, _newdata_from_rows(test.rows, train),
                                      n_rows=len(test.rows))
                observed = test.data.counts
                trials = test.data.trials
                score = float(log_score(probs, observed, trials).sum())
                records.append(ForecastRecord(panel.weeks[target], variant, probs,
                                              observed, trials, score))
            except Exception as exc:  # noqa: BLE001 - a failed window is data, not fatal
                warnings.warn(f"variant {variant!r} failed for week {panel.weeks[target]}: {exc}",
                              stacklevel=2)
                records.append(ForecastRecord(panel.weeks[target], variant,
                                              np.empty((0, 3)), np.empty((0, 3)),
                                              np.empty(0), float("nan")))
    return records


def _newdata_from_rows(rows: pd.DataFrame, train: IcuDesignResult) -> dict:
    data = {}
    for enc in train.data.design.encoders:
        term = enc.term
        if isinstance(term, LinearTerm):
            data[term.name] = train.stats[term.name].apply(rows[term.name].to_numpy())
        elif isinstance(term, SmoothTerm):
            data[term.name] = rows[["lon", "lat"]].to_numpy()
        elif isinstance(term, RandomInterceptTerm):
            data[term.name] = rows["district"].to_numpy(dtype=object)
    return data


def score_frame(records: list[ForecastRecord]) -> pd.DataFrame:
    return pd.DataFrame([
        {"week": r.week, "variant": r.variant, "score": r.score} for r in records
    ])


def score_table(records: list[ForecastRecord], n_perm: int = 9999,
                seed: int = 0) -> pd.DataFrame:
    """Average scores and permutation p-values against the full model."""
    frame = score_frame(records)
    wide = frame.pivot(index="week", columns="variant", values="score")
    rows = []
    for variant in [v for v in VARIANTS if v in wide.columns]:
        avg = float(wide[variant].mean(skipna=True))
        if variant == "full":
            p_val = ""
        else:
            paired = wide[["full", variant]].dropna()
            res = permutation_test(paired["full"].to_numpy(), paired[variant].to_numpy(),
                                   n_perm=n_perm, seed=seed)
            p_val = f"{res['p_value']:.6g}"
        rows.append({
            "variant": variant,
            "omitted_effects": VARIANT_OMITS[variant],
            "average_score": avg,
            "p_value": p_val,
        })
    return pd.DataFrame(rows)
