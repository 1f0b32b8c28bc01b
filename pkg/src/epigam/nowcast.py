"""Reporting-delay nowcasting of daily hospitalisation counts.

A line list of admission and report dates becomes a reporting triangle
N(t, d); the delay law is fitted as a sequential binomial model on the
conditional probabilities p(d) = P(D = d | D <= d) with a piece-wise linear
time effect, smooth delay effects (one common, one extra for 60+), and
weekday effects for both the admission day and the report day.  Inverting
the implied delay CDF turns reported partial counts into nowcasts; intervals
come from a parametric bootstrap of the model coefficients.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import NamedTuple

import numpy as np
import pandas as pd

from .bases import BSplineSpec, TruncatedLinearSpec
from .design import DesignSpec, FactorTerm, SmoothTerm
from .glm import Family, FitResult, fit_pirls
from .rng import substream

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
AGE_GROUPS = ("0-59", "60+")


class ImputationResult(NamedTuple):
    line_list: pd.DataFrame
    imputed: int
    dropped: int


def impute_admission_dates(line_list: pd.DataFrame) -> ImputationResult:
    """Fill missing admission dates with the infection report date.

    Records missing both dates are dropped; counts of both actions are
    returned alongside the completed line list.
    """
    df = line_list.copy()
    admission = pd.to_datetime(df["admission_date"], errors="coerce")
    infection = pd.to_datetime(df["infection_report_date"], errors="coerce")
    missing = admission.isna()
    unfixable = missing & infection.isna()
    imputed = int((missing & ~unfixable).sum())
    admission = admission.where(~missing, infection)
    df["admission_date"] = admission
    df = df[~unfixable].reset_index(drop=True)
    return ImputationResult(df, imputed, int(unfixable.sum()))


@dataclass
class ReportingTriangle:
    """Counts N(t, d) per age group with the observability mask t + d <= T.

    Day indices run 1..T relative to ``origin`` (day 1 = origin); delays run
    1..d_max with same-day reports mapped to delay 1.
    """

    origin: date
    as_of_day: int  # T
    d_max: int
    age_groups: tuple[str, ...]
    counts: np.ndarray  # (n_ages, T, d_max)
    rejected_negative: int = 0
    beyond_dmax: int = 0

    def __post_init__(self):
        n_ages, t_n, d_n = self.counts.shape
        if n_ages != len(self.age_groups) or t_n != self.as_of_day or d_n != self.d_max:
            raise ValueError("triangle shape mismatch")

    @property
    def cumulative(self) -> np.ndarray:
        return self.counts.cumsum(axis=2)

    def mask(self) -> np.ndarray:
        t_idx = np.arange(1, self.as_of_day + 1)[:, None]
        d_idx = np.arange(1, self.d_max + 1)[None, :]
        return t_idx + d_idx <= self.as_of_day

    def reported_as_of(self, age_index: int) -> np.ndarray:
        """C(t, T - t) for t = 1..T-1: what is known today per event day."""
        cum = self.cumulative[age_index]
        out = np.zeros(self.as_of_day - 1)
        for t in range(1, self.as_of_day):
            d = min(self.as_of_day - t, self.d_max)
            out[t - 1] = cum[t - 1, d - 1]
        return out

    def final_counts(self, age_index: int) -> np.ndarray:
        """H(t) = C(t, d_max); only fully observed for t <= T - d_max."""
        return self.cumulative[age_index][:, -1]

    def date_of_day(self, t: int) -> date:
        return self.origin + timedelta(days=int(t) - 1)


def build_triangle(line_list: pd.DataFrame, as_of: date, d_max: int = 40,
                   origin: date | None = None,
                   age_groups: tuple[str, ...] = AGE_GROUPS) -> ReportingTriangle:
    """Count reported events into the (day, delay) triangle per age group.

    Delay is report minus admission in days, floored at 1; negative delays
    are rejected and delays beyond ``d_max`` excluded, with both tallied.
    Reports after ``as_of`` are not yet known and are ignored.
    """
    df = line_list
    admission = pd.to_datetime(df["admission_date"]).dt.date
    report = pd.to_datetime(df["registry_report_date"]).dt.date
    ages = df["age_group"].astype(str)
    if origin is None:
        origin = admission.min() if len(df) else as_of
    t_n = (as_of - origin).days + 1  # analysis day T has index t_n; day 1 = origin
    if t_n < 2:
        raise ValueError("as_of must be after the first admission day")
    counts = np.zeros((len(age_groups), t_n, d_max))
    age_index = {a: i for i, a in enumerate(age_groups)}
    rejected = 0
    beyond = 0
    for adm, rep, age in zip(admission, report, ages):
        if rep > as_of:
            continue
        delay = (rep - adm).days
        if delay < 0:
            rejected += 1
            continue
        delay = max(delay, 1)
        if delay > d_max:
            beyond += 1
            continue
        t = (adm - origin).days + 1
        if t < 1 or t > t_n:
            continue
        ai = age_index.get(str(age))
        if ai is None:
            raise ValueError(f"unknown age group {age!r}; expected one of {age_groups}")
        counts[ai, t - 1, delay - 1] += 1
    return ReportingTriangle(origin, t_n, d_max, tuple(age_groups), counts,
                             rejected_negative=rejected, beyond_dmax=beyond)


@dataclass
class DelayModelFit:
    """Sequential-binomial delay model with its prediction machinery.

    Prediction rows are encoded directly from the stored basis specs and the
    centering transform of the common delay smooth, so a deserialized model
    predicts identically to a live one.
    """

    beta: np.ndarray
    cov_model: np.ndarray
    names: list[str]
    origin: date
    as_of_day: int
    d_max: int
    age_groups: tuple[str, ...]
    z_delay: np.ndarray
    knot_spacing: int = 28
    delay_basis_dim: int = 8
    fit: FitResult | None = field(repr=False, default=None)

    def _specs(self):
        time_spec = TruncatedLinearSpec(knot_spacing=self.knot_spacing,
                                        domain=(1.0, float(self.as_of_day)))
        delay_spec = BSplineSpec(degree=3, num_basis=self.delay_basis_dim,
                                 domain=(2.0, float(self.d_max)), penalty_order=2)
        return time_spec, delay_spec

    def encode(self, t: np.ndarray, d: np.ndarray, age_index: int) -> np.ndarray:
        """Design rows for cells (t, d) of one age group, matching training order."""
        from .bases import evaluate_basis

        t = np.asarray(t, dtype=float)
        d = np.asarray(d, dtype=float)
        time_spec, delay_spec = self._specs()
        time_cols = evaluate_basis(time_spec, t)
        delay_raw = evaluate_basis(delay_spec, d)
        delay_cols = delay_raw @ self.z_delay
        byage_cols = delay_raw * float(age_index == 1)
        wd_t = np.array([(int(tt) - 1 + self.origin.weekday()) % 7 for tt in t])
        wd_r = np.array([(int(tt + dd) - 1 + self.origin.weekday()) % 7
                         for tt, dd in zip(t, d)])
        wk_event = np.zeros((t.size, 6))
        wk_report = np.zeros((t.size, 6))
        for i in range(t.size):
            if wd_t[i] > 0:  # Monday (0) is the reference
                wk_event[i, wd_t[i] - 1] = 1.0
            if wd_r[i] > 0:
                wk_report[i, wd_r[i] - 1] = 1.0
        return np.column_stack([
            np.ones(t.size), time_cols, delay_cols, byage_cols, wk_event, wk_report,
        ])

    def p_hat(self, t: np.ndarray, d: np.ndarray, age_index: int,
              beta: np.ndarray | None = None) -> np.ndarray:
        """Fitted conditional probabilities p(d | t, age) on the given cells."""
        x = self.encode(t, d, age_index)
        b = self.beta if beta is None else beta
        eta = np.clip(x @ b, -30.0, 30.0)
        return 1.0 / (1.0 + np.exp(-eta))

    def prediction_matrix(self, age_index: int, t_grid: np.ndarray) -> np.ndarray:
        """Design rows for the full (t, d=2..d_max) grid of one age group."""
        tt = np.repeat(t_grid, self.d_max - 1)
        dd = np.tile(np.arange(2, self.d_max + 1, dtype=float), t_grid.size)
        return self.encode(tt, dd, age_index)

    def effect_grids(self) -> dict[str, pd.DataFrame]:
        """Component curves on evaluation grids: calendar-time effect,
        common and 60+ delay effects, and both weekday coefficient sets."""
        from .bases import evaluate_basis

        time_spec, delay_spec = self._specs()
        t_grid = np.arange(1.0, self.as_of_day + 1.0)
        d_grid = np.arange(2.0, self.d_max + 1.0)
        cols = {n: i for i, n in enumerate(self.names)}

        time_cols = [i for n, i in cols.items() if n.startswith("time.")]
        time_curve = evaluate_basis(time_spec, t_grid) @ self.beta[time_cols]
        delay_cols = [i for n, i in cols.items() if n.startswith("delay.")]
        delay_curve = (evaluate_basis(delay_spec, d_grid) @ self.z_delay
                       ) @ self.beta[delay_cols]
        byage_cols = [i for n, i in cols.items() if n.startswith("delay_by_age.")]
        byage_curve = evaluate_basis(delay_spec, d_grid) @ self.beta[byage_cols]

        weekday_rows = []
        for prefix in ("weekday_event", "weekday_report"):
            weekday_rows.append({"weekday": "Mon", "which": prefix, "estimate": 0.0})
            for wd in WEEKDAYS[1:]:
                weekday_rows.append({
                    "weekday": wd, "which": prefix,
                    "estimate": float(self.beta[cols[f"{prefix}[{wd}]"]]),
                })
        return {
            "time_effect": pd.DataFrame({"t": t_grid.astype(int), "estimate": time_curve}),
            "delay_effect": pd.DataFrame({"d": d_grid.astype(int), "estimate": delay_curve}),
            "delay_effect_60plus": pd.DataFrame({"d": d_grid.astype(int),
                                                 "estimate": byage_curve}),
            "weekday_effects": pd.DataFrame(weekday_rows),
        }

    def to_json(self) -> str:
        doc = {
            "origin": self.origin.isoformat(),
            "as_of_day": self.as_of_day,
            "d_max": self.d_max,
            "age_groups": list(self.age_groups),
            "knot_spacing": self.knot_spacing,
            "delay_basis_dim": self.delay_basis_dim,
            "beta": self.beta.tolist(),
            "names": self.names,
            "cov_model": self.cov_model.ravel().tolist(),
            "z_delay": [row.tolist() for row in self.z_delay],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DelayModelFit":
        doc = json.loads(text)
        beta = np.asarray(doc["beta"], dtype=float)
        p = beta.size
        return cls(
            beta=beta,
            cov_model=np.asarray(doc["cov_model"], dtype=float).reshape(p, p),
            names=list(doc["names"]),
            origin=date.fromisoformat(doc["origin"]),
            as_of_day=int(doc["as_of_day"]),
            d_max=int(doc["d_max"]),
            age_groups=tuple(doc["age_groups"]),
            z_delay=np.asarray(doc["z_delay"], dtype=float),
            knot_spacing=int(doc["knot_spacing"]),
            delay_basis_dim=int(doc["delay_basis_dim"]),
        )


def _delay_design(triangle: ReportingTriangle, knot_spacing: int, delay_basis_dim: int):
    """Stack binomial rows over (age, t, d >= 2) cells with positive trials."""
    t_n, d_max = triangle.as_of_day, triangle.d_max
    cum = triangle.cumulative
    mask = triangle.mask()
    rows_t, rows_d, rows_age, succ, trials = [], [], [], [], []
    for ai in range(len(triangle.age_groups)):
        for d in range(2, d_max + 1):
            for t in range(1, t_n + 1):
                if not mask[t - 1, d - 1]:
                    continue
                c = cum[ai, t - 1, d - 1]
                if c <= 0:
                    continue
                rows_t.append(t)
                rows_d.append(d)
                rows_age.append(ai)
                succ.append(triangle.counts[ai, t - 1, d - 1])
                trials.append(c)
    if not rows_t:
        raise ValueError("empty delay model: no observed cells with positive trials")
    t_arr = np.array(rows_t, dtype=float)
    d_arr = np.array(rows_d, dtype=float)
    age_arr = np.array(rows_age)
    y = np.array(succ, dtype=float)
    m = np.array(trials, dtype=float)

    wd_t = [(triangle.origin + timedelta(days=int(t) - 1)).weekday() for t in t_arr]
    wd_r = [(triangle.origin + timedelta(days=int(t + d) - 1)).weekday()
            for t, d in zip(t_arr, d_arr)]

    time_spec = TruncatedLinearSpec(knot_spacing=knot_spacing, domain=(1.0, float(t_n)))
    delay_spec = BSplineSpec(degree=3, num_basis=delay_basis_dim,
                             domain=(2.0, float(d_max)), penalty_order=2)
    terms = [
        SmoothTerm("time", time_spec, t_arr, center=False),
        SmoothTerm("delay", delay_spec, d_arr, center=True),
        SmoothTerm("delay_by_age", delay_spec, d_arr,
                   by=(age_arr == 1).astype(float), by_name="delay_by_age__by",
                   center=False),
        FactorTerm("weekday_event", np.array([WEEKDAYS[w] for w in wd_t], dtype=object),
                   reference="Mon", levels=WEEKDAYS),
        FactorTerm("weekday_report", np.array([WEEKDAYS[w] for w in wd_r], dtype=object),
                   reference="Mon", levels=WEEKDAYS),
    ]
    spec = DesignSpec(terms=terms, intercept=True, trials=m)
    return spec, y


def fit_delay_model(triangle: ReportingTriangle, lam="select",
                    knot_spacing: int = 28, delay_basis_dim: int = 8) -> DelayModelFit:
    """Fit the sequential binomial delay model on the triangle's mask.

    Cells with delay 1 carry no information (p(1) = 1 by construction of the
    sequential decomposition) and are excluded from the likelihood.
    """
    spec, y = _delay_design(triangle, knot_spacing, delay_basis_dim)
    fit = fit_pirls(spec, y, Family.binomial(), lam=lam)
    z_delay = next(
        enc.transform for enc in fit.design.encoders
        if getattr(enc.term, "name", None) == "delay"
    )
    model = DelayModelFit(
        beta=fit.beta, cov_model=fit.cov_model, names=fit.names,
        origin=triangle.origin, as_of_day=triangle.as_of_day, d_max=triangle.d_max,
        age_groups=triangle.age_groups, z_delay=z_delay,
        knot_spacing=knot_spacing, delay_basis_dim=delay_basis_dim, fit=fit,
    )
    # the standalone encoder must reproduce the training design exactly
    check = min(fit.design.n, 50)
    t_chk = np.asarray(spec.terms[0].values[:check], dtype=float)
    d_chk = np.asarray(spec.terms[1].values[:check], dtype=float)
    by_chk = spec.terms[2].by[:check]
    rows = model.encode(t_chk, d_chk, 1)
    byage_cols = slice(1 + spec.terms[0].spec.num_basis + delay_basis_dim - 1,
                       1 + spec.terms[0].spec.num_basis + 2 * delay_basis_dim - 1)
    rows[:, byage_cols] *= by_chk[:, None]
    if not np.allclose(rows, fit.design.matrix[:check], atol=1e-10):
        raise AssertionError("delay-model encoder drifted from the training design")
    return model


def delay_cdf_grid(model: DelayModelFit, t_grid: np.ndarray, age_index: int,
                   beta: np.ndarray | None = None) -> np.ndarray:
    """F(d | t) for d = 1..d_max on the t grid: products of (1 - p) above d."""
    t_grid = np.asarray(t_grid, dtype=float)
    x = model.prediction_matrix(age_index, t_grid)
    b = model.beta if beta is None else beta
    eta = np.clip(x @ b, -30.0, 30.0)
    p = (1.0 / (1.0 + np.exp(-eta))).reshape(t_grid.size, model.d_max - 1)
    one_minus = 1.0 - p  # columns d = 2..d_max
    rev = np.cumprod(one_minus[:, ::-1], axis=1)[:, ::-1]
    f = np.ones((t_grid.size, model.d_max))
    f[:, :-1] = rev  # F(d) = prod_{k=d+1}^{d_max} (1 - p(k)) for d < d_max
    return f


def delay_cdf(model: DelayModelFit, t: int, age_index: int, d: int) -> float:
    if not (1 <= d <= model.d_max):
        raise ValueError(f"delay {d} outside 1..{model.d_max}")
    return float(delay_cdf_grid(model, np.array([t]), age_index)[0, d - 1])


def delay_pmf_from_p(p: np.ndarray) -> np.ndarray:
    """Implied pmf over delays 1..d_max from p(2..d_max); p(1) = 1.

    P(D = d) = p(d) * F(d) with F(d) the product of (1 - p) above d.
    """
    p_full = np.concatenate([[1.0], np.asarray(p, dtype=float)])
    d_max = p_full.size
    f = np.ones(d_max)
    f[:-1] = np.cumprod((1.0 - p_full[1:])[::-1])[::-1]
    return p_full * f


@dataclass
class NowcastResult:
    dates: list[date]
    age_group: list[str]
    reported: np.ndarray
    f_hat: np.ndarray
    nowcast: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    unstable: np.ndarray
    n_bootstrap: int = 0

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame({
            "date": [d.isoformat() for d in self.dates],
            "age_group": self.age_group,
            "reported": self.reported,
            "F_hat": self.f_hat,
            "nowcast": self.nowcast,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "unstable": self.unstable.astype(int),
        })
        for col, src in (("rolling7_reported", "reported"), ("rolling7_nowcast", "nowcast"),
                         ("rolling7_ci_lo", "ci_lo"), ("rolling7_ci_hi", "ci_hi")):
            df[col] = (
                df.groupby("age_group")[src].transform(lambda s: s.rolling(7).sum())
            )
        return df


def nowcast_point(triangle: ReportingTriangle, model: DelayModelFit) -> NowcastResult:
    """Point nowcasts H(t) = C(t, T-t) / F(T-t) for t = 1..T-1.

    Days old enough that the full delay window is observed pass through
    unchanged (F = 1); cells with F below 0.01 are flagged unstable.
    """
    t_n = triangle.as_of_day
    dates, age_col, rep_col, f_col, now_col, flag_col = [], [], [], [], [], []
    for ai, age in enumerate(triangle.age_groups):
        reported = triangle.reported_as_of(ai)
        t_grid = np.arange(1, t_n, dtype=float)
        f_grid = delay_cdf_grid(model, t_grid, ai)
        for t in range(1, t_n):
            d = t_n - t
            if d >= triangle.d_max:
                f_val = 1.0
            else:
                f_val = f_grid[t - 1, d - 1]
            c_val = reported[t - 1]
            dates.append(triangle.date_of_day(t))
            age_col.append(age)
            rep_col.append(c_val)
            f_col.append(f_val)
            now_col.append(c_val / f_val if f_val > 0 else np.inf)
            flag_col.append(f_val < 0.01)
    if any(flag_col):
        warnings.warn("some nowcasts are unstable: delay mass essentially unobserved",
                      stacklevel=2)
    return NowcastResult(
        dates=dates, age_group=age_col, reported=np.array(rep_col),
        f_hat=np.array(f_col), nowcast=np.array(now_col),
        ci_lo=np.array(now_col), ci_hi=np.array(now_col),
        unstable=np.array(flag_col, dtype=bool),
    )


def bootstrap_ci(triangle: ReportingTriangle, model: DelayModelFit,
                 n_boot: int = 1000, seed: int = 0, level: float = 0.95,
                 draw_remainder: bool = False) -> NowcastResult:
    """Parametric bootstrap intervals for the nowcasts.

    Coefficients are drawn from N(beta_hat, V_hat) (eigenvalue-clipped if
    V_hat is not PSD) and F and H recomputed per draw.  With
    ``draw_remainder`` the not-yet-reported remainder is additionally drawn
    from its flat-prior predictive H - C | C ~ NegBin(C + 1, F), widening
    the interval into a prediction interval for the realized total.
    """
    if n_boot < 200:
        raise ValueError("need at least 200 bootstrap draws")
    result = nowcast_point(triangle, model)
    cov = model.cov_model
    eigval, eigvec = np.linalg.eigh((cov + cov.T) / 2.0)
    if eigval.min() < -1e-10 * max(eigval.max(), 1.0):
        warnings.warn("covariance clipped to PSD for the bootstrap", stacklevel=2)
    eigval = np.clip(eigval, 0.0, None)
    root = eigvec * np.sqrt(eigval)[None, :]
    rng = substream(seed, "nowcast-bootstrap")
    draws = model.beta[None, :] + rng.standard_normal((n_boot, cov.shape[0])) @ root.T

    t_n = triangle.as_of_day
    alpha = (1.0 - level) / 2.0
    lo_col, hi_col = [], []
    for ai in range(len(triangle.age_groups)):
        reported = triangle.reported_as_of(ai)
        t_grid = np.arange(1, t_n, dtype=float)
        x_pred = model.prediction_matrix(ai, t_grid)
        eta_all = np.clip(x_pred @ draws.T, -30.0, 30.0)  # (cells, n_boot)
        p_all = 1.0 / (1.0 + np.exp(-eta_all))
        p_all = p_all.reshape(t_grid.size, model.d_max - 1, n_boot)
        one_minus = 1.0 - p_all
        rev = np.cumprod(one_minus[:, ::-1, :], axis=1)[:, ::-1, :]
        f_all = np.ones((t_grid.size, model.d_max, n_boot))
        f_all[:, :-1, :] = rev
        h_draws = np.empty((t_grid.size, n_boot))
        for t in range(1, t_n):
            d = t_n - t
            c_val = reported[t - 1]
            if d >= triangle.d_max:
                h_draws[t - 1, :] = c_val
            else:
                f_b = np.clip(f_all[t - 1, d - 1, :], 1e-12, 1.0)
                if draw_remainder:
                    h_draws[t - 1, :] = c_val + rng.negative_binomial(c_val + 1.0, f_b)
                else:
                    h_draws[t - 1, :] = c_val / f_b
        lo = np.quantile(h_draws, alpha, axis=1)
        hi = np.quantile(h_draws, 1.0 - alpha, axis=1)
        lo_col.append(lo)
        hi_col.append(hi)

    lo_all = np.concatenate(lo_col)
    hi_all = np.concatenate(hi_col)
    result.ci_lo = np.minimum(lo_all, result.nowcast)
    result.ci_hi = np.maximum(hi_all, result.nowcast)
    result.n_bootstrap = n_boot
    return result
