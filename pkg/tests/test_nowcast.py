import math
from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epigam.design import RankDeficiencyError
from epigam.nowcast import (
    AGE_GROUPS,
    DelayModelFit,
    build_triangle,
    bootstrap_ci,
    delay_cdf,
    delay_cdf_grid,
    delay_pmf_from_p,
    fit_delay_model,
    impute_admission_dates,
    nowcast_point,
)
from epigam.rng import substream
from epigam.synth import NowcastScenario, simulate_nowcast_linelist


def linelist(rows):
    return pd.DataFrame(rows, columns=[
        "case_id", "admission_date", "infection_report_date", "registry_report_date",
        "age_group", "gender", "district",
    ])


def day(t):
    return (date(2021, 10, 1) + timedelta(days=t - 1)).isoformat()


class TestTriangle:
    def test_empty_line_list(self):
        tri = build_triangle(linelist([]), as_of=date(2021, 10, 5), d_max=3,
                             origin=date(2021, 10, 1))
        assert tri.counts.shape == (2, 5, 3)
        assert tri.counts.sum() == 0

    def test_worked_example_counts(self):
        # events (t, d): (1,1), (1,1), (1,3), (2,2); T = 4, d_max = 3
        rows = [
            ("a", day(1), day(1), day(2), "0-59", "m", "x"),
            ("b", day(1), day(1), day(2), "0-59", "m", "x"),
            ("c", day(1), day(1), day(4), "0-59", "m", "x"),
            ("d", day(2), day(2), day(4), "0-59", "m", "x"),
        ]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 4), d_max=3,
                             origin=date(2021, 10, 1))
        assert tri.as_of_day == 4
        assert tri.counts[0, 0].tolist() == [2.0, 0.0, 1.0]
        cum = tri.cumulative
        assert cum[0, 0, 2] == 3.0  # C(1, 3) = H(1), fully observed
        assert cum[0, 1, 1] == 1.0  # C(2, 2); H(2) not yet observed
        assert not tri.mask()[1, 2]  # cell (t=2, d=3) outside the mask

        # independent brute-force count over the raw records
        brute = np.zeros((4, 3))
        for _, adm, _, rep, *_ in rows:
            delay = (date.fromisoformat(rep) - date.fromisoformat(adm)).days
            t = (date.fromisoformat(adm) - date(2021, 10, 1)).days + 1
            if t + delay <= 4:
                brute[t - 1, delay - 1] += 1
        assert np.array_equal(tri.counts[0] * tri.mask(), brute * tri.mask())

    def test_same_day_report_maps_to_delay_one(self):
        rows = [("a", day(1), day(1), day(1), "0-59", "m", "x")]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 3), d_max=3,
                             origin=date(2021, 10, 1))
        assert tri.counts[0, 0, 0] == 1.0

    def test_negative_delay_rejected(self):
        rows = [("a", day(3), day(3), day(1), "0-59", "m", "x"),
                ("b", day(1), day(1), day(2), "0-59", "m", "x")]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 5), d_max=3,
                             origin=date(2021, 10, 1))
        assert tri.rejected_negative == 1
        assert tri.counts.sum() == 1.0

    def test_delays_beyond_dmax_excluded(self):
        rows = [("a", day(1), day(1), day(10), "0-59", "m", "x")]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 12), d_max=3,
                             origin=date(2021, 10, 1))
        assert tri.beyond_dmax == 1
        assert tri.counts.sum() == 0.0

    def test_all_delays_at_dmax(self):
        rows = [("a", day(t), day(t), day(t + 3), "0-59", "m", "x") for t in (1, 2, 3)]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 7), d_max=3,
                             origin=date(2021, 10, 1))
        cum = tri.cumulative[0]
        assert np.all(cum[:3, :2] == 0.0)
        assert np.all(cum[:3, 2] == 1.0)


class TestImputation:
    def test_identity_when_complete(self):
        rows = [("a", day(1), day(1), day(2), "0-59", "m", "x")]
        result = impute_admission_dates(linelist(rows))
        assert result.imputed == 0
        assert result.dropped == 0

    def test_missing_admission_filled_from_infection_date(self):
        rows = [("a", None, "2021-10-01", day(5), "0-59", "m", "x")]
        result = impute_admission_dates(linelist(rows))
        assert result.imputed == 1
        assert result.line_list["admission_date"].iloc[0] == pd.Timestamp("2021-10-01")

    def test_missing_both_dates_dropped(self):
        rows = [("a", None, None, day(5), "0-59", "m", "x"),
                ("b", None, None, day(6), "0-59", "m", "x")]
        result = impute_admission_dates(linelist(rows))
        assert result.dropped == 2
        assert len(result.line_list) == 0


class TestDelayCdf:
    def test_worked_example(self):
        # d_max = 3, p(2) = 0.25, p(3) = 0.5
        pmf = delay_pmf_from_p(np.array([0.25, 0.5]))
        f = np.cumsum(pmf)
        assert f.tolist() == [0.375, 0.5, 1.0]
        assert pmf[1] == 0.125  # P(D = 2) = p(2) F(2)
        assert pmf.sum() == 1.0

    def test_zero_p_gives_unit_cdf(self):
        pmf = delay_pmf_from_p(np.zeros(4))
        assert np.cumsum(pmf).tolist() == [1.0, 1.0, 1.0, 1.0, 1.0]

    @given(st.lists(st.floats(0.0, 0.999), min_size=1, max_size=39),
           st.integers(0, 10_000))
    @settings(max_examples=200, deadline=None)
    def test_pmf_sums_to_one(self, p_list, jitter):
        rng = np.random.default_rng(jitter)
        p = np.clip(np.asarray(p_list) + rng.uniform(0, 1e-3, len(p_list)), 0.0, 0.999)
        pmf = delay_pmf_from_p(p)
        assert abs(pmf.sum() - 1.0) < 1e-10
        assert np.all(pmf >= 0)


@pytest.fixture(scope="module")
def fitted_scenario():
    scenario = NowcastScenario(n_days=60, d_max=20, daily_level=500.0)
    line_list, truth = simulate_nowcast_linelist(scenario, seed=510)
    triangle = build_triangle(
        line_list, as_of=date.fromisoformat(truth["as_of"]), d_max=scenario.d_max,
        origin=date.fromisoformat(truth["start"]),
    )
    model = fit_delay_model(triangle)
    return scenario, line_list, truth, triangle, model


class TestDelayModel:
    def test_internal_triangle_round_trip(self, fitted_scenario):
        _, _, truth, triangle, _ = fitted_scenario
        internal = np.array(truth["triangle_internal"])[:, :triangle.as_of_day, :]
        mask = triangle.mask()[None, :, :]
        assert np.array_equal(triangle.counts * mask, internal * mask)

    def test_cdf_monotone_and_one_at_dmax(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        f = delay_cdf_grid(model, np.arange(1.0, triangle.as_of_day), 0)
        assert np.all(np.diff(f, axis=1) >= -1e-12)
        assert np.allclose(f[:, -1], 1.0)
        assert delay_cdf(model, 10, 0, model.d_max) == 1.0

    def test_cdf_close_to_truth(self, fitted_scenario):
        scenario, _, truth, triangle, model = fitted_scenario
        t_eval = triangle.as_of_day - 1
        for age in (0, 1):
            f_true = np.array(truth["true_cdf_last_day"][age])
            f_hat = delay_cdf_grid(model, np.array([float(t_eval)]), age)[0]
            assert np.max(np.abs(f_hat[4:] - f_true[4:])) < 0.06

    def test_constant_p_recovers_intercept_and_kills_smooths(self):
        rng = substream(60, "nowcast-test")
        d_max, t_n = 15, 50
        p_true = 0.2
        counts = np.zeros((2, t_n, d_max))
        # build a triangle whose conditional proportions are Binomial(C, 0.2)
        for ai in range(2):
            for t in range(1, t_n + 1):
                h = 400
                remaining = h
                for d in range(d_max, 1, -1):
                    pass
                # sequential draw: start from cumulative at d_max and walk down
                c = np.zeros(d_max + 1)
                c[d_max] = h
                for d in range(d_max, 1, -1):
                    n_d = rng.binomial(int(c[d]), p_true)
                    counts[ai, t - 1, d - 1] = n_d
                    c[d - 1] = c[d] - n_d
                counts[ai, t - 1, 0] = c[1]
        from epigam.nowcast import ReportingTriangle

        tri = ReportingTriangle(date(2021, 1, 1), t_n, d_max, AGE_GROUPS, counts)
        model = fit_delay_model(tri)
        intercept = model.beta[model.names.index("(Intercept)")]
        assert abs(intercept - math.log(p_true / (1 - p_true))) < 0.08
        # smooth blocks shrink toward their penalty null spaces
        fit = model.fit
        assert fit.edf["delay"] < 3.0
        assert fit.edf["delay_by_age"] < 3.0
        # and the fitted surface is flat: no spurious delay or time structure
        for age in (0, 1):
            p_grid = model.p_hat(
                np.repeat(np.arange(5.0, t_n - 5.0, 4.0), d_max - 1),
                np.tile(np.arange(2.0, d_max + 1.0), len(np.arange(5.0, t_n - 5.0, 4.0))),
                age,
            )
            assert np.max(np.abs(p_grid - p_true)) < 0.04

    def test_single_day_rank_deficient(self):
        rows = [("a", day(1), day(1), day(2), "0-59", "m", "x"),
                ("b", day(1), day(1), day(3), "0-59", "m", "x"),
                ("c", day(1), day(1), day(4), "60+", "m", "x")]
        tri = build_triangle(linelist(rows), as_of=date(2021, 10, 30), d_max=5,
                             origin=date(2021, 10, 1))
        with pytest.raises((RankDeficiencyError, ValueError)):
            fit_delay_model(tri, lam=0.0)

    def test_age_interaction_detected(self):
        scenario = NowcastScenario(n_days=60, d_max=20, daily_level=600.0,
                                   age_shift=-0.5)
        line_list, truth = simulate_nowcast_linelist(scenario, seed=61)
        tri = build_triangle(line_list, as_of=date.fromisoformat(truth["as_of"]),
                             d_max=scenario.d_max,
                             origin=date.fromisoformat(truth["start"]))
        model = fit_delay_model(tri)
        cols = [i for i, n in enumerate(model.names) if n.startswith("delay_by_age.")]
        wald = model.beta[cols] @ np.linalg.solve(
            model.cov_model[np.ix_(cols, cols)], model.beta[cols]
        )
        from scipy import stats

        assert stats.chi2.sf(wald, len(cols)) < 0.01

    def test_serialization_round_trip(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        restored = DelayModelFit.from_json(model.to_json())
        t = np.arange(1.0, triangle.as_of_day, dtype=float)
        for age in (0, 1):
            a = delay_cdf_grid(model, t, age)
            b = delay_cdf_grid(restored, t, age)
            assert np.array_equal(a, b)

    def test_effect_grids_cover_all_components(self, fitted_scenario):
        scenario, _, _, triangle, model = fitted_scenario
        grids = model.effect_grids()
        assert len(grids["time_effect"]) == triangle.as_of_day
        assert len(grids["delay_effect"]) == model.d_max - 1
        assert len(grids["delay_effect_60plus"]) == model.d_max - 1
        wk = grids["weekday_effects"]
        assert len(wk) == 14  # both weekday sets, Monday pinned at zero
        assert (wk.loc[wk["weekday"] == "Mon", "estimate"] == 0.0).all()
        # the common delay effect falls with d, mirroring the generating law
        curve = grids["delay_effect"]["estimate"].to_numpy()
        assert curve[0] > curve[-1]


class TestNowcastPoint:
    def test_point_is_reported_over_cdf(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        frame = nowcast_point(triangle, model).frame()
        ratio = frame["reported"] / frame["F_hat"]
        assert np.allclose(frame["nowcast"], ratio, atol=1e-9)
        # worked inversion: a cell reporting 30 with F = 0.375 nowcasts to 80
        assert 30.0 / 0.375 == 80.0

    def test_age_groups_sum_to_overall_series(self, fitted_scenario):
        _, _, truth, triangle, model = fitted_scenario
        frame = nowcast_point(triangle, model).frame()
        overall = frame.groupby("date")["nowcast"].sum()
        per_age = [g["nowcast"].to_numpy() for _, g in frame.groupby("age_group")]
        assert np.allclose(overall.to_numpy(), per_age[0] + per_age[1])

    def test_old_days_pass_through(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        frame = nowcast_point(triangle, model).frame()
        t_n = triangle.as_of_day
        sub = frame.iloc[:t_n - 1 - model.d_max]  # first age group, oldest days
        assert np.allclose(sub["F_hat"], 1.0)
        assert np.allclose(sub["nowcast"], sub["reported"])

    def test_nowcast_at_least_reported(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        frame = nowcast_point(triangle, model).frame()
        assert np.all(frame["nowcast"] >= frame["reported"] - 1e-9)

    def test_point_accuracy_last_14_days(self, fitted_scenario):
        _, _, truth, triangle, model = fitted_scenario
        frame = nowcast_point(triangle, model).frame()
        h_true = np.array(truth["h_true"])
        t_n = triangle.as_of_day
        for ai, age in enumerate(triangle.age_groups):
            sub = frame[frame["age_group"] == age]
            hh = sub["nowcast"].to_numpy()
            tt = np.arange(1, t_n)
            sel = tt >= t_n - 14
            total_err = abs(hh[sel].sum() - h_true[ai][sel].sum()) / h_true[ai][sel].sum()
            assert total_err < 0.1

    def test_unstable_flag(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        res = nowcast_point(triangle, model)
        flagged = res.unstable
        assert flagged.dtype == bool  # flag exists; tiny F cells may or may not occur


class TestBootstrap:
    def test_zero_covariance_collapses(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        frozen = DelayModelFit.from_json(model.to_json())
        frozen.cov_model = np.zeros_like(frozen.cov_model)
        res = bootstrap_ci(triangle, frozen, n_boot=200, seed=1, draw_remainder=False)
        assert np.abs(res.ci_lo - res.nowcast).max() < 1e-9
        assert np.abs(res.ci_hi - res.nowcast).max() < 1e-9

    def test_quantile_stability_in_draw_count(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        res_1k = bootstrap_ci(triangle, model, n_boot=1000, seed=2)
        res_5k = bootstrap_ci(triangle, model, n_boot=5000, seed=2)
        width_1k = res_1k.ci_hi - res_1k.ci_lo
        width_5k = res_5k.ci_hi - res_5k.ci_lo
        scale = np.maximum(res_1k.nowcast, 10.0)
        assert np.median(np.abs(width_1k - width_5k) / scale) < 0.05

    def test_minimum_draws_enforced(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        with pytest.raises(ValueError, match="200"):
            bootstrap_ci(triangle, model, n_boot=50, seed=1)

    def test_ci_contains_point_and_orders(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        res = bootstrap_ci(triangle, model, n_boot=300, seed=3, draw_remainder=True)
        assert np.all(res.ci_lo <= res.nowcast + 1e-9)
        assert np.all(res.nowcast <= res.ci_hi + 1e-9)

    def test_deterministic_under_seed(self, fitted_scenario):
        _, _, _, triangle, model = fitted_scenario
        a = bootstrap_ci(triangle, model, n_boot=250, seed=9)
        b = bootstrap_ci(triangle, model, n_boot=250, seed=9)
        assert np.array_equal(a.ci_lo, b.ci_lo)
        assert np.array_equal(a.ci_hi, b.ci_hi)
