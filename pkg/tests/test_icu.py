import numpy as np
import pandas as pd
import pytest

from epigam.icu import (
    IcuPanel,
    NormalizationError,
    VARIANTS,
    build_icu_design,
    coefficient_table,
    fit_icu_model,
    normalize,
    panel_from_frames,
    rolling_forecast,
    score_frame,
    score_table,
)
from epigam.multinomial import log_score
from epigam.rng import substream
from epigam.synth import IcuScenario, simulate_icu_scenario


def make_panel(n_districts=30, n_weeks=20, seed=9, **kwargs):
    scenario = IcuScenario(n_districts=n_districts, n_weeks=n_weeks, **kwargs)
    icu_df, inc_df, coords_df, truth = simulate_icu_scenario(scenario, seed=seed)
    return panel_from_frames(icu_df, inc_df, coords_df), truth, scenario


class TestNormalize:
    def test_worked_example(self):
        z, stats = normalize([1.0, 2.0, 3.0])
        assert np.allclose(z, [-1.224744871391589, 0.0, 1.224744871391589])
        assert stats.mean == 2.0
        assert stats.sd == pytest.approx(np.sqrt(2.0 / 3.0))

    def test_idempotent_on_standardized_input(self):
        rng = substream(70, "icu-test")
        x = rng.normal(size=200)
        z, _ = normalize(x)
        z2, stats2 = normalize(z)
        assert np.abs(z2 - z).max() < 1e-12
        assert abs(stats2.mean) < 1e-12
        assert stats2.sd == pytest.approx(1.0, abs=1e-12)

    def test_constant_vector_rejected(self):
        with pytest.raises(NormalizationError):
            normalize([5.0, 5.0, 5.0])

    def test_round_trip_statistics(self):
        rng = substream(71, "icu-test")
        x = rng.uniform(3, 9, 50)
        z, stats = normalize(x)
        z_again = stats.apply(x)
        assert np.abs(z_again - z).max() < 1e-12
        assert abs(z.mean()) < 1e-12
        assert np.sqrt(np.mean(z**2)) == pytest.approx(1.0, abs=1e-12)


class TestPanelIngestion:
    def test_week_gap_error_lists_missing(self):
        icu_df = pd.DataFrame({
            "week": ["2021-W01", "2021-W01", "2021-W04", "2021-W04"],
            "district": ["a", "b", "a", "b"],
            "beds_free": [5, 5, 5, 5], "beds_covid": [2, 2, 2, 2],
            "beds_noncovid": [3, 3, 3, 3],
        })
        inc_df = pd.DataFrame({
            "week": ["2021-W01"], "district": ["a"], "age_group": ["15-34"],
            "incidence_per_100k": [10.0],
        })
        coords = pd.DataFrame({"district": ["a", "b"], "lon": [1.0, 2.0], "lat": [3.0, 4.0]})
        with pytest.raises(ValueError, match="missing week"):
            panel_from_frames(icu_df, inc_df, coords)

    def test_average_counts_rounded_half_even(self):
        icu_df = pd.DataFrame({
            "week": ["1", "2"], "district": ["a", "a"],
            "beds_free": [2.5, 3.5], "beds_covid": [1.0, 1.0], "beds_noncovid": [0.0, 0.0],
        })
        inc_df = pd.DataFrame({
            "week": ["1"], "district": ["a"], "age_group": ["15-34"],
            "incidence_per_100k": [5.0],
        })
        coords = pd.DataFrame({"district": ["a"], "lon": [1.0], "lat": [2.0]})
        panel = panel_from_frames(icu_df, inc_df, coords)
        assert panel.beds[0, 0, 0] == 2  # 2.5 rounds to even
        assert panel.beds[1, 0, 0] == 4  # 3.5 rounds to even


class TestDesign:
    def test_share_arithmetic(self):
        panel, _, _ = make_panel(n_districts=4, n_weeks=5)
        res = build_icu_design(panel)
        w, r = 1, 2
        row = res.rows.iloc[(w - 1) * 4 + r]
        n_prev = panel.beds[w - 1, r].sum()
        assert row["share_free"] == pytest.approx(panel.beds[w - 1, r, 0] / n_prev)
        assert row["share_covid"] == pytest.approx(panel.beds[w - 1, r, 1] / n_prev)

    def test_row_count_two_districts_three_weeks(self):
        panel, _, _ = make_panel(n_districts=2, n_weeks=3)
        res = build_icu_design(panel, spatial_rank=4)
        assert len(res.rows) == 4  # weeks 2..3 x 2 districts
        assert res.data.counts.shape == (4, 3)

    def test_zero_incidence_gives_zero_log_lag(self):
        panel, _, _ = make_panel(n_districts=3, n_weeks=4)
        panel.incidence[1, 0, 0] = 0.0
        res = build_icu_design(panel)
        # the week-3 row for district 0 lags week 2: log(0 + 1) = 0 raw
        row = res.rows[(res.rows["week"] == panel.weeks[2])
                       & (res.rows["district"] == panel.districts[0])]
        assert row["loginc[15-34]"].iloc[0] == 0.0

    def test_all_zero_incidence_column_dropped(self):
        panel, _, _ = make_panel(n_districts=3, n_weeks=4)
        panel.incidence[:] = 0.0
        with pytest.warns(UserWarning, match="constant covariates"):
            res = build_icu_design(panel)
        assert all(c.startswith("loginc") for c in res.dropped_covariates)

    def test_reference_category_is_covid(self):
        panel, _, _ = make_panel(n_districts=4, n_weeks=5)
        res = build_icu_design(panel)
        assert res.data.categories[res.data.reference] == "covid"

    def test_variant_term_sets(self):
        panel, _, _ = make_panel(n_districts=6, n_weeks=6)
        full = build_icu_design(panel, variant="full")
        no_ar = build_icu_design(panel, variant="no_ar")
        no_inf = build_icu_design(panel, variant="no_infection")
        linear = build_icu_design(panel, variant="linear")
        inter = build_icu_design(panel, variant="intercept_only")
        names = lambda r: set(r.data.design.names)
        assert "share_free" in names(full) and "share_free" not in names(no_ar)
        assert any(n.startswith("loginc") for n in names(full))
        assert not any(n.startswith("loginc") for n in names(no_inf))
        assert not any(n.startswith(("lonlat.", "district[RE:")) for n in names(linear))
        assert names(inter) == {"(Intercept)"}

    def test_trials_equal_bed_totals(self):
        panel, _, _ = make_panel(n_districts=4, n_weeks=5)
        res = build_icu_design(panel)
        expected = panel.beds[1:, :, :].sum(axis=2).reshape(-1)
        assert np.array_equal(res.data.trials, expected)


class TestFit:
    def test_sign_recovery_of_incidence_effects(self):
        panel, truth, _ = make_panel(n_districts=60, n_weeks=30, seed=91,
                                     incidence_coef=(-1.6, -1.2), incidence_noise=0.6)
        res = build_icu_design(panel)
        fit = fit_icu_model(res, lam=1.0)
        tab = coefficient_table(fit)
        inc_rows = tab[tab["covariate"].str.startswith("loginc")]
        assert (inc_rows["estimate"] < 0).all()
        assert (inc_rows["ci_hi"] < 0).all()  # CIs exclude zero

    def test_parameter_recovery_within_sandwich_se(self):
        within = total = 0
        for rep in range(100):
            panel, truth, _ = make_panel(n_districts=100, n_weeks=30, seed=400 + rep)
            res = build_icu_design(panel)
            fit = fit_icu_model(res, lam=1.0)
            tab = coefficient_table(fit)
            for j, cat in enumerate(("free", "noncovid")):
                sub = tab[tab["logit"] == f"{cat}_vs_covid"].set_index("covariate")
                checks = {
                    "share_free": truth["ar_free"][j],
                    "share_covid": truth["ar_covid"][j],
                    **{f"loginc[{a}]": truth["incidence_coef_per_age"][j]
                       for a in ("15-34", "35-59", "60-79", "80+")},
                }
                for cov, raw_true in checks.items():
                    st = res.stats[cov]
                    est = sub.loc[cov, "estimate"] / st.sd
                    se = sub.loc[cov, "se_sandwich"] / st.sd
                    within += int(abs(est - raw_true) <= 3 * se)
                    total += 1
        assert within / total >= 0.95

    def test_symmetric_data_zero_intercepts(self):
        rng = substream(72, "icu-test")
        weeks, districts = 10, 12
        beds = rng.multinomial(30, [1 / 3] * 3, size=(weeks, districts))
        incidence = np.exp(rng.normal(3.0, 0.4, size=(weeks, districts, 4)))
        coords = np.column_stack([rng.uniform(0, 5, districts), rng.uniform(0, 5, districts)])
        panel = IcuPanel(tuple(range(1, weeks + 1)),
                         tuple(f"d{i}" for i in range(districts)),
                         beds, incidence, ("15-34", "35-59", "60-79", "80+"), coords)
        res = build_icu_design(panel, variant="intercept_only")
        fit = fit_icu_model(res, lam=0.0)
        assert np.abs(fit.beta).max() < 0.1

    def test_displacement_covariances_negative(self):
        panel, _, _ = make_panel(n_districts=10, n_weeks=8)
        res = build_icu_design(panel)
        fit = fit_icu_model(res, lam=1.0)
        n_i = res.data.trials
        for k in range(3):
            for l in range(k + 1, 3):
                cov_kl = -n_i * fit.probs[:, k] * fit.probs[:, l]
                assert np.all(cov_kl < 0)


class TestInSampleNesting:
    def test_unpenalized_nested_models_order_in_sample(self):
        # at lam = 0 only the unpenalized terms are estimable (the random
        # intercepts sum to the intercept column); richer nested designs can
        # never score worse in sample
        from epigam.design import DesignSpec, LinearTerm, build_design
        from epigam.multinomial import MultinomialData, fit_multinomial

        panel, _, _ = make_panel(n_districts=20, n_weeks=12)
        base = build_icu_design(panel, variant="linear")
        rows = base.rows
        counts = base.data.counts
        covs = ["share_free", "share_covid"] + [f"loginc[{a}]"
                                                for a in panel.incidence_ages]

        def in_sample_score(columns):
            terms = [LinearTerm(c, base.stats[c].apply(rows[c].to_numpy()))
                     for c in columns]
            design = build_design(DesignSpec(terms=terms), n_rows=len(rows))
            data = MultinomialData(counts, design, reference=1,
                                   categories=("free", "covid", "noncovid"))
            fit = fit_multinomial(data, lam=0.0)
            return float(log_score(fit.probs, counts).sum())

        full = in_sample_score(covs)
        ar_only = in_sample_score(covs[:2])
        inc_only = in_sample_score(covs[2:])
        intercept = in_sample_score([])
        assert full <= ar_only + 1e-8
        assert full <= inc_only + 1e-8
        assert ar_only <= intercept + 1e-8
        assert inc_only <= intercept + 1e-8


class TestRollingForecast:
    def test_window_longer_than_panel_rejected(self):
        panel, _, _ = make_panel(n_districts=4, n_weeks=8)
        with pytest.raises(ValueError, match="at least"):
            rolling_forecast(panel, window=8)

    def test_probabilities_and_determinism(self):
        panel, _, _ = make_panel(n_districts=8, n_weeks=14)
        recs = rolling_forecast(panel, window=8, variants=("full", "intercept_only"))
        for rec in recs:
            if rec.probs.size:
                assert np.abs(rec.probs.sum(axis=1) - 1.0).max() < 1e-10
                assert rec.probs.min() > 0
        frame_a = score_frame(recs)
        frame_b = score_frame(rolling_forecast(panel, window=8,
                                               variants=("full", "intercept_only")))
        pd.testing.assert_frame_equal(frame_a, frame_b)

    def test_no_signal_null_simulation(self):
        # iid occupancy: the full model has nothing to exploit over the intercept
        rng = substream(73, "icu-test")
        weeks, districts = 16, 15
        pi = np.array([0.45, 0.2, 0.35])
        beds = rng.multinomial(35, pi, size=(weeks, districts))
        incidence = np.exp(rng.normal(3.0, 0.3, size=(weeks, districts, 4)))
        coords = np.column_stack([rng.uniform(0, 5, districts), rng.uniform(0, 5, districts)])
        panel = IcuPanel(tuple(range(1, weeks + 1)),
                         tuple(f"d{i}" for i in range(districts)),
                         beds, incidence, ("15-34", "35-59", "60-79", "80+"), coords)
        recs = rolling_forecast(panel, window=8, variants=("full", "intercept_only"))
        wide = score_frame(recs).pivot(index="week", columns="variant", values="score")
        diff = wide["full"] - wide["intercept_only"]
        se = diff.std(ddof=1) / np.sqrt(len(diff))
        assert abs(diff.mean()) < 3 * max(se, 1e-9) + 1.0

    def test_signal_simulation_orders_variants(self):
        panel, _, _ = make_panel(n_districts=40, n_weeks=24, seed=92)
        recs = rolling_forecast(panel, window=8)
        tab = score_table(recs, n_perm=999, seed=5).set_index("variant")
        full = tab.loc["full", "average_score"]
        inter = tab.loc["intercept_only", "average_score"]
        for mid in ("no_ar", "no_infection", "linear"):
            assert full < tab.loc[mid, "average_score"] < inter

    def test_score_table_columns(self):
        panel, _, _ = make_panel(n_districts=6, n_weeks=12)
        recs = rolling_forecast(panel, window=8, variants=VARIANTS)
        tab = score_table(recs, n_perm=99, seed=1)
        assert list(tab.columns) == ["variant", "omitted_effects", "average_score", "p_value"]
        assert set(tab["variant"]) == set(VARIANTS)
        assert tab.loc[tab["variant"] == "full", "p_value"].iloc[0] == ""


def test_weekly_score_is_sum_of_district_scores():
    rng = substream(74, "icu-test")
    probs = rng.dirichlet([2, 2, 2], size=6)
    counts = np.array([rng.multinomial(20, p) for p in probs], dtype=float)
    per_row = log_score(probs, counts)
    assert per_row.shape == (6,)
    assert np.isfinite(per_row).all()
