import math

import numpy as np
import pytest

from epigam.design import RankDeficiencyError, build_design
from epigam.glm import fit_negative_binomial
from epigam.infection import (
    CdrConfig,
    InfectionParams,
    PopulationTable,
    SimulationExplosionError,
    WeeklyPanel,
    apply_capacity_thinning,
    apply_cdr_thinning,
    beta_inverse_moment,
    build_infection_design,
    cdr_invariance_report,
    coefficient_table,
    default_study_params,
    expected_intercept_shift,
    fit_infection_model,
    lag_coefficients,
    run_cdr_study,
    simulate_infection_panel,
)
from epigam.rng import substream


def small_pop(r=3, a=2, value=2e4):
    return PopulationTable(
        districts=tuple(f"d{i}" for i in range(r)),
        age_groups=tuple(f"g{i}" for i in range(a)),
        pop=np.full((r, a), value),
    )


class TestDesign:
    def test_zero_lags_give_zero_covariates(self):
        pop = small_pop()
        counts = np.zeros((3, 3, 2))
        counts[1:] = 5
        panel = WeeklyPanel((1, 2, 3), pop.districts, pop.age_groups, counts)
        spec, y, groups = build_infection_design(panel, pop, 0, delta=1.0)
        design = build_design(spec)
        lag_cols = design.matrix[:, :2]
        assert np.all(lag_cols[: len(pop.districts)] == 0.0)  # week-2 rows lag week 1

    def test_row_and_column_counts(self):
        pop = small_pop(r=4, a=2)
        counts = np.ones((3, 4, 2))
        panel = WeeklyPanel((1, 2, 3), pop.districts, pop.age_groups, counts)
        spec, y, groups = build_infection_design(panel, pop, 1)
        design = build_design(spec)
        assert design.n == 2 * 4  # (W - 1) * R
        assert design.p == 2 + 2  # A lag columns + W-1 week dummies
        assert y.size == 8
        assert list(groups[:4]) == list(pop.districts)

    def test_six_age_groups_six_lag_columns(self):
        pop = small_pop(r=2, a=6)
        counts = np.ones((2, 2, 6))
        panel = WeeklyPanel((1, 2), pop.districts, pop.age_groups, counts)
        spec, _, _ = build_infection_design(panel, pop, 0)
        design = build_design(spec)
        lag_names = [n for n in design.names if n.startswith("lag[")]
        assert len(lag_names) == 6

    def test_offset_is_log_population(self):
        pop = small_pop()
        counts = np.ones((2, 3, 2))
        panel = WeeklyPanel((1, 2), pop.districts, pop.age_groups, counts)
        spec, _, _ = build_infection_design(panel, pop, 1)
        assert np.allclose(spec.offset, math.log(2e4))

    def test_delta_must_be_positive(self):
        pop = small_pop()
        panel = WeeklyPanel((1, 2), pop.districts, pop.age_groups, np.ones((2, 3, 2)))
        with pytest.raises(ValueError, match="delta"):
            build_infection_design(panel, pop, 0, delta=0.0)


class TestFitting:
    def test_single_age_group_matches_direct_call(self):
        # with one district the week intercepts saturate the design, so the
        # delegation check runs on a handful of districts instead
        rng = substream(21, "infection-test")
        pop = PopulationTable(tuple(f"d{i}" for i in range(4)), ("g0",),
                              np.full((4, 1), 1e4))
        counts = rng.poisson(200.0, size=(10, 4, 1)).astype(float)
        panel = WeeklyPanel(tuple(range(1, 11)), pop.districts, ("g0",), counts)
        fits = fit_infection_model(panel, pop)
        spec, y, groups = build_infection_design(panel, pop, 0)
        direct = fit_negative_binomial(spec, y, groups=groups)
        assert np.allclose(fits[0].beta, direct.beta, atol=1e-10)

    def test_single_district_week_intercepts_unidentified(self):
        rng = substream(24, "infection-test")
        pop = PopulationTable(("d0",), ("g0",), np.array([[1e4]]))
        counts = rng.poisson(200.0, size=(10, 1, 1)).astype(float)
        panel = WeeklyPanel(tuple(range(1, 11)), ("d0",), ("g0",), counts)
        with pytest.raises(RankDeficiencyError):
            fit_infection_model(panel, pop)

    def test_zero_panel_rank_deficient(self):
        pop = small_pop()
        panel = WeeklyPanel((1, 2, 3), pop.districts, pop.age_groups, np.zeros((3, 3, 2)))
        with pytest.raises(RankDeficiencyError):
            fit_infection_model(panel, pop)

    def test_fitted_means_reproduce_link_identity(self):
        rng = substream(22, "infection-test")
        pop = small_pop(r=6, a=2, value=3e4)
        params = default_study_params(10, pop, target_level=300.0)
        panel = simulate_infection_panel(params, pop, 10, seed=77)
        fits = fit_infection_model(panel, pop)
        for a, fit in enumerate(fits):
            spec, y, _ = build_infection_design(panel, pop, a)
            design = build_design(spec)
            mu = np.exp(design.matrix @ fit.beta + design.offset)
            assert np.max(np.abs(mu - fit.mu) / np.maximum(fit.mu, 1e-8)) < 1e-10

    def test_parameter_recovery_with_sandwich_errors(self):
        # fixed truth; estimates should sit within 3 sandwich SEs most of the time
        pop_rng = substream(23, "infection-test")
        pop = PopulationTable(
            districts=tuple(f"d{i}" for i in range(200)),
            age_groups=("g0", "g1", "g2"),
            pop=pop_rng.uniform(2e4, 6e4, (200, 3)),
        )
        params = default_study_params(20, pop)
        within = 0
        total = 0
        for rep in range(100):
            panel = simulate_infection_panel(params, pop, 20, seed=900 + rep)
            fits = fit_infection_model(panel, pop)
            for a, fit in enumerate(fits):
                est = lag_coefficients(fit, pop.age_groups)
                se = np.sqrt(np.diag(fit.cov_sandwich)[:3])
                within += int(np.sum(np.abs(est - params.lag_matrix[a]) <= 3 * se))
                total += 3
        assert within / total >= 0.95


class TestSimulator:
    def test_deterministic_under_seed(self):
        pop = small_pop()
        params = default_study_params(8, pop, target_level=100.0)
        a = simulate_infection_panel(params, pop, 8, seed=5)
        b = simulate_infection_panel(params, pop, 8, seed=5)
        assert np.array_equal(a.counts, b.counts)

    def test_zero_lag_matrix_matches_analytic_mean(self):
        pop = small_pop(r=200, a=2, value=1e4)
        c = -3.5
        params = InfectionParams(
            week_intercepts=np.full(9, c),
            lag_matrix=np.zeros((2, 2)),
            nb_theta=math.inf,
            initial_counts=np.full((200, 2), 50.0),
        )
        panel = simulate_infection_panel(params, pop, 10, seed=6)
        mean_expected = 1e4 * math.exp(c)
        draws = panel.counts[1:]
        mc_se = draws.std() / math.sqrt(draws.size)
        assert abs(draws.mean() - mean_expected) < 3 * mc_se

    def test_poisson_limit_variance_ratio(self):
        pop = small_pop(r=300, a=1, value=1e4)
        params = InfectionParams(
            week_intercepts=np.full(1, -4.0),
            lag_matrix=np.zeros((1, 1)),
            nb_theta=math.inf,
            initial_counts=np.full((300, 1), 50.0),
        )
        panel = simulate_infection_panel(params, pop, 2, seed=7)
        draws = panel.counts[1].ravel()
        ratio = draws.var() / draws.mean()
        assert 0.75 < ratio < 1.25

    def test_explosion_aborts(self):
        pop = small_pop()
        params = InfectionParams(
            week_intercepts=np.full(7, 5.0),
            lag_matrix=np.full((2, 2), 1.5),
            initial_counts=np.full((3, 2), 1e4),
        )
        with pytest.raises(SimulationExplosionError, match="explosive"):
            simulate_infection_panel(params, pop, 8, seed=8)


class TestThinning:
    def _panel(self, seed=30):
        pop = small_pop(r=40, a=2, value=3e4)
        params = default_study_params(12, pop, target_level=500.0)
        return simulate_infection_panel(params, pop, 12, seed=seed), pop

    def test_unit_cdr_is_identity(self):
        panel, _ = self._panel()
        cdr = CdrConfig(np.ones((12, 2)), concentration=1e9, seed=1)
        thinned = apply_cdr_thinning(panel, cdr)
        assert np.array_equal(thinned.counts, panel.counts)

    def test_half_cdr_total_ratio(self):
        panel, _ = self._panel()
        cdr = CdrConfig(np.full((12, 2), 0.5), concentration=50.0, seed=2)
        thinned = apply_cdr_thinning(panel, cdr)
        ratio = thinned.counts.sum() / panel.counts.sum()
        assert 0.48 <= ratio <= 0.52

    def test_zero_counts_stay_zero(self):
        pop = small_pop()
        panel = WeeklyPanel((1, 2), pop.districts, pop.age_groups, np.zeros((2, 3, 2)))
        cdr = CdrConfig(np.full((2, 2), 0.7), seed=3)
        assert np.all(apply_cdr_thinning(panel, cdr).counts == 0)

    def test_capacity_thinning_caps(self):
        panel, _ = self._panel()
        thinned = apply_capacity_thinning(panel, np.array([100.0, 120.0]))
        assert thinned.counts[:, :, 0].max() <= 100.0
        assert thinned.counts[:, :, 1].max() <= 120.0

    def test_beta_inverse_moment_formula(self):
        # E[R^-s] for Beta(a, b): prod over formula via direct numeric integral
        from scipy import integrate, stats

        mean, conc, s = 0.4, 30.0, 0.6
        a, b = mean * conc, (1 - mean) * conc
        numeric, _ = integrate.quad(lambda r: r ** (-s) * stats.beta.pdf(r, a, b), 0, 1)
        assert beta_inverse_moment(mean, conc, s) == pytest.approx(numeric, rel=1e-8)


class TestInvarianceReport:
    def test_identity_thinning_zero_differences(self):
        pop = small_pop(r=30, a=2, value=3e4)
        params = default_study_params(12, pop, target_level=400.0)
        panel = simulate_infection_panel(params, pop, 12, seed=40)
        cdr = CdrConfig(np.ones((12, 2)), concentration=1e9, seed=4)
        thinned = apply_cdr_thinning(panel, cdr)
        report = cdr_invariance_report(panel, thinned, pop, cdr=cdr)
        assert np.abs(report["coefficients"]["difference"].to_numpy()).max() < 1e-8

    def test_intercept_shift_matches_thinning_law(self):
        pop_rng = substream(41, "infection-test")
        pop = PopulationTable(
            districts=tuple(f"d{i}" for i in range(150)),
            age_groups=("g0", "g1"),
            pop=pop_rng.uniform(2e4, 6e4, (150, 2)),
        )
        params = default_study_params(16, pop)
        panel = simulate_infection_panel(params, pop, 16, seed=41)
        cdr = CdrConfig(np.full((16, 2), 0.4), concentration=100.0, seed=41)
        thinned = apply_cdr_thinning(panel, cdr)
        report = cdr_invariance_report(panel, thinned, pop, cdr=cdr)
        tab = report["week_intercepts"]
        gap = tab["observed_shift"] - tab["expected_shift"]
        assert np.abs(gap.mean()) < 0.05
        theta_row = lag_coefficients(report["fits_true"][0], pop.age_groups)
        by_hand = math.log(0.4) + sum(
            math.log(beta_inverse_moment(0.4, 100.0, th)) for th in theta_row
        )
        assert expected_intercept_shift(cdr, theta_row, week=1, age=0) == pytest.approx(by_hand)

    def test_outcome_dependent_thinning_breaks_invariance(self):
        res = run_cdr_study(n_replicates=3, n_districts=80, n_weeks=14,
                            n_age_groups=2, seed=42, adversarial=True)
        assert res.replicates_with_any_outside >= 0.5

    def test_study_summary_structure(self):
        res = run_cdr_study(n_replicates=2, n_districts=30, n_weeks=10,
                            n_age_groups=2, seed=43)
        assert set(res.summary.columns) >= {
            "model_age_group", "covariate_age_group", "estimate_true",
            "estimate_thinned", "standardized", "replicate",
        }
        assert res.n_replicates == 2


def test_coefficient_table_excludes_week_intercepts():
    pop = small_pop(r=25, a=2, value=3e4)
    params = default_study_params(10, pop, target_level=300.0)
    panel = simulate_infection_panel(params, pop, 10, seed=50)
    fits = fit_infection_model(panel, pop)
    table = coefficient_table(fits, panel.age_groups)
    assert len(table) == 4  # A models x A covariates
    assert set(table.columns) == {
        "model_age_group", "covariate_age_group", "estimate",
        "se_model", "se_sandwich", "ci_lo", "ci_hi",
    }
