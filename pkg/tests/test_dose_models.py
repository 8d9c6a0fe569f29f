import math

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import binom, gamma as gamma_dist

from combotrial.dose_models import (
    DoseGrid,
    GammaPrior,
    LogisticCoeffs,
    ToxicityCounts,
    ToxicityParams,
    combo_toxicity,
    log_likelihood,
    log_posterior,
    logistic_truth,
    toxicity_surface,
)

UNIT = ToxicityParams(1.0, 1.0, 1.0)
GRID_31 = DoseGrid((0.05, 0.1, 0.2), (0.1, 0.2))
PRIORS_31 = (GammaPrior(0.5, 0.5), GammaPrior(0.5, 0.5), GammaPrior(0.1, 0.1))


class TestComboToxicity:
    def test_zero_zero_gives_zero(self):
        assert combo_toxicity(UNIT, 0.0, 0.0) == 0.0

    def test_certain_single_agent_gives_one(self):
        assert combo_toxicity(UNIT, 0.2, 1.0) == 1.0
        assert combo_toxicity(UNIT, 1.0, 0.2) == 1.0

    def test_hand_value_unit_params(self):
        # 1 - (1/(1-0.2) + 1/(1-0.1) - 1)^-1
        expected = 1.0 - 1.0 / (1.0 / 0.8 + 1.0 / 0.9 - 1.0)
        assert combo_toxicity(UNIT, 0.2, 0.1) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.2653061224489796, abs=1e-12)

    def test_single_agent_reduction(self):
        assert combo_toxicity(ToxicityParams(1.0, 2.0, 1.0), 0.0, 0.3) == pytest.approx(
            0.09, abs=1e-15
        )

    def test_crm_reduction_random_params(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            beta = rng.gamma(1.0) + 0.05
            gamma = rng.gamma(0.5) + 0.01
            b = rng.uniform(0.01, 0.99)
            params = ToxicityParams(1.0, beta, gamma)
            assert combo_toxicity(params, 0.0, b) == pytest.approx(b**beta, abs=1e-12)

    def test_boundaries_random_params(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            params = ToxicityParams(
                rng.gamma(0.5, 2.0) + 1e-3,
                rng.gamma(0.5, 2.0) + 1e-3,
                rng.gamma(0.1, 10.0) + 1e-3,
            )
            assert combo_toxicity(params, 0.0, 0.0) == 0.0
            assert combo_toxicity(params, 1.0, rng.uniform()) == 1.0
            assert combo_toxicity(params, rng.uniform(), 1.0) == 1.0

    def test_monotone_in_each_argument(self):
        params = ToxicityParams(0.8, 1.3, 0.4)
        lattice = np.linspace(0.0, 1.0, 50)
        for b in (0.0, 0.17, 0.62, 1.0):
            vals = [combo_toxicity(params, a, b) for a in lattice]
            assert all(v2 >= v1 - 1e-14 for v1, v2 in zip(vals, vals[1:]))
        for a in (0.0, 0.29, 0.8):
            vals = [combo_toxicity(params, a, b) for b in lattice]
            assert all(v2 >= v1 - 1e-14 for v1, v2 in zip(vals, vals[1:]))

    def test_symmetry_in_agent_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            alpha, beta = rng.gamma(1.0, 1.0, 2) + 0.05
            gam = rng.gamma(0.5, 2.0) + 0.01
            a, b = rng.uniform(0.05, 0.95, 2)
            left = combo_toxicity(ToxicityParams(alpha, beta, gam), a, b)
            right = combo_toxicity(ToxicityParams(beta, alpha, gam), b, a)
            assert left == pytest.approx(right, abs=1e-14)

    def test_extreme_parameters_stay_in_unit_interval(self):
        for alpha in (1e-8, 1e8):
            for gam in (1e-12, 1e6):
                p = combo_toxicity(ToxicityParams(alpha, 1.0, gam), 0.3, 0.2)
                assert 0.0 <= p <= 1.0

    def test_rejects_non_finite_and_out_of_range(self):
        with pytest.raises(ValueError):
            combo_toxicity(UNIT, math.nan, 0.5)
        with pytest.raises(ValueError):
            combo_toxicity(UNIT, 0.5, math.inf)
        with pytest.raises(ValueError):
            combo_toxicity(UNIT, -0.1, 0.5)
        with pytest.raises(ValueError):
            combo_toxicity(UNIT, 0.5, 1.5)


class TestToxicitySurface:
    def test_single_cell_matches_scalar(self):
        grid = DoseGrid((0.2,), (0.1,))
        surf = toxicity_surface(UNIT, grid)
        assert surf.shape == (1, 1)
        assert surf[0, 0] == pytest.approx(0.2653061224489796, abs=1e-12)

    def test_superadditive_on_reference_grid(self):
        surf = toxicity_surface(UNIT, GRID_31)
        for i, a in enumerate(GRID_31.a):
            for j, b in enumerate(GRID_31.b):
                assert surf[i, j] >= max(a, b) - 1e-14

    def test_monotone_rows_and_columns(self):
        params = ToxicityParams(1.7, 0.4, 2.2)
        surf = toxicity_surface(params, GRID_31)
        assert (np.diff(surf, axis=0) >= -1e-14).all()
        assert (np.diff(surf, axis=1) >= -1e-14).all()


class TestLogLikelihood:
    def test_no_data_is_zero(self):
        counts = ToxicityCounts.empty(GRID_31)
        assert log_likelihood(UNIT, GRID_31, counts) == 0.0

    def test_single_cell_arithmetic(self):
        grid = DoseGrid((0.2,), (0.1,))
        counts = ToxicityCounts([[2]], [[1]])
        pi = 0.2653061224489796
        expected = math.log(pi) + math.log(1.0 - pi)
        assert log_likelihood(UNIT, grid, counts) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(-1.63508, abs=5e-6)

    def test_all_toxic_cell_drops_survivor_term(self):
        # x == n: only the x*log(pi) term contributes (0*log(1-pi) convention)
        grid = DoseGrid((0.2,), (0.9999999,))
        counts = ToxicityCounts([[1]], [[1]])
        pi = combo_toxicity(UNIT, 0.2, 0.9999999)
        assert log_likelihood(UNIT, grid, counts) == pytest.approx(math.log(pi), abs=1e-12)

    def test_saturated_point_maximizes_at_empirical_rate(self):
        grid = DoseGrid((0.2,), (0.1,))
        counts = ToxicityCounts([[5]], [[2]])
        # scan a dense grid of gamma values; the implied pi maximizing the
        # likelihood must sit at x/n up to grid resolution
        best_pi, best_ll = None, -math.inf
        for g in np.linspace(0.01, 60.0, 4000):
            params = ToxicityParams(1.0, 1.0, g)
            ll = log_likelihood(params, grid, counts)
            if ll > best_ll:
                best_ll = ll
                best_pi = combo_toxicity(params, 0.2, 0.1)
        assert best_pi == pytest.approx(0.4, abs=0.01)

    def test_shape_mismatch_rejected(self):
        counts = ToxicityCounts(np.zeros((2, 2), int), np.zeros((2, 2), int))
        with pytest.raises(ValueError):
            log_likelihood(UNIT, GRID_31, counts)


class TestLogPosterior:
    def test_decomposition(self):
        counts = ToxicityCounts([[4, 0], [2, 1], [0, 0]], [[1, 0], [1, 0], [0, 0]])
        params = ToxicityParams(0.7, 1.9, 0.2)
        lp = log_posterior(params, GRID_31, counts, PRIORS_31)
        ll = log_likelihood(params, GRID_31, counts)
        prior_sum = sum(p.log_density(v) for p, v in zip(PRIORS_31, params.as_tuple()))
        assert lp == pytest.approx(ll + prior_sum, abs=1e-12)

    def test_no_data_equals_prior_density(self):
        counts = ToxicityCounts.empty(GRID_31)
        params = ToxicityParams(1.0, 1.0, 1.0)
        lp = log_posterior(params, GRID_31, counts, PRIORS_31)
        prior_sum = sum(p.log_density(1.0) for p in PRIORS_31)
        assert lp == pytest.approx(prior_sum, abs=1e-12)

    def test_ordering_matches_scipy_reference(self):
        # independent route: scipy gamma log-pdfs plus binomial log-pmfs
        counts = ToxicityCounts([[6, 0], [6, 0], [0, 0]], [[1, 0], [2, 0], [0, 0]])
        pts = [ToxicityParams(0.9, 1.1, 0.8), ToxicityParams(2.4, 0.5, 0.05)]
        mine = [log_posterior(p, GRID_31, counts, PRIORS_31) for p in pts]

        def scipy_ref(params):
            lp = sum(
                gamma_dist.logpdf(v, pr.shape, scale=1.0 / pr.rate)
                for pr, v in zip(PRIORS_31, params.as_tuple())
            )
            for i, a in enumerate(GRID_31.a):
                for j, b in enumerate(GRID_31.b):
                    n = int(counts.n[i, j])
                    if n:
                        pi = combo_toxicity(params, a, b)
                        lp += binom.logpmf(int(counts.x[i, j]), n, pi)
            return lp

        ref = [scipy_ref(p) for p in pts]
        # binomial coefficients are a constant offset between the two routes
        assert mine[0] - mine[1] == pytest.approx(ref[0] - ref[1], abs=1e-9)

    def test_prior_rejects_nonpositive(self):
        assert GammaPrior(0.5, 0.5).log_density(0.0) == -math.inf
        assert GammaPrior(0.5, 0.5).log_density(-3.0) == -math.inf


class TestLogisticTruth:
    def test_zero_coefficients_give_half(self):
        coeffs = LogisticCoeffs(0, 0, 0, 0, (0.05, 0.1, 0.2), (0.1, 0.2))
        assert logistic_truth(coeffs) == pytest.approx(np.full((3, 2), 0.5))

    def test_large_negative_intercept_vanishes(self):
        coeffs = LogisticCoeffs(-50, 0, 0, 0, (0.05, 0.1), (0.1,))
        assert (logistic_truth(coeffs) < 1e-20).all()

    def test_reference_doses_hand_value(self):
        coeffs = LogisticCoeffs(-2.0, 1.0, 1.0, 0.0, (0.05, 0.1, 0.2), (0.1, 0.2))
        out = logistic_truth(coeffs)
        assert out[0, 0] == pytest.approx(float(expit(-1.85)), abs=1e-12)
        assert out[0, 0] == pytest.approx(0.13571, abs=5e-6)
        assert out[2, 1] == pytest.approx(float(expit(-2 + 0.2 + 0.2)), abs=1e-12)


class TestTypes:
    def test_grid_validation(self):
        with pytest.raises(ValueError):
            DoseGrid((0.2, 0.1), (0.1,))  # not increasing
        with pytest.raises(ValueError):
            DoseGrid((0.0, 0.1), (0.1,))  # boundary excluded
        with pytest.raises(ValueError):
            DoseGrid((0.1,), (1.0,))
        with pytest.raises(ValueError):
            DoseGrid((), (0.1,))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            ToxicityParams(0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            ToxicityParams(1.0, -1.0, 1.0)
        with pytest.raises(ValueError):
            ToxicityParams(1.0, 1.0, math.inf)

    def test_counts_validation(self):
        with pytest.raises(ValueError):
            ToxicityCounts([[2]], [[3]])
        with pytest.raises(ValueError):
            ToxicityCounts([[-1]], [[0]])
        with pytest.raises(ValueError):
            ToxicityCounts([[1, 2]], [[0]])

    def test_gamma_prior_mean(self):
        assert GammaPrior(0.5, 0.5).mean == 1.0
        assert GammaPrior(0.1, 0.1).mean == 1.0
