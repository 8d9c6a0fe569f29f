import inspect
from fractions import Fraction

import numpy as np
import pytest

from combotrial.efficacy import ArmData, EffPosteriorChain, sample_efficacy_posterior
from combotrial.posterior import McmcConfig
from combotrial.randomization import (
    RandProbs,
    draw_assignment,
    far_probabilities,
    mar_probabilities,
)
from combotrial.seeds import mix64


def chain_from(p: np.ndarray) -> EffPosteriorChain:
    draws = np.column_stack([p, np.ones(len(p)), np.ones(len(p))])
    return EffPosteriorChain(draws=draws, n_arms=p.shape[1], acceptance=1.0, step=1.0, seed=0)


def point_mass(values, n=2000) -> EffPosteriorChain:
    return chain_from(np.tile(np.asarray(values, dtype=float), (n, 1)))


class TestMarExactness:
    def test_two_arm_point_mass(self):
        probs = mar_probabilities(point_mass([0.1, 0.6]), [0, 1]).probs
        assert abs(probs[0] - 0.0) <= 1e-12
        assert abs(probs[1] - 1.0) <= 1e-12

    def test_three_arm_point_mass(self):
        probs = mar_probabilities(point_mass([0.1, 0.4, 0.6]), [0, 1, 2]).probs
        assert abs(probs[0]) <= 1e-12
        assert abs(probs[1]) <= 1e-12
        assert abs(probs[2] - 1.0) <= 1e-12

    def test_singleton_gets_everything(self):
        probs = mar_probabilities(point_mass([0.3, 0.6]), [0]).probs
        assert probs == (1.0, 0.0)

    def test_identical_point_masses_split_exactly(self):
        for k in (2, 3, 5):
            probs = mar_probabilities(point_mass([0.4] * k), list(range(k))).probs
            for p in probs:
                assert abs(p - 1.0 / k) <= 1e-12

    def test_identical_distributions_near_uniform(self):
        rng = np.random.default_rng(5)
        p = rng.beta(4, 6, size=(2000, 4))
        probs = mar_probabilities(chain_from(p), range(4)).probs
        for v in probs:
            assert abs(v - 0.25) <= 0.03

    def test_spending_is_exactly_conservative(self):
        # replicate the loop with exact fractions and compare
        rng = np.random.default_rng(9)
        p = rng.beta(2, 3, size=(500, 4))
        chain = chain_from(p)
        probs = mar_probabilities(chain, range(4))
        total = sum(Fraction(v) for v in probs.probs)
        assert abs(float(total) - 1.0) <= 1e-12
        assert len(probs.order) == 4

    def test_closed_arms_get_zero(self):
        probs = mar_probabilities(point_mass([0.1, 0.4, 0.6]), [1, 2])
        assert probs.probs[0] == 0.0
        assert abs(sum(probs.probs) - 1.0) <= 1e-12

    def test_empty_active_set_rejected(self):
        with pytest.raises(ValueError):
            mar_probabilities(point_mass([0.1, 0.2]), [])

    def test_label_invariance(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            k = rng.integers(2, 6)
            p = rng.beta(2, 4, size=(400, k))
            base = mar_probabilities(chain_from(p), range(k)).probs
            perm = rng.permutation(k)
            permuted = mar_probabilities(chain_from(p[:, perm]), range(k)).probs
            for pos, src in enumerate(perm):
                assert permuted[pos] == pytest.approx(base[src], abs=1e-12)

    def test_no_reference_argument_by_construction(self):
        params = inspect.signature(mar_probabilities).parameters
        assert "reference_arm" not in params


class TestFar:
    def test_two_arm_floor(self):
        probs = far_probabilities(point_mass([0.1, 0.6]), [0, 1], 0).probs
        assert abs(probs[0] - 1.0 / 3.0) <= 1e-12
        assert abs(probs[1] - 2.0 / 3.0) <= 1e-12

    def test_three_arm_point_mass(self):
        probs = far_probabilities(point_mass([0.1, 0.4, 0.6]), [0, 1, 2], 0).probs
        assert abs(probs[0] - 0.2) <= 1e-12
        assert abs(probs[1] - 0.4) <= 1e-12
        assert abs(probs[2] - 0.4) <= 1e-12

    def test_identical_arms_uniform(self):
        rng = np.random.default_rng(3)
        p = rng.beta(3, 3, size=(4000, 3))
        probs = far_probabilities(chain_from(p), range(3), 0).probs
        for v in probs:
            assert abs(v - 1.0 / 3.0) <= 0.03

    def test_reference_sensitivity(self):
        chain = point_mass([0.1, 0.3, 0.6])
        best_ref0 = far_probabilities(chain, range(3), 0).probs[2]
        best_ref1 = far_probabilities(chain, range(3), 1).probs[2]
        assert abs(best_ref0 - best_ref1) > 0.05

    def test_reference_must_be_active(self):
        with pytest.raises(ValueError):
            far_probabilities(point_mass([0.1, 0.2, 0.3]), [1, 2], 0)


class TestDrawAssignment:
    def test_degenerate_masses(self):
        rng = np.random.default_rng(0)
        probs = RandProbs(probs=(0.0, 1.0), order=(0, 1))
        assert all(draw_assignment(probs, rng) == 1 for _ in range(100))
        probs = RandProbs(probs=(1.0, 0.0, 0.0), order=(0, 1, 2))
        assert all(draw_assignment(probs, rng) == 0 for _ in range(100))

    def test_even_split_frequency(self):
        rng = np.random.default_rng(123)
        probs = RandProbs(probs=(0.5, 0.5), order=(0, 1))
        hits = sum(draw_assignment(probs, rng) == 0 for _ in range(10000))
        assert 0.48 <= hits / 10000 <= 0.52

    def test_deterministic_for_fixed_state(self):
        probs = RandProbs(probs=(0.3, 0.3, 0.4), order=(0, 1, 2))
        a = [draw_assignment(probs, np.random.default_rng(s)) for s in range(20)]
        b = [draw_assignment(probs, np.random.default_rng(s)) for s in range(20)]
        assert a == b


class TestRandProbsInvariants:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            RandProbs(probs=(-0.1, 1.1), order=(0, 1))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            RandProbs(probs=(0.2, 0.2), order=(0, 1))


class TestLimitingAllocation:
    def test_better_arm_takes_over(self):
        # accumulating data at rates (0.2, 0.4): the better arm's probability
        # is nondecreasing in n on average and near 1 at n=1000
        cfg = McmcConfig(adapt=False, initial_step=1.0)
        means = []
        for n in (50, 200, 1000):
            vals = []
            for s in range(20):
                rng = np.random.default_rng(mix64(100 + n, s))
                y = (int(rng.binomial(n, 0.2)), int(rng.binomial(n, 0.4)))
                chain = sample_efficacy_posterior(ArmData((n, n), y), cfg, mix64(n, s))
                vals.append(mar_probabilities(chain, [0, 1]).probs[1])
            means.append(float(np.mean(vals)))
        assert means[0] <= means[1] + 0.02
        assert means[1] <= means[2] + 0.02
        assert means[2] >= 0.99

    def test_mar_dominates_far_in_pathology(self):
        # three arms (0.1, 0.4, 0.6) with 100 observations each: the moving
        # reference separates the top arms where the fixed reference cannot
        cfg = McmcConfig(adapt=False, initial_step=1.0)
        wins = 0
        for s in range(100):
            rng = np.random.default_rng(mix64(55, s))
            n = (100, 100, 100)
            y = tuple(int(rng.binomial(100, r)) for r in (0.1, 0.4, 0.6))
            chain = sample_efficacy_posterior(ArmData(n, y), cfg, mix64(56, s))
            mar_best = mar_probabilities(chain, range(3)).probs[2]
            far_best = far_probabilities(chain, range(3), 0).probs[2]
            wins += mar_best > far_best
        assert wins >= 95
