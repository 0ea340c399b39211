import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from branchdiff import model as M
from branchdiff.errors import ConfigurationError

X0 = np.zeros(1)


def binary_model(p0=0.5, gamma=1.0, rate_bound=1.0, mean_bound=1.0,
                 residual=True, p2=None):
    if residual:
        offspring = ((M.constant(p0), M.constant(0.0)),)
    else:
        offspring = ((M.constant(p0), M.constant(0.0), M.constant(p2)),)
    return M.ModelParams(
        dim=1, noise_dim=1, controls=M.ControlSet.of_size(1),
        drift=(M.constant_vector([0.0]),),
        diffusion=(M.constant_vector([0.0]),),
        death_rate=(M.constant(gamma),),
        offspring=offspring,
        running_cost=(M.constant(0.0),),
        terminal=M.constant(0.0),
        rate_bound=rate_bound, mean_offspring_bound=mean_bound, max_children=2,
        offspring_residual_last=residual,
    )


class TestValidation:
    def test_binary_model_passes(self):
        report = M.validate_params(binary_model(), [(X0, None)])
        assert report.ok
        assert report.summary() == "ok"

    def test_probability_sum_violation(self):
        bad = binary_model(p0=0.5, residual=False, p2=0.4)
        report = M.validate_params(bad, [(X0, 0)])
        assert not report.ok
        assert any(v.kind == "probability-sum" for v in report.violations)

    def test_rate_bound_violation(self):
        bad = binary_model(gamma=2.0, rate_bound=1.0)
        report = M.validate_params(bad, [(X0, 0)])
        assert any(v.kind == "rate-bound" for v in report.violations)

    def test_mean_offspring_violation(self):
        bad = binary_model(p0=0.1, mean_bound=1.0)  # mean = 2 * 0.9 = 1.8
        report = M.validate_params(bad, [(X0, 0)])
        assert any(v.kind == "mean-offspring" for v in report.violations)

    def test_empty_probes_rejected(self):
        with pytest.raises(ConfigurationError):
            M.validate_params(binary_model(), [])


class TestOffspringIntervals:
    def test_binary_partition(self):
        ivs = M.offspring_intervals(X0, 0, binary_model())
        assert ivs == [(0.0, 0.5), (0.5, 0.5), (0.5, 1.0)]

    def test_zero_rate_degenerate(self):
        ivs = M.offspring_intervals(X0, 0, binary_model(gamma=0.0))
        assert all(lo == hi for lo, hi in ivs)

    def test_lengths_scale_with_rate(self):
        m = M.ModelParams(
            dim=1, noise_dim=1, controls=M.ControlSet.of_size(1),
            drift=(M.constant_vector([0.0]),),
            diffusion=(M.constant_vector([0.0]),),
            death_rate=(M.constant(2.0),),
            offspring=((M.constant(0.25), M.constant(0.25)),),
            running_cost=(M.constant(0.0),),
            terminal=M.constant(0.0),
            rate_bound=2.0, mean_offspring_bound=1.5, max_children=2)
        assert M.offspring_intervals(X0, 0, m) == [(0.0, 0.5), (0.5, 1.0), (1.0, 2.0)]

    def test_lengths_sum_to_rate_exactly(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            p0, p1 = rng.dirichlet([1, 1, 1])[:2]
            gamma = rng.uniform(0, 1)
            m = binary_model(p0=p0, gamma=gamma)
            m = M.ModelParams(
                dim=1, noise_dim=1, controls=m.controls, drift=m.drift,
                diffusion=m.diffusion, death_rate=(M.constant(gamma),),
                offspring=((M.constant(p0), M.constant(p1)),),
                running_cost=m.running_cost, terminal=m.terminal,
                rate_bound=1.0, mean_offspring_bound=2.0, max_children=2)
            ivs = M.offspring_intervals(X0, 0, m)
            total = sum(hi - lo for lo, hi in ivs)
            assert abs(total - gamma) <= 1e-12
            assert ivs[0][0] == 0.0
            assert ivs[-1][1] == gamma


class TestIntervalOverlap:
    def test_identical_models_full_overlap(self):
        m = binary_model()
        assert M.interval_overlap(X0, X0, 0, m, m) == m.rate_bound

    def test_hand_union(self):
        m1 = binary_model(p0=0.5)
        m2 = binary_model(p0=0.4)
        got = M.interval_overlap(X0, X0, 0, m1, m2)
        assert got == pytest.approx(0.9, abs=1e-12)

    def test_disjoint_rates(self):
        m1 = binary_model(gamma=1.0)
        m2 = binary_model(gamma=0.0)
        assert M.interval_overlap(X0, X0, 0, m1, m2) == pytest.approx(0.0, abs=1e-12)

    def test_mismatched_rate_bound_rejected(self):
        m1 = binary_model(rate_bound=1.0)
        m2 = binary_model(rate_bound=2.0)
        with pytest.raises(ConfigurationError):
            M.interval_overlap(X0, X0, 0, m1, m2)

    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95),
           st.floats(0.1, 1.0), st.floats(0.1, 1.0))
    def test_symmetry(self, p0a, p0b, ga, gb):
        m1 = binary_model(p0=p0a, gamma=ga)
        m2 = binary_model(p0=p0b, gamma=gb)
        lhs = M.interval_overlap(X0, X0, 0, m1, m2)
        rhs = M.interval_overlap(X0, X0, 0, m2, m1)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_overlap_gap_shrinks_with_perturbation(self):
        base = binary_model(p0=0.5, gamma=0.6, rate_bound=1.0)
        gaps = []
        for eps in (0.3, 0.03, 0.003):
            tilde = M.perturbed_copy(base, eps)
            overlap = M.interval_overlap(X0, X0, 0, base, tilde)
            gaps.append(base.rate_bound - overlap)
        assert gaps[0] > gaps[1] > gaps[2]
        assert gaps[2] < 0.01


class TestCoefficientSpecs:
    def test_families_evaluate(self):
        x = np.array([0.3, -0.2])
        affine = M.CoefficientSpec(family="affine", intercept=1.0, slope=(2.0, -1.0))
        assert affine(x) == pytest.approx(1.0 + 0.6 + 0.2)
        bump = M.CoefficientSpec(family="gaussian-bump", offset=0.1,
                                 amplitude=0.5, center=(0.0, 0.0), width=1.0)
        assert bump(np.zeros(2)) == pytest.approx(0.6)
        logi = M.CoefficientSpec(family="logistic", lo=0.0, hi=1.0,
                                 slope=(1.0, 0.0), center=(0.0, 0.0))
        assert logi(np.zeros(2)) == pytest.approx(0.5)

    def test_eval_many_matches_scalar(self):
        rng = np.random.default_rng(1)
        xs = rng.normal(size=(20, 2))
        for spec in (
            M.constant(0.7),
            M.CoefficientSpec(family="affine", intercept=0.5, slope=(1.0, 2.0)),
            M.CoefficientSpec(family="gaussian-bump", offset=0.2, amplitude=0.3,
                              center=(0.1, -0.1), width=0.8),
            M.CoefficientSpec(family="logistic", lo=0.1, hi=0.9,
                              slope=(0.5, -0.5), center=(0.0, 0.0)),
        ):
            many = spec.eval_many(xs)
            single = np.array([spec(x) for x in xs])
            np.testing.assert_allclose(many, single, rtol=1e-14)

    def test_sup_distance_exact_cases(self):
        a = M.constant(0.3)
        b = M.constant(0.8)
        assert M.sup_distance(a, b) == pytest.approx(0.5)
        g1 = M.CoefficientSpec(family="gaussian-bump", offset=0.1, amplitude=0.5,
                               center=(0.0,), width=1.0)
        g2 = M.CoefficientSpec(family="gaussian-bump", offset=0.1, amplitude=0.7,
                               center=(0.0,), width=1.0)
        assert M.sup_distance(g1, g2) == pytest.approx(0.2)
        a1 = M.CoefficientSpec(family="affine", intercept=0.0, slope=(1.0,))
        a2 = M.CoefficientSpec(family="affine", intercept=0.0, slope=(2.0,))
        assert M.sup_distance(a1, a2) == math.inf

    def test_sup_distance_bounds_actual_gap(self):
        rng = np.random.default_rng(3)
        g1 = M.CoefficientSpec(family="gaussian-bump", offset=0.2, amplitude=0.4,
                               center=(0.3,), width=0.7)
        g2 = M.CoefficientSpec(family="gaussian-bump", offset=0.1, amplitude=0.5,
                               center=(-0.2,), width=0.9)
        bound = M.sup_distance(g1, g2)
        xs = rng.normal(scale=3, size=(500, 1))
        actual = np.abs(g1.eval_many(xs) - g2.eval_many(xs)).max()
        assert actual <= bound + 1e-12


def test_perturbed_copy_distance():
    base = binary_model(p0=0.5, gamma=0.6, rate_bound=1.0)
    for eps in (0.1, 0.01, 0.001):
        tilde = M.perturbed_copy(base, eps)
        assert M.coefficient_distance(base, tilde) == pytest.approx(eps, rel=1e-9)
    with pytest.raises(ConfigurationError):
        M.perturbed_copy(binary_model(gamma=1.0, rate_bound=1.0), 0.1)


def test_offspring_distribution_normalizes_by_construction():
    m = binary_model(p0=0.3)
    probs = m.offspring_probs_at(X0, 0)
    assert probs.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(probs, [0.3, 0.0, 0.7])
