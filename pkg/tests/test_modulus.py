import math

import numpy as np
import pytest

from rbdsde.modulus import (NonTerminationError, builtin_condition_a_fixtures,
                            condition_a_uniqueness_check, constant_budgets,
                            eval_modulus, horizon_partition, lipschitz_modulus,
                            log_modulus, loglog_modulus, majorant_sequence,
                            moment_bound_constant, osgood_integral,
                            tabulated_from_csv, tabulated_modulus,
                            verify_modulus_axioms)
from rbdsde.paths import build_grid

LADDER = [10.0 ** (-k) for k in range(2, 13)]


class TestEval:
    def test_lipschitz_linear(self):
        spec = lipschitz_modulus(2.0)
        assert eval_modulus(spec, 0.0, 3.0) == 6.0

    def test_zero_at_zero_all_variants(self):
        for spec, _ in builtin_condition_a_fixtures().values():
            assert eval_modulus(spec, 0.0, 0.0) == 0.0

    def test_log_value(self):
        spec = log_modulus(0.1)
        assert eval_modulus(spec, 0.0, 0.01) == pytest.approx(0.01 * math.log(100.0), rel=1e-12)

    def test_log_extension_is_c1(self):
        spec = log_modulus(0.1)
        h = 1e-8
        left = (eval_modulus(spec, 0.0, 0.1) - eval_modulus(spec, 0.0, 0.1 - h)) / h
        right = (eval_modulus(spec, 0.0, 0.1 + h) - eval_modulus(spec, 0.0, 0.1)) / h
        assert left == pytest.approx(right, abs=1e-6)

    def test_negative_argument(self):
        with pytest.raises(ValueError):
            eval_modulus(lipschitz_modulus(), 0.0, -1.0)

    def test_loglog_needs_small_delta(self):
        with pytest.raises(ValueError):
            loglog_modulus(0.5)

    def test_tabulated_interpolation_and_extrapolation(self):
        spec = tabulated_modulus([(0.0, 0.0), (1.0, 1.0), (2.0, 1.5)])
        assert eval_modulus(spec, 0.0, 0.5) == pytest.approx(0.5)
        assert eval_modulus(spec, 0.0, 3.0) == pytest.approx(2.0)  # last slope 0.5

    def test_tabulated_from_csv(self, tmp_path):
        f = tmp_path / "rho.csv"
        f.write_text("u,rho\n0.0,0.0\n1.0,2.0\n")
        spec = tabulated_from_csv(f)
        assert eval_modulus(spec, 0.0, 0.5) == pytest.approx(1.0)


class TestAxioms:
    def test_builtins_pass(self):
        for name, (spec, _) in builtin_condition_a_fixtures().items():
            rep = verify_modulus_axioms(spec)
            assert rep.all_pass, f"{name}: {rep}"

    def test_convex_counterexample_fails_concavity(self):
        us = np.linspace(0.0, 4.0, 101)
        spec = tabulated_modulus(list(zip(us, us ** 2)))
        rep = verify_modulus_axioms(spec)
        assert not rep.concave
        assert rep.zero_at_zero

    def test_log_with_delta_inverse_e(self):
        rep = verify_modulus_axioms(log_modulus(math.exp(-1)), samples=1000)
        assert rep.all_pass

    def test_sample_count_guard(self):
        with pytest.raises(ValueError):
            verify_modulus_axioms(lipschitz_modulus(), samples=2)


class TestConditionA:
    def test_fixed_verdicts(self):
        for name, (spec, expected) in builtin_condition_a_fixtures().items():
            rep = condition_a_uniqueness_check(spec, M=1.0, T=1.0, eps_ladder=LADDER)
            assert rep.verdict == expected, f"{name}: got {rep.verdict}"

    def test_lipschitz_integral_closed_form(self):
        spec = lipschitz_modulus(2.0)
        for eps in (1e-4, 1e-8):
            assert osgood_integral(spec, eps, 1.0) == pytest.approx(
                math.log(1.0 / eps) / 2.0, rel=1e-6)

    def test_sqrt_integral_bounded(self):
        us = np.geomspace(1e-16, 16.0, 257)
        spec = tabulated_modulus(list(zip(us, np.sqrt(us))))
        # closed form 2(sqrt(u0) - sqrt(eps)) stays below 2
        assert osgood_integral(spec, 1e-10, 1.0) == pytest.approx(2.0, rel=5e-3)

    def test_vanishing_modulus_inconclusive(self):
        spec = tabulated_modulus([(0.0, 0.0), (1.0, 0.0), (2.0, 1.0)])
        rep = condition_a_uniqueness_check(spec, M=1.0, T=1.0, eps_ladder=LADDER)
        assert rep.verdict == "inconclusive"
        assert "vanishes" in rep.reason

    def test_ladder_validation(self):
        with pytest.raises(ValueError):
            condition_a_uniqueness_check(lipschitz_modulus(), 1.0, 1.0,
                                         eps_ladder=[1e-2, 1e-1, 1e-3, 1e-4])


class TestMajorant:
    def test_zero_modulus_gives_zero(self, small_grid):
        seq = majorant_sequence(lipschitz_modulus(0.0), M=1.0, M1=1.0,
                                grid=small_grid, n_max=4)
        assert np.all(seq.values == 0.0)

    def test_lipschitz_factorial_bound(self):
        # phi_n = M1 (M C)^{n+1} (T-t)^{n+1} / (n+1)! exactly for rho = C u
        grid = build_grid(1.0, 4000)
        seq = majorant_sequence(lipschitz_modulus(1.0), M=1.0, M1=1.0,
                                grid=grid, n_max=5)
        t = grid.nodes
        for n in range(seq.levels):
            exact = (1.0 - t) ** (n + 1) / math.factorial(n + 1)
            assert np.max(np.abs(seq.values[n] - exact)) < 1e-7

    def test_monotone_and_terminal_zero(self, small_grid):
        for spec, _ in builtin_condition_a_fixtures().values():
            seq = majorant_sequence(spec, M=1.0, M1=1.0, grid=small_grid, n_max=6)
            assert np.all(np.diff(seq.values, axis=0) <= 1e-14)
            assert np.all(seq.values[:, -1] == 0.0)

    def test_early_stop(self, small_grid):
        seq = majorant_sequence(lipschitz_modulus(1.0), M=1.0, M1=1.0,
                                grid=small_grid, n_max=50, stop_tol=1e-6)
        assert seq.levels < 51

    def test_argument_guards(self, small_grid):
        with pytest.raises(ValueError):
            majorant_sequence(lipschitz_modulus(), M=0.0, M1=1.0, grid=small_grid, n_max=1)


class TestHorizonPartition:
    def test_unit_budget_linear_modulus(self):
        # rho = u, M_p = 2 mu = 2; each segment carries mass mu/M = 1, so
        # segments have length 1/2 and [0, 3] splits into six of them
        bp = horizon_partition(lipschitz_modulus(1.0), M=1.0,
                               budgets=constant_budgets(1.0), T=3.0)
        assert np.allclose(bp, [3.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.0], atol=1e-9)

    def test_single_segment(self):
        bp = horizon_partition(lipschitz_modulus(1.0), M=1.0,
                               budgets=constant_budgets(10.0), T=0.4)
        assert np.array_equal(bp, [0.4, 0.0])

    def test_large_constant_many_segments(self):
        bp = horizon_partition(lipschitz_modulus(50.0), M=1.0,
                               budgets=constant_budgets(1.0), T=0.5)
        assert len(bp) > 10
        assert bp[1] > 0.45  # first breakpoint close to T

    def test_tiling_exact(self):
        for c in (0.5, 3.0, 20.0):
            bp = horizon_partition(lipschitz_modulus(c), M=2.0,
                                   budgets=constant_budgets(0.7), T=1.3)
            assert abs(np.sum(-np.diff(bp)) - 1.3) < 1e-12
            assert bp[-1] == 0.0

    def test_cap_exceeded(self):
        # shrinking budgets against a sqrt profile make the segment lengths
        # summable below the horizon, so the partition cannot close
        us = np.geomspace(1e-16, 16.0, 257)
        spec = tabulated_modulus(list(zip(us, np.sqrt(us))))
        budgets = lambda p, prev: 4.0 ** (-p)
        with pytest.raises(NonTerminationError):
            horizon_partition(spec, M=1.0, budgets=budgets, T=2.0, p_max=60)


class TestMomentBound:
    def test_collapsed_horizon(self):
        assert moment_bound_constant(1.0, 1.0, 0.5, 0.0) == pytest.approx(1.5)

    def test_unit_horizon(self):
        assert moment_bound_constant(1.0, 1.0, 0.5, 1.0) == pytest.approx(
            1.5 * math.e ** 2, rel=1e-12)

    def test_alpha_near_one_blows_up_without_raising(self):
        assert math.isfinite(moment_bound_constant(1.0, 1.0, 0.9, 1.0))
        # mathematically finite for any alpha < 1, but the float range caps it
        assert moment_bound_constant(1.0, 1.0, 0.9999, 1.0) == math.inf

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            moment_bound_constant(1.0, 1.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            moment_bound_constant(1.0, 1.0, 0.0, 1.0)
