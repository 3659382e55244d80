import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screenforge.errors import (
    BracketError,
    DomainStencilError,
    EvaluationFailure,
    InvalidIntervalError,
)
from screenforge.numerics import (
    RngStream,
    bisect_root,
    composite_rule,
    fd_partial,
    gauss_rule,
    tensor_integrate,
    uniform_draws,
)


class TestGaussRule:
    def test_order_one_is_midpoint(self):
        rule = gauss_rule(1, 0.0, 1.0)
        np.testing.assert_allclose(rule.nodes, [0.5])
        np.testing.assert_allclose(rule.weights, [1.0])

    def test_order_two_exact_for_squares(self):
        rule = gauss_rule(2, 0.0, 1.0)
        assert abs(rule.integrate(lambda x: x**2) - 1.0 / 3.0) < 1e-14

    def test_exp_against_series(self):
        # independent series evaluation of int_0^1 e^x dx = e - 1
        series = sum(1.0 / math.factorial(k) for k in range(1, 25))
        rule = gauss_rule(16, 0.0, 1.0)
        assert abs(rule.integrate(np.exp) - series) < 1e-12

    def test_weights_sum_to_length_and_nodes_sorted(self):
        for order in (1, 3, 7, 32):
            rule = gauss_rule(order, -2.0, 5.0)
            assert abs(rule.weights.sum() - 7.0) < 1e-12
            assert np.all(np.diff(rule.nodes) > 0)
            assert rule.nodes[0] > -2.0 and rule.nodes[-1] < 5.0

    def test_invalid_interval(self):
        with pytest.raises(InvalidIntervalError):
            gauss_rule(4, 1.0, 1.0)
        with pytest.raises(InvalidIntervalError):
            gauss_rule(0, 0.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(min_value=1, max_value=12),
        st.lists(st.floats(-3, 3), min_size=1, max_size=8),
    )
    def test_polynomial_exactness(self, order, coeffs):
        # exact up to degree 2*order - 1
        coeffs = coeffs[: 2 * order]
        poly = np.polynomial.Polynomial(coeffs)
        exact = poly.integ()(1.0) - poly.integ()(0.0)
        rule = gauss_rule(order, 0.0, 1.0)
        assert abs(rule.integrate(poly) - exact) <= 1e-12 * max(1.0, abs(exact))


class TestTensorIntegrate:
    def test_constant(self):
        val = tensor_integrate(lambda p: np.ones(len(p)), [(0, 1), (0, 1)], [4, 4])
        assert abs(val - 1.0) < 1e-14

    def test_separable_polynomial(self):
        val = tensor_integrate(lambda p: p[:, 0] * p[:, 1], [(0, 1), (0, 1)], [6, 6])
        assert abs(val - 0.25) < 1e-12

    def test_uniform_density_normalizes(self):
        def dens(p):
            inside = np.all((p >= 0.2) & (p <= 0.7), axis=1)
            return inside / 0.25
        val = tensor_integrate(dens, [(0, 1), (0, 1)], [8, 8], breaks=[[0.2, 0.7]] * 2)
        assert abs(val - 1.0) < 1e-10

    def test_nonfinite_reports_point(self):
        def bad(p):
            out = np.ones(len(p))
            out[p[:, 0] > 0.5] = np.inf
            return out
        with pytest.raises(EvaluationFailure) as exc:
            tensor_integrate(bad, [(0, 1)], [8])
        assert exc.value.point is not None and exc.value.point[0] > 0.5

    def test_composite_rule_splits(self):
        rule = composite_rule(0.0, 1.0, 6, breaks=[0.3])
        assert abs(rule.integrate(lambda x: np.abs(x - 0.3)) - (0.3**2 + 0.7**2) / 2) < 1e-13


class TestBisect:
    def test_linear(self):
        assert abs(bisect_root(lambda x: x - 0.5, 0, 1, 1e-10) - 0.5) < 1e-10

    def test_sqrt_two(self):
        assert abs(bisect_root(lambda x: x * x - 2.0, 0, 2, 1e-10) - math.sqrt(2)) < 1e-8

    def test_endpoint_roots(self):
        assert bisect_root(lambda x: x, 0.0, 1.0) == 0.0
        assert bisect_root(lambda x: x - 1.0, 0.0, 1.0) == 1.0

    def test_no_bracket(self):
        with pytest.raises(BracketError):
            bisect_root(lambda x: x + 1.0, 0.0, 1.0)

    def test_nested_when_tightening(self):
        f = lambda x: math.expm1(x) - 0.7
        loose = bisect_root(f, 0.0, 1.0, tol=1e-6)
        tight = bisect_root(f, 0.0, 1.0, tol=1e-12)
        assert abs(loose - tight) <= 1e-6


class TestFiniteDifference:
    def test_square(self):
        val = fd_partial(lambda p: p[0] ** 2, [1.0], axis=0, step=1e-5)
        assert abs(val - 2.0) < 1e-8

    def test_constant(self):
        val = fd_partial(lambda p: 3.14, [0.3, 0.7], axis=1, step=1e-5)
        assert abs(val) < 1e-12

    def test_second_order_rate_on_cubic(self):
        f = lambda p: p[0] ** 3
        e1 = abs(fd_partial(f, [1.0], 0, 1e-2) - 3.0)
        e2 = abs(fd_partial(f, [1.0], 0, 5e-3) - 3.0)
        assert e1 / e2 >= 3.0

    def test_domain_guard(self):
        with pytest.raises(DomainStencilError):
            fd_partial(lambda p: p[0], [0.0], 0, 1e-3, bounds=[(0.0, 1.0)])

    def test_conditional_cdf_type_slope(self):
        # the moving-support uniform family has cdf slope -1 in the type
        # on the interior of its support
        from screenforge.model import shifted_uniform_marginal

        marg = shifted_uniform_marginal()
        val = fd_partial(lambda p: float(marg.cdf(0.8, p[0])), [0.4], 0, 1e-5)
        assert abs(val - (-1.0)) < 1e-6


class TestRngStream:
    def test_reproducible(self):
        a = uniform_draws(RngStream(seed=42, stream_id=3), 100, 2)
        b = uniform_draws(RngStream(seed=42, stream_id=3), 100, 2)
        assert a.tobytes() == b.tobytes()

    def test_streams_differ(self):
        a = uniform_draws(RngStream(seed=42, stream_id=0), 64, 1)
        b = uniform_draws(RngStream(seed=42, stream_id=1), 64, 1)
        assert not np.allclose(a, b)

    def test_mean_within_clt_band(self):
        draws = uniform_draws(RngStream(seed=7), 100_000, 1)
        # 3 sigma for the mean of U(0,1): 3/sqrt(12 n) < 0.01
        assert abs(draws.mean() - 0.5) < 0.01

    def test_columns_uncorrelated(self):
        draws = uniform_draws(RngStream(seed=11), 100_000, 2)
        corr = np.corrcoef(draws.T)[0, 1]
        assert abs(corr) < 0.02

    def test_counter_is_part_of_the_key(self):
        base = RngStream(seed=5)
        ahead = base.advanced(4)
        assert uniform_draws(base, 8, 1).tobytes() == uniform_draws(base, 8, 1).tobytes()
        assert uniform_draws(ahead, 8, 1).tobytes() == uniform_draws(ahead, 8, 1).tobytes()
        assert uniform_draws(base, 8, 1).tobytes() != uniform_draws(ahead, 8, 1).tobytes()
        assert base.advanced(0) == base
        assert base.substream(9) == RngStream(seed=5, stream_id=9)
