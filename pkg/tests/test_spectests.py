import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from donutrd.errors import DegenerateTestError, InsufficientInnerSupportError
from donutrd.inference import cv_folded_normal, worst_case_pvalue
from donutrd.kernels import KERNELS, variance_constant
from donutrd.rd import DesignSpec, Sample, ll_weights, nn_variance, tau_hat
from donutrd.spectests import delta_test, delta_variance_theory, gamma_test, inner_weights


def make_sample(seed=0, n=600, jump=0.0, L=0.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    y = x - 0.5 * x**2 + jump * (x >= 0) + L * (np.abs(x) < 0.1) * np.sign(x) + rng.normal(0, 0.4, n)
    return Sample(x, y)


class TestDelta:
    def test_needs_donut(self):
        with pytest.raises(DegenerateTestError):
            delta_test(make_sample(), DesignSpec(0.5, 0.0, "triangular", 1.0))

    def test_empty_donut(self):
        x = np.concatenate([np.linspace(-1, -0.2, 30), np.linspace(0.2, 1, 30)])
        s = Sample(x, x.copy())
        with pytest.raises(DegenerateTestError):
            delta_test(s, DesignSpec(0.8, 0.1, "triangular", 1.0))

    def test_statistic_is_difference(self):
        s = make_sample(1)
        spec = DesignSpec(0.5, 0.1, "triangular", 2.0)
        res = delta_test(s, spec)
        conv = tau_hat(s, DesignSpec(0.5, 0.0, "triangular", 2.0)).tau_hat
        assert res.estimate_diff == pytest.approx(tau_hat(s, spec).tau_hat - conv, abs=1e-12)
        diff = ll_weights(s, spec).w - ll_weights(s, DesignSpec(0.5, 0.0, "triangular")).w
        s2 = nn_variance(s)
        assert res.s_diff == pytest.approx(np.sqrt(diff**2 @ s2), rel=1e-12)

    def test_expanded_variance(self):
        # Var(a - b) = Var(a) + Var(b) - 2 Cov(a, b) with shared observations
        s = make_sample(2)
        spec = DesignSpec(0.6, 0.15, "epanechnikov", 1.0)
        wd = ll_weights(s, spec).w
        w0 = ll_weights(s, DesignSpec(0.6, 0.0, "epanechnikov")).w
        s2 = nn_variance(s)
        expanded = wd**2 @ s2 + w0**2 @ s2 - 2 * (wd * w0) @ s2
        assert delta_test(s, spec, sigma2=s2).s_diff ** 2 == pytest.approx(expanded, rel=1e-10)

    def test_linear_outcome_not_rejected(self):
        x = np.random.default_rng(3).uniform(-1, 1, 400)
        s = Sample(x, 2 + x + 0.3 * (x >= 0) + 1e-3 * np.sin(50 * x))
        res = delta_test(s, DesignSpec(0.5, 0.1, "uniform", 1.0))
        assert abs(res.estimate_diff) < 1e-3


class TestGamma:
    def test_insufficient_inner_support(self):
        x = np.array([-0.9, -0.6, -0.4, -0.05, 0.05, 0.3, 0.5, 0.8])
        s = Sample(x, x.copy())
        with pytest.raises(InsufficientInnerSupportError) as info:
            gamma_test(s, DesignSpec(0.95, 0.1, "uniform", 1.0), sigma2=np.ones(8))
        assert info.value.name == "insufficient-inner-support"

    def test_disjoint_support(self):
        s = make_sample(4)
        spec = DesignSpec(0.5, 0.1, "triangular", 2.0)
        w_in = inner_weights(s, spec)
        w_d = ll_weights(s, spec).w
        assert not np.any((w_in != 0) & (w_d != 0))
        assert np.all(np.abs(s.x[w_in != 0]) < 0.1)

    def test_boundary_point_goes_outside(self):
        x = np.array([-0.5, -0.3, -0.1, -0.07, -0.03, 0.02, 0.06, 0.1, 0.3, 0.5])
        s = Sample(x, x.copy())
        spec = DesignSpec(0.6, 0.1, "uniform", 1.0)
        w_in = inner_weights(s, spec)
        assert w_in[2] == 0 and w_in[7] == 0
        assert ll_weights(s, spec).w[7] != 0

    def test_variance_without_covariance(self):
        s = make_sample(5)
        spec = DesignSpec(0.5, 0.12, "triangular", 2.0)
        s2 = nn_variance(s)
        diff = ll_weights(s, spec).w - inner_weights(s, spec)
        res = gamma_test(s, spec, sigma2=s2)
        assert res.s_diff**2 == pytest.approx(diff**2 @ s2, rel=1e-12)

    def test_estimate_diff(self):
        s = make_sample(6)
        spec = DesignSpec(0.5, 0.2, "triangular", 2.0)
        inner = tau_hat(s, DesignSpec(0.2, 0.0, "triangular", 2.0)).tau_hat
        res = gamma_test(s, spec)
        # no sample point sits exactly at |x| = d, so the strict fit agrees
        assert res.estimate_diff == pytest.approx(tau_hat(s, spec).tau_hat - inner, abs=1e-12)


@pytest.mark.parametrize("test", [delta_test, gamma_test])
class TestDecision:
    def test_zero_M_is_normal_test(self, test):
        res = test(make_sample(7), DesignSpec(0.5, 0.1, "triangular", 0.0))
        assert res.bias_bound == 0.0
        assert res.cv == pytest.approx(1.959963984540054, abs=1e-10)

    def test_bias_linear_in_M(self, test):
        s = make_sample(8)
        b1 = test(s, DesignSpec(0.5, 0.1, "triangular", 1.0)).bias_bound
        b3 = test(s, DesignSpec(0.5, 0.1, "triangular", 3.0)).bias_bound
        assert b3 == pytest.approx(3 * b1, rel=1e-12)

    def test_fields_consistent(self, test):
        res = test(make_sample(9, L=2.0), DesignSpec(0.5, 0.1, "triangular", 1.0))
        assert res.statistic == pytest.approx(res.estimate_diff / res.s_diff)
        assert res.cv == pytest.approx(cv_folded_normal(res.bias_ratio, res.alpha))
        assert res.p_upper == pytest.approx(worst_case_pvalue(res.statistic, res.bias_ratio))
        assert res.to_dict()["method"] in ("delta", "gamma")

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), L=st.floats(0, 5), alpha=st.sampled_from([0.01, 0.05, 0.1]))
    def test_reject_iff_small_pvalue(self, test, seed, L, alpha):
        res = test(make_sample(seed, n=300, L=L), DesignSpec(0.6, 0.1, "triangular", 1.0), alpha)
        if abs(abs(res.statistic) - res.cv) > 1e-7:
            assert res.reject == (res.p_upper <= alpha)

    def test_detects_gross_distortion(self, test):
        res = test(make_sample(10, n=2000, L=3.0), DesignSpec(0.5, 0.1, "triangular", 0.5))
        assert res.reject

    def test_zero_variance(self, test):
        s = make_sample(11)
        with pytest.raises(DegenerateTestError):
            test(s, DesignSpec(0.5, 0.1, "triangular", 1.0), sigma2=np.zeros(s.n))


class TestVarianceTheory:
    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_zero_at_no_donut(self, name):
        assert delta_variance_theory(name, 0.0) == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_lower_bound(self, name):
        s0 = variance_constant(name, 0.0)
        for c in (0.05, 0.1, 0.3):
            sc = variance_constant(name, c)
            assert delta_variance_theory(name, c) >= (np.sqrt(sc) - np.sqrt(s0)) ** 2 - 1e-12

    def test_uniform_exact(self):
        # uniform: equivalent kernel products integrate in closed form
        t, c = sp.symbols("t"), sp.Rational(1, 10)

        def J(lo):
            m = [sp.integrate(t**j / 2, (t, lo, 1)) for j in range(3)]
            return (m[2] - m[1] * t) / (m[0] * m[2] - m[1] ** 2)

        S = sp.integrate((J(c) / 2) ** 2, (t, c, 1))
        St = sp.integrate(J(c) * J(0) / 4, (t, c, 1))
        assert St == 4
        expected = float(S + 4 - 2 * St)
        assert delta_variance_theory("uniform", 0.1) == pytest.approx(expected, abs=1e-10)
