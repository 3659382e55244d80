import math

import numpy as np
import pytest
from scipy.special import ndtri
from scipy.stats import multivariate_normal

from screenforge.copulas import (
    ClaytonCopula,
    GaussianCopula,
    IndependenceCopula,
    bvn_upper,
    make_copula,
)
from screenforge.numerics import geometric_breaks, tensor_rule


def copula_mass(cop, gamma=0.0, order=16):
    pts, wts = tensor_rule(
        [(0.0, 1.0)] * cop.dim, [order] * cop.dim, [geometric_breaks(8)] * cop.dim
    )
    return float(np.dot(wts, cop.density(pts, gamma)))


@pytest.mark.parametrize(
    "cop",
    [
        IndependenceCopula(2),
        ClaytonCopula(2, alpha=2.0),
        ClaytonCopula(3, alpha=1.5),
        GaussianCopula(2, rho=0.5),
        GaussianCopula(2, rho=-0.4),
    ],
    ids=["indep", "clayton2", "clayton3d", "gauss.5", "gauss-.4"],
)
class TestCopulaContracts:
    def test_uniform_margins(self, cop):
        for u in (0.1, 0.37, 0.92):
            vec = np.ones(cop.dim)
            vec[0] = u
            assert abs(float(cop.cdf(vec, 0.3)) - u) < 1e-8

    def test_density_normalizes(self, cop):
        assert abs(copula_mass(cop) - 1.0) < 1e-6

    def test_chain_pushforward_matches_cdf(self, cop):
        # empirical joint cdf of chained draws vs the analytic copula cdf
        rng = np.random.default_rng(123)
        z = rng.random((40_000, cop.dim))
        u = cop.conditional_chain(z, 0.0)
        for pt in ([0.3] * cop.dim, [0.6] * cop.dim, [0.2, 0.8] + [0.5] * (cop.dim - 2)):
            pt = np.asarray(pt)
            emp = np.mean(np.all(u <= pt, axis=1))
            assert abs(emp - float(cop.cdf(pt, 0.0))) < 0.01

    def test_corners_map_to_corners(self, cop):
        z = np.zeros(cop.dim)
        np.testing.assert_allclose(cop.conditional_chain(z, 0.0), 0.0)
        z = np.ones(cop.dim)
        np.testing.assert_allclose(cop.conditional_chain(z, 0.0), 1.0)

    def test_partial_log_density_by_fd(self, cop):
        u0 = np.full(cop.dim, 0.4)
        grad = np.asarray(cop.partial_log_density(u0, 0.0), dtype=float)
        h = 1e-6
        for j in range(cop.dim):
            up, dn = u0.copy(), u0.copy()
            up[j] += h
            dn[j] -= h
            fd = (np.log(float(cop.density(up, 0.0))) - np.log(float(cop.density(dn, 0.0)))) / (2 * h)
            assert abs(fd - grad[j]) < 1e-5 * max(1.0, abs(grad[j]))


class TestClaytonClosedForm:
    def test_density_value(self):
        a = 2.0
        cop = ClaytonCopula(2, alpha=a)
        u = v = 0.5
        ref = (1 + a) * (u * v) ** (-(a + 1)) * (u**-a + v**-a - 1) ** (-(2 + 1 / a))
        assert abs(float(cop.density(np.array([u, v]), 0.0)) - ref) < 1e-12

    def test_conditional_roundtrip(self):
        a = 2.0
        cop = ClaytonCopula(2, alpha=a)
        z = np.array([[0.3, 0.8], [0.9, 0.1], [0.5, 0.5]])
        u = cop.conditional_chain(z, 0.0)
        cond = (1 + (u[:, 1] ** -a - 1) / (u[:, 0] ** -a)) ** (-(1 / a + 1))
        np.testing.assert_allclose(cond, z[:, 1], atol=1e-12)


class TestGaussianAgainstReferences:
    def test_bvn_zero_zero_closed_form(self):
        for rho in (-0.8, -0.3, 0.0, 0.2, 0.5, 0.93, 0.99):
            exact = 0.25 + math.asin(rho) / (2 * math.pi)
            assert abs(bvn_upper(0.0, 0.0, rho) - exact) < 1e-14

    def test_bvn_against_scipy(self):
        from scipy.special import ndtr

        rng = np.random.default_rng(5)
        for _ in range(40):
            h, k = rng.normal(size=2) * 1.5
            rho = rng.uniform(-0.98, 0.98)
            mvn = multivariate_normal(mean=[0, 0], cov=[[1, rho], [rho, 1]])
            ref = 1 - ndtr(h) - ndtr(k) + mvn.cdf([h, k])
            assert abs(bvn_upper(h, k, rho) - ref) < 5e-8

    def test_cdf_dim3_against_scipy(self):
        cop = GaussianCopula(3, rho=0.5)
        u = np.array([0.3, 0.6, 0.8])
        cov = np.full((3, 3), 0.5)
        np.fill_diagonal(cov, 1.0)
        ref = multivariate_normal(mean=np.zeros(3), cov=cov).cdf(ndtri(u))
        assert abs(float(cop.cdf(u, 0.0)) - ref) < 5e-6


class TestParameterPaths:
    def test_invariance_flags(self):
        assert GaussianCopula(2, rho=0.5).is_gamma_invariant
        assert not GaussianCopula(2, rho=0.2, rho_slope=0.6).is_gamma_invariant
        assert ClaytonCopula(2, alpha=2.0).is_gamma_invariant
        assert not ClaytonCopula(2, alpha=2.0, alpha_slope=1.0).is_gamma_invariant

    def test_gamma_path_changes_density(self):
        cop = GaussianCopula(2, rho=0.2, rho_slope=0.6)
        u = np.array([0.3, 0.3])
        d0 = float(cop.density(u, 0.0))
        d1 = float(cop.density(u, 1.0))
        assert abs(d0 - d1) > 0.05

    def test_registry(self):
        assert make_copula("independence", 2).name == "independence"
        assert make_copula("clayton", 2, alpha=1.0).name == "clayton"
        assert make_copula("gaussian", 2, rho=0.1).name == "gaussian"
        with pytest.raises(Exception):
            make_copula("tawn", 2)
