import math

import numpy as np
import pytest
from scipy import special, stats

from chain_surgeon.errors import PreconditionError
from chain_surgeon.exact_real import (
    DiscreteGaussian,
    dg_acceptance_rate,
    dg_sample,
    dg_variance,
    power_tail,
    real_gff_covariance,
    real_gff_variance,
    real_increment_variance,
)
from chain_surgeon.graph_core import ConductanceGraph, new_chain_graph
from chain_surgeon.schemas import ChainSpec

from conftest import dense_variance


class TestPowerTail:
    def test_matches_zeta(self):
        assert power_tail(2.0, 1) == pytest.approx(math.pi ** 2 / 6, rel=1e-14)

    def test_vector_input(self):
        out = power_tail(3.0, np.array([1, 2, 5]))
        assert out.shape == (3,)
        assert out[1] == pytest.approx(special.zeta(3.0) - 1.0, rel=1e-12)

    def test_close_to_one_uses_large_terms(self):
        assert power_tail(1.05, 10) == pytest.approx(special.zeta(1.05, 10), rel=1e-8)

    def test_preconditions(self):
        with pytest.raises(PreconditionError):
            power_tail(1.0, 1)
        with pytest.raises(PreconditionError):
            power_tail(2.0, 0)


class TestRealField:
    def test_single_edge(self, single_edge):
        assert real_gff_variance(single_edge, 0).value == pytest.approx(0.5)

    def test_matches_dense_inverse(self, triangle):
        assert real_gff_variance(triangle, 1).value == pytest.approx(dense_variance(triangle, 1), rel=1e-12)

    def test_chain_matches_dense_inverse(self):
        g = new_chain_graph(ChainSpec(N=6, beta=0.7, alpha=2.5))
        assert real_gff_variance(g, 0).value == pytest.approx(dense_variance(g, 0), rel=1e-10)

    def test_series_path_is_sum_of_resistances(self, path3):
        assert real_gff_variance(path3, 0).value == pytest.approx(0.5 * (1.0 + 0.5 + 0.25), rel=1e-12)

    def test_disconnected_vertex_has_infinite_variance(self):
        g = ConductanceGraph.from_edges("root", {(0, 1): 1.0, (2, "root"): 1.0})
        est = real_gff_variance(g, 0)
        assert math.isinf(est.value)
        assert est.std_error == 0.0

    def test_root_rejected(self, triangle):
        with pytest.raises(PreconditionError):
            real_gff_variance(triangle, "root")

    def test_covariance_is_symmetric_positive(self, triangle):
        vertices, cov = real_gff_covariance(triangle)
        assert vertices == (0, 1)
        assert np.allclose(cov, cov.T)
        assert np.all(np.linalg.eigvalsh(cov) > 0)

    def test_increment_variance(self, path3):
        # phi(0) - phi(2) only sees the two edges between them
        assert real_increment_variance(path3, 0, 2).value == pytest.approx(0.5 * 1.5, rel=1e-12)
        assert real_increment_variance(path3, 1, 1).value == 0.0

    def test_variance_grows_with_chain_length(self):
        values = [real_gff_variance(new_chain_graph(ChainSpec(N=n, beta=1.0, alpha=2.5)), 0).value for n in (2, 4, 8, 16)]
        assert values == sorted(values)


class TestDiscreteGaussianVariance:
    def test_series_by_hand(self):
        k = np.arange(1, 50)
        w = np.exp(-0.3 * k * k)
        expected = 2 * np.sum(k * k * w) / (1 + 2 * np.sum(w))
        assert dg_variance(0.3) == pytest.approx(expected, rel=1e-13)

    @pytest.mark.parametrize("lam", np.logspace(-3, math.log10(30), 40))
    def test_bands(self, lam):
        var = dg_variance(lam)
        assert var <= 1.0 / (2.0 * lam)
        if lam <= 1:
            assert 0.22 <= lam * var <= 0.5
        if lam >= 1:
            assert 1.0 <= math.exp(lam) * var <= 4.0

    def test_domination_on_fine_grid(self):
        lams = np.logspace(-4, 1.5, 2000)
        assert all(dg_variance(lam) <= 1.0 / (2.0 * lam) for lam in lams)
        assert dg_variance(0.031072325059538598) <= 1.0 / (2.0 * 0.031072325059538598)

    def test_large_conductance_keeps_the_unit_steps(self):
        assert dg_variance(60.0) == pytest.approx(2.0 * math.exp(-60.0), rel=1e-9)

    def test_rejects_nonpositive(self):
        with pytest.raises(PreconditionError):
            dg_variance(0.0)
        with pytest.raises(PreconditionError):
            DiscreteGaussian(1.0, center=math.inf)


class TestDiscreteGaussianSampler:
    @pytest.mark.parametrize("lam", [0.05, 1.0, 4.0])
    def test_acceptance_rate_at_least_a_third(self, lam):
        for center in (0.0, 0.25, 0.5, -3.7):
            assert dg_acceptance_rate(lam, center) >= 1.0 / 3.0

    def test_pmf_sums_to_one(self):
        d = DiscreteGaussian(0.7, center=0.3)
        window = np.arange(-30, 31)
        assert d.pmf(window).sum() == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("lam,center", [(0.2, 0.0), (1.0, 0.4), (3.0, -1.5)])
    def test_chi_square_against_pmf(self, rng, lam, center):
        d = DiscreteGaussian(lam, center)
        draws = d.sample(rng, 40_000)
        support = np.arange(math.floor(center) - 6, math.floor(center) + 8)
        expected = d.pmf(support) * draws.size
        keep = expected > 5
        observed = np.array([np.sum(draws == k) for k in support[keep]])
        expected = expected[keep] * observed.sum() / expected[keep].sum()
        assert stats.chisquare(observed, expected).pvalue > 1e-4

    def test_scalar_path_agrees_with_vector_path(self, rng):
        scalars = np.array([dg_sample(0.5, rng, center=0.2) for _ in range(20_000)])
        d = DiscreteGaussian(0.5, center=0.2)
        mean = float(np.sum(np.arange(-20, 21) * d.pmf(np.arange(-20, 21))))
        assert abs(scalars.mean() - mean) < 4 * scalars.std() / math.sqrt(scalars.size)

    def test_sample_variance_matches_series(self, rng):
        draws = dg_sample(1.0, rng, size=100_000)
        se = draws.astype(float).var() * math.sqrt(2.0 / draws.size) * 2
        assert abs(draws.astype(float).var() - dg_variance(1.0)) < 4 * se
