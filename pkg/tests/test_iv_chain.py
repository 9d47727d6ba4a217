import math

import numpy as np
import pytest
from scipy import stats

from chain_surgeon.errors import PreconditionError, TruncationError
from chain_surgeon.exact_real import DiscreteGaussian, dg_variance
from chain_surgeon.graph_core import ConductanceGraph, new_chain_graph
from chain_surgeon.iv_chain import (
    HeatBathKernel,
    HeightConfig,
    batch_means,
    enumerate_moments,
    exact_iv_variance,
    heat_bath_sweep,
    line_iv_variance,
    mcmc_variance,
)
from chain_surgeon.schemas import ChainSpec, McmcParams, VarianceEstimate
from chain_surgeon.worker_pool import WorkerPool


class TestEnumeration:
    def test_single_edge_is_discrete_gaussian(self, single_edge):
        est = exact_iv_variance(single_edge, 0)
        assert est.value == pytest.approx(dg_variance(1.0), rel=1e-8)
        assert est.method == "enumeration-exact"
        assert est.std_error == 0.0

    def test_path_is_sum_of_independent_increments(self, path3):
        expected = dg_variance(1.0) + dg_variance(2.0) + dg_variance(4.0)
        assert exact_iv_variance(path3, 0).value == pytest.approx(expected, rel=1e-7)
        assert line_iv_variance(path3, 0).value == pytest.approx(expected, rel=1e-14)

    def test_two_truncations_agree(self, triangle):
        a = enumerate_moments(triangle, [(0, "root")], truncation=8, certify=False)
        b = enumerate_moments(triangle, [(0, "root")], truncation=10, certify=False)
        assert a.second_moments[(0, "root")] == pytest.approx(b.second_moments[(0, "root")], rel=1e-10)

    def test_increment_moment(self, path3):
        result = enumerate_moments(path3, [(0, 2)])
        assert result.second_moments[(0, 2)] == pytest.approx(dg_variance(1.0) + dg_variance(2.0), rel=1e-7)
        assert result.certified

    def test_q_potential_single_edge(self, single_edge):
        k = np.arange(-60, 61)
        w = np.exp(-np.abs(k))
        expected = float(np.sum(k * k * w) / np.sum(w))
        result = enumerate_moments(single_edge, [(0, "root")], q=1.0)
        assert result.second_moments[(0, "root")] == pytest.approx(expected, rel=1e-7)

    def test_truncation_cap(self):
        g = ConductanceGraph.from_edges("root", {(0, "root"): 1e-4})
        with pytest.raises(TruncationError):
            exact_iv_variance(g, 0)

    def test_vertex_cap(self):
        g = new_chain_graph(ChainSpec(N=4, beta=1.0, alpha=3.0))
        with pytest.raises(PreconditionError):
            exact_iv_variance(g, 0)

    def test_chain_n2_monotone_in_alpha(self):
        values = [exact_iv_variance(new_chain_graph(ChainSpec(N=2, beta=1.0, alpha=a)), 0).value for a in (1.5, 2.5, 4.0)]
        assert values == sorted(values)

    def test_chain_monotone_in_size(self):
        values = [exact_iv_variance(new_chain_graph(ChainSpec(N=n, beta=1.0, alpha=3.0)), 0).value for n in (1, 2, 3)]
        assert values[0] < values[1] < values[2]

    @pytest.mark.parametrize("n", [1, 2])
    def test_shrinking_conductances_tenfold_raises_variance(self, n):
        strong = exact_iv_variance(new_chain_graph(ChainSpec(N=n, beta=2.0, alpha=3.0)), 0).value
        weak = exact_iv_variance(new_chain_graph(ChainSpec(N=n, beta=0.2, alpha=3.0)), 0).value
        assert weak > strong


class TestHeatBath:
    def test_height_config(self, triangle):
        state = HeightConfig.zeros(triangle)
        assert state["root"] == 0
        with pytest.raises(PreconditionError):
            HeightConfig((0, 1), "root", [0.5, 0.0])

    def test_sweep_returns_integers(self, triangle, rng):
        state = heat_bath_sweep(triangle, HeightConfig.zeros(triangle), rng)
        assert np.all(state.heights == np.round(state.heights))

    def test_isolated_vertex_rejected(self, rng):
        g = ConductanceGraph.from_edges("root", {(0, "root"): 1.0}, vertices=[1])
        with pytest.raises(PreconditionError):
            heat_bath_sweep(g, HeightConfig.zeros(g), rng)

    def test_batch_means_shape(self):
        assert batch_means(np.arange(100.0), 8).shape == (8,)

    def test_single_edge_matches_series(self, single_edge, quick_mcmc):
        est = mcmc_variance(single_edge, 0, quick_mcmc)
        assert abs(est.value - dg_variance(1.0)) < 4 * est.std_error
        assert est.details["batches"] == 16

    def test_conditional_law_satisfies_detailed_balance(self, triangle, rng):
        kernel = HeatBathKernel(triangle)
        for _ in range(50):
            phi = rng.integers(-4, 5, size=kernel.size).astype(float)
            i = int(rng.integers(kernel.size))
            moved = phi.copy()
            moved[i] = float(rng.integers(-4, 5))
            lam, center = kernel.conditional(phi, i)
            assert kernel.conditional(moved, i) == (lam, center)
            law = DiscreteGaussian(lam, center)
            forward = -_energy(triangle, kernel, phi) + math.log(float(law.pmf(moved[i])))
            backward = -_energy(triangle, kernel, moved) + math.log(float(law.pmf(phi[i])))
            assert forward == pytest.approx(backward, abs=1e-9)

    def test_stationary_law_on_two_vertices(self, triangle, rng):
        kernel = HeatBathKernel(triangle)
        window = np.arange(-6, 7)
        log_w = np.array([[-_energy(triangle, kernel, _at(kernel, {0: a, 1: b})) for b in window] for a in window])
        law = np.exp(log_w - log_w.max())
        law /= law.sum()
        phi = np.zeros(kernel.size)
        for _ in range(100):
            kernel.sweep(phi, rng)
        counts = np.zeros_like(law)
        draws = 20_000
        for _ in range(draws):
            for _ in range(3):
                kernel.sweep(phi, rng)
            a, b = int(phi[kernel.position(0)]), int(phi[kernel.position(1)])
            if abs(a) <= 6 and abs(b) <= 6:
                counts[a + 6, b + 6] += 1
        expected = law * draws
        keep = expected > 5
        observed = np.append(counts[keep], draws - counts[keep].sum())
        expected = np.append(expected[keep], draws - expected[keep].sum())
        assert stats.chisquare(observed, expected).pvalue > 1e-3

    def test_reproducible_and_independent_of_pool(self, triangle, quick_mcmc):
        params = quick_mcmc.model_copy(update={"replicas": 2})
        serial = mcmc_variance(triangle, 0, params)
        again = mcmc_variance(triangle, 0, params, WorkerPool(1))
        assert serial.value == again.value

    def test_random_scan(self, triangle, quick_mcmc):
        params = quick_mcmc.model_copy(update={"random_scan": True, "measure_sweeps": 8000})
        est = mcmc_variance(triangle, 0, params)
        exact = exact_iv_variance(triangle, 0).value
        assert abs(est.value - exact) < 4 * est.std_error

    def test_disconnected_target(self, quick_mcmc):
        g = ConductanceGraph.from_edges("root", {(0, 1): 1.0, (2, "root"): 1.0})
        assert math.isinf(mcmc_variance(g, 0, quick_mcmc).value)

    def test_finite_estimate_needs_an_error_bar(self):
        with pytest.raises(ValueError):
            VarianceEstimate(value=1.0, method="mcmc")
        assert VarianceEstimate(value=math.inf, method="mcmc").is_infinite
        assert VarianceEstimate(value=1.0, std_error=0.1, method="mcmc").std_error == 0.1

    @pytest.mark.slow
    def test_two_worker_processes_match_serial(self, triangle, quick_mcmc):
        params = quick_mcmc.model_copy(update={"replicas": 2})
        serial = mcmc_variance(triangle, 0, params)
        with WorkerPool(2) as pool:
            parallel = mcmc_variance(triangle, 0, params, pool)
        assert parallel.value == serial.value
        assert parallel.std_error == serial.std_error

    @pytest.mark.slow
    def test_chain_mcmc_monotone_in_size(self):
        params = McmcParams(burn_in_sweeps=2000, measure_sweeps=20_000, batch_count=20, seed=11)
        runs = [mcmc_variance(new_chain_graph(ChainSpec(N=n, beta=0.5, alpha=4.0)), 0, params) for n in (8, 16, 32, 64)]
        for small, large in zip(runs, runs[1:]):
            assert large.value >= small.value - 3 * math.hypot(small.std_error, large.std_error)

    def test_mcmc_params_need_enough_samples(self):
        with pytest.raises(ValueError):
            McmcParams(measure_sweeps=10, batch_count=16)

    @pytest.mark.slow
    def test_single_edge_million_sweeps(self, single_edge):
        params = McmcParams(burn_in_sweeps=1000, measure_sweeps=1_000_000, batch_count=32, seed=3)
        est = mcmc_variance(single_edge, 0, params)
        assert abs(est.value - dg_variance(1.0)) < 3 * est.std_error

    @pytest.mark.slow
    def test_random_four_vertex_graphs_match_enumeration(self):
        from chain_surgeon.rng import stream
        from chain_surgeon.selftest import random_rooted_graph

        rng = stream(5, "selftest", 2)
        misses = 0
        for trial in range(20):
            g = random_rooted_graph(rng, 4)
            params = McmcParams(burn_in_sweeps=500, measure_sweeps=50_000, batch_count=20, seed=trial)
            est = mcmc_variance(g, 0, params)
            exact = exact_iv_variance(g, 0).value
            misses += abs(est.value - exact) > 3 * est.std_error
        assert misses <= 1


def _at(kernel: HeatBathKernel, heights: dict) -> np.ndarray:
    phi = np.zeros(kernel.size)
    for v, h in heights.items():
        phi[kernel.position(v)] = h
    return phi


def _energy(g: ConductanceGraph, kernel: HeatBathKernel, phi: np.ndarray) -> float:
    """Sum of c(a, b) (phi(a) - phi(b))^2 over the edges, root pinned at 0."""
    h = {g.root: 0.0}
    h.update({v: float(phi[kernel.position(v)]) for v in kernel.vertices})
    return sum(c * (h[a] - h[b]) ** 2 for (a, b), c in g.edges.items())
