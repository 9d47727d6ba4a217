import numpy as np
import pytest

from chain_surgeon.graph_core import ConductanceGraph
from chain_surgeon.rng import stream
from chain_surgeon.schemas import ChainSpec, McmcParams


@pytest.fixture
def rng():
    return stream(1234, "selftest", 99)


@pytest.fixture
def single_edge():
    """Vertex 0 tied to the root by one unit conductance."""
    return ConductanceGraph.from_edges("root", {(0, "root"): 1.0})


@pytest.fixture
def triangle():
    return ConductanceGraph.from_edges("root", {(0, 1): 2.0, (1, "root"): 1.0, (0, "root"): 0.5})


@pytest.fixture
def path3():
    """0 - 1 - 2 - root with conductances 1, 2, 4."""
    return ConductanceGraph.from_edges("root", {(0, 1): 1.0, (1, 2): 2.0, (2, "root"): 4.0})


@pytest.fixture
def small_chain():
    return ChainSpec(N=2, beta=1.0, alpha=3.0)


@pytest.fixture
def quick_mcmc():
    return McmcParams(burn_in_sweeps=200, measure_sweeps=4000, batch_count=16, seed=7)


def dense_variance(g: ConductanceGraph, v) -> float:
    """Real-field variance straight from the pseudo-inverse of the grounded Laplacian."""
    L = g.laplacian()
    keep = [i for i in range(g.n_vertices) if i != g.root_index]
    cov = np.linalg.inv(L[np.ix_(keep, keep)]) / 2.0
    return float(cov[keep.index(g.index(v)), keep.index(g.index(v))])
