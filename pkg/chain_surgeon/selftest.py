"""Fast invariant suite behind the ``selftest`` command."""
import logging
import math
from typing import Callable, List, Tuple

import numpy as np

from chain_surgeon.errors import ChainSurgeonError
from chain_surgeon.exact_real import dg_variance, real_gff_variance
from chain_surgeon.graph_core import (
    ConductanceGraph,
    delete_edge,
    identify_vertices,
    new_chain_graph,
    replay,
    split_edge_theta,
    split_edge_uniform,
)
from chain_surgeon.iv_chain import exact_iv_variance
from chain_surgeon.qsos import derivative_identity_check, laplace_check, mixture_identity_check, qsos_exact
from chain_surgeon.rng import stream
from chain_surgeon.scaling import sandwich_report
from chain_surgeon.schemas import ChainSpec, SelfTestResult
from chain_surgeon.surgery_pipelines import audit_certificates, run_pipeline

logger = logging.getLogger(__name__)


def random_rooted_graph(rng: np.random.Generator, n_vertices: int, density: float = 0.6) -> ConductanceGraph:
    """Connected random graph on 0..n-1 rooted at n-1, conductances in [0.1, 10]."""
    edges = {}
    for v in range(1, n_vertices):
        edges[(int(rng.integers(0, v)), v)] = float(rng.uniform(0.1, 10.0))
    for u in range(n_vertices):
        for v in range(u + 1, n_vertices):
            if (u, v) not in edges and rng.random() < density:
                edges[(u, v)] = float(rng.uniform(0.1, 10.0))
    return ConductanceGraph.from_edges(n_vertices - 1, edges, vertices=range(n_vertices))


def check_dg_bands() -> str:
    for lam in np.logspace(-3, math.log10(30), 40):
        var = dg_variance(lam)
        if var > 1.0 / (2.0 * lam) * (1 + 1e-12):
            raise AssertionError(f"Var > 1/(2 lam) at lam={lam:.4g}")
        if lam <= 1 and not 0.22 <= lam * var <= 0.5:
            raise AssertionError(f"lam Var = {lam * var:.4g} out of band at lam={lam:.4g}")
        if lam >= 1 and not 1 <= math.exp(lam) * var <= 4:
            raise AssertionError(f"e^lam Var = {math.exp(lam) * var:.4g} out of band at lam={lam:.4g}")
    return "40 grid points"


def check_surgery_monotonicity(seed: int, trials: int = 25) -> str:
    rng = stream(seed, "selftest", 1)
    for t in range(trials):
        g = random_rooted_graph(rng, int(rng.integers(3, 8)))
        base = real_gff_variance(g, 0).value
        (u, v), _ = next(iter(g.edges.items()))
        others = [w for w in g.vertices if w not in (0, g.root)]
        moved = {
            "delete": (delete_edge(g, (u, v)), +1),
            "theta": (split_edge_theta(g, (u, v), 1.0 + float(rng.uniform(0.1, 3.0))), -1),
            "uniform": (split_edge_uniform(g, (u, v), int(rng.integers(1, 4))), -1),
        }
        if others:
            moved["identify"] = (identify_vertices(g, others[0], g.root), -1)
        for name, (h, sign) in moved.items():
            after = real_gff_variance(h, 0).value
            if sign * (after - base) < -1e-9 * base:
                raise AssertionError(f"{name} moved the variance the wrong way on trial {t}")
    return f"{trials} random graphs"


def check_pipelines() -> str:
    result = run_pipeline("lower-gt3", ChainSpec(N=8, beta=1.0, alpha=4.0))
    if not result.reduced_graph.isclose(replay(new_chain_graph(result.spec), result.transcript), 1e-12):
        raise AssertionError("transcript replay differs from the reduced graph")
    audit = audit_certificates(result)
    if not audit["passed"]:
        raise AssertionError(f"certificate audit failed: {audit['failures']}")
    report = sandwich_report(4.0, 1.0, [16])
    if not report.all_hold:
        raise AssertionError("sandwich fails at alpha=4, N=16")
    return "replay, certificates and sandwich at alpha=4"


def check_qsos(seed: int) -> str:
    spec = ChainSpec(N=1, beta=1.0, alpha=3.0, q=2.0)
    direct = qsos_exact(spec).value
    gaussian = exact_iv_variance(new_chain_graph(spec), 0).value
    if abs(direct - gaussian) > 1e-12 * gaussian:
        raise AssertionError("q=2 enumeration disagrees with the Gaussian chain")
    for check in (mixture_identity_check(1.0, 1.0, 100_000, seed), laplace_check(1.5, 1.0, 100_000, seed)):
        if not check.passed:
            raise AssertionError(f"{check.name} at {check.parameter}: z = {check.z_score:.2f}")
    g = ConductanceGraph.from_edges("root", {(0, 1): 1.0, (1, "root"): 0.7, (0, "root"): 0.3})
    report = derivative_identity_check(g, (0, 1))
    if not report.passed:
        raise AssertionError(f"derivative identity off by {report.relative_error:.2e}")
    return "enumeration, mixture, Laplace transform and derivative identity"


def run_selftest(seed: int = 0) -> List[SelfTestResult]:
    checks: List[Tuple[str, Callable[[], str]]] = [
        ("discrete-gaussian-bands", check_dg_bands),
        ("surgery-monotonicity", lambda: check_surgery_monotonicity(seed)),
        ("pipelines", check_pipelines),
        ("qsos", lambda: check_qsos(seed)),
    ]
    results = []
    for name, check in checks:
        try:
            detail = check()
            results.append(SelfTestResult(name=name, passed=True, detail=detail))
            logger.info(f"selftest {name}: ok ({detail})")
        except (AssertionError, ChainSurgeonError) as e:
            logger.error(f"selftest {name} failed: {e}")
            results.append(SelfTestResult(name=name, passed=False, detail=str(e)))
    return results
