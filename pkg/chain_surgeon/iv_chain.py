"""Integer-valued Gaussian free field: exact enumeration and heat-bath MCMC."""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from chain_surgeon.config import settings
from chain_surgeon.errors import PreconditionError, TruncationError
from chain_surgeon.exact_real import dg_sample, dg_variance, real_gff_covariance
from chain_surgeon.graph_core import ConductanceGraph
from chain_surgeon.rng import stream
from chain_surgeon.schemas import McmcParams, Pair, VarianceEstimate, Vertex

logger = logging.getLogger(__name__)

# rows per vectorised enumeration chunk
_CHUNK_ROWS = 1 << 20


class HeightConfig:
    """Integer heights on the non-root vertices; the root is pinned at 0."""

    __slots__ = ("vertices", "root", "heights", "_index")

    def __init__(self, vertices: Sequence[Vertex], root: Vertex, heights):
        self.vertices = tuple(vertices)
        self.root = root
        if root in self.vertices:
            raise PreconditionError("the root carries no free height")
        heights = np.asarray(heights, dtype=np.float64)
        if heights.shape != (len(self.vertices),):
            raise PreconditionError("one height per non-root vertex")
        if not np.all(np.isfinite(heights)) or np.any(heights != np.round(heights)):
            raise PreconditionError("heights must be finite integers")
        self.heights = heights
        self._index = {v: i for i, v in enumerate(self.vertices)}

    @classmethod
    def zeros(cls, g: ConductanceGraph) -> "HeightConfig":
        free = [v for v in g.vertices if v != g.root]
        return cls(free, g.root, np.zeros(len(free)))

    def __getitem__(self, v) -> int:
        if v == self.root:
            return 0
        return int(self.heights[self._index[v]])

    def as_dict(self) -> Dict[Vertex, int]:
        out = {v: int(h) for v, h in zip(self.vertices, self.heights.tolist())}
        out[self.root] = 0
        return out

    def __repr__(self) -> str:
        return f"HeightConfig({self.as_dict()!r})"


class HeatBathKernel:
    """Single-site heat bath: the conditional law at v is a shifted discrete Gaussian."""

    def __init__(self, g: ConductanceGraph):
        labels = g.component_labels()
        totals = g.total_conductance()
        free = [i for i in range(g.n_vertices) if i != g.root_index]
        for i in free:
            if totals[i] <= 0:
                raise PreconditionError(f"vertex {g.vertices[i]!r} is isolated; its conditional law is undefined")
            if labels[i] != labels[g.root_index]:
                raise PreconditionError(f"vertex {g.vertices[i]!r} is not connected to the root")
        W = g.adjacency()
        idx = np.asarray(free, dtype=np.int64)
        self.vertices = tuple(g.vertices[i] for i in free)
        self.root = g.root
        self._W = np.ascontiguousarray(W[np.ix_(idx, idx)])
        self._s = totals[idx]
        self._index = {v: i for i, v in enumerate(self.vertices)}

    @property
    def size(self) -> int:
        return len(self.vertices)

    def position(self, v) -> int:
        return self._index[v]

    def conditional(self, phi: np.ndarray, i: int) -> Tuple[float, float]:
        """Conductance and center of the law of site i given the other heights."""
        s = float(self._s[i])
        return s, float(self._W[i] @ phi) / s

    def sweep(self, phi: np.ndarray, rng: np.random.Generator, random_scan: bool = False) -> None:
        n = self.size
        order = rng.integers(0, n, size=n).tolist() if random_scan else range(n)
        for i in order:
            lam, center = self.conditional(phi, i)
            phi[i] = dg_sample(lam, rng, center=center)


def heat_bath_sweep(g: ConductanceGraph, state: HeightConfig, rng: np.random.Generator,
                    random_scan: bool = False) -> HeightConfig:
    kernel = HeatBathKernel(g)
    if state.vertices != kernel.vertices:
        raise PreconditionError("height configuration does not match the graph's vertices")
    phi = state.heights.copy()
    kernel.sweep(phi, rng, random_scan)
    return HeightConfig(state.vertices, state.root, phi)


def _run_replica(job) -> np.ndarray:
    g, v, params, stream_key, replica = job
    kernel = HeatBathKernel(g)
    target = kernel.position(v)
    rng = stream(params.seed, "iv_chain", *stream_key, replica)
    phi = np.zeros(kernel.size)
    for _ in range(params.burn_in_sweeps):
        kernel.sweep(phi, rng, params.random_scan)
    samples = np.empty(params.samples_per_replica)
    for k in range(samples.size):
        for _ in range(params.thinning):
            kernel.sweep(phi, rng, params.random_scan)
        samples[k] = phi[target] ** 2
    return samples


def batch_means(samples: np.ndarray, batch_count: int) -> np.ndarray:
    size = samples.size // batch_count
    return samples[: size * batch_count].reshape(batch_count, size).mean(axis=1)


def mcmc_variance(g: ConductanceGraph, v, params: McmcParams, pool=None, *, stream_key: Tuple[int, ...] = ()) -> VarianceEstimate:
    """Batch-means estimate of Var[phi(v)] pooled over ``params.replicas`` chains."""
    v = g.resolve(v)
    if v == g.root:
        raise PreconditionError("the root is pinned at 0; ask for a non-root vertex")
    if not g.connected_to_root(v):
        return VarianceEstimate(value=math.inf, method="mcmc", details={"connected": 0})
    sub = g.root_component()
    jobs = [(sub, v, params, tuple(stream_key), r) for r in range(params.replicas)]
    runs = pool.map(_run_replica, jobs) if pool is not None else [_run_replica(job) for job in jobs]
    means = np.concatenate([batch_means(samples, params.batch_count) for samples in runs])
    everything = np.concatenate(runs)
    value = float(means.mean())
    std_error = float(means.std(ddof=1) / math.sqrt(means.size))
    batch_size = params.samples_per_replica // params.batch_count
    sample_var = float(everything.var(ddof=1))
    tau = batch_size * float(means.var(ddof=1)) / sample_var if sample_var > 0 else 1.0
    logger.debug(f"Heat bath at {v!r}: estimate {value:.6g} +- {std_error:.2g}, tau ~ {tau:.3g}")
    return VarianceEstimate(
        value=value,
        std_error=std_error,
        method="mcmc",
        samples_used=int(everything.size),
        details={"replicas": params.replicas, "batches": int(means.size), "autocorrelation_time": tau},
    )


def line_iv_variance(g: ConductanceGraph, v) -> VarianceEstimate:
    """Exact variance when the root component is a tree: independent discrete Gaussians along the path."""
    v = g.resolve(v)
    if v == g.root:
        raise PreconditionError("the root is pinned at 0; ask for a non-root vertex")
    if not g.connected_to_root(v):
        return VarianceEstimate(value=math.inf, method="series-exact", details={"connected": 0})
    sub = g.root_component()
    if sub.n_edges != sub.n_vertices - 1:
        raise PreconditionError("the root component is not a tree")
    parent: Dict[Vertex, Tuple[Vertex, float]] = {}
    frontier = [sub.root]
    seen = {sub.root}
    while frontier:
        u = frontier.pop()
        for w, c in sub.neighbours(u).items():
            if w not in seen:
                seen.add(w)
                parent[w] = (u, c)
                frontier.append(w)
    terms = []
    u = v
    while u != sub.root:
        u, c = parent[u]
        terms.append(dg_variance(c))
    return VarianceEstimate(value=math.fsum(terms), method="series-exact", details={"path_edges": len(terms)})


# --- exact enumeration ------------------------------------------------------

@dataclass(frozen=True)
class EnumerationResult:
    truncation: int
    log_partition: float
    second_moments: Dict[Pair, float]
    certified: bool


class _Enumerator:
    def __init__(self, g: ConductanceGraph, q: float):
        sub = g.root_component()
        free = [i for i in range(sub.n_vertices) if i != sub.root_index]
        if sub.n_vertices > settings.ENUMERATION_MAX_VERTICES:
            raise PreconditionError(
                f"enumeration handles at most {settings.ENUMERATION_MAX_VERTICES} vertices, got {sub.n_vertices}"
            )
        self.graph = sub
        self.q = float(q)
        self.n = len(free)
        self.column = {sub.vertices[i]: c for c, i in enumerate(free)}
        self.column[sub.root] = self.n
        heads, tails, weights = sub.edge_arrays()
        self.heads = np.array([self.column[sub.vertices[i]] for i in heads.tolist()], dtype=np.int64)
        self.tails = np.array([self.column[sub.vertices[i]] for i in tails.tolist()], dtype=np.int64)
        self.weights = weights.copy()

    def columns(self, pair: Pair) -> Tuple[int, int]:
        a, b = (self.graph.resolve(x) for x in pair)
        if a not in self.column or b not in self.column:
            raise PreconditionError(f"{pair!r} is not inside the root component")
        return self.column[a], self.column[b]

    def initial_truncation(self) -> int:
        if self.n == 0:
            return 1
        _, cov = real_gff_covariance(self.graph)
        sigma2 = float(np.max(np.diag(cov)))
        return max(1, math.ceil((46.0 * sigma2) ** (1.0 / self.q)))

    def sums(self, M: int, observables: List[Tuple[int, int]]):
        """Partition sums and second moments at truncations M and M + 1 in one pass."""
        heights = np.arange(-(M + 1), M + 2, dtype=np.int64)
        width, n = heights.size, self.n
        lead = 0
        while lead < n and width ** (n - lead) > _CHUNK_ROWS:
            lead += 1
        rest = n - lead
        if rest:
            tail = np.stack(np.meshgrid(*([heights] * rest), indexing="ij"), axis=-1).reshape(-1, rest)
            tail_inner = np.abs(tail).max(axis=1) <= M
        else:
            tail = np.zeros((1, 0), dtype=np.int64)
            tail_inner = np.ones(1, dtype=bool)
        conf = np.zeros((tail.shape[0], n + 1), dtype=np.int64)
        conf[:, lead:n] = tail
        outer = np.zeros(1 + len(observables))
        inner = np.zeros(1 + len(observables))
        for prefix in itertools.product(heights.tolist(), repeat=lead):
            conf[:, :lead] = prefix
            diff = np.abs(conf[:, self.heads] - conf[:, self.tails]).astype(np.float64)
            energy = (diff * diff if self.q == 2.0 else diff ** self.q) @ self.weights
            weight = np.exp(-energy)
            mask = tail_inner & (max((abs(x) for x in prefix), default=0) <= M)
            outer[0] += weight.sum()
            inner[0] += weight[mask].sum()
            for k, (a, b) in enumerate(observables, start=1):
                sq = (conf[:, a] - conf[:, b]).astype(np.float64) ** 2
                outer[k] += sq @ weight
                inner[k] += sq[mask] @ weight[mask]
        return inner, outer


def _moments(sums: np.ndarray, pairs: List[Pair]) -> Dict[Pair, float]:
    return {tuple(pair): float(sums[k] / sums[0]) for k, pair in enumerate(pairs, start=1)}


def enumerate_moments(
    g: ConductanceGraph,
    pairs: Sequence[Pair],
    *,
    q: float = 2.0,
    truncation: Optional[int] = None,
    cap: Optional[int] = None,
    certify: bool = True,
) -> EnumerationResult:
    """Second moments E[(phi(a) - phi(b))^2] and ln Z for the |x|^q height model.

    With ``certify`` the truncation grows from ``truncation`` (or a size derived
    from the real-field variance) until M and M + 1 agree to
    ``settings.ENUMERATION_REL_TOL``. Without it the sums are taken at exactly
    ``truncation``.
    """
    en = _Enumerator(g, q)
    pairs = [tuple(p) for p in pairs]
    observables = [en.columns(p) for p in pairs]
    if cap is None:
        cap = settings.ENUMERATION_MAX_TRUNCATION if q == 2.0 else settings.QSOS_ENUMERATION_MAX_TRUNCATION
    if truncation is not None and truncation < 1:
        raise PreconditionError(f"truncation must be at least 1, got {truncation}")
    if not certify:
        if truncation is None:
            raise PreconditionError("a fixed-truncation evaluation needs a truncation")
        inner, _ = en.sums(truncation, observables)
        return EnumerationResult(truncation, math.log(inner[0]), _moments(inner, pairs), False)

    M = max(truncation or 1, min(en.initial_truncation(), cap - 1))
    tol = settings.ENUMERATION_REL_TOL
    while M + 1 <= cap:
        inner, outer = en.sums(M, observables)
        log_change = abs(math.log(outer[0]) - math.log(inner[0]))
        moments_in, moments_out = _moments(inner, pairs), _moments(outer, pairs)
        settled = log_change <= tol and all(
            abs(moments_out[p] - moments_in[p]) <= tol * abs(moments_out[p]) for p in pairs
        )
        if settled:
            logger.debug(f"Enumeration settled at truncation {M + 1} over {en.n} free vertices")
            return EnumerationResult(M + 1, math.log(outer[0]), moments_out, True)
        M += 1
    raise TruncationError(f"height enumeration did not settle by truncation {cap}")


def exact_iv_variance(g: ConductanceGraph, v, truncation: Optional[int] = None) -> VarianceEstimate:
    v = g.resolve(v)
    if v == g.root:
        raise PreconditionError("the root is pinned at 0; ask for a non-root vertex")
    if not g.connected_to_root(v):
        return VarianceEstimate(value=math.inf, method="enumeration-exact", details={"connected": 0})
    result = enumerate_moments(g, [(v, g.root)], truncation=truncation)
    return VarianceEstimate(
        value=result.second_moments[(v, g.root)],
        method="enumeration-exact",
        details={"truncation": result.truncation, "log_partition": result.log_partition},
    )
