"""q-SOS long-range chain through its Gaussian-mixture representation.

For 0 < q < 2 the edge weight exp(-|x|**q) is an average of exp(-lam * x**2)
over a positive stable law mu_q of index q/2 (Laplace transform
exp(-t**(q/2))). Drawing i.i.d. conductances from mu_q (or from its
lam**(-1/2)-tilt, tilde mu_q) turns the q-SOS chain into a random-conductance
integer Gaussian chain whose averaged variance bounds the q-SOS variance from
below (mu_q) and above (tilde mu_q).
"""
import logging
import math
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import special

from chain_surgeon.config import settings
from chain_surgeon.errors import PreconditionError
from chain_surgeon.exact_real import dg_sample, power_tail, real_gff_variance
from chain_surgeon.graph_core import ConductanceGraph, GraphBuilder, new_chain_graph
from chain_surgeon.iv_chain import batch_means, enumerate_moments, exact_iv_variance, mcmc_variance
from chain_surgeon.rng import stream
from chain_surgeon.schemas import (
    ChainSpec,
    DerivativeReport,
    McmcParams,
    MixtureLaw,
    MonteCarloCheck,
    Pair,
    QChainParams,
    VarianceEstimate,
)

logger = logging.getLogger(__name__)

# stream sub-keys for the different random objects of this module
FIELD_CODES = {"mu_q": 1, "tilde_mu_q": 2}
METROPOLIS_CODE = 3
CHECK_CODE = 4

InnerMode = str  # "real" | "mcmc" | "enumeration"


def _check_q(q: float) -> float:
    q = float(q)
    if not 0 < q <= 2:
        raise PreconditionError(f"q must lie in (0, 2], got {q}")
    return q


# --- samplers ---------------------------------------------------------------

def _kanter_factor(u: np.ndarray, a: float) -> np.ndarray:
    r = (1.0 - a) / a
    return np.sin(a * u) / np.sin(u) ** (1.0 / a) * np.sin((1.0 - a) * u) ** r


def sample_mu_q(q: float, rng: np.random.Generator, size: Optional[int] = None):
    """Positive stable law with Laplace transform exp(-t**(q/2)), by Kanter's angle/exponential representation."""
    q = _check_q(q)
    n = 1 if size is None else size
    if q == 2.0:
        out = np.ones(n)
    else:
        a = q / 2.0
        r = (1.0 - a) / a
        u = rng.uniform(0.0, math.pi, n)
        e = rng.standard_exponential(n)
        out = _kanter_factor(u, a) * e ** (-r)
    return float(out[0]) if size is None else out


def sample_tilde_mu_q(q: float, rng: np.random.Generator, size: Optional[int] = None):
    """The lam**(-1/2) tilt of mu_q.

    In the (angle, exponential) coordinates the tilt factorises: the exponential
    becomes Gamma(1 + r/2) and the angle density picks up B(u)**(-1/2), which is
    rejection-sampled against the uniform angle since B is increasing from
    B(0+) = a (1 - a)**r.
    """
    q = _check_q(q)
    n = 1 if size is None else size
    if q == 2.0:
        out = np.ones(n)
    else:
        a = q / 2.0
        r = (1.0 - a) / a
        floor = a * (1.0 - a) ** r
        angles = np.empty(n)
        filled, proposed = 0, 0
        while filled < n:
            batch = max(16, 2 * (n - filled))
            u = rng.uniform(0.0, math.pi, batch)
            accept = rng.random(batch) < np.sqrt(floor / _kanter_factor(u, a))
            kept = u[accept][: n - filled]
            angles[filled: filled + kept.size] = kept
            filled += kept.size
            proposed += batch
        logger.debug(f"tilde mu_{q}: angle acceptance {n / proposed:.3f}")
        e = rng.gamma(1.0 + r / 2.0, 1.0, n)
        out = _kanter_factor(angles, a) * e ** (-r)
    return float(out[0]) if size is None else out


def sample_mixture(law: MixtureLaw, rng: np.random.Generator, size: Optional[int] = None):
    sampler = sample_mu_q if law.kind == "mu_q" else sample_tilde_mu_q
    return sampler(law.q, rng, size)


# --- random conductance chains ---------------------------------------------

def stable_sum_scale(weights, q: float) -> float:
    """Scale s with sum_j w_j lam_j equal in law to s * lam, for i.i.d. lam ~ mu_q."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise PreconditionError("stable sums need nonnegative weights")
    return float(np.sum(w ** (_check_q(q) / 2.0))) ** (2.0 / q)


def random_chain_graph(params: QChainParams, kind: str, seed: int, draw: int) -> ConductanceGraph:
    """One i.i.d. conductance field on the chain, as a graph with conductances beta_q lam_ij / |i - j|**alpha_q.

    Interior pairs get one draw each in canonical pair order. For ``mu_q`` the
    boundary coupling of each vertex is a stable sum and is drawn exactly as
    (beta * boundary power sum)**(2/q) * lam. For ``tilde_mu_q`` there is no
    closure: the couplings to outside points within QSOS_TAIL_CUTOFF_FACTOR * N
    of the boundary are drawn one by one and the rest are dropped, which can only
    raise the variance.
    """
    if kind not in FIELD_CODES:
        raise PreconditionError(f"unknown conductance law {kind!r}")
    spec = params.spec
    N, q = spec.N, params.q
    rng = stream(seed, "qsos", FIELD_CODES[kind], draw)
    n_int = 2 * N - 1
    positions = np.arange(-N + 1, N)
    i_idx, j_idx = np.triu_indices(n_int, k=1)
    law = MixtureLaw(q=q, kind=kind)
    lam = sample_mixture(law, rng, i_idx.size) if i_idx.size else np.zeros(0)
    interior = params.beta_q * lam * (j_idx - i_idx).astype(np.float64) ** (-params.alpha_q)
    if kind == "mu_q":
        boundary = spec.beta * (power_tail(spec.alpha, N - positions) + power_tail(spec.alpha, N + positions))
        roots = boundary ** (2.0 / q) * sample_mixture(law, rng, n_int)
    else:
        reach = settings.QSOS_TAIL_CUTOFF_FACTOR * N
        offsets = np.arange(0, reach, dtype=np.float64)
        roots = np.empty(n_int)
        for k, i in enumerate(positions.tolist()):
            dist = np.concatenate([N - i + offsets, N + i + offsets])
            draws = sample_mixture(law, rng, dist.size)
            roots[k] = params.beta_q * float(np.sum(draws * dist ** (-params.alpha_q)))
    heads = np.concatenate([i_idx, np.arange(n_int)])
    tails = np.concatenate([j_idx, np.full(n_int, n_int)])
    weights = np.concatenate([interior, roots])
    labels = {int(p): int(p) for p in positions}
    return ConductanceGraph.from_arrays(positions.tolist() + [N], N, heads, tails, weights, labels=labels)


sample_conductance_field = random_chain_graph


def _draw_job(job) -> Tuple[float, float, Optional[float]]:
    params, kind, inner, mcmc, draw = job
    g = random_chain_graph(params, kind, mcmc.seed, draw)
    if inner == "real":
        return real_gff_variance(g, 0).value, 0.0, None
    if inner == "enumeration":
        # random conductances can be small, so allow the wider q-SOS truncation
        result = enumerate_moments(g, [(0, g.root)], cap=settings.QSOS_ENUMERATION_MAX_TRUNCATION)
        return result.second_moments[(0, g.root)], 0.0, result.log_partition
    est = mcmc_variance(g, 0, mcmc, stream_key=(FIELD_CODES[kind], draw))
    return est.value, est.std_error, None


def _annealed(params: QChainParams, mcmc: McmcParams, draws: int, kind: str, inner: InnerMode, pool) -> VarianceEstimate:
    if inner not in ("real", "mcmc", "enumeration"):
        raise PreconditionError(f"unknown inner estimator {inner!r}")
    if inner == "enumeration" and params.spec.N > 3:
        raise PreconditionError("enumeration inner mode needs N <= 3")
    if params.q == 2.0:
        g = new_chain_graph(params.spec)
        if inner == "real":
            return real_gff_variance(g, 0)
        if inner == "enumeration":
            return exact_iv_variance(g, 0)
        return mcmc_variance(g, 0, mcmc, pool)
    if draws < 2:
        raise PreconditionError(f"annealed estimates need at least 2 draws, got {draws}")
    jobs = [(params, kind, inner, mcmc, d) for d in range(draws)]
    # inner MCMC chains stay serial inside each draw; the pool splits the draws
    results = pool.map(_draw_job, jobs) if pool is not None else [_draw_job(j) for j in jobs]
    values = np.array([r[0] for r in results])
    inner_se = np.array([r[1] for r in results])
    value = math.fsum(values.tolist()) / draws
    outer_se = float(values.std(ddof=1) / math.sqrt(draws))
    combined = math.sqrt(outer_se ** 2 + float(np.mean(inner_se ** 2)) / draws)
    details: Dict[str, Any] = {
        "estimator": "annealed-lower" if kind == "mu_q" else "annealed-upper",
        "inner": inner,
        "draws": draws,
        "outer_std_error": outer_se,
    }
    if inner == "enumeration":
        log_z = np.array([r[2] for r in results])
        w = np.exp(log_z - log_z.max())
        ratio = float(np.sum(w * values) / np.sum(w))
        ratio_se = float(math.sqrt(np.sum(w ** 2 * (values - ratio) ** 2)) / np.sum(w))
        details.update({"annealed_ratio": ratio, "annealed_ratio_std_error": ratio_se})
    logger.info(f"{details['estimator']} N={params.spec.N} q={params.q}: {value:.6g} +- {combined:.2g} over {draws} draws")
    return VarianceEstimate(
        value=value, std_error=combined, method="mcmc",
        samples_used=draws * (mcmc.replicas * mcmc.samples_per_replica if inner == "mcmc" else 1),
        details=details,
    )


def annealed_lower_estimate(params: QChainParams, mcmc: McmcParams, draws: int, inner: InnerMode = "mcmc", pool=None) -> VarianceEstimate:
    return _annealed(params, mcmc, draws, "mu_q", inner, pool)


def annealed_upper_estimate(params: QChainParams, mcmc: McmcParams, draws: int, inner: InnerMode = "mcmc", pool=None) -> VarianceEstimate:
    return _annealed(params, mcmc, draws, "tilde_mu_q", inner, pool)


# --- direct q-SOS estimates -------------------------------------------------

def qsos_exact(spec: ChainSpec, truncation: Optional[int] = None) -> VarianceEstimate:
    if spec.q is None:
        raise PreconditionError("qsos_exact needs a ChainSpec with q")
    if spec.N > 3:
        raise PreconditionError(f"qsos_exact enumerates chains up to N = 3, got N = {spec.N}")
    g = new_chain_graph(spec)
    result = enumerate_moments(g, [(0, g.root)], q=spec.q, truncation=truncation)
    return VarianceEstimate(
        value=result.second_moments[(0, g.root)],
        method="enumeration-exact",
        details={"truncation": result.truncation, "log_partition": result.log_partition, "q": spec.q},
    )


class QSosMetropolis:
    """Single-site Metropolis on sum c_vw |phi_v - phi_w|**q, mixing +-1 steps and discrete-Gaussian proposals."""

    def __init__(self, g: ConductanceGraph, q: float):
        self.q = _check_q(q)
        free = [i for i in range(g.n_vertices) if i != g.root_index]
        labels = g.component_labels()
        if any(labels[i] != labels[g.root_index] for i in free):
            raise PreconditionError("every vertex must be connected to the root")
        W = g.adjacency()
        idx = np.asarray(free, dtype=np.int64)
        self.vertices = tuple(g.vertices[i] for i in free)
        self._W = np.ascontiguousarray(W[np.ix_(idx, idx)])
        self._to_root = W[idx, g.root_index]
        self._s = self._W.sum(axis=1) + self._to_root
        self.proposed = {"step": 0, "gaussian": 0}
        self.accepted = {"step": 0, "gaussian": 0}

    def _local_energy(self, i: int, x: float, phi: np.ndarray) -> float:
        return float(self._W[i] @ np.abs(x - phi) ** self.q + self._to_root[i] * abs(x) ** self.q)

    def sweep(self, phi: np.ndarray, rng: np.random.Generator) -> None:
        for i in range(len(self.vertices)):
            old = phi[i]
            s = self._s[i]
            if rng.random() < 0.5:
                kind = "step"
                new = old + (1.0 if rng.random() < 0.5 else -1.0)
                log_q = 0.0
            else:
                kind = "gaussian"
                center = float(self._W[i] @ phi) / s
                new = float(dg_sample(s, rng, center=center))
                log_q = s * (new - center) ** 2 - s * (old - center) ** 2
            self.proposed[kind] += 1
            if new == old:
                self.accepted[kind] += 1
                continue
            delta = self._local_energy(i, new, phi) - self._local_energy(i, old, phi)
            if math.log1p(-rng.random()) < -delta + log_q:
                phi[i] = new
                self.accepted[kind] += 1

    def acceptance(self) -> Dict[str, float]:
        return {k: self.accepted[k] / self.proposed[k] if self.proposed[k] else 0.0 for k in self.proposed}


def _metropolis_replica(job):
    g, q, params, replica = job
    sampler = QSosMetropolis(g, q)
    target = sampler.vertices.index(0)
    rng = stream(params.seed, "qsos", METROPOLIS_CODE, replica)
    phi = np.zeros(len(sampler.vertices))
    for _ in range(params.burn_in_sweeps):
        sampler.sweep(phi, rng)
    samples = np.empty(params.samples_per_replica)
    for k in range(samples.size):
        for _ in range(params.thinning):
            sampler.sweep(phi, rng)
        samples[k] = phi[target] ** 2
    return samples, sampler.acceptance()


def qsos_mcmc(spec: ChainSpec, mcmc: McmcParams, pool=None) -> VarianceEstimate:
    if spec.q is None:
        raise PreconditionError("qsos_mcmc needs a ChainSpec with q")
    g = new_chain_graph(spec)
    jobs = [(g, spec.q, mcmc, r) for r in range(mcmc.replicas)]
    runs = pool.map(_metropolis_replica, jobs) if pool is not None else [_metropolis_replica(j) for j in jobs]
    means = np.concatenate([batch_means(samples, mcmc.batch_count) for samples, _ in runs])
    acceptance = {k: float(np.mean([acc[k] for _, acc in runs])) for k in ("step", "gaussian")}
    logger.debug(f"q-SOS Metropolis acceptance: +-1 {acceptance['step']:.3f}, gaussian {acceptance['gaussian']:.3f}")
    return VarianceEstimate(
        value=float(means.mean()),
        std_error=float(means.std(ddof=1) / math.sqrt(means.size)),
        method="mcmc",
        samples_used=mcmc.replicas * mcmc.samples_per_replica,
        details={"q": spec.q, "acceptance_step": acceptance["step"], "acceptance_gaussian": acceptance["gaussian"]},
    )


# --- derivative identity ----------------------------------------------------

def _with_conductance(g: ConductanceGraph, pair: Pair, value: float) -> ConductanceGraph:
    b = GraphBuilder.from_graph(g)
    b.set_conductance(*pair, value)
    return b.build()


def derivative_identity_check(
    g: ConductanceGraph,
    pair: Pair,
    scale: float = 1.0,
    truncation: Optional[int] = None,
    rel_tol: float = 1e-4,
) -> DerivativeReport:
    """Finite-difference check of d ln Z / d lam = -scale * E[(phi_k - phi_l)^2] for the edge conductance scale * lam."""
    if g.n_vertices > 4:
        raise PreconditionError(f"derivative check enumerates graphs up to 4 vertices, got {g.n_vertices}")
    k, l = (g.resolve(v) for v in pair)
    c = g.conductance(k, l)
    if c <= 0:
        raise PreconditionError(f"no edge between {k!r} and {l!r}")
    if scale <= 0:
        raise PreconditionError("scale must be positive")
    lam = c / scale
    # a truncation good for the smallest conductance on the grid below stays good for the rest
    grid = [0.5, 0.75, 1.0, 1.5, 2.0]
    M = truncation or enumerate_moments(_with_conductance(g, (k, l), scale * lam * grid[0]), [(k, l)]).truncation
    at = enumerate_moments(g, [(k, l)], truncation=M, certify=False)
    h = 1e-5 * lam
    plus = enumerate_moments(_with_conductance(g, (k, l), scale * (lam + h)), [], truncation=M, certify=False)
    minus = enumerate_moments(_with_conductance(g, (k, l), scale * (lam - h)), [], truncation=M, certify=False)
    fd = (plus.log_partition - minus.log_partition) / (2.0 * h)
    increment = at.second_moments[(k, l)]
    identity = -scale * increment
    rel = abs(fd - identity) / abs(identity) if identity != 0 else abs(fd)
    bound = 1.0 / (2.0 * c)
    tilted = [
        enumerate_moments(_with_conductance(g, (k, l), scale * lam * f), [], truncation=M, certify=False).log_partition
        + 0.5 * math.log(lam * f)
        for f in grid
    ]
    monotone = all(b >= a - 1e-12 for a, b in zip(tilted, tilted[1:]))
    bound_holds = increment <= bound * (1 + 1e-12)
    return DerivativeReport(
        pair=(k, l), lam=lam, scale=scale, step=h, fd_derivative=fd, identity_value=identity,
        relative_error=rel, increment_variance=increment, domination_bound=bound,
        bound_holds=bound_holds, tilted_monotone=monotone, truncation=M,
        passed=rel <= rel_tol and bound_holds and monotone,
    )


# --- Monte-Carlo checks -----------------------------------------------------

def _check(name: str, parameter: float, samples: np.ndarray, expected: float, z_max: float = 4.0) -> MonteCarloCheck:
    estimate = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(samples.size))
    z = (estimate - expected) / se if se > 0 else 0.0
    return MonteCarloCheck(name=name, parameter=parameter, estimate=estimate, std_error=se,
                           expected=expected, z_score=z, passed=abs(z) <= z_max)


def mixture_identity_check(q: float, x: float, draws: int, seed: int = 0) -> MonteCarloCheck:
    """exp(-|x|**q) against the Monte-Carlo mean of exp(-lam * x**2) under mu_q."""
    rng = stream(seed, "qsos", CHECK_CODE, 1, int(round(q * 1000)), int(round(x * 1000)))
    lam = sample_mu_q(q, rng, draws)
    return _check(f"mixture q={q}", x, np.exp(-lam * x * x), math.exp(-abs(x) ** q))


def laplace_check(q: float, t: float, draws: int, seed: int = 0) -> MonteCarloCheck:
    rng = stream(seed, "qsos", CHECK_CODE, 2, int(round(q * 1000)), int(round(t * 1000)))
    lam = sample_mu_q(q, rng, draws)
    return _check(f"laplace q={q}", t, np.exp(-t * lam), math.exp(-t ** (q / 2.0)))


def fkg_covariance(params: QChainParams, draws: int, seed: int = 0) -> MonteCarloCheck:
    """Covariance of Var^lam and Z^lam over mu_q fields; both decrease in every conductance, so it is >= 0."""
    if params.spec.N > 3:
        raise PreconditionError("the covariance check enumerates chains up to N = 3")
    variances, log_z = [], []
    for d in range(draws):
        g = random_chain_graph(params, "mu_q", seed, d)
        result = enumerate_moments(g, [(0, g.root)], cap=settings.QSOS_ENUMERATION_MAX_TRUNCATION)
        variances.append(result.second_moments[(0, g.root)])
        log_z.append(result.log_partition)
    f = np.array(variances)
    z = np.exp(np.array(log_z) - max(log_z))
    products = (f - f.mean()) * (z - z.mean())
    check = _check("fkg covariance", params.q, products, 0.0)
    return check.model_copy(update={"passed": check.z_score >= -4.0})


# --- stable block conductance and regimes -----------------------------------

def stable_block_scale(alpha: float, q: float, beta: float = 1.0) -> float:
    """Scale of the block conductance sum over pairs j <= i < j' of beta_q lam / |j - j'|**(alpha_q - 1).

    By stable closure this sum is distributed as scale * lam with lam ~ mu_q,
    finite when alpha > 2 + q/2.
    """
    q = _check_q(q)
    if not alpha > 2 + q / 2:
        raise PreconditionError(f"block conductance is infinite unless alpha > 2 + q/2, got alpha={alpha}, q={q}")
    return (beta * float(special.zeta(alpha - 1.0 - q / 2.0))) ** (2.0 / q)


def stable_block_conductance(alpha: float, q: float, rng: np.random.Generator, beta: float = 1.0, size: Optional[int] = None):
    scale = stable_block_scale(alpha, q, beta)
    return scale * sample_mu_q(q, rng, size)


def block_conductance_report(alpha: float, q: float, beta: float = 1.0, draws: int = 100_000, seed: int = 0) -> Dict[str, Any]:
    """Median (K_1/2) and fitted right-tail exponent of the block conductance."""
    rng = stream(seed, "qsos", CHECK_CODE, 3)
    c = stable_block_conductance(alpha, q, rng, beta, draws)
    scale = stable_block_scale(alpha, q, beta)
    k_half = float(np.median(c))
    grid = scale * np.logspace(1, 3, 9)
    tail = np.array([np.mean(c > k) for k in grid])
    usable = tail > 0
    slope = float(np.polyfit(np.log(grid[usable]), np.log(tail[usable]), 1)[0]) if usable.sum() >= 2 else math.nan
    return {
        "scale": scale,
        "K_half": k_half,
        "below_K_half": float(np.mean(c < k_half * (1 + 1e-12))),
        "tail_exponent": -slope,
        "expected_tail_exponent": q / 2.0,
    }


def qsos_regime(alpha: float, q: float) -> Dict[str, Dict[str, Any]]:
    """Lower and upper growth envelopes of the q-SOS variance in N."""
    q = _check_q(q)
    tol = 1e-12
    threshold = 2.0 + q / 2.0
    if alpha <= 2 + tol:
        lower = {"model": "const", "exponent": 0.0}
    elif alpha < threshold - tol:
        lower = {"model": "power", "exponent": 2.0 * (alpha - 2.0) / q}
    elif abs(alpha - threshold) <= tol:
        lower = {"model": "power", "exponent": 1.0, "log_power": -2.0 / q}
    else:
        lower = {"model": "power", "exponent": 1.0}
    if alpha < q - tol:
        upper = {"model": "const", "exponent": 0.0}
    elif abs(alpha - q) <= tol:
        upper = {"model": "log", "exponent": 0.0}
    else:
        upper = {"model": "power", "exponent": 2.0 * alpha / q - 2.0}
    return {"lower": lower, "upper": upper}
