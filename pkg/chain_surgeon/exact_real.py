"""Exact oracles: the real-valued Gaussian free field and the discrete Gaussian.

Real-field variances come from a dense Cholesky factorisation of the Laplacian
grounded at the root. The discrete Gaussian of conductance lambda has mass
proportional to exp(-lambda * (k - m)**2) on the integers; its variance is
summed exactly and it is sampled by rejection from a rounded continuous
Gaussian.
"""
from __future__ import annotations

import logging
import math
from typing import TYPE_CHECKING, Optional, Tuple, Union

import numpy as np
from scipy import linalg, special

from chain_surgeon.config import settings
from chain_surgeon.errors import PreconditionError, SolveError
from chain_surgeon.schemas import VarianceEstimate

if TYPE_CHECKING:
    from chain_surgeon.graph_core import ConductanceGraph

logger = logging.getLogger(__name__)


# --- power-law tails --------------------------------------------------------

def _truncated_tail(alpha: float, start: float, rel_tol: float) -> float:
    # partial sum plus the Euler-Maclaurin remainder, error <= alpha * K**(-alpha-1) / 12
    terms = 64
    while True:
        k = start + terms
        partial = math.fsum((start + m) ** (-alpha) for m in range(terms))
        remainder = k ** (1.0 - alpha) / (alpha - 1.0) + 0.5 * k ** (-alpha)
        error = alpha * k ** (-alpha - 1.0) / 12.0
        if error <= rel_tol * (partial + remainder) or terms >= 1 << 22:
            return partial + remainder
        terms *= 4


def power_tail(alpha: float, start):
    """Sum over m >= 0 of (start + m)**(-alpha), for alpha > 1 and start >= 1."""
    if not alpha > 1:
        raise PreconditionError(f"power_tail needs alpha > 1, got {alpha!r}")
    s = np.asarray(start, dtype=np.float64)
    if np.any(s < 1):
        raise PreconditionError("power_tail needs start >= 1")
    out = np.atleast_1d(special.zeta(alpha, s)).astype(np.float64)
    bad = ~np.isfinite(out) | (out <= 0)
    if bad.any():
        flat = np.atleast_1d(s)
        for i in np.flatnonzero(bad):
            out[i] = _truncated_tail(alpha, float(flat[i]), settings.TAIL_REL_TOL)
    return float(out[0]) if s.ndim == 0 else out.reshape(s.shape)


# --- real Gaussian free field -----------------------------------------------

def grounded_factor(g: "ConductanceGraph", keep: np.ndarray):
    """Cholesky factor of the Laplacian restricted to vertex indices ``keep``.

    Vertices outside ``keep`` act as grounded (Dirichlet) vertices: their edges
    still count toward the diagonal.
    """
    keep = np.asarray(keep, dtype=np.int64)
    m = keep.size
    if m == 0:
        raise PreconditionError("nothing to solve: no free vertices")
    if m > settings.MAX_DENSE_VERTICES:
        raise PreconditionError(f"{m} free vertices exceed the dense-solve cap of {settings.MAX_DENSE_VERTICES}")
    heads, tails, weights = g.edge_arrays()
    pos = np.full(g.n_vertices, -1, dtype=np.int64)
    pos[keep] = np.arange(m)
    ph, pt = pos[heads], pos[tails]
    L = np.zeros((m, m))
    np.add.at(L, (ph[ph >= 0], ph[ph >= 0]), weights[ph >= 0])
    np.add.at(L, (pt[pt >= 0], pt[pt >= 0]), weights[pt >= 0])
    both = (ph >= 0) & (pt >= 0)
    np.add.at(L, (ph[both], pt[both]), -weights[both])
    np.add.at(L, (pt[both], ph[both]), -weights[both])
    try:
        return linalg.cho_factor(L, lower=True, check_finite=False)
    except linalg.LinAlgError as e:
        raise SolveError(f"grounded Laplacian is not positive definite: {e}") from e


def _free_indices(g: "ConductanceGraph") -> np.ndarray:
    labels = g.component_labels()
    members = np.flatnonzero(labels == labels[g.root_index])
    return members[members != g.root_index]


def real_gff_covariance(g: "ConductanceGraph") -> Tuple[tuple, np.ndarray]:
    """Covariance matrix of the real field on the root component (root excluded)."""
    keep = _free_indices(g)
    factor = grounded_factor(g, keep)
    cov = linalg.cho_solve(factor, np.eye(keep.size)) / 2.0
    return tuple(g.vertices[i] for i in keep.tolist()), cov


def _quadratic_form(g: "ConductanceGraph", vector: dict) -> float:
    keep = _free_indices(g)
    factor = grounded_factor(g, keep)
    rhs = np.zeros(keep.size)
    for idx, coef in vector.items():
        rhs[int(np.searchsorted(keep, idx))] += coef
    return float(rhs @ linalg.cho_solve(factor, rhs)) / 2.0


def real_gff_variance(g: "ConductanceGraph", v) -> VarianceEstimate:
    v = g.resolve(v)
    if v == g.root:
        raise PreconditionError("the root is pinned at 0; ask for a non-root vertex")
    if not g.connected_to_root(v):
        return VarianceEstimate(value=math.inf, method="laplacian-exact", details={"connected": 0})
    value = _quadratic_form(g, {g.index(v): 1.0})
    return VarianceEstimate(value=value, method="laplacian-exact", details={"connected": 1})


def real_increment_variance(g: "ConductanceGraph", a, b) -> VarianceEstimate:
    """Var[phi(a) - phi(b)] under the real field pinned at the root."""
    a, b = g.resolve(a), g.resolve(b)
    if a == b:
        return VarianceEstimate(value=0.0, method="laplacian-exact")
    if not (g.connected_to_root(a) and g.connected_to_root(b)):
        return VarianceEstimate(value=math.inf, method="laplacian-exact", details={"connected": 0})
    vector = {}
    if a != g.root:
        vector[g.index(a)] = 1.0
    if b != g.root:
        vector[g.index(b)] = -1.0
    return VarianceEstimate(value=_quadratic_form(g, vector), method="laplacian-exact", details={"connected": 1})


# --- discrete Gaussian ------------------------------------------------------

def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise PreconditionError(f"discrete Gaussian needs a positive finite conductance, got {lam!r}")
    return lam


def _tail_bound(lam: float, K: int) -> float:
    # integral bound on sum_{k > K} k^2 exp(-lam k^2)
    e = math.exp(-lam * K * K)
    return K * e / (2.0 * lam) + e / (4.0 * lam * lam * K)


def dg_variance(lam: float) -> float:
    lam = _check_lambda(lam)
    K = math.ceil(math.sqrt(40.0 / lam)) + 2
    while True:
        k = np.arange(1, K + 1, dtype=np.float64)
        w = np.exp(-lam * k * k)
        num = 2.0 * math.fsum((k * k * w).tolist())
        den = 1.0 + 2.0 * math.fsum(w.tolist())
        if num == 0.0 or 2.0 * _tail_bound(lam, K) <= 1e-14 * num:
            break
        K *= 2
    if num == 0.0:
        # exp(-lam) underflows; the +-1 terms are all that remain
        return 2.0 * math.exp(-lam)
    # Var <= 1/(2 lam) exactly; for small lam the gap is below one ulp
    return min(num / den, 0.5 / lam)


def _log_cell(k, center: float, sigma: float):
    """log P(round(center + sigma * Z) = k) for standard normal Z, stable in both tails."""
    k = np.asarray(k, dtype=np.float64)
    a = (k - 0.5 - center) / sigma
    b = (k + 0.5 - center) / sigma
    out = np.empty_like(k)
    right = a > 0
    left = b < 0
    mid = ~(right | left)
    if right.any():
        la, lb = special.log_ndtr(-a[right]), special.log_ndtr(-b[right])
        out[right] = la + np.log1p(-np.exp(lb - la))
    if left.any():
        la, lb = special.log_ndtr(b[left]), special.log_ndtr(a[left])
        out[left] = la + np.log1p(-np.exp(lb - la))
    if mid.any():
        out[mid] = np.log1p(-(special.ndtr(-b[mid]) + special.ndtr(a[mid])))
    return out


def _log_cell_scalar(k: int, center: float, sigma: float) -> float:
    a = (k - 0.5 - center) / sigma
    b = (k + 0.5 - center) / sigma
    if a > 0:
        la, lb = float(special.log_ndtr(-a)), float(special.log_ndtr(-b))
        return la + math.log1p(-math.exp(lb - la))
    if b < 0:
        la, lb = float(special.log_ndtr(b)), float(special.log_ndtr(a))
        return la + math.log1p(-math.exp(lb - la))
    return math.log1p(-(float(special.ndtr(-b)) + float(special.ndtr(a))))


def _sample_one(lam: float, center: float, sigma: float, rng: np.random.Generator) -> int:
    mode = math.floor(center + 0.5)
    log_ratio_mode = -lam * (mode - center) ** 2 - _log_cell_scalar(mode, center, sigma)
    while True:
        k = math.floor(center + sigma * rng.standard_normal() + 0.5)
        if k == mode:
            return k
        log_accept = -lam * (k - center) ** 2 - _log_cell_scalar(k, center, sigma) - log_ratio_mode
        if math.log1p(-rng.random()) < log_accept:
            return k


class DiscreteGaussian:
    """Law on the integers with mass proportional to exp(-lam * (k - center)**2)."""

    def __init__(self, lam: float, center: float = 0.0):
        self.lam = _check_lambda(lam)
        center = float(center)
        if not math.isfinite(center):
            raise PreconditionError(f"center must be finite, got {center!r}")
        self.center = center
        self.sigma = math.sqrt(1.0 / (2.0 * self.lam))
        # the ratio pmf/proposal peaks at the integer nearest the center
        self._mode = math.floor(center + 0.5)
        self._log_ratio_mode = -self.lam * (self._mode - center) ** 2 - float(_log_cell(self._mode, center, self.sigma))

    def __repr__(self) -> str:
        return f"DiscreteGaussian(lam={self.lam!r}, center={self.center!r})"

    def _window(self) -> np.ndarray:
        K = math.ceil(math.sqrt(40.0 / self.lam)) + 2
        return np.arange(self._mode - K, self._mode + K + 1)

    def pmf(self, k) -> np.ndarray:
        window = self._window()
        logw = -self.lam * (window - self.center) ** 2
        log_norm = special.logsumexp(logw)
        k = np.asarray(k, dtype=np.float64)
        return np.exp(-self.lam * (k - self.center) ** 2 - log_norm)

    def variance(self) -> float:
        if self.center == 0.0:
            return dg_variance(self.lam)
        window = self._window()
        p = self.pmf(window)
        mean = float(p @ window)
        return float(p @ (window - mean) ** 2)

    def acceptance_rate(self) -> float:
        window = self._window()
        logw = -self.lam * (window - self.center) ** 2
        return float(math.exp(special.logsumexp(logw) - self._log_ratio_mode))

    def _log_accept(self, k) -> np.ndarray:
        k = np.asarray(k, dtype=np.float64)
        return -self.lam * (k - self.center) ** 2 - _log_cell(k, self.center, self.sigma) - self._log_ratio_mode

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> Union[int, np.ndarray]:
        if size is None:
            return _sample_one(self.lam, self.center, self.sigma, rng)
        out = np.empty(size, dtype=np.int64)
        pending = np.arange(size)
        while pending.size:
            k = np.floor(self.center + self.sigma * rng.standard_normal(pending.size) + 0.5)
            accept = np.log1p(-rng.random(pending.size)) < self._log_accept(k)
            out[pending[accept]] = k[accept].astype(np.int64)
            pending = pending[~accept]
        return out


def dg_sample(lam: float, rng: np.random.Generator, center: float = 0.0, size: Optional[int] = None):
    if size is None and lam > 0 and math.isfinite(lam) and math.isfinite(center):
        return _sample_one(lam, center, math.sqrt(0.5 / lam), rng)
    return DiscreteGaussian(lam, center).sample(rng, size)


def dg_acceptance_rate(lam: float, center: float = 0.0) -> float:
    return DiscreteGaussian(lam, center).acceptance_rate()
