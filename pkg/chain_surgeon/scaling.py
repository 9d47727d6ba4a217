"""Sweeps over the chain length, growth-law fits and sandwich reports."""
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chain_surgeon.config import settings
from chain_surgeon.errors import ChainSurgeonError, FitError, PreconditionError
from chain_surgeon.exact_real import real_gff_variance
from chain_surgeon.graph_core import new_chain_graph
from chain_surgeon.iv_chain import mcmc_variance
from chain_surgeon.qsos import annealed_lower_estimate, annealed_upper_estimate, qsos_regime
from chain_surgeon.schemas import (
    ChainSpec,
    FitModel,
    FitResult,
    McmcParams,
    PipelineCertificate,
    QChainParams,
    SandwichReport,
    SandwichRow,
    ScalingFit,
    ScalingRow,
    VarianceEstimate,
)
from chain_surgeon.surgery_pipelines import run_pipeline, select_pipelines

logger = logging.getLogger(__name__)

BACKENDS = ("real-exact", "iv-mcmc", "qsos-annealed-lower", "qsos-annealed-upper")
FIT_MODELS: Tuple[FitModel, ...] = ("power", "log", "loglin", "const")
REGIME_TOL = 1e-12


# --- regimes ----------------------------------------------------------------

def regime_model(alpha: float, q: Optional[float] = None) -> Dict[str, Any]:
    """Growth law of Var[phi(0)] in N for the range exponent alpha.

    Gaussian chains (q absent or 2) follow the five-row table with equality
    branches at alpha = 2 and alpha = 3. For q < 2 only envelopes are known; the
    result carries both and fits a power law.
    """
    if not alpha > 1:
        raise PreconditionError(f"range exponent must exceed 1, got {alpha}")
    if q is not None and q != 2.0:
        envelopes = qsos_regime(alpha, q)
        return {
            "regime": f"qsos lower={envelopes['lower']['model']} upper={envelopes['upper']['model']}",
            "model": "power",
            "exponent": None,
            "envelopes": envelopes,
        }
    if alpha < 2 - REGIME_TOL:
        return {"regime": "alpha in (1,2)", "model": "const", "exponent": 0.0}
    if abs(alpha - 2) <= REGIME_TOL:
        return {"regime": "alpha = 2", "model": "log", "exponent": 0.0}
    if alpha < 3 - REGIME_TOL:
        return {"regime": "alpha in (2,3)", "model": "power", "exponent": alpha - 2.0}
    if abs(alpha - 3) <= REGIME_TOL:
        return {"regime": "alpha = 3", "model": "loglin", "exponent": 1.0}
    return {"regime": "alpha > 3", "model": "power", "exponent": 1.0}


# --- fits -------------------------------------------------------------------

def _rows_arrays(rows: Sequence[ScalingRow]) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    usable = sorted((r for r in rows if r.ok), key=lambda r: r.N)
    if len(usable) < 3:
        raise FitError(f"a fit needs at least 3 successful rows, got {len(usable)}")
    N = np.array([r.N for r in usable], dtype=np.float64)
    var = np.array([r.variance for r in usable], dtype=np.float64)
    if np.any(var <= 0):
        raise PreconditionError("growth fits need positive variances")
    se = np.array([r.std_error or 0.0 for r in usable], dtype=np.float64)
    return N, var, (se if np.all(se > 0) else None)


def predict(fit: FitResult, N) -> np.ndarray:
    N = np.asarray(N, dtype=np.float64)
    a = fit.params["a"]
    if fit.model == "power":
        return a * N ** fit.params["p"]
    if fit.model == "log":
        return a * np.log(N) + fit.params["b"]
    if fit.model == "loglin":
        return a * N / np.log(N)
    return np.full_like(N, a)


def _weighted_mean(y: np.ndarray, w: Optional[np.ndarray]) -> float:
    if w is None:
        return float(np.mean(y))
    return float(np.sum(w ** 2 * y) / np.sum(w ** 2))


def fit_exponent(rows: Sequence[ScalingRow], model: FitModel) -> FitResult:
    """Least squares in the coordinates that make ``model`` linear.

    Rows with error bars are weighted by the inverse standard error carried into
    the fitted coordinate (delta method); without error bars every row counts
    the same.
    """
    N, var, se = _rows_arrays(rows)
    if model in ("power", "log") and np.unique(N).size < 2:
        raise FitError("a slope fit needs at least two distinct N")
    if model == "power":
        x, y = np.log(N), np.log(var)
        w = None if se is None else var / se
        p, log_a = np.polyfit(x, y, 1, w=w)
        params = {"a": float(math.exp(log_a)), "p": float(p)}
        residual = y - (log_a + p * x)
    elif model == "log":
        x = np.log(N)
        if np.any(x <= 0):
            raise PreconditionError("the log model needs N >= 2")
        w = None if se is None else 1.0 / se
        a, b = np.polyfit(x, var, 1, w=w)
        params = {"a": float(a), "b": float(b)}
        residual = var - (a * x + b)
    elif model == "loglin":
        if np.any(N < 2):
            raise PreconditionError("the N/ln N model needs N >= 2")
        y = var * np.log(N) / N
        w = None if se is None else N / (np.log(N) * se)
        a = _weighted_mean(y, w)
        params = {"a": a}
        residual = y - a
    elif model == "const":
        w = None if se is None else 1.0 / se
        a = _weighted_mean(var, w)
        params = {"a": a}
        residual = var - a
    else:
        raise PreconditionError(f"unknown growth model {model!r}")
    result = FitResult(model=model, params=params, residual_rms=0.0, relative_rms=0.0, spread=1.0, n_rows=int(N.size))
    ratio = var / predict(result, N)
    if not np.all(np.isfinite(ratio)) or np.any(ratio <= 0):
        spread = math.inf
    else:
        spread = float(ratio.max() / ratio.min())
    return result.model_copy(update={
        "residual_rms": float(np.sqrt(np.mean(residual ** 2))),
        "relative_rms": float(np.sqrt(np.mean((ratio - 1.0) ** 2))),
        "spread": spread,
    })


def _band_ok(model: FitModel, rows: Sequence[ScalingRow], fit: FitResult) -> bool:
    N, var, _ = _rows_arrays(rows)
    if model == "const":
        return fit.spread <= settings.BOUNDED_SPREAD_TOL
    if model == "loglin":
        y = var * np.log(N) / N
        return bool(np.max(np.abs(y / y.mean() - 1.0)) <= settings.LOGLIN_BAND_TOL)
    # the alpha = 2 row is checked as Var / ln N staying in a band
    y = var / np.log(N)
    return bool(np.max(np.abs(y / y.mean() - 1.0)) <= settings.LOG_BAND_TOL)


def monotone_in_N(rows: Sequence[ScalingRow], sigmas: float = 3.0) -> bool:
    usable = sorted((r for r in rows if r.ok), key=lambda r: r.N)
    for a, b in zip(usable, usable[1:]):
        slack = sigmas * math.hypot(a.std_error or 0.0, b.std_error or 0.0) + 1e-12 * abs(a.variance)
        if b.variance < a.variance - slack:
            return False
    return True


# --- sweeps -----------------------------------------------------------------

def estimate_variance(
    spec: ChainSpec,
    backend: str,
    mcmc: Optional[McmcParams] = None,
    draws: Optional[int] = None,
    inner: str = "real",
    pool=None,
) -> VarianceEstimate:
    """Var[phi(0)] of one chain by the named backend."""
    if backend == "real-exact":
        return real_gff_variance(new_chain_graph(spec), 0)
    mcmc = mcmc or McmcParams()
    if backend == "iv-mcmc":
        return mcmc_variance(new_chain_graph(spec), 0, mcmc, pool, stream_key=(spec.N,))
    if backend in ("qsos-annealed-lower", "qsos-annealed-upper"):
        if spec.q is None:
            raise PreconditionError(f"backend {backend} needs q")
        params = QChainParams(spec=spec)
        draws = draws or settings.QSOS_DRAWS
        estimator = annealed_lower_estimate if backend.endswith("lower") else annealed_upper_estimate
        return estimator(params, mcmc, draws, inner, pool)
    raise PreconditionError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")


def _row_job(job) -> ScalingRow:
    spec, backend, mcmc, draws, inner = job
    seed = mcmc.seed if mcmc is not None else 0
    try:
        est = estimate_variance(spec, backend, mcmc, draws, inner)
    except ChainSurgeonError as e:
        logger.warning(f"Sweep row N={spec.N} failed: {e}")
        return ScalingRow(N=spec.N, seed=seed, error=f"{type(e).__name__}: {e}")
    logger.info(f"Sweep row N={spec.N}: {est.value:.6g} +- {est.std_error:.2g} ({est.method})")
    return ScalingRow(N=spec.N, variance=est.value, std_error=est.std_error, method=est.method, seed=seed)


def _expected_tolerance(backend: str, regime: Dict[str, Any]) -> Optional[float]:
    if regime["model"] != "power" or regime["exponent"] is None:
        return None
    if backend != "real-exact":
        return settings.MCMC_EXPONENT_TOL
    if regime["regime"] == "alpha in (2,3)":
        return settings.INTERIOR_EXPONENT_TOL
    return settings.EXACT_EXPONENT_TOL


def run_sweep(
    specs: Sequence[ChainSpec],
    backend: str,
    mcmc: Optional[McmcParams] = None,
    draws: Optional[int] = None,
    inner: str = "real",
    pool=None,
) -> ScalingFit:
    """One row per chain length, then the regime fit and every alternative model."""
    if backend not in BACKENDS:
        raise PreconditionError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")
    if not specs:
        raise PreconditionError("a sweep needs chain specs")
    first = specs[0]
    if any((s.alpha, s.beta, s.q) != (first.alpha, first.beta, first.q) for s in specs):
        raise PreconditionError("all specs in a sweep must share alpha, beta and q")
    Ns = sorted({s.N for s in specs})
    if len(Ns) < 4:
        raise PreconditionError(f"a sweep needs at least 4 distinct N, got {len(Ns)}")
    specs = sorted({s.N: s for s in specs}.values(), key=lambda s: s.N)
    q = first.q if backend.startswith("qsos") else None
    regime = regime_model(first.alpha, q)
    logger.info(f"Sweep {backend} alpha={first.alpha} beta={first.beta} q={first.q} over N={Ns}: {regime['regime']}")

    jobs = [(s, backend, mcmc, draws, inner) for s in specs]
    rows = pool.map(_row_job, jobs) if pool is not None else [_row_job(j) for j in jobs]

    model: FitModel = regime["model"]
    fit_rows = list(rows)
    if model in ("log", "loglin"):
        large = [r for r in rows if r.N >= settings.LOG_CORRECTED_MIN_N]
        if sum(r.ok for r in large) >= 3:
            fit_rows = large
        else:
            logger.debug(f"Too few rows with N >= {settings.LOG_CORRECTED_MIN_N}; fitting all rows")
    fit = fit_exponent(fit_rows, model)
    alternatives = []
    for alt in FIT_MODELS:
        try:
            alternatives.append(fit_exponent(fit_rows, alt))
        except ChainSurgeonError as e:
            logger.debug(f"Alternative model {alt} skipped: {e}")
    best = min(alternatives, key=lambda f: f.relative_rms).model if alternatives else None

    expected = regime["exponent"]
    tolerance = _expected_tolerance(backend, regime)
    envelope_fits: Dict[str, FitResult] = {}
    if "envelopes" in regime:
        envelopes = regime["envelopes"]
        for side in ("lower", "upper"):
            envelope_fits[side] = fit_exponent(fit_rows, envelopes[side]["model"])
        slack = settings.QSOS_ENVELOPE_SLACK
        p = fit.params["p"]
        within = envelopes["lower"]["exponent"] - slack <= p <= envelopes["upper"]["exponent"] + slack
        tolerance = slack
    elif tolerance is not None:
        within = abs(fit.params["p"] - expected) <= tolerance
    else:
        within = _band_ok(model, fit_rows, fit)

    logger.info(f"Fit {model} {fit.params} relative_rms={fit.relative_rms:.3g}, best alternative {best}, within tolerance: {within}")
    return ScalingFit(
        backend=backend,
        alpha=first.alpha,
        beta=first.beta,
        q=first.q,
        regime=regime["regime"],
        rows=rows,
        model=model,
        fitted_params=fit.params,
        residual_rms=fit.residual_rms,
        fit=fit,
        alternatives=alternatives,
        best_alternative=best,
        expected_exponent=expected,
        exponent_tolerance=tolerance,
        within_tolerance=bool(within),
        envelope_fits=envelope_fits,
        monotone_in_N=monotone_in_N(rows),
    )


def run_beta_scan(
    N: int,
    alpha: float,
    betas: Sequence[float],
    backend: str = "real-exact",
    mcmc: Optional[McmcParams] = None,
    q: Optional[float] = None,
    draws: Optional[int] = None,
    inner: str = "real",
    pool=None,
) -> pd.DataFrame:
    """Measured dependence on beta at fixed N; recorded only, nothing is asserted about it."""
    jobs = [(ChainSpec(N=N, beta=b, alpha=alpha, q=q), backend, mcmc, draws, inner) for b in betas]
    rows = pool.map(_row_job, jobs) if pool is not None else [_row_job(j) for j in jobs]
    frame = rows_to_frame(rows)
    frame.insert(0, "beta", list(betas))
    return frame


# --- sandwich ---------------------------------------------------------------

def _sandwich_job(spec: ChainSpec) -> Tuple[SandwichRow, List[PipelineCertificate]]:
    lower_name, upper_name = select_pipelines(spec.alpha)
    lower = run_pipeline(lower_name, spec)
    upper = run_pipeline(upper_name, spec)
    low = real_gff_variance(lower.reduced_graph, lower.target).value
    oracle = real_gff_variance(new_chain_graph(spec), 0).value
    high = real_gff_variance(upper.reduced_graph, upper.target).value
    row = SandwichRow(
        N=spec.N, lower=low, oracle=oracle, upper=high,
        lower_pipeline=lower_name, upper_pipeline=upper_name,
        holds=low < oracle < high,
        lower_margin=(oracle - low) / oracle,
        upper_margin=(high - oracle) / oracle,
    )
    if not row.holds:
        logger.warning(f"Sandwich fails at N={spec.N}: {low:.6g} / {oracle:.6g} / {high:.6g}")
    return row, [lower.certificate(), upper.certificate()]


def sandwich_report(alpha: float, beta: float, Ns: Sequence[int], pool=None) -> SandwichReport:
    """Lower-pipeline, chain and upper-pipeline real variances for every N, with strict ordering checked."""
    specs = [ChainSpec(N=n, beta=beta, alpha=alpha) for n in sorted(set(Ns))]
    if not specs:
        raise PreconditionError("a sandwich report needs at least one N")
    results = pool.map(_sandwich_job, specs) if pool is not None else [_sandwich_job(s) for s in specs]
    rows = [r for r, _ in results]
    certificates = [c for _, certs in results for c in certs]
    report = SandwichReport(alpha=alpha, beta=beta, rows=rows, certificates=certificates,
                            all_hold=all(r.holds for r in rows))
    logger.info(f"Sandwich alpha={alpha} beta={beta}: {'holds' if report.all_hold else 'FAILS'} at N={[r.N for r in rows]}")
    return report


# --- tables -----------------------------------------------------------------

ROW_COLUMNS = ["N", "variance", "std_error", "method", "seed", "error"]


def rows_to_frame(rows: Sequence[Any]) -> pd.DataFrame:
    """Scaling or sandwich rows as a DataFrame, one row per model."""
    records = [r.model_dump() for r in rows]
    if rows and isinstance(rows[0], ScalingRow):
        return pd.DataFrame.from_records(records, columns=ROW_COLUMNS)
    return pd.DataFrame.from_records(records)


def write_rows_csv(frame: pd.DataFrame, path, comments: Sequence[str] = ()) -> None:
    """CSV with leading ``# key=value`` comment lines."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        frame.to_csv(fh, index=False, float_format="%.17g")
