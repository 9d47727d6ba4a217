"""One handler per command. Each takes the effective RunConfig and a worker pool
and returns the JSON-ready result; ``emit`` writes it with the config and run id."""
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple
import hashlib
import json
import logging

import pandas as pd

from chain_surgeon.errors import PreconditionError
from chain_surgeon.exact_real import real_gff_variance
from chain_surgeon.graph_core import new_chain_graph, write_graph
from chain_surgeon.iv_chain import exact_iv_variance, mcmc_variance
from chain_surgeon.qsos import annealed_lower_estimate, annealed_upper_estimate, qsos_exact, qsos_mcmc
from chain_surgeon.scaling import rows_to_frame, run_sweep, sandwich_report, write_rows_csv
from chain_surgeon.schemas import ChainSpec, McmcParams, QChainParams, RunConfig
from chain_surgeon.selftest import run_selftest
from chain_surgeon.surgery_pipelines import audit_certificates, integer_audit, run_pipeline
from chain_surgeon.worker_pool import WorkerPool

logger = logging.getLogger(__name__)

HandlerResult = Tuple[Any, Optional[pd.DataFrame], bool]


def run_id(config: RunConfig) -> str:
    return hashlib.sha256(json.dumps(config.model_dump(mode="json"), sort_keys=True).encode()).hexdigest()


def _specs(config: RunConfig) -> list:
    if not config.N:
        raise PreconditionError("--N is required for this command")
    return [ChainSpec(N=n, beta=config.beta, alpha=config.alpha, q=config.q) for n in config.N]


def _single_spec(config: RunConfig) -> ChainSpec:
    specs = _specs(config)
    if len(specs) != 1:
        raise PreconditionError(f"{config.command} takes a single N, got {config.N}")
    return specs[0]


def _mcmc(config: RunConfig) -> McmcParams:
    return config.mcmc or McmcParams(seed=config.seed)


def handle_chain_exact(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    spec = _single_spec(config)
    g = new_chain_graph(spec)
    vertex = 0 if config.vertex is None else config.vertex
    estimate = exact_iv_variance(g, vertex) if config.integer else real_gff_variance(g, vertex)
    return {"spec": spec.model_dump(mode="json"), "vertex": vertex, "estimate": estimate.model_dump(mode="json")}, None, True


def handle_chain_mcmc(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    spec = _single_spec(config)
    vertex = 0 if config.vertex is None else config.vertex
    estimate = mcmc_variance(new_chain_graph(spec), vertex, _mcmc(config), pool, stream_key=(spec.N,))
    return {"spec": spec.model_dump(mode="json"), "vertex": vertex, "estimate": estimate.model_dump(mode="json")}, None, True


def handle_surgery(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    if not config.pipeline:
        raise PreconditionError("--pipeline is required for surgery")
    spec = _single_spec(config)
    result = run_pipeline(config.pipeline, spec)
    audit = audit_certificates(result)
    payload: Dict[str, Any] = {
        "certificate": result.certificate().model_dump(mode="json"),
        "audit": audit,
        "reduced_real_variance": real_gff_variance(result.reduced_graph, result.target).value,
    }
    if config.integer:
        payload["integer_audit"] = integer_audit(spec, config.pipeline, _mcmc(config), pool).model_dump(mode="json")
    if "graph_out" in config.outputs:
        write_graph(result.reduced_graph, config.outputs["graph_out"])
        logger.info(f"Reduced graph written to {config.outputs['graph_out']}")
    if "transcript_out" in config.outputs:
        Path(config.outputs["transcript_out"]).write_text(result.transcript.model_dump_json(indent=2))
        logger.info(f"Transcript written to {config.outputs['transcript_out']}")
    ok = audit["passed"] and payload.get("integer_audit", {}).get("holds", True)
    return payload, None, ok


def handle_qsos(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    spec = _single_spec(config)
    if spec.q is None:
        raise PreconditionError("--q is required for the qsos command")
    estimator = config.estimator or "lower"
    mcmc = _mcmc(config)
    if estimator == "exact":
        estimate = qsos_exact(spec)
    elif estimator == "mcmc":
        estimate = qsos_mcmc(spec, mcmc, pool)
    elif estimator in ("lower", "upper"):
        annealed = annealed_lower_estimate if estimator == "lower" else annealed_upper_estimate
        estimate = annealed(QChainParams(spec=spec), mcmc, config.draws, config.inner or "real", pool)
    else:
        raise PreconditionError(f"unknown q-SOS estimator {estimator!r}")
    return {"spec": spec.model_dump(mode="json"), "estimator": estimator, "estimate": estimate.model_dump(mode="json")}, None, True


def handle_sweep(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    fit = run_sweep(_specs(config), config.backend or "real-exact", _mcmc(config), config.draws, config.inner or "real", pool)
    return fit.model_dump(mode="json"), rows_to_frame(fit.rows), True


def handle_sandwich(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    if not config.N:
        raise PreconditionError("--N is required for sandwich")
    report = sandwich_report(config.alpha, config.beta, config.N, pool)
    return report.model_dump(mode="json"), rows_to_frame(report.rows), report.all_hold


def handle_selftest(config: RunConfig, pool: WorkerPool) -> HandlerResult:
    results = run_selftest(config.seed)
    return [r.model_dump(mode="json") for r in results], None, all(r.passed for r in results)


HANDLERS: Dict[str, Callable[[RunConfig, WorkerPool], HandlerResult]] = {
    "chain-exact": handle_chain_exact,
    "chain-mcmc": handle_chain_mcmc,
    "surgery": handle_surgery,
    "qsos": handle_qsos,
    "sweep": handle_sweep,
    "sandwich": handle_sandwich,
    "selftest": handle_selftest,
}


def emit(config: RunConfig, result: Any, frame: Optional[pd.DataFrame] = None) -> str:
    """Write the JSON document (to --out or stdout) and the optional CSV; returns the run id."""
    rid = run_id(config)
    document: Dict[str, Any] = {"run_id": rid, "config": config.model_dump(mode="json"), "result": result}
    header = [f"run_id={rid}", f"config={json.dumps(config.model_dump(mode='json'), sort_keys=True)}"]
    if config.timestamp:
        generated_at = datetime.now(timezone.utc).isoformat()
        document["generated_at"] = generated_at
        header.insert(0, f"generated_at={generated_at}")
    text = json.dumps(document, sort_keys=True, indent=2)
    if "out" in config.outputs:
        Path(config.outputs["out"]).write_text(text + "\n")
        logger.info(f"Result written to {config.outputs['out']}")
    else:
        print(text)
    if frame is not None and "csv" in config.outputs:
        write_rows_csv(frame, config.outputs["csv"], header)
        logger.info(f"Rows written to {config.outputs['csv']}")
    return rid


def dispatch(config: RunConfig, pool: WorkerPool) -> bool:
    handler = HANDLERS[config.command]
    logger.info(f"Running {config.command} (run {run_id(config)[:12]})")
    result, frame, ok = handler(config, pool)
    emit(config, result, frame)
    logger.info(f"{config.command} finished: {'ok' if ok else 'checks failed'}")
    return ok
