import argparse
import logging
import sys
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from chain_surgeon.config import settings
from chain_surgeon.dependencies import get_worker_pool
from chain_surgeon.errors import EXIT_OK, EXIT_PRECONDITION, EXIT_RUNTIME, PreconditionError
from chain_surgeon.graph_core import parse_vertex
from chain_surgeon.routes import dispatch
from chain_surgeon.scaling import BACKENDS
from chain_surgeon.schemas import McmcParams, RunConfig
from chain_surgeon.surgery_pipelines import PIPELINES

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; surface them as precondition failures instead
    def error(self, message):
        raise UsageError(message)


def parse_n_list(text: str) -> List[int]:
    """``64,128,256`` or ``min:max:steps`` (geometric, rounded, deduplicated)."""
    try:
        if ":" in text:
            lo, hi, steps = (int(x) for x in text.split(":"))
            if lo < 1 or hi < lo or steps < 1:
                raise ValueError
            values = np.rint(np.geomspace(lo, hi, steps)).astype(int).tolist()
            return sorted(set(values))
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad N list {text!r}; use 64,128 or min:max:steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chain_surgeon", description="Long-range chain variances, graph surgery and scaling fits.")
    parser.add_argument("--seed", type=int, default=settings.SEED)
    parser.add_argument("--jobs", type=int, default=settings.JOBS)
    parser.add_argument("--no-timestamp", action="store_true")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def chain_args(p):
        p.add_argument("--N", type=parse_n_list, required=True)
        p.add_argument("--beta", type=float, default=1.0)
        p.add_argument("--alpha", type=float, required=True)
        p.add_argument("--out")

    def mcmc_args(p):
        p.add_argument("--burn-in", type=int, default=settings.MCMC_BURN_IN_SWEEPS)
        p.add_argument("--sweeps", type=int, default=settings.MCMC_MEASURE_SWEEPS)
        p.add_argument("--thinning", type=int, default=settings.MCMC_THINNING)
        p.add_argument("--batches", type=int, default=settings.MCMC_BATCH_COUNT)
        p.add_argument("--replicas", type=int, default=1)
        p.add_argument("--random-scan", action="store_true")

    p = sub.add_parser("chain-exact")
    chain_args(p)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--real", action="store_true")
    mode.add_argument("--integer", action="store_true")
    p.add_argument("--vertex", type=parse_vertex)

    p = sub.add_parser("chain-mcmc")
    chain_args(p)
    mcmc_args(p)
    p.add_argument("--vertex", type=parse_vertex)

    p = sub.add_parser("surgery")
    chain_args(p)
    mcmc_args(p)
    p.add_argument("--pipeline", choices=sorted(PIPELINES), required=True)
    p.add_argument("--integer", action="store_true", help="also audit the integer-valued field")
    p.add_argument("--graph-out")
    p.add_argument("--transcript-out")

    p = sub.add_parser("qsos")
    chain_args(p)
    mcmc_args(p)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--estimator", choices=["exact", "mcmc", "lower", "upper"], default="lower")
    p.add_argument("--inner", choices=["real", "mcmc", "enumeration"], default="real")
    p.add_argument("--draws", type=int, default=settings.QSOS_DRAWS)

    p = sub.add_parser("sweep")
    chain_args(p)
    mcmc_args(p)
    p.add_argument("--q", type=float)
    p.add_argument("--backend", choices=BACKENDS, default="real-exact")
    p.add_argument("--inner", choices=["real", "mcmc", "enumeration"], default="real")
    p.add_argument("--draws", type=int, default=settings.QSOS_DRAWS)
    p.add_argument("--csv")

    p = sub.add_parser("sandwich")
    chain_args(p)
    p.add_argument("--csv")

    p = sub.add_parser("selftest")
    p.add_argument("--out")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    fields = vars(args)
    outputs = {
        key: fields[flag]
        for key, flag in (("out", "out"), ("csv", "csv"), ("graph_out", "graph_out"), ("transcript_out", "transcript_out"))
        if fields.get(flag)
    }
    mcmc = None
    if "sweeps" in fields:
        mcmc = McmcParams(
            burn_in_sweeps=args.burn_in,
            measure_sweeps=args.sweeps,
            thinning=args.thinning,
            batch_count=args.batches,
            replicas=args.replicas,
            random_scan=args.random_scan,
            seed=args.seed,
        )
    return RunConfig(
        command=args.command,
        N=fields.get("N") or [],
        beta=fields.get("beta"),
        alpha=fields.get("alpha"),
        q=fields.get("q"),
        vertex=fields.get("vertex"),
        backend=fields.get("backend"),
        pipeline=fields.get("pipeline"),
        estimator=fields.get("estimator"),
        inner=fields.get("inner"),
        draws=fields.get("draws"),
        integer=fields.get("integer"),
        seed=args.seed,
        mcmc=mcmc,
        outputs=outputs,
        jobs=args.jobs,
        timestamp=not args.no_timestamp,
    )


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    logging.basicConfig(level=args.log_level.upper(), format=settings.LOG_FORMAT)
    try:
        config = config_from_args(args)
        with get_worker_pool(config.jobs) as pool:
            ok = dispatch(config, pool)
        return EXIT_OK if ok else EXIT_RUNTIME
    except (PreconditionError, ValidationError) as e:
        logger.error(f"Precondition failed: {e}")
        return EXIT_PRECONDITION
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
