class ChainSurgeonError(Exception):
    """Base class for every error raised by chain_surgeon."""


class PreconditionError(ChainSurgeonError, ValueError):
    """A caller-supplied argument violates a documented precondition."""


class GraphError(PreconditionError):
    """Structural misuse of a conductance graph (missing edge, unknown vertex, y = z, ...)."""


class InfiniteResistanceError(PreconditionError):
    """Effective conductance requested between vertices in different components."""


class ComputationError(ChainSurgeonError, RuntimeError):
    """A computation failed at run time although its inputs were valid."""


class TruncationError(ComputationError):
    """Height enumeration did not certify within the truncation cap."""


class SolveError(ComputationError):
    """A dense Laplacian factorisation failed on a graph that should be positive definite."""


class FitError(ComputationError):
    """An exponent fit could not be performed (degenerate design, too few rows)."""


EXIT_OK = 0
EXIT_PRECONDITION = 1
EXIT_RUNTIME = 2
