import math
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, computed_field, field_validator, model_validator

# Vertex ids are opaque: chain positions are ints, 2D box points are int pairs,
# anything else (e.g. "root") is a string.
Vertex = Union[int, Tuple[int, int], str]
Pair = Tuple[Vertex, Vertex]
Label = Union[int, Tuple[int, int]]

Direction = Literal["increases", "decreases", "neutral"]
EstimateMethod = Literal["laplacian-exact", "series-exact", "enumeration-exact", "mcmc"]
EXACT_METHODS = ("laplacian-exact", "series-exact", "enumeration-exact")


class ChainSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    N: int = Field(ge=1)
    beta: float = Field(gt=0, allow_inf_nan=False)
    alpha: float = Field(gt=1, allow_inf_nan=False)
    q: Optional[float] = Field(default=None, gt=0, le=2, allow_inf_nan=False)

    @property
    def exponent(self) -> float:
        return 2.0 if self.q is None else float(self.q)

    @property
    def is_gaussian(self) -> bool:
        return self.q is None or self.q == 2.0


class VarianceEstimate(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    value: float = Field(ge=0)
    std_error: float = Field(default=0.0, ge=0)
    method: EstimateMethod
    samples_used: int = Field(default=0, ge=0)
    details: Dict[str, Union[float, int, str]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _error_bar_matches_method(self):
        if self.method in EXACT_METHODS and self.std_error != 0.0:
            raise ValueError(f"exact method {self.method} must report std_error = 0")
        if self.method == "mcmc" and self.std_error == 0.0 and math.isfinite(self.value):
            raise ValueError("a finite mcmc estimate must carry a positive std_error")
        return self

    @property
    def is_exact(self) -> bool:
        return self.method in EXACT_METHODS

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)


class McmcParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    burn_in_sweeps: int = Field(default=1000, ge=1)
    measure_sweeps: int = Field(default=20000, ge=1)
    thinning: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    batch_count: int = Field(default=16, ge=8)
    replicas: int = Field(default=1, ge=1)
    random_scan: bool = False

    @model_validator(mode="after")
    def _batches_fit(self):
        if self.measure_sweeps // self.thinning < self.batch_count:
            raise ValueError(
                f"measure_sweeps/thinning = {self.measure_sweeps // self.thinning} "
                f"leaves fewer samples than batch_count = {self.batch_count}"
            )
        return self

    @property
    def samples_per_replica(self) -> int:
        return self.measure_sweeps // self.thinning


# --- surgery transcript -----------------------------------------------------

class DeleteEdge(BaseModel):
    kind: Literal["delete_edge"] = "delete_edge"
    pair: Pair
    direction: Literal["increases"] = "increases"


class IdentifyVertices(BaseModel):
    kind: Literal["identify_vertices"] = "identify_vertices"
    pair: Pair
    direction: Literal["decreases"] = "decreases"


class SplitEdgeTheta(BaseModel):
    kind: Literal["split_edge_theta"] = "split_edge_theta"
    pair: Pair
    theta: float = Field(gt=1, allow_inf_nan=False)
    new_vertex: Vertex
    direction: Literal["decreases"] = "decreases"


class SplitEdgeUniform(BaseModel):
    kind: Literal["split_edge_uniform"] = "split_edge_uniform"
    pair: Pair
    n: int = Field(ge=0)
    new_vertices: List[Vertex] = Field(default_factory=list)
    direction: Literal["decreases"] = "decreases"

    @model_validator(mode="after")
    def _one_id_per_new_vertex(self):
        if len(self.new_vertices) != self.n:
            raise ValueError(f"split into n={self.n} needs {self.n} new vertex ids, got {len(self.new_vertices)}")
        return self


class RaiseConductance(BaseModel):
    kind: Literal["raise_conductance"] = "raise_conductance"
    pair: Pair
    value: float = Field(ge=0, allow_inf_nan=False)
    direction: Literal["decreases"] = "decreases"


class LowerConductance(BaseModel):
    kind: Literal["lower_conductance"] = "lower_conductance"
    pair: Pair
    value: float = Field(ge=0, allow_inf_nan=False)
    direction: Literal["increases"] = "increases"


class PathComponent(BaseModel):
    """One parallel share of an edge, routed in series through existing vertices."""

    conductance: float = Field(gt=0, allow_inf_nan=False)
    waypoints: List[Vertex] = Field(default_factory=list)
    gains: List[float]

    @model_validator(mode="after")
    def _one_gain_per_piece(self):
        if len(self.gains) != len(self.waypoints) + 1:
            raise ValueError(f"{len(self.waypoints)} waypoints need {len(self.waypoints) + 1} gains, got {len(self.gains)}")
        if any(not (g > 0 and math.isfinite(g)) for g in self.gains):
            raise ValueError("piece gains must be finite and positive")
        return self


class ProjectEdge(BaseModel):
    """Split an edge in parallel, split each share in series, identify the new
    vertices with the waypoints (composite of variance-decreasing moves).

    ``portion`` is the share of the edge's current conductance that is
    projected; the rest stays on the edge. ``None`` projects the whole edge.
    """

    kind: Literal["project_edge"] = "project_edge"
    pair: Pair
    components: List[PathComponent] = Field(min_length=1)
    portion: Optional[float] = Field(default=None, gt=0, allow_inf_nan=False)
    direction: Literal["decreases"] = "decreases"


class CollapsePath(BaseModel):
    """Take a portion of every edge along a walk, isolate it and replace it by one
    edge of at most the series conductance (variance-increasing)."""

    kind: Literal["collapse_path"] = "collapse_path"
    waypoints: List[Vertex] = Field(min_length=2)
    portions: List[float]
    conductance: float = Field(gt=0, allow_inf_nan=False)
    direction: Literal["increases"] = "increases"

    @model_validator(mode="after")
    def _one_portion_per_edge(self):
        if len(self.portions) != len(self.waypoints) - 1:
            raise ValueError(f"{len(self.waypoints)} waypoints need {len(self.waypoints) - 1} portions")
        if any(not (p > 0 and math.isfinite(p)) for p in self.portions):
            raise ValueError("portions must be finite and positive")
        return self


class MergePathFamily(BaseModel):
    """Implicit family of edge-disjoint paths through dyadic levels, merged into a
    single source-root edge of the given conductance (variance-increasing)."""

    kind: Literal["merge_path_family"] = "merge_path_family"
    source: Vertex
    levels: int = Field(ge=1)
    conductance: float = Field(gt=0, allow_inf_nan=False)
    direction: Literal["increases"] = "increases"


class Relabel(BaseModel):
    kind: Literal["relabel"] = "relabel"
    mapping: List[Tuple[Vertex, Vertex]]
    direction: Literal["neutral"] = "neutral"


class AddVertices(BaseModel):
    kind: Literal["add_vertices"] = "add_vertices"
    vertices: List[Vertex]
    labels: List[Optional[Label]] = Field(default_factory=list)
    direction: Literal["neutral"] = "neutral"


class DropDetached(BaseModel):
    kind: Literal["drop_detached"] = "drop_detached"
    direction: Literal["neutral"] = "neutral"


SurgeryStep = Annotated[
    Union[
        DeleteEdge,
        IdentifyVertices,
        SplitEdgeTheta,
        SplitEdgeUniform,
        RaiseConductance,
        LowerConductance,
        ProjectEdge,
        CollapsePath,
        MergePathFamily,
        Relabel,
        AddVertices,
        DropDetached,
    ],
    Field(discriminator="kind"),
]


class SurgeryTranscript(BaseModel):
    steps: List[SurgeryStep] = Field(default_factory=list)
    total_steps: int = Field(default=0, ge=0)
    complete: bool = True

    @model_validator(mode="after")
    def _count_consistent(self):
        if self.total_steps < len(self.steps):
            self.total_steps = len(self.steps)
        if self.complete and self.total_steps != len(self.steps):
            raise ValueError("a complete transcript must hold every step")
        return self

    def directions(self) -> set:
        return {step.direction for step in self.steps}


# --- pipeline certificates --------------------------------------------------

class CertifiedBound(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    kind: Literal["edge-conductance", "max-conductance", "effective-conductance"]
    edge: Optional[Pair] = None
    value: float
    note: str = ""


class PipelineCertificate(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    pipeline: str
    spec: ChainSpec
    direction: Literal["lower-bounds-variance", "upper-bounds-variance"]
    target: Vertex
    reduced_vertices: int
    reduced_edges: int
    certified_bounds: List[CertifiedBound]
    parameters: Dict[str, Any] = Field(default_factory=dict)
    diagnostics: Dict[str, Any] = Field(default_factory=dict)
    transcript_steps: int
    transcript_complete: bool


class IntegerAuditReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    pipeline: str
    spec: ChainSpec
    direction: Literal["lower-bounds-variance", "upper-bounds-variance"]
    chain: VarianceEstimate
    reduced: VarianceEstimate
    z_score: float
    holds: bool


# --- q-SOS ------------------------------------------------------------------

class MixtureLaw(BaseModel):
    model_config = ConfigDict(frozen=True)

    q: float = Field(gt=0, le=2, allow_inf_nan=False)
    kind: Literal["mu_q", "tilde_mu_q"] = "mu_q"

    @property
    def is_point_mass(self) -> bool:
        return self.q == 2.0


class QChainParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    spec: ChainSpec

    @field_validator("spec")
    @classmethod
    def _needs_q(cls, spec: ChainSpec) -> ChainSpec:
        if spec.q is None:
            raise ValueError("q-SOS parameters need a ChainSpec with q set")
        return spec

    @computed_field
    @property
    def q(self) -> float:
        return float(self.spec.q)

    @computed_field
    @property
    def beta_q(self) -> float:
        return self.spec.beta ** (2.0 / self.q)

    @computed_field
    @property
    def alpha_q(self) -> float:
        return 2.0 * self.spec.alpha / self.q


class DerivativeReport(BaseModel):
    pair: Pair
    lam: float
    scale: float
    step: float
    fd_derivative: float
    identity_value: float
    relative_error: float
    increment_variance: float
    domination_bound: float
    bound_holds: bool
    tilted_monotone: bool
    truncation: int
    passed: bool


class MonteCarloCheck(BaseModel):
    name: str
    parameter: float
    estimate: float
    std_error: float
    expected: float
    z_score: float
    passed: bool


# --- scaling ----------------------------------------------------------------

FitModel = Literal["power", "log", "loglin", "const"]


class ScalingRow(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    N: int
    variance: Optional[float] = None
    std_error: Optional[float] = None
    method: Optional[str] = None
    seed: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.variance is not None and math.isfinite(self.variance)


class FitResult(BaseModel):
    model: FitModel
    params: Dict[str, float]
    residual_rms: float
    relative_rms: float
    spread: float
    n_rows: int


class ScalingFit(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    backend: str
    alpha: float
    beta: float
    q: Optional[float] = None
    regime: str
    rows: List[ScalingRow]
    model: FitModel
    fitted_params: Dict[str, float]
    residual_rms: float
    fit: FitResult
    alternatives: List[FitResult] = Field(default_factory=list)
    best_alternative: Optional[FitModel] = None
    expected_exponent: Optional[float] = None
    exponent_tolerance: Optional[float] = None
    within_tolerance: Optional[bool] = None
    envelope_fits: Dict[str, FitResult] = Field(default_factory=dict)
    monotone_in_N: Optional[bool] = None


class SandwichRow(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    N: int
    lower: float
    oracle: float
    upper: float
    lower_pipeline: str
    upper_pipeline: str
    holds: bool
    lower_margin: float
    upper_margin: float


class SandwichReport(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    alpha: float
    beta: float
    rows: List[SandwichRow]
    certificates: List[PipelineCertificate] = Field(default_factory=list)
    all_hold: bool


class SelfTestResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


# --- CLI --------------------------------------------------------------------

Command = Literal["chain-exact", "chain-mcmc", "surgery", "qsos", "sweep", "sandwich", "selftest"]


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    command: Command
    N: List[int] = Field(default_factory=list)
    beta: Optional[float] = None
    alpha: Optional[float] = None
    q: Optional[float] = None
    vertex: Optional[Vertex] = None
    backend: Optional[str] = None
    pipeline: Optional[str] = None
    estimator: Optional[str] = None
    inner: Optional[str] = None
    draws: Optional[int] = None
    integer: Optional[bool] = None
    seed: int = 0
    mcmc: Optional[McmcParams] = None
    outputs: Dict[str, str] = Field(default_factory=dict)
    jobs: int = Field(default=1, ge=1)
    timestamp: bool = True
