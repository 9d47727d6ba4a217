"""Surgery pipelines that bound the chain's variance from below and above.

A lower pipeline only applies variance-decreasing steps (identifications,
projections onto waypoints, conductance raises); an upper pipeline only
applies variance-increasing ones (deletions, lowering, path collapses). Each
pipeline emits the reduced graph, the transcript of the steps and a list of
certified bounds recomputable from the reduced graph alone.

Transcripts are generated lazily and materialised up to
``settings.MAX_TRANSCRIPT_STEPS``. When the full transcript fits, the reduced
graph is obtained by replaying it on the chain; otherwise it is assembled from
the closed-form accumulation of the same construction.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Literal, Optional, Tuple

import numpy as np
from scipy import special

from chain_surgeon.config import settings
from chain_surgeon.errors import PreconditionError
from chain_surgeon.exact_real import power_tail, real_gff_variance
from chain_surgeon.graph_core import (
    ConductanceGraph,
    capped_transcript,
    dyadic_level,
    effective_conductance,
    new_chain_graph,
    replay,
)
from chain_surgeon.iv_chain import exact_iv_variance, line_iv_variance, mcmc_variance
from chain_surgeon.schemas import (
    AddVertices,
    CertifiedBound,
    ChainSpec,
    CollapsePath,
    DeleteEdge,
    DropDetached,
    IdentifyVertices,
    IntegerAuditReport,
    LowerConductance,
    McmcParams,
    MergePathFamily,
    PathComponent,
    PipelineCertificate,
    ProjectEdge,
    RaiseConductance,
    Relabel,
    SurgeryStep,
    SurgeryTranscript,
    Vertex,
)

logger = logging.getLogger(__name__)

ALPHA_TOL = 1e-12
LOWER = "lower-bounds-variance"
UPPER = "upper-bounds-variance"


@dataclass
class PipelineResult:
    pipeline: str
    spec: ChainSpec
    direction: Literal["lower-bounds-variance", "upper-bounds-variance"]
    reduced_graph: ConductanceGraph
    transcript: SurgeryTranscript
    target: Vertex
    certified_bounds: List[CertifiedBound] = field(default_factory=list)
    parameters: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def certificate(self) -> PipelineCertificate:
        return PipelineCertificate(
            pipeline=self.pipeline,
            spec=self.spec,
            direction=self.direction,
            target=self.target,
            reduced_vertices=self.reduced_graph.n_vertices,
            reduced_edges=self.reduced_graph.n_edges,
            certified_bounds=self.certified_bounds,
            parameters=self.parameters,
            diagnostics=self.diagnostics,
            transcript_steps=self.transcript.total_steps,
            transcript_complete=self.transcript.complete,
        )


def _max_rel_deviation(a: ConductanceGraph, b: ConductanceGraph) -> float:
    if a.vertices != b.vertices or a.root != b.root:
        return math.inf
    ha, ta, wa = a.edge_arrays()
    hb, tb, wb = b.edge_arrays()
    if not (np.array_equal(ha, hb) and np.array_equal(ta, tb)):
        return math.inf
    if wa.size == 0:
        return 0.0
    return float(np.max(np.abs(wa - wb) / np.maximum(np.abs(wa), np.abs(wb))))


def _finish(
    name: str,
    spec: ChainSpec,
    direction: str,
    steps: Callable[[], Iterator[SurgeryStep]],
    total_steps: int,
    analytic: ConductanceGraph,
    target: Vertex,
    parameters: Dict[str, Any],
    diagnostics: Dict[str, Any],
) -> PipelineResult:
    transcript = capped_transcript(steps(), total_steps)
    reduced = analytic
    if transcript.complete:
        replayed = replay(new_chain_graph(spec), transcript)
        diagnostics["replay_max_rel_deviation"] = _max_rel_deviation(replayed, analytic)
        reduced = replayed
    bounds = _bounds_for(reduced, target, direction)
    logger.info(
        f"Pipeline {name} at N={spec.N}: {reduced.n_vertices} vertices, {reduced.n_edges} edges, "
        f"{total_steps} steps{'' if transcript.complete else ' (transcript truncated)'}"
    )
    return PipelineResult(name, spec, direction, reduced, transcript, target, bounds, parameters, diagnostics)


def _bounds_for(g: ConductanceGraph, target: Vertex, direction: str) -> List[CertifiedBound]:
    bounds = []
    heads, tails, weights = g.edge_arrays()
    vs = g.vertices
    if g.n_edges <= 4096:
        for h, t, w in zip(heads.tolist(), tails.tolist(), weights.tolist()):
            bounds.append(CertifiedBound(kind="edge-conductance", edge=(vs[h], vs[t]), value=w))
    bounds.append(CertifiedBound(kind="max-conductance", value=g.max_conductance(), note="largest reduced conductance"))
    if g.n_vertices - 1 <= settings.MAX_DENSE_VERTICES:
        bounds.append(CertifiedBound(
            kind="effective-conductance",
            edge=(target, g.root),
            value=effective_conductance(g, target),
            note="variance bound 1/(2 C_eff)" if direction == UPPER else "",
        ))
    return bounds


def audit_certificates(result: PipelineResult, rel_tol: float = 1e-9) -> Dict[str, Any]:
    """Recompute every certified bound from the reduced graph alone."""
    g = result.reduced_graph
    failures = []
    for bound in result.certified_bounds:
        if bound.kind == "edge-conductance":
            actual = g.conductance(*bound.edge)
            ok = abs(actual - bound.value) <= rel_tol * abs(bound.value)
        elif bound.kind == "max-conductance":
            actual = g.max_conductance()
            ok = actual <= bound.value * (1.0 + rel_tol)
        else:
            actual = effective_conductance(g, bound.edge[0], bound.edge[1])
            ok = abs(actual - bound.value) <= rel_tol * abs(bound.value)
        if not ok:
            failures.append({"kind": bound.kind, "edge": bound.edge, "certified": bound.value, "recomputed": actual})
    return {"checked": len(result.certified_bounds), "failures": failures, "passed": not failures}


# --- shared block projection for the lower line pipelines ------------------

def _unfolded_block(x, s: int):
    x = np.asarray(x, dtype=np.int64)
    return np.where(x >= 0, x // s, -((-x) // s))


def _leftmost(u, s: int):
    u = np.asarray(u, dtype=np.int64)
    return np.where(u >= 1, u * s, 1 - (np.abs(u) + 1) * s)


def _line_graph(N: int, conductances: np.ndarray, labels: Dict[int, int]) -> ConductanceGraph:
    L = conductances.size
    heads = np.arange(L)
    tails = np.append(np.arange(1, L), L)
    vertices = list(range(L)) + [N]
    return ConductanceGraph.from_arrays(vertices, N, heads, tails, conductances, labels=labels)


def _link_conductances(spec: ChainSpec, s: int, L: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Unfolded link conductances, links u = -L .. L-1 stored at index u + L."""
    beta, alpha = spec.beta, spec.alpha
    E = L * s
    xs = np.arange(-E + 1, E)
    u_x = _unfolded_block(xs, s)
    left_x = _leftmost(u_x, s) == xs
    link_u = np.arange(-L, L)
    boundary = _leftmost(link_u + 1, s)
    links = np.zeros(2 * L)
    projected = 0
    ratio_lo, ratio_hi = math.inf, 0.0
    for d in range(1, 2 * E - 1):
        ui, uj, lj = u_x[:-d], u_x[d:], left_x[d:]
        pieces = uj - ui + 1 - lj
        prefix = np.concatenate([[0], np.cumsum(pieces)])
        lo = np.maximum(boundary - d, -E + 1)
        hi = np.minimum(boundary - 1, E - 1 - d)
        offset = -E + 1
        counts = np.where(hi >= lo, prefix[np.clip(hi - offset + 1, 0, pieces.size)] - prefix[np.clip(lo - offset, 0, pieces.size)], 0)
        links += (spec.beta * float(d) ** (-alpha)) * counts
        projected += int(np.count_nonzero(pieces >= 2))
        waypoints = pieces - 1
        audited = waypoints >= 2
        if audited.any():
            ratio = waypoints[audited] * s / d
            ratio_lo, ratio_hi = min(ratio_lo, float(ratio.min())), max(ratio_hi, float(ratio.max()))
    # boundary components of every free vertex
    c_right = beta * power_tail(alpha, (E - xs).astype(np.float64))
    c_left = beta * power_tail(alpha, (E + xs).astype(np.float64))
    right_gain = (L - u_x) * c_right
    left_gain = (u_x + L + (~left_x).astype(np.int64)) * c_left
    block_right = np.bincount(u_x + L, weights=right_gain, minlength=2 * L)
    block_left = np.bincount(u_x + L, weights=left_gain, minlength=2 * L)
    links += np.cumsum(block_right)
    # link u collects left components from every block strictly to its right
    links += np.concatenate([np.cumsum(block_left[::-1])[::-1][1:], [0.0]])
    audit = {
        "projected_pairs": projected,
        "waypoint_ratio_min": ratio_lo if projected and math.isfinite(ratio_lo) else None,
        "waypoint_ratio_max": ratio_hi if ratio_hi > 0 else None,
    }
    return links, audit


def _lower_line_steps(spec: ChainSpec, s: int, L: int) -> Iterator[SurgeryStep]:
    N, beta, alpha = spec.N, spec.beta, spec.alpha
    root = N
    E = L * s

    def u(x: int) -> int:
        return x // s if x >= 0 else -((-x) // s)

    def leftmost(b: int) -> int:
        return b * s if b >= 1 else 1 - (abs(b) + 1) * s

    for x in range(-N + 1, N):
        if abs(x) >= E:
            yield IdentifyVertices(pair=(x, root))
    for i in range(-E + 1, E):
        for j in range(i + 1, E):
            waypoints = [leftmost(b) for b in range(u(i) + 1, u(j) + 1) if leftmost(b) != j]
            if not waypoints:
                continue
            lam = beta * float(j - i) ** (-alpha)
            pieces = len(waypoints) + 1
            yield ProjectEdge(pair=(i, j), portion=lam, components=[
                PathComponent(conductance=lam, waypoints=waypoints, gains=[pieces * lam] * pieces),
            ])
    for a in range(-E + 1, E):
        c_right = beta * power_tail(alpha, float(E - a))
        c_left = beta * power_tail(alpha, float(E + a))
        right = [leftmost(b) for b in range(u(a) + 1, L)]
        left = [leftmost(b) for b in range(u(a), -L, -1) if leftmost(b) != a]
        # earlier root components may already end on (a, root); project only the boundary share
        yield ProjectEdge(pair=(a, root), portion=c_right + c_left, components=[
            PathComponent(conductance=c_right, waypoints=right, gains=[(len(right) + 1) * c_right] * (len(right) + 1)),
            PathComponent(conductance=c_left, waypoints=left, gains=[(len(left) + 1) * c_left] * (len(left) + 1)),
        ])
    reps = []
    for m in range(L):
        members = sorted(set(range(m * s, (m + 1) * s)) | set(range(-(m + 1) * s + 1, -m * s + 1)))
        rep = members[0]
        reps.append(rep)
        for x in members[1:]:
            yield IdentifyVertices(pair=(x, rep))
    yield Relabel(mapping=[(rep, m) for m, rep in enumerate(reps)])


def _lower_line_pipeline(name: str, spec: ChainSpec, s: int, extra: Dict[str, Any]) -> PipelineResult:
    N = spec.N
    L = N // s
    if L < 1:
        raise PreconditionError(f"block size {s} leaves no blocks at N={N}")
    E = L * s
    links, audit = _link_conductances(spec, s, L)
    folded = np.array([links[m + L] + links[-m - 1 + L] for m in range(L)])
    reps = [1 - (m + 1) * s for m in range(L)]
    analytic = _line_graph(N, folded, {m: rep for m, rep in enumerate(reps)})
    total = 2 * (N - E) + audit["projected_pairs"] + (2 * E - 1) + (2 * s - 2) + (L - 1) * (2 * s - 1) + 1
    parameters = {"block_size": s, "length": L, "free_extent": E, **extra}
    diagnostics = {
        "max_conductance": float(folded.max()),
        "min_conductance": float(folded.min()),
        "conductance_ratio": float(folded.max() / folded.min()),
        **audit,
    }
    if audit["waypoint_ratio_min"] is not None:
        diagnostics["waypoint_audit_holds"] = 0.5 <= audit["waypoint_ratio_min"] and audit["waypoint_ratio_max"] <= 2.0
        if not diagnostics["waypoint_audit_holds"]:
            logger.warning(
                f"{name} at N={N}: waypoint counts span [{audit['waypoint_ratio_min']:.3g}, "
                f"{audit['waypoint_ratio_max']:.3g}] x |i-j|/s, outside [1/2, 2]"
            )
    return _finish(name, spec, LOWER, lambda: _lower_line_steps(spec, s, L), total, analytic, 0, parameters, diagnostics)


def lower_pipeline_alpha_gt3(spec: ChainSpec) -> PipelineResult:
    if not spec.alpha > 3 + ALPHA_TOL:
        raise PreconditionError(f"lower-gt3 needs alpha > 3, got {spec.alpha}")
    bound = 2.0 * spec.beta * float(special.zeta(spec.alpha - 2.0))
    result = _lower_line_pipeline("lower-gt3", spec, 1, {"conductance_bound": bound})
    result.diagnostics["bound_holds"] = result.diagnostics["max_conductance"] <= bound * (1 + settings.STRUCTURAL_REL_TOL)
    if not result.diagnostics["bound_holds"]:
        logger.warning(
            f"lower-gt3 at N={spec.N}: max conductance {result.diagnostics['max_conductance']:.6g} exceeds {bound:.6g}"
        )
    return result


def lower_pipeline_alpha_23(spec: ChainSpec) -> PipelineResult:
    if not 2 + ALPHA_TOL < spec.alpha < 3 - ALPHA_TOL:
        raise PreconditionError(f"lower-23 needs 2 < alpha < 3, got {spec.alpha}")
    s = math.ceil(spec.N ** (3.0 - spec.alpha))
    expected = math.ceil(spec.N ** (spec.alpha - 2.0))
    result = _lower_line_pipeline("lower-23", spec, s, {"expected_length": expected})
    result.diagnostics["length_matches_expected"] = result.parameters["length"] == expected
    return result


def lower_pipeline_alpha_3(spec: ChainSpec) -> PipelineResult:
    if abs(spec.alpha - 3.0) > ALPHA_TOL:
        raise PreconditionError(f"lower-3 needs alpha = 3, got {spec.alpha}")
    s = max(1, math.ceil(math.log(spec.N)))
    return _lower_line_pipeline("lower-3", spec, s, {})


def lower_pipeline_alpha_12(spec: ChainSpec) -> PipelineResult:
    """Identify every vertex but 0 with the root: the one-vertex chain bounds the variance below."""
    if not 1 < spec.alpha <= 2 + ALPHA_TOL:
        raise PreconditionError(f"lower-12 needs 1 < alpha <= 2, got {spec.alpha}")
    N, root = spec.N, spec.N
    value = 2.0 * spec.beta * float(special.zeta(spec.alpha))
    analytic = ConductanceGraph.from_edges(root, [(0, root, value)], labels={0: 0})

    def steps():
        for x in range(-N + 1, N):
            if x != 0:
                yield IdentifyVertices(pair=(x, root))

    return _finish("lower-12", spec, LOWER, steps, 2 * N - 2, analytic, 0, {}, {"edge_conductance": value})


# --- two-dimensional embedding at alpha = 2 ---------------------------------

def embed2d_constants(N: int, override: Optional[float] = None) -> Tuple[float, float]:
    """Route constants: C1 makes every route's series conductance at least beta/l**2, C2 bounds sqrt(k) zeta(3/2, k)."""
    l = np.arange(1, 4 * N + 1, dtype=np.float64)
    need = 1.0 + 2.0 * np.cumsum(l ** -0.5) / np.sqrt(l)
    c1 = float(need.max()) if override is None else float(override)
    violated = np.flatnonzero(need > c1 * (1 + 1e-15))
    if violated.size:
        raise PreconditionError(f"C1 = {c1} violates the route inequality at l = {int(l[violated[0]])}")
    k = np.arange(1, 2 * N + 2, dtype=np.float64)
    c2 = float(np.max(np.sqrt(k) * power_tail(1.5, k)))
    return c1, c2


def lower_pipeline_alpha_2_embed2d(spec: ChainSpec) -> PipelineResult:
    if abs(spec.alpha - 2.0) > ALPHA_TOL:
        raise PreconditionError(f"lower-2d needs alpha = 2, got {spec.alpha}")
    N, beta, root = spec.N, spec.beta, spec.N
    c1, c2 = embed2d_constants(N, settings.EMBED2D_C1)
    c0 = 2.0 * c1 * c2
    X = range(-N + 1, N)
    Y = range(-2 * N, 2 * N + 1)
    far_vertical = c1 * beta * power_tail(1.5, float(2 * N + 1))
    far_conductance = beta * power_tail(2.0, float(2 * N + 1))

    def route_gain(k: int, l: int) -> float:
        return c1 * math.sqrt(k / l) * beta / l

    def outside_neighbours(x: int, y: int) -> int:
        return (x == N - 1) + (x == -N + 1) + (y == 2 * N) + (y == -2 * N)

    grid_edges = [((x, y), (x, y + 1)) for x in X for y in range(-2 * N, 2 * N)]
    grid_edges += [((x, y), (x + 1, y)) for x in range(-N + 1, N - 1) for y in Y]
    root_edges = [((x, y), outside_neighbours(x, y)) for x in X for y in Y if outside_neighbours(x, y)]

    def steps():
        yield Relabel(mapping=[(i, (i, 0)) for i in X])
        added = [(x, y) for x in X for y in Y if y != 0]
        yield AddVertices(vertices=added, labels=added)
        for i in X:
            for j in range(i + 1, N):
                l = j - i
                waypoints = [(i, k) for k in range(1, l + 1)] + [(x, l) for x in range(i + 1, j + 1)]
                waypoints += [(j, k) for k in range(l - 1, 0, -1)]
                vertical = [route_gain(k, l) for k in range(1, l + 1)]
                gains = vertical + [c1 * beta / l] * l + vertical[::-1]
                yield ProjectEdge(pair=((i, 0), (j, 0)), components=[
                    PathComponent(conductance=beta / l ** 2, waypoints=waypoints, gains=gains),
                ])
        for i in X:
            components = []
            for l in range(N - i, 2 * N + 1):
                waypoints = [(i, k) for k in range(1, l + 1)] + [(x, l) for x in range(i + 1, N)]
                gains = [route_gain(k, l) for k in range(1, l + 1)] + [c1 * beta / l] * (N - i)
                components.append(PathComponent(conductance=beta / l ** 2, waypoints=waypoints, gains=gains))
            for l in range(N + i, 2 * N + 1):
                waypoints = [(i, k) for k in range(1, l + 1)] + [(x, l) for x in range(i - 1, -N, -1)]
                gains = [route_gain(k, l) for k in range(1, l + 1)] + [c1 * beta / l] * (N + i)
                components.append(PathComponent(conductance=beta / l ** 2, waypoints=waypoints, gains=gains))
            column = [(i, k) for k in range(1, 2 * N + 1)]
            far_gains = [far_vertical * math.sqrt(k) for k in range(1, 2 * N + 2)]
            for _ in ("right", "left"):
                components.append(PathComponent(conductance=far_conductance, waypoints=column, gains=far_gains))
            yield ProjectEdge(pair=((i, 0), root), components=components)
        for a, b in grid_edges:
            yield RaiseConductance(pair=(a, b), value=c0 * beta)
        for v, mult in root_edges:
            yield RaiseConductance(pair=(v, root), value=mult * c0 * beta)

    vertices = [(x, y) for x in X for y in Y] + [root]
    index = {v: n for n, v in enumerate(vertices)}
    heads = [index[a] for a, _ in grid_edges] + [index[v] for v, _ in root_edges]
    tails = [index[b] for _, b in grid_edges] + [index[root]] * len(root_edges)
    weights = [c0 * beta] * len(grid_edges) + [m * c0 * beta for _, m in root_edges]
    labels = {(x, y): ((x, y) if y != 0 else x) for x in X for y in Y}
    analytic = ConductanceGraph.from_arrays(vertices, root, heads, tails, weights, labels=labels)

    k = np.arange(1, 2 * N + 2, dtype=np.float64)
    vertical = 2.0 * c1 * beta * np.sqrt(k) * power_tail(1.5, k)
    rows = np.arange(1, 2 * N + 1)
    horizontal = c1 * beta * (rows - (rows == 2 * N)) / rows
    n_pairs = (2 * N - 1) * (2 * N - 2) // 2
    total = 2 + n_pairs + (2 * N - 1) + len(grid_edges) + len(root_edges)
    parameters = {"C1": c1, "C2": c2, "C0": c0, "box_width": 2 * N - 1, "box_height": 4 * N + 1}
    diagnostics = {
        "pre_raise_vertical_max": float(vertical.max()),
        "vertical_bound": 2.0 * c1 * c2 * beta,
        "vertical_bound_holds": bool(vertical.max() <= 2.0 * c1 * c2 * beta * (1 + settings.STRUCTURAL_REL_TOL)),
        "pre_raise_horizontal_max": float(horizontal.max()),
        "horizontal_bound": c1 * beta,
        "horizontal_bound_holds": bool(horizontal.max() <= c1 * beta * (1 + settings.STRUCTURAL_REL_TOL)),
    }
    return _finish("lower-2d", spec, LOWER, steps, total, analytic, (0, 0), parameters, diagnostics)


# --- upper pipelines --------------------------------------------------------

def _chain_pairs(N: int) -> Iterator[Tuple[int, int]]:
    for i in range(-N + 1, N):
        for j in range(i + 1, N + 1):
            yield (i, j)


def _chain_edge_count(N: int) -> int:
    n = 2 * N - 1
    return n * (n - 1) // 2 + n


def upper_pipeline_alpha_gt3(spec: ChainSpec, relax_gate: bool = False) -> PipelineResult:
    """Keep only the nearest-neighbour path 0 .. N-1 -> root at conductance beta."""
    if not relax_gate and not spec.alpha > 3 + ALPHA_TOL:
        raise PreconditionError(f"upper-gt3 needs alpha > 3 (pass relax_gate to run it anyway), got {spec.alpha}")
    N, beta, root = spec.N, spec.beta, spec.N
    kept = {(i, i + 1) for i in range(N - 1)} | {(N - 1, root)}

    def steps():
        for pair in _chain_pairs(N):
            if pair not in kept:
                yield DeleteEdge(pair=pair)
        yield LowerConductance(pair=(N - 1, root), value=beta)
        yield DropDetached()

    analytic = _line_graph(N, np.full(N, beta), {m: m for m in range(N)})
    total = _chain_edge_count(N) - len(kept) + 2
    diagnostics = {"variance_bound": N / (2.0 * beta)}
    return _finish("upper-gt3", spec, UPPER, steps, total, analytic, 0, {"relax_gate": relax_gate}, diagnostics)


@dataclass(frozen=True)
class _JumpPath:
    k: int
    start: int
    vertices: Tuple[int, ...]
    conductance: float


def alpha3_paths(N: int, beta: float) -> List[_JumpPath]:
    """Paths 0 -> i -> i-k -> ... -> root for even k <= sqrt(N) and k/2 <= |i| <= k."""
    paths = []
    for k in range(2, math.isqrt(N) + 1, 2):
        jumps_cap = -(-N // k)
        for i in range(-k, -k // 2 + 1):
            vertices = [0, i]
            while vertices[-1] - k > -N:
                vertices.append(vertices[-1] - k)
            c = 1.0 / (jumps_cap * k ** 3 / beta + i ** 4 / beta)
            paths.append(_JumpPath(k, i, tuple(vertices), c))
    return paths


def upper_pipeline_alpha_3(spec: ChainSpec) -> PipelineResult:
    if abs(spec.alpha - 3.0) > ALPHA_TOL:
        raise PreconditionError(f"upper-3 needs alpha = 3, got {spec.alpha}")
    N, beta, root = spec.N, spec.beta, spec.N
    if N < 16:
        raise PreconditionError(f"upper-3 needs N >= 16, got {N}")
    paths = alpha3_paths(N, beta)
    c_star = math.fsum(p.conductance for p in paths)

    jump_edges = []
    root_uses: Dict[int, List[int]] = {}
    first_uses: Dict[int, int] = {}
    for p in paths:
        first_uses[p.start] = first_uses.get(p.start, 0) + 1
        vs = p.vertices
        jump_edges += [(min(a, b), max(a, b)) for a, b in zip(vs[1:], vs[2:])]
        root_uses.setdefault(vs[-1], []).append(p.k)
    edge_disjoint = len(jump_edges) == len(set(jump_edges)) and all(len(ks) == len(set(ks)) for ks in root_uses.values())
    consumed = set(jump_edges) | {(i, 0) for i, n in first_uses.items() if n >= abs(i)}

    def steps():
        for p in paths:
            vs = p.vertices
            portions = [beta / abs(p.start) ** 4] + [beta / p.k ** 3] * (len(vs) - 1)
            yield CollapsePath(waypoints=list(vs) + [root], portions=portions, conductance=p.conductance)
        for pair in _chain_pairs(N):
            if pair not in consumed and pair != (0, root):
                yield DeleteEdge(pair=pair)
        yield LowerConductance(pair=(0, root), value=c_star)
        yield DropDetached()

    analytic = ConductanceGraph.from_edges(root, [(0, root, c_star)], labels={0: 0})
    total = len(paths) + (_chain_edge_count(N) - len(consumed) - 1) + 2
    diagnostics = {
        "paths": len(paths),
        "edge_disjoint": edge_disjoint,
        "c_star": c_star,
        "c_star_N_over_lnN": c_star * N / math.log(N),
        "variance_bound": 1.0 / (2.0 * c_star),
    }
    return _finish("upper-3", spec, UPPER, steps, total, analytic, 0, {"max_jump": math.isqrt(N)}, diagnostics)


def baumler_levels(N: int) -> int:
    """Largest K with 2**(K+1) <= N."""
    return N.bit_length() - 2


def baumler_conductance(N: int, beta: float, alpha: float) -> float:
    K = baumler_levels(N)
    k = np.arange(1, K + 1, dtype=np.float64)
    log_terms = math.log(2.0) * ((k + 2.0) * alpha - 2.0 * k - 1.0)
    return beta * math.exp(-float(special.logsumexp(log_terms)))


def upper_pipeline_baumler(spec: ChainSpec) -> PipelineResult:
    if not 1 < spec.alpha < 3 - ALPHA_TOL:
        raise PreconditionError(f"upper-baumler needs 1 < alpha < 3, got {spec.alpha}")
    N, beta, alpha, root = spec.N, spec.beta, spec.alpha, spec.N
    if N < 4:
        raise PreconditionError(f"upper-baumler needs N >= 4, got {N}")
    K = baumler_levels(N)
    c = baumler_conductance(N, beta, alpha)
    family = {
        (i, j)
        for k in range(1, K + 1)
        for i in dyadic_level(k)
        for j in dyadic_level(k + 1)
        if j < N
    }

    def steps():
        yield MergePathFamily(source=0, levels=K, conductance=c)
        for pair in _chain_pairs(N):
            if pair not in family and pair != (0, root):
                yield DeleteEdge(pair=pair)
        yield LowerConductance(pair=(0, root), value=c)
        yield DropDetached()

    analytic = ConductanceGraph.from_edges(root, [(0, root, c)], labels={0: 0})
    total = 1 + (_chain_edge_count(N) - len(family) - 1) + 2
    if alpha < 2:
        scaled = {"c": c}
    elif abs(alpha - 2) <= ALPHA_TOL:
        scaled = {"c_lnN": c * math.log(N)}
    else:
        scaled = {"c_N_pow_alpha_minus_2": c * N ** (alpha - 2.0)}
    diagnostics = {"levels": K, "c_lower": c, "variance_bound": 1.0 / (2.0 * c), **scaled,
                   "omitted_terms": "entry level k=0 and exit to the root"}
    return _finish("upper-baumler", spec, UPPER, steps, total, analytic, 0, {"levels": K}, diagnostics)


# --- registry ---------------------------------------------------------------

PIPELINES: Dict[str, Callable[[ChainSpec], PipelineResult]] = {
    "lower-gt3": lower_pipeline_alpha_gt3,
    "lower-23": lower_pipeline_alpha_23,
    "lower-3": lower_pipeline_alpha_3,
    "lower-2d": lower_pipeline_alpha_2_embed2d,
    "lower-12": lower_pipeline_alpha_12,
    "upper-gt3": upper_pipeline_alpha_gt3,
    "upper-3": upper_pipeline_alpha_3,
    "upper-baumler": upper_pipeline_baumler,
}


def run_pipeline(name: str, spec: ChainSpec) -> PipelineResult:
    if name not in PIPELINES:
        raise PreconditionError(f"unknown pipeline {name!r}; choose from {sorted(PIPELINES)}")
    return PIPELINES[name](spec)


def select_pipelines(alpha: float) -> Tuple[str, str]:
    if alpha > 3 + ALPHA_TOL:
        return "lower-gt3", "upper-gt3"
    if abs(alpha - 3) <= ALPHA_TOL:
        return "lower-3", "upper-3"
    if alpha > 2 + ALPHA_TOL:
        return "lower-23", "upper-baumler"
    if abs(alpha - 2) <= ALPHA_TOL:
        return "lower-2d", "upper-baumler"
    if alpha > 1:
        return "lower-12", "upper-baumler"
    raise PreconditionError(f"alpha must exceed 1, got {alpha}")


def _integer_estimate(g: ConductanceGraph, v, mcmc: McmcParams, pool, stream_key):
    sub = g.root_component()
    if sub.n_edges == sub.n_vertices - 1:
        return line_iv_variance(g, v)
    if sub.n_vertices <= settings.ENUMERATION_MAX_VERTICES:
        return exact_iv_variance(g, v)
    return mcmc_variance(g, v, mcmc, pool, stream_key=stream_key)


def integer_audit(spec: ChainSpec, pipeline: str, mcmc: McmcParams, pool=None) -> IntegerAuditReport:
    """Check the pipeline's inequality direction for the integer-valued field."""
    result = run_pipeline(pipeline, spec)
    chain = new_chain_graph(spec)
    if spec.N <= 2:
        chain_est = exact_iv_variance(chain, 0)
    else:
        chain_est = mcmc_variance(chain, 0, mcmc, pool, stream_key=(spec.N, 0))
    reduced_est = _integer_estimate(result.reduced_graph, result.target, mcmc, pool, (spec.N, 1))
    se = math.hypot(chain_est.std_error, reduced_est.std_error)
    gap = reduced_est.value - chain_est.value if result.direction == LOWER else chain_est.value - reduced_est.value
    z = gap / se if se > 0 else (0.0 if gap <= 0 else math.inf)
    holds = gap <= 3.0 * se + settings.STRUCTURAL_REL_TOL * max(chain_est.value, reduced_est.value)
    return IntegerAuditReport(
        pipeline=pipeline, spec=spec, direction=result.direction,
        chain=chain_est, reduced=reduced_est, z_score=z, holds=holds,
    )


def real_sandwich_values(spec: ChainSpec) -> Dict[str, float]:
    """Real-field variances of the lower reduction, the chain itself and the upper reduction."""
    lower_name, upper_name = select_pipelines(spec.alpha)
    lower = run_pipeline(lower_name, spec)
    upper = run_pipeline(upper_name, spec)
    return {
        "lower": real_gff_variance(lower.reduced_graph, lower.target).value,
        "oracle": real_gff_variance(new_chain_graph(spec), 0).value,
        "upper": real_gff_variance(upper.reduced_graph, upper.target).value,
    }
