"""Finite rooted conductance graphs and the monotone surgery primitives.

A ``ConductanceGraph`` is an immutable value backed by numpy arrays: a sorted
vertex tuple and one (head, tail, conductance) triple per unordered pair.
Parallel edges are merged by summing, self-loops and zero conductances are
dropped at construction. Every surgery returns a new graph.

Surgeries are expressed as transcript steps (see ``chain_surgeon.schemas``) and
applied through a mutable ``GraphBuilder``; ``replay`` rebuilds a graph from a
transcript with the very same code path the primitives use.
"""
import itertools
import logging
import math
from types import MappingProxyType
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_solve
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from chain_surgeon.config import settings
from chain_surgeon.errors import GraphError, InfiniteResistanceError, PreconditionError
from chain_surgeon.exact_real import grounded_factor, power_tail
from chain_surgeon.schemas import (
    AddVertices,
    ChainSpec,
    CollapsePath,
    DeleteEdge,
    DropDetached,
    IdentifyVertices,
    Label,
    LowerConductance,
    MergePathFamily,
    Pair,
    ProjectEdge,
    RaiseConductance,
    Relabel,
    SplitEdgeTheta,
    SplitEdgeUniform,
    SurgeryStep,
    SurgeryTranscript,
    Vertex,
)

logger = logging.getLogger(__name__)


# --- vertex ids -------------------------------------------------------------

def normalize_vertex(v) -> Vertex:
    if isinstance(v, (bool, np.bool_)):
        raise GraphError(f"unsupported vertex id {v!r}")
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (tuple, list)) and len(v) == 2:
        return (int(v[0]), int(v[1]))
    if isinstance(v, str):
        return v
    raise GraphError(f"unsupported vertex id {v!r}")


def vertex_key(v: Vertex) -> tuple:
    """Total order on vertex ids: ints, then int pairs, then strings."""
    if isinstance(v, int):
        return (0, v)
    if isinstance(v, tuple):
        return (1, v)
    return (2, v)


def canonical_pair(u: Vertex, v: Vertex) -> Pair:
    return (u, v) if vertex_key(u) <= vertex_key(v) else (v, u)


def _normalize_label(label) -> Optional[Label]:
    if label is None:
        return None
    if isinstance(label, (tuple, list)):
        return (int(label[0]), int(label[1]))
    return int(label)


class UnionFind:
    """Alias layer mapping merged-away or renamed ids to the live vertex that absorbed them."""

    def __init__(self, parent: Optional[Mapping[Vertex, Vertex]] = None):
        self._parent: Dict[Vertex, Vertex] = dict(parent or {})

    def find(self, v: Vertex, live: Callable[[Vertex], bool]) -> Vertex:
        path = []
        while not live(v):
            if v not in self._parent:
                raise GraphError(f"unknown vertex {v!r}")
            path.append(v)
            v = self._parent[v]
        for p in path:
            self._parent[p] = v
        return v

    def union(self, child: Vertex, rep: Vertex) -> None:
        if child != rep:
            self._parent[child] = rep

    def forget(self, v: Vertex) -> None:
        self._parent.pop(v, None)

    def as_dict(self) -> Dict[Vertex, Vertex]:
        return dict(self._parent)


# --- immutable graph --------------------------------------------------------

class ConductanceGraph:
    __slots__ = (
        "_vertices", "_root", "_index", "_heads", "_tails", "_weights", "_keys",
        "_labels", "_aliases", "_id_floor", "_edges", "_components",
    )

    def __init__(self, vertices, root, heads, tails, weights, keys, labels, aliases, id_floor):
        # use from_arrays / from_edges; this constructor trusts canonical input
        self._vertices: Tuple[Vertex, ...] = vertices
        self._root: Vertex = root
        self._index: Dict[Vertex, int] = {v: i for i, v in enumerate(vertices)}
        for arr in (heads, tails, weights, keys):
            arr.setflags(write=False)
        self._heads = heads
        self._tails = tails
        self._weights = weights
        self._keys = keys
        self._labels = MappingProxyType(labels)
        self._aliases = MappingProxyType(aliases)
        self._id_floor = id_floor
        self._edges = None
        self._components = None

    @classmethod
    def from_arrays(
        cls,
        vertices: Sequence,
        root,
        heads,
        tails,
        weights,
        labels: Optional[Mapping] = None,
        aliases: Optional[Mapping] = None,
        id_floor: Optional[int] = None,
    ) -> "ConductanceGraph":
        verts = [normalize_vertex(v) for v in vertices]
        root = normalize_vertex(root)
        n = len(verts)
        order = sorted(range(n), key=lambda i: vertex_key(verts[i]))
        sorted_vertices = tuple(verts[i] for i in order)
        for a, b in zip(sorted_vertices, sorted_vertices[1:]):
            if a == b:
                raise GraphError(f"duplicate vertex id {a!r}")
        present = set(sorted_vertices)
        if root not in present:
            raise GraphError(f"root {root!r} is not a vertex")

        remap = np.empty(n, dtype=np.int64)
        remap[np.asarray(order, dtype=np.int64)] = np.arange(n, dtype=np.int64)
        h = remap[np.asarray(heads, dtype=np.int64).reshape(-1)]
        t = remap[np.asarray(tails, dtype=np.int64).reshape(-1)]
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if not (h.shape == t.shape == w.shape):
            raise GraphError("heads, tails and weights must have one entry per edge")
        if not np.all(np.isfinite(w)):
            raise GraphError("conductances must be finite")
        if np.any(w < 0):
            raise GraphError("conductances must be non-negative")

        keep = (h != t) & (w > 0)
        h, t, w = h[keep], t[keep], w[keep]
        lo, hi = np.minimum(h, t), np.maximum(h, t)
        keys, inverse = np.unique(lo * n + hi, return_inverse=True)
        weights_sum = np.bincount(inverse.reshape(-1), weights=w, minlength=keys.size)

        clean_labels = {}
        for v, lab in (labels or {}).items():
            v = normalize_vertex(v)
            if v in present and lab is not None:
                clean_labels[v] = _normalize_label(lab)
        ints = [v for v in sorted_vertices if isinstance(v, int)]
        ints += [v for v in (aliases or {}) if isinstance(v, int)]
        floor = max([id_floor or 0] + [v + 1 for v in ints])
        return cls(
            sorted_vertices,
            root,
            (keys // n).astype(np.int64),
            (keys % n).astype(np.int64),
            weights_sum.astype(np.float64),
            keys.astype(np.int64),
            clean_labels,
            dict(aliases or {}),
            floor,
        )

    @classmethod
    def from_edges(
        cls,
        root,
        edges: Union[Mapping[Pair, float], Iterable[Tuple[Vertex, Vertex, float]]],
        vertices: Iterable = (),
        labels: Optional[Mapping] = None,
    ) -> "ConductanceGraph":
        if isinstance(edges, Mapping):
            triples = [((u, v), w) for (u, v), w in edges.items()]
        else:
            triples = [((u, v), w) for u, v, w in edges]
        seen: Dict[Vertex, int] = {}
        order: List[Vertex] = []

        def idx(v):
            v = normalize_vertex(v)
            if v not in seen:
                seen[v] = len(order)
                order.append(v)
            return seen[v]

        idx(root)
        for v in vertices:
            idx(v)
        heads, tails, weights = [], [], []
        for (u, v), w in triples:
            heads.append(idx(u))
            tails.append(idx(v))
            weights.append(float(w))
        return cls.from_arrays(order, root, heads, tails, weights, labels=labels)

    # -- basic accessors --

    @property
    def vertices(self) -> Tuple[Vertex, ...]:
        return self._vertices

    @property
    def root(self) -> Vertex:
        return self._root

    @property
    def root_index(self) -> int:
        return self._index[self._root]

    @property
    def labels(self) -> Mapping[Vertex, Label]:
        return self._labels

    @property
    def aliases(self) -> Mapping[Vertex, Vertex]:
        return self._aliases

    @property
    def id_floor(self) -> int:
        return self._id_floor

    @property
    def n_vertices(self) -> int:
        return len(self._vertices)

    @property
    def n_edges(self) -> int:
        return int(self._weights.size)

    def __contains__(self, v) -> bool:
        try:
            return normalize_vertex(v) in self._index
        except GraphError:
            return False

    def __repr__(self) -> str:
        return f"ConductanceGraph(vertices={self.n_vertices}, edges={self.n_edges}, root={self._root!r})"

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild through the canonical constructor
        return (
            ConductanceGraph.from_arrays,
            (self._vertices, self._root, self._heads, self._tails, self._weights,
             dict(self._labels), dict(self._aliases), self._id_floor),
        )

    def resolve(self, v) -> Vertex:
        """Current id of ``v``, following identifications and relabellings."""
        v = normalize_vertex(v)
        if v in self._index:
            return v
        seen = set()
        while v not in self._index:
            if v in seen or v not in self._aliases:
                raise GraphError(f"unknown vertex {v!r}")
            seen.add(v)
            v = self._aliases[v]
        return v

    def index(self, v) -> int:
        return self._index[self.resolve(v)]

    def fresh_id(self) -> int:
        return self._id_floor

    def edge_arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._heads, self._tails, self._weights

    @property
    def edges(self) -> Mapping[Pair, float]:
        if self._edges is None:
            vs = self._vertices
            self._edges = MappingProxyType({
                (vs[h], vs[t]): float(w) for h, t, w in zip(self._heads.tolist(), self._tails.tolist(), self._weights.tolist())
            })
        return self._edges

    def _edge_position(self, u, v) -> int:
        i, j = self.index(u), self.index(v)
        if i == j:
            return -1
        lo, hi = min(i, j), max(i, j)
        key = lo * self.n_vertices + hi
        pos = int(np.searchsorted(self._keys, key))
        if pos < self._keys.size and self._keys[pos] == key:
            return pos
        return -1

    def conductance(self, u, v) -> float:
        pos = self._edge_position(u, v)
        return float(self._weights[pos]) if pos >= 0 else 0.0

    def has_edge(self, u, v) -> bool:
        return self._edge_position(u, v) >= 0

    def neighbours(self, v) -> Dict[Vertex, float]:
        i = self.index(v)
        out = {}
        for a, b in ((self._heads, self._tails), (self._tails, self._heads)):
            mask = a == i
            for j, w in zip(b[mask].tolist(), self._weights[mask].tolist()):
                out[self._vertices[j]] = w
        return out

    def total_conductance(self) -> np.ndarray:
        s = np.zeros(self.n_vertices)
        np.add.at(s, self._heads, self._weights)
        np.add.at(s, self._tails, self._weights)
        return s

    def max_conductance(self) -> float:
        return float(self._weights.max()) if self._weights.size else 0.0

    # -- matrices --

    def adjacency(self) -> np.ndarray:
        n = self.n_vertices
        W = np.zeros((n, n))
        W[self._heads, self._tails] = self._weights
        W[self._tails, self._heads] = self._weights
        return W

    def laplacian(self) -> np.ndarray:
        W = self.adjacency()
        return np.diag(W.sum(axis=1)) - W

    # -- connectivity --

    def component_labels(self) -> np.ndarray:
        if self._components is None:
            n = self.n_vertices
            A = coo_matrix((np.ones(self.n_edges), (self._heads, self._tails)), shape=(n, n))
            _, labels = connected_components(A, directed=False)
            labels.setflags(write=False)
            self._components = labels
        return self._components

    def connected_to_root(self, v) -> bool:
        labels = self.component_labels()
        return bool(labels[self.index(v)] == labels[self.root_index])

    def root_component(self) -> "ConductanceGraph":
        labels = self.component_labels()
        keep = labels == labels[self.root_index]
        if keep.all():
            return self
        return self.restrict(np.flatnonzero(keep))

    def restrict(self, indices) -> "ConductanceGraph":
        indices = np.asarray(indices, dtype=np.int64)
        n = self.n_vertices
        new_index = np.full(n, -1, dtype=np.int64)
        new_index[indices] = np.arange(indices.size)
        mask = (new_index[self._heads] >= 0) & (new_index[self._tails] >= 0)
        verts = [self._vertices[i] for i in indices.tolist()]
        kept = set(verts)
        if self._root not in kept:
            raise GraphError("a restriction must keep the root")
        labels = {v: lab for v, lab in self._labels.items() if v in kept}
        return ConductanceGraph.from_arrays(
            verts, self._root,
            new_index[self._heads[mask]], new_index[self._tails[mask]], self._weights[mask],
            labels=labels, aliases=self._aliases, id_floor=self._id_floor,
        )

    # -- comparison --

    def isclose(self, other: "ConductanceGraph", rel_tol: Optional[float] = None) -> bool:
        rel_tol = settings.REPLAY_REL_TOL if rel_tol is None else rel_tol
        if self._root != other._root or self._vertices != other._vertices:
            return False
        if not np.array_equal(self._keys, other._keys):
            return False
        return bool(np.all(np.abs(self._weights - other._weights) <= rel_tol * np.maximum(np.abs(self._weights), np.abs(other._weights))))


# --- chain construction -----------------------------------------------------

def boundary_conductance(spec: ChainSpec, positions) -> np.ndarray:
    """Folded coupling of interior positions to every j outside {-N+1, ..., N-1}."""
    pos = np.asarray(positions, dtype=np.float64)
    return spec.beta * (power_tail(spec.alpha, spec.N - pos) + power_tail(spec.alpha, spec.N + pos))


def new_chain_graph(spec: ChainSpec) -> ConductanceGraph:
    N, beta, alpha = spec.N, spec.beta, spec.alpha
    n_int = 2 * N - 1
    positions = np.arange(-N + 1, N)
    i_idx, j_idx = np.triu_indices(n_int, k=1)
    interior = beta * (j_idx - i_idx).astype(np.float64) ** (-alpha)
    root_idx = np.full(n_int, n_int, dtype=np.int64)
    heads = np.concatenate([i_idx, np.arange(n_int)])
    tails = np.concatenate([j_idx, root_idx])
    weights = np.concatenate([interior, boundary_conductance(spec, positions)])
    vertices = positions.tolist() + [N]
    labels = {int(p): int(p) for p in positions}
    logger.debug(f"Chain graph N={N} beta={beta} alpha={alpha}: {n_int + 1} vertices, {weights.size} edges")
    return ConductanceGraph.from_arrays(vertices, N, heads, tails, weights, labels=labels)


# --- mutable builder --------------------------------------------------------

class GraphBuilder:
    """Dict-of-dicts working copy used to apply surgery steps one at a time."""

    def __init__(self, root, vertices: Iterable = (), labels: Optional[Mapping] = None,
                 aliases: Optional[Mapping] = None, id_floor: int = 0):
        self.root = normalize_vertex(root)
        self._adj: Dict[Vertex, Dict[Vertex, float]] = {self.root: {}}
        self._labels: Dict[Vertex, Label] = {}
        self._aliases = UnionFind(aliases)
        self._id_floor = id_floor
        for v in vertices:
            v = normalize_vertex(v)
            if v not in self._adj:
                self._adj[v] = {}
                self._bump(v)
        for v, lab in (labels or {}).items():
            if lab is not None and normalize_vertex(v) in self._adj:
                self._labels[normalize_vertex(v)] = _normalize_label(lab)

    @classmethod
    def from_graph(cls, g: ConductanceGraph) -> "GraphBuilder":
        b = cls(g.root, g.vertices, g.labels, g.aliases, g.id_floor)
        heads, tails, weights = g.edge_arrays()
        vs = g.vertices
        for h, t, w in zip(heads.tolist(), tails.tolist(), weights.tolist()):
            b._adj[vs[h]][vs[t]] = w
            b._adj[vs[t]][vs[h]] = w
        return b

    def _bump(self, v: Vertex) -> None:
        if isinstance(v, int) and v >= self._id_floor:
            self._id_floor = v + 1

    def __contains__(self, v) -> bool:
        return normalize_vertex(v) in self._adj

    @property
    def vertices(self) -> List[Vertex]:
        return list(self._adj)

    def resolve(self, v) -> Vertex:
        return self._aliases.find(normalize_vertex(v), self._adj.__contains__)

    def fresh_id(self) -> int:
        v = self._id_floor
        self._id_floor += 1
        return v

    def add_vertex(self, v, label=None) -> Vertex:
        v = normalize_vertex(v)
        if v in self._adj:
            raise GraphError(f"vertex {v!r} already exists")
        self._adj[v] = {}
        self._aliases.forget(v)
        self._bump(v)
        if label is not None:
            self._labels[v] = _normalize_label(label)
        return v

    def conductance(self, u, v) -> float:
        u, v = self.resolve(u), self.resolve(v)
        return self._adj[u].get(v, 0.0)

    def add_conductance(self, u, v, c: float) -> None:
        u, v = self.resolve(u), self.resolve(v)
        if u == v or c <= 0:
            return
        total = self._adj[u].get(v, 0.0) + c
        self._adj[u][v] = total
        self._adj[v][u] = total

    def set_conductance(self, u, v, c: float) -> None:
        u, v = self.resolve(u), self.resolve(v)
        if u == v:
            raise GraphError(f"no self-loops: {u!r}")
        if c <= 0:
            self._adj[u].pop(v, None)
            self._adj[v].pop(u, None)
        else:
            self._adj[u][v] = c
            self._adj[v][u] = c

    def remove_edge(self, u, v) -> float:
        u, v = self.resolve(u), self.resolve(v)
        if v not in self._adj[u]:
            raise GraphError(f"no edge between {u!r} and {v!r}")
        c = self._adj[u].pop(v)
        del self._adj[v][u]
        return c

    def identify(self, y, z) -> Vertex:
        ry, rz = self.resolve(y), self.resolve(z)
        if ry == rz:
            raise GraphError(f"cannot identify {y!r} with {z!r}: same vertex")
        # root always wins, otherwise the smaller id
        if rz == self.root or (ry != self.root and vertex_key(rz) < vertex_key(ry)):
            rep, other = rz, ry
        else:
            rep, other = ry, rz
        for w, c in self._adj.pop(other).items():
            del self._adj[w][other]
            if w != rep:
                self.add_conductance(rep, w, c)
        self._labels.pop(other, None)
        self._aliases.union(other, rep)
        return rep

    def relabel(self, mapping: Iterable[Tuple[Vertex, Vertex]]) -> None:
        rename: Dict[Vertex, Vertex] = {}
        for old, new in mapping:
            old, new = self.resolve(old), normalize_vertex(new)
            if old == self.root:
                raise GraphError("the root cannot be relabelled")
            if old in rename:
                raise GraphError(f"vertex {old!r} relabelled twice")
            rename[old] = new
        targets = list(rename.values())
        if len(set(targets)) != len(targets):
            raise GraphError("relabel targets must be distinct")
        for new in targets:
            if new in self._adj and new not in rename:
                raise GraphError(f"relabel target {new!r} is already a vertex")
        adj = {}
        for u, nbrs in self._adj.items():
            adj[rename.get(u, u)] = {rename.get(w, w): c for w, c in nbrs.items()}
        self._adj = adj
        self._labels = {rename.get(v, v): lab for v, lab in self._labels.items()}
        for old, new in rename.items():
            self._aliases.union(old, new)
        for new in targets:
            self._aliases.forget(new)
            self._bump(new)

    def drop_detached(self) -> List[Vertex]:
        reached = {self.root}
        frontier = [self.root]
        while frontier:
            u = frontier.pop()
            for w in self._adj[u]:
                if w not in reached:
                    reached.add(w)
                    frontier.append(w)
        dropped = [v for v in self._adj if v not in reached]
        for v in dropped:
            del self._adj[v]
            self._labels.pop(v, None)
        return dropped

    def build(self) -> ConductanceGraph:
        verts = list(self._adj)
        index = {v: i for i, v in enumerate(verts)}
        heads, tails, weights = [], [], []
        for u, nbrs in self._adj.items():
            ku = vertex_key(u)
            for w, c in nbrs.items():
                if ku < vertex_key(w):
                    heads.append(index[u])
                    tails.append(index[w])
                    weights.append(c)
        return ConductanceGraph.from_arrays(
            verts, self.root, heads, tails, weights,
            labels=self._labels, aliases=self._aliases.as_dict(), id_floor=self._id_floor,
        )


# --- step application -------------------------------------------------------

def _rel_tol() -> float:
    return settings.STRUCTURAL_REL_TOL


def _apply_delete_edge(b: GraphBuilder, step: DeleteEdge) -> None:
    b.remove_edge(*step.pair)


def _apply_identify(b: GraphBuilder, step: IdentifyVertices) -> None:
    y, z = step.pair
    if normalize_vertex(y) == normalize_vertex(z):
        raise GraphError(f"cannot identify {y!r} with itself")
    b.identify(y, z)


def _apply_split_theta(b: GraphBuilder, step: SplitEdgeTheta) -> None:
    y, z = step.pair
    lam = b.remove_edge(y, z)
    t = b.add_vertex(step.new_vertex)
    b.add_conductance(y, t, step.theta * lam)
    b.add_conductance(t, z, step.theta / (step.theta - 1.0) * lam)


def _apply_split_uniform(b: GraphBuilder, step: SplitEdgeUniform) -> None:
    y, z = step.pair
    if step.n == 0:
        if b.conductance(y, z) <= 0:
            raise GraphError(f"no edge between {y!r} and {z!r}")
        return
    lam = b.remove_edge(y, z)
    gain = (step.n + 1) * lam
    path = [b.resolve(y)] + [b.add_vertex(v) for v in step.new_vertices] + [b.resolve(z)]
    for s, t in zip(path, path[1:]):
        b.add_conductance(s, t, gain)


def _apply_raise(b: GraphBuilder, step: RaiseConductance) -> None:
    current = b.conductance(*step.pair)
    if step.value < current * (1.0 - _rel_tol()):
        raise PreconditionError(f"raising {step.pair} to {step.value!r} would lower it from {current!r}")
    b.set_conductance(*step.pair, max(step.value, 0.0))


def _apply_lower(b: GraphBuilder, step: LowerConductance) -> None:
    current = b.conductance(*step.pair)
    if step.value > current * (1.0 + _rel_tol()):
        raise PreconditionError(f"lowering {step.pair} to {step.value!r} would raise it from {current!r}")
    b.set_conductance(*step.pair, step.value)


def _apply_project(b: GraphBuilder, step: ProjectEdge) -> None:
    a, c = step.pair
    current = b.conductance(a, c)
    if current <= 0:
        raise GraphError(f"no edge between {a!r} and {c!r}")
    lam = current if step.portion is None else step.portion
    if lam > current * (1.0 + _rel_tol()):
        raise PreconditionError(f"portion {lam!r} exceeds conductance {current!r} of {step.pair}")
    shares = math.fsum(comp.conductance for comp in step.components)
    if shares < lam * (1.0 - _rel_tol()):
        raise PreconditionError(f"components of {step.pair} carry {shares!r} < projected conductance {lam!r}")
    rest = current - lam
    if rest > current * _rel_tol():
        b.set_conductance(a, c, rest)
    else:
        b.remove_edge(a, c)
    for comp in step.components:
        path = [b.resolve(v) for v in [a, *comp.waypoints, c]]
        inverse = math.fsum(1.0 / g for (s, t), g in zip(zip(path, path[1:]), comp.gains) if s != t)
        if inverse > (1.0 + _rel_tol()) / comp.conductance:
            raise PreconditionError(f"pieces of {step.pair} have series conductance below {comp.conductance!r}")
        for (s, t), g in zip(zip(path, path[1:]), comp.gains):
            b.add_conductance(s, t, g)


def _apply_collapse(b: GraphBuilder, step: CollapsePath) -> None:
    path = [b.resolve(v) for v in step.waypoints]
    inverse = 0.0
    for (s, t), portion in zip(zip(path, path[1:]), step.portions):
        if s == t:
            raise GraphError(f"path step {s!r} -> {t!r} is a loop")
        current = b.conductance(s, t)
        if portion > current * (1.0 + _rel_tol()):
            raise PreconditionError(f"portion {portion!r} exceeds conductance {current!r} of ({s!r}, {t!r})")
        rest = current - portion
        b.set_conductance(s, t, rest if rest > current * _rel_tol() else 0.0)
        inverse += 1.0 / portion
    if step.conductance > (1.0 + _rel_tol()) / inverse:
        raise PreconditionError(f"collapsed conductance {step.conductance!r} exceeds series conductance {1.0 / inverse!r}")
    b.add_conductance(path[0], path[-1], step.conductance)


def dyadic_level(k: int) -> range:
    return range(2 ** k, 2 ** (k + 1))


def _apply_merge_family(b: GraphBuilder, step: MergePathFamily) -> None:
    source = b.resolve(step.source)
    for k in range(1, step.levels + 1):
        for i in dyadic_level(k):
            if i == b.root or i not in b:
                continue
            for j in dyadic_level(k + 1):
                if j != b.root and j in b and b.conductance(i, j) > 0:
                    b.remove_edge(i, j)
    b.add_conductance(source, b.root, step.conductance)


def _apply_relabel(b: GraphBuilder, step: Relabel) -> None:
    b.relabel(step.mapping)


def _apply_add_vertices(b: GraphBuilder, step: AddVertices) -> None:
    labels = step.labels or [None] * len(step.vertices)
    if len(labels) != len(step.vertices):
        raise GraphError("one label per added vertex")
    for v, lab in zip(step.vertices, labels):
        b.add_vertex(v, lab)


def _apply_drop_detached(b: GraphBuilder, step: DropDetached) -> None:
    b.drop_detached()


_APPLY = {
    "delete_edge": _apply_delete_edge,
    "identify_vertices": _apply_identify,
    "split_edge_theta": _apply_split_theta,
    "split_edge_uniform": _apply_split_uniform,
    "raise_conductance": _apply_raise,
    "lower_conductance": _apply_lower,
    "project_edge": _apply_project,
    "collapse_path": _apply_collapse,
    "merge_path_family": _apply_merge_family,
    "relabel": _apply_relabel,
    "add_vertices": _apply_add_vertices,
    "drop_detached": _apply_drop_detached,
}


def apply_step(g: ConductanceGraph, step: SurgeryStep) -> ConductanceGraph:
    b = GraphBuilder.from_graph(g)
    _APPLY[step.kind](b, step)
    return b.build()


def replay(initial: ConductanceGraph, transcript: SurgeryTranscript) -> ConductanceGraph:
    if not transcript.complete:
        raise PreconditionError(
            f"transcript holds {len(transcript.steps)} of {transcript.total_steps} steps; replay needs the complete log"
        )
    b = GraphBuilder.from_graph(initial)
    for step in transcript.steps:
        _APPLY[step.kind](b, step)
    return b.build()


def capped_transcript(steps: Iterable[SurgeryStep], total_steps: int, cap: Optional[int] = None) -> SurgeryTranscript:
    cap = settings.MAX_TRANSCRIPT_STEPS if cap is None else cap
    kept = list(itertools.islice(steps, cap))
    complete = total_steps <= cap
    if not complete:
        logger.debug(f"Transcript truncated: keeping {len(kept)} of {total_steps} steps")
    return SurgeryTranscript(steps=kept, total_steps=max(total_steps, len(kept)), complete=complete)


# --- primitives -------------------------------------------------------------

def delete_edge(g: ConductanceGraph, pair: Pair) -> ConductanceGraph:
    return apply_step(g, DeleteEdge(pair=tuple(pair)))


def identify_vertices(g: ConductanceGraph, y, z) -> ConductanceGraph:
    if normalize_vertex(y) == normalize_vertex(z):
        raise GraphError(f"cannot identify {y!r} with itself")
    return apply_step(g, IdentifyVertices(pair=(y, z)))


def split_edge_theta(g: ConductanceGraph, pair: Pair, theta: float, new_vertex=None) -> ConductanceGraph:
    if not theta > 1:
        raise PreconditionError(f"theta must exceed 1, got {theta!r}")
    new_vertex = g.fresh_id() if new_vertex is None else new_vertex
    return apply_step(g, SplitEdgeTheta(pair=tuple(pair), theta=theta, new_vertex=new_vertex))


def split_edge_uniform(g: ConductanceGraph, pair: Pair, n: int, new_vertices=None) -> ConductanceGraph:
    if n < 0:
        raise PreconditionError(f"n must be non-negative, got {n}")
    if n == 0:
        if not g.has_edge(*pair):
            raise GraphError(f"no edge between {pair[0]!r} and {pair[1]!r}")
        return g
    if new_vertices is None:
        new_vertices = list(range(g.fresh_id(), g.fresh_id() + n))
    return apply_step(g, SplitEdgeUniform(pair=tuple(pair), n=n, new_vertices=list(new_vertices)))


def raise_conductance(g: ConductanceGraph, pair: Pair, value: float) -> ConductanceGraph:
    return apply_step(g, RaiseConductance(pair=tuple(pair), value=value))


def lower_conductance(g: ConductanceGraph, pair: Pair, value: float) -> ConductanceGraph:
    return apply_step(g, LowerConductance(pair=tuple(pair), value=value))


def effective_conductance(g: ConductanceGraph, v, w=None) -> float:
    """Electrical effective conductance between ``v`` and ``w`` (the root by default)."""
    v = g.resolve(v)
    w = g.root if w is None else g.resolve(w)
    if v == w:
        raise PreconditionError(f"effective conductance needs two distinct vertices, got {v!r} twice")
    labels = g.component_labels()
    iv, iw = g.index(v), g.index(w)
    if labels[iv] != labels[iw]:
        raise InfiniteResistanceError(f"infinite resistance: {v!r} is not connected to {w!r}")
    members = np.flatnonzero(labels == labels[iv])
    keep = members[members != iw]
    factor = grounded_factor(g, keep)
    rhs = np.zeros(keep.size)
    pos = int(np.searchsorted(keep, iv))
    rhs[pos] = 1.0
    resistance = float(cho_solve(factor, rhs)[pos])
    return 1.0 / resistance


# --- text format ------------------------------------------------------------

_RESERVED_TOKENS = frozenset({"vertex", "label"})


def format_vertex(v: Vertex) -> str:
    if isinstance(v, tuple):
        return f"{v[0]},{v[1]}"
    if isinstance(v, str):
        # string ids must read back as the same string
        if not v or v in _RESERVED_TOKENS or v.startswith("#") or "," in v or any(ch.isspace() for ch in v):
            raise GraphError(f"vertex id {v!r} cannot be written in the graph text format")
        try:
            int(v)
        except ValueError:
            return v
        raise GraphError(f"vertex id {v!r} would read back as an integer")
    return str(v)


def parse_vertex(token: str) -> Vertex:
    try:
        return int(token)
    except ValueError:
        pass
    if "," in token:
        x, y = token.split(",", 1)
        return (int(x), int(y))
    return token


def format_graph(g: ConductanceGraph) -> str:
    lines = [f"graph v1 root={format_vertex(g.root)}"]
    vs = g.vertices
    heads, tails, weights = g.edge_arrays()
    touched = set()
    for h, t, w in zip(heads.tolist(), tails.tolist(), weights.tolist()):
        lines.append(f"{format_vertex(vs[h])} {format_vertex(vs[t])} {w!r}")
        touched.update((h, t))
    for i, v in enumerate(vs):
        if i not in touched:
            lines.append(f"vertex {format_vertex(v)}")
    for v, lab in g.labels.items():
        lines.append(f"label {format_vertex(v)} {format_vertex(lab)}")
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> ConductanceGraph:
    lines = [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    if not lines or not lines[0].startswith("graph v1 root="):
        raise GraphError("graph text must start with 'graph v1 root=<id>'")
    root = parse_vertex(lines[0][len("graph v1 root="):])
    vertices, edges, labels = [], [], {}
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "vertex" and len(parts) == 2:
            vertices.append(parse_vertex(parts[1]))
        elif parts[0] == "label" and len(parts) == 3:
            labels[parse_vertex(parts[1])] = parse_vertex(parts[2])
        elif len(parts) == 3:
            edges.append((parse_vertex(parts[0]), parse_vertex(parts[1]), float(parts[2])))
        else:
            raise GraphError(f"cannot parse graph line {line!r}")
    return ConductanceGraph.from_edges(root, edges, vertices=vertices, labels=labels)


def write_graph(g: ConductanceGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_graph(g))


def read_graph(path) -> ConductanceGraph:
    with open(path) as fh:
        return parse_graph(fh.read())
