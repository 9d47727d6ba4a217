import math
import pickle

import pytest

from chain_surgeon.errors import GraphError, InfiniteResistanceError, PreconditionError
from chain_surgeon.graph_core import (
    ConductanceGraph,
    GraphBuilder,
    UnionFind,
    canonical_pair,
    capped_transcript,
    delete_edge,
    effective_conductance,
    format_graph,
    identify_vertices,
    lower_conductance,
    new_chain_graph,
    parse_graph,
    parse_vertex,
    raise_conductance,
    read_graph,
    replay,
    split_edge_theta,
    split_edge_uniform,
    write_graph,
)
from chain_surgeon.schemas import (
    ChainSpec,
    CollapsePath,
    DeleteEdge,
    IdentifyVertices,
    MergePathFamily,
    PathComponent,
    ProjectEdge,
    SurgeryTranscript,
)


class TestConstruction:
    def test_duplicate_edges_are_summed_and_loops_dropped(self):
        g = ConductanceGraph.from_edges("root", [(0, 1, 1.0), (1, 0, 2.0), (1, 1, 5.0), (1, "root", 1.0)])
        assert g.conductance(0, 1) == 3.0
        assert g.conductance(1, 0) == 3.0
        assert g.n_edges == 2

    def test_zero_conductances_are_not_edges(self):
        g = ConductanceGraph.from_edges("root", {(0, "root"): 0.0}, vertices=[0])
        assert g.n_edges == 0
        assert not g.has_edge(0, "root")
        assert 0 in g

    def test_negative_or_nan_conductance_rejected(self):
        with pytest.raises(GraphError):
            ConductanceGraph.from_edges("root", {(0, "root"): -1.0})
        with pytest.raises(GraphError):
            ConductanceGraph.from_edges("root", {(0, "root"): math.nan})

    def test_root_must_be_a_vertex(self):
        with pytest.raises(GraphError):
            ConductanceGraph.from_arrays([0, 1], "root", [0], [1], [1.0])

    def test_canonical_pair_orders_mixed_ids(self):
        assert canonical_pair("root", 3) == (3, "root")
        assert canonical_pair((1, 2), 5) == (5, (1, 2))

    def test_graph_pickles(self, triangle):
        clone = pickle.loads(pickle.dumps(triangle))
        assert clone.isclose(triangle, 0.0)
        assert clone.root == "root"


class TestChainGraph:
    def test_vertex_set_and_root(self):
        g = new_chain_graph(ChainSpec(N=3, beta=1.0, alpha=2.5))
        assert g.root == 3
        assert sorted(v for v in g.vertices if v != 3) == [-2, -1, 0, 1, 2]
        # every interior pair plus one root edge per vertex
        assert g.n_edges == 10 + 5

    def test_interior_conductances(self):
        g = new_chain_graph(ChainSpec(N=4, beta=2.0, alpha=3.0))
        assert g.conductance(-1, 2) == pytest.approx(2.0 / 27.0, rel=1e-15)

    def test_boundary_conductance_is_hurwitz_tail(self):
        spec = ChainSpec(N=2, beta=1.0, alpha=2.0)
        g = new_chain_graph(spec)
        # vertex 1 sees j >= 2 at distances 1, 2, ... and j <= -2 at distances 3, 4, ...
        expected = math.pi ** 2 / 6 + (math.pi ** 2 / 6 - 1.0 - 0.25)
        assert g.conductance(1, g.root) == pytest.approx(expected, rel=1e-10)

    def test_symmetric_under_reflection(self):
        g = new_chain_graph(ChainSpec(N=5, beta=1.0, alpha=2.2))
        for i in range(1, 5):
            assert g.conductance(i, g.root) == pytest.approx(g.conductance(-i, g.root), rel=1e-12)


class TestPrimitives:
    def test_delete_edge_requires_edge(self, triangle):
        with pytest.raises(GraphError):
            delete_edge(triangle, (0, 2))
        h = delete_edge(triangle, (0, 1))
        assert not h.has_edge(0, 1)
        assert h.n_edges == 2

    def test_identify_merges_parallel_edges(self, triangle):
        h = identify_vertices(triangle, 1, "root")
        assert h.vertices == (0, "root")
        assert h.conductance(0, "root") == pytest.approx(2.5)
        assert h.resolve(1) == "root"

    def test_identify_same_vertex_rejected(self, triangle):
        with pytest.raises(GraphError):
            identify_vertices(triangle, 1, 1)

    def test_theta_split_preserves_series_conductance(self, triangle):
        h = split_edge_theta(triangle, (0, 1), 3.0)
        t = triangle.fresh_id()
        assert h.conductance(0, t) == pytest.approx(6.0)
        assert h.conductance(t, 1) == pytest.approx(3.0)
        assert effective_conductance(h, 0) == pytest.approx(effective_conductance(triangle, 0), rel=1e-12)

    def test_theta_must_exceed_one(self, triangle):
        with pytest.raises(PreconditionError):
            split_edge_theta(triangle, (0, 1), 1.0)

    def test_uniform_split(self, path3):
        h = split_edge_uniform(path3, (1, 2), 3)
        assert h.n_vertices == path3.n_vertices + 3
        assert max(h.edges.values()) == pytest.approx(8.0)
        assert split_edge_uniform(path3, (1, 2), 0) is path3

    def test_raise_and_lower(self, triangle):
        assert raise_conductance(triangle, (0, 1), 5.0).conductance(0, 1) == 5.0
        with pytest.raises(PreconditionError):
            raise_conductance(triangle, (0, 1), 1.0)
        assert not lower_conductance(triangle, (0, 1), 0.0).has_edge(0, 1)
        with pytest.raises(PreconditionError):
            lower_conductance(triangle, (0, 1), 3.0)

    def test_inputs_are_not_mutated(self, triangle):
        before = dict(triangle.edges)
        delete_edge(triangle, (0, 1))
        identify_vertices(triangle, 0, 1)
        assert dict(triangle.edges) == before


class TestCompositeSteps:
    def test_project_edge_routes_through_waypoints(self, path3):
        g = raise_conductance(path3, (0, 2), 1.0)
        step = ProjectEdge(pair=(0, 2), components=[PathComponent(conductance=1.0, waypoints=[1], gains=[2.0, 2.0])])
        h = replay(g, SurgeryTranscript(steps=[step], total_steps=1))
        assert not h.has_edge(0, 2)
        assert h.conductance(0, 1) == pytest.approx(3.0)
        assert h.conductance(1, 2) == pytest.approx(4.0)

    def test_project_edge_rejects_weak_components(self, path3):
        g = raise_conductance(path3, (0, 2), 1.0)
        step = ProjectEdge(pair=(0, 2), components=[PathComponent(conductance=1.0, waypoints=[1], gains=[1.0, 1.0])])
        with pytest.raises(PreconditionError):
            replay(g, SurgeryTranscript(steps=[step], total_steps=1))

    def test_project_edge_portion_leaves_the_rest(self, path3):
        g = raise_conductance(path3, (0, 2), 3.0)
        step = ProjectEdge(pair=(0, 2), portion=1.0, components=[
            PathComponent(conductance=1.0, waypoints=[1], gains=[2.0, 2.0]),
        ])
        h = replay(g, SurgeryTranscript(steps=[step], total_steps=1))
        assert h.conductance(0, 2) == pytest.approx(2.0)
        assert h.conductance(0, 1) == pytest.approx(3.0)
        assert h.conductance(1, 2) == pytest.approx(4.0)

    def test_project_edge_portion_above_conductance(self, path3):
        g = raise_conductance(path3, (0, 2), 1.0)
        step = ProjectEdge(pair=(0, 2), portion=1.5, components=[
            PathComponent(conductance=1.5, waypoints=[1], gains=[3.0, 3.0]),
        ])
        with pytest.raises(PreconditionError):
            replay(g, SurgeryTranscript(steps=[step], total_steps=1))

    def test_collapse_path(self, path3):
        step = CollapsePath(waypoints=[0, 1, 2], portions=[1.0, 1.0], conductance=0.5)
        h = replay(path3, SurgeryTranscript(steps=[step], total_steps=1))
        assert not h.has_edge(0, 1)
        assert h.conductance(1, 2) == pytest.approx(1.0)
        assert h.conductance(0, 2) == pytest.approx(0.5)

    def test_merge_family_keeps_root_edges(self):
        g = new_chain_graph(ChainSpec(N=4, beta=1.0, alpha=2.5))
        step = MergePathFamily(source=0, levels=1, conductance=0.1)
        h = replay(g, SurgeryTranscript(steps=[step], total_steps=1))
        # levels {2, 3} and {4..7}: the root (4) is never touched
        assert h.has_edge(2, 4) and h.has_edge(3, 4)
        assert h.conductance(0, 4) == pytest.approx(g.conductance(0, 4) + 0.1)

    def test_incomplete_transcript_refuses_replay(self, triangle):
        steps = iter([DeleteEdge(pair=(0, 1)), IdentifyVertices(pair=(0, "root"))])
        transcript = capped_transcript(steps, total_steps=2, cap=1)
        assert not transcript.complete
        with pytest.raises(PreconditionError):
            replay(triangle, transcript)


class TestEffectiveConductance:
    def test_series_path(self, path3):
        assert effective_conductance(path3, 0) == pytest.approx(1.0 / (1.0 + 0.5 + 0.25), rel=1e-12)

    def test_between_two_vertices(self, path3):
        assert effective_conductance(path3, 0, 2) == pytest.approx(1.0 / 1.5, rel=1e-12)

    def test_disconnected_raises(self):
        g = ConductanceGraph.from_edges("root", {(0, 1): 1.0, (2, "root"): 1.0})
        with pytest.raises(InfiniteResistanceError):
            effective_conductance(g, 0)


class TestUnionFind:
    def test_find_follows_live_representative(self):
        uf = UnionFind()
        uf.union(1, 2)
        uf.union(2, 3)
        assert uf.find(1, {3}.__contains__) == 3


class TestTextFormat:
    def test_vertex_tokens(self):
        assert parse_vertex("5") == 5
        assert parse_vertex("3,-2") == (3, -2)
        assert parse_vertex("root") == "root"

    def test_round_trip_keeps_isolated_vertices_and_labels(self, tmp_path):
        g = ConductanceGraph.from_edges(
            "root", {((0, 1), "root"): 0.1 + 0.2, (4, "root"): 1e-300}, vertices=[7], labels={4: 0}
        )
        path = tmp_path / "g.txt"
        write_graph(g, path)
        h = read_graph(path)
        assert h.isclose(g, 0.0)
        assert h.labels == {4: 0}
        assert "vertex 7" in format_graph(g)

    def test_bad_header(self):
        with pytest.raises(GraphError):
            parse_graph("0 root 1.0\n")

    @pytest.mark.parametrize("bad", ["north pole", "a,b", "vertex", "label", "#hub", "7", ""])
    def test_unwritable_string_ids_are_rejected(self, bad):
        g = ConductanceGraph.from_edges("root", {(bad, "root"): 1.0})
        with pytest.raises(GraphError):
            format_graph(g)

    def test_string_ids_read_back(self):
        g = ConductanceGraph.from_edges("sink", {("hub", "sink"): 2.0, ("hub", 3): 0.5})
        assert parse_graph(format_graph(g)).isclose(g, 0.0)


def test_builder_drop_detached():
    b = GraphBuilder("root", [0, 1, 2])
    b.add_conductance(0, "root", 1.0)
    b.add_conductance(1, 2, 1.0)
    b.drop_detached()
    assert sorted(b.vertices, key=str) == [0, "root"]
