import argparse
import json

import pytest

from chain_surgeon.errors import EXIT_OK, EXIT_PRECONDITION, EXIT_RUNTIME
from chain_surgeon.exact_real import dg_variance
from chain_surgeon.graph_core import new_chain_graph, read_graph
from chain_surgeon.main import parse_and_dispatch, parse_n_list
from chain_surgeon.routes import run_id
from chain_surgeon.schemas import ChainSpec, RunConfig


def _run(tmp_path, *argv):
    out = tmp_path / "out.json"
    code = parse_and_dispatch(["--no-timestamp", *argv, "--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


class TestNList:
    def test_comma_list(self):
        assert parse_n_list("64,128,256") == [64, 128, 256]

    def test_geometric_range(self):
        assert parse_n_list("8:64:4") == [8, 16, 32, 64]

    @pytest.mark.parametrize("text", ["8:4:3", "a,b", "0:10:3"])
    def test_rejects(self, text):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_n_list(text)


class TestExitCodes:
    def test_unknown_flag_is_a_usage_error(self):
        assert parse_and_dispatch(["chain-exact", "--N", "2", "--alpha", "3", "--bogus"]) == EXIT_PRECONDITION

    def test_missing_command(self):
        assert parse_and_dispatch([]) == EXIT_PRECONDITION

    def test_invalid_parameter(self, tmp_path):
        code, _ = _run(tmp_path, "chain-exact", "--N", "2", "--alpha", "0.5")
        assert code == EXIT_PRECONDITION

    def test_sweep_with_three_lengths(self, tmp_path):
        code, _ = _run(tmp_path, "sweep", "--N", "8,16,32", "--alpha", "4")
        assert code == EXIT_PRECONDITION

    def test_enumeration_too_large(self, tmp_path):
        code, _ = _run(tmp_path, "chain-exact", "--N", "8", "--alpha", "3", "--integer")
        assert code == EXIT_PRECONDITION


class TestCommands:
    def test_chain_exact_single_site(self, tmp_path):
        code, doc = _run(tmp_path, "chain-exact", "--N", "1", "--alpha", "3", "--integer")
        assert code == EXIT_OK
        estimate = doc["result"]["estimate"]
        assert estimate["method"] == "enumeration-exact"
        assert "generated_at" not in doc
        assert doc["run_id"] == run_id(RunConfig.model_validate(doc["config"]))

    def test_chain_exact_real_default(self, tmp_path):
        code, doc = _run(tmp_path, "chain-exact", "--N", "4", "--alpha", "2.5", "--beta", "2")
        assert code == EXIT_OK
        assert doc["result"]["estimate"]["method"] == "laplacian-exact"

    def test_surgery_writes_graph_and_transcript(self, tmp_path):
        graph, transcript = tmp_path / "reduced.txt", tmp_path / "transcript.json"
        code, doc = _run(
            tmp_path, "surgery", "--N", "8", "--alpha", "4", "--pipeline", "upper-gt3",
            "--graph-out", str(graph), "--transcript-out", str(transcript),
        )
        assert code == EXIT_OK
        assert doc["result"]["audit"]["passed"]
        assert read_graph(graph).n_edges == 8
        assert json.loads(transcript.read_text())["complete"]
        assert doc["result"]["reduced_real_variance"] == pytest.approx(4.0)

    def test_qsos_exact(self, tmp_path):
        code, doc = _run(tmp_path, "qsos", "--N", "1", "--alpha", "3", "--q", "2", "--estimator", "exact")
        assert code == EXIT_OK
        c = doc["result"]["estimate"]["value"]
        lam = new_chain_graph(ChainSpec(N=1, beta=1.0, alpha=3.0)).conductance(0, 1)
        assert c == pytest.approx(dg_variance(lam), rel=1e-8)

    def test_sandwich(self, tmp_path):
        csv = tmp_path / "sandwich.csv"
        code, doc = _run(tmp_path, "sandwich", "--N", "8,16", "--alpha", "4", "--csv", str(csv))
        assert code == EXIT_OK
        assert doc["result"]["all_hold"]
        assert csv.read_text().startswith("# run_id=")

    def test_sweep_outputs_are_byte_identical(self, tmp_path):
        csv = tmp_path / "rows.csv"
        argv = ["sweep", "--N", "8:64:4", "--alpha", "4", "--csv", str(csv)]
        first_code, first = _run(tmp_path, *argv)
        first_csv = csv.read_bytes()
        second_code, second = _run(tmp_path, *argv)
        assert first_code == second_code == EXIT_OK
        assert first == second
        assert csv.read_bytes() == first_csv

    @pytest.mark.slow
    def test_jobs_do_not_change_results(self, tmp_path):
        argv = ["chain-mcmc", "--N", "2", "--alpha", "3", "--sweeps", "4000", "--replicas", "4"]
        _, serial = _run(tmp_path, *argv)
        _, parallel = _run(tmp_path, "--jobs", "2", *argv)
        assert serial["result"] == parallel["result"]

    @pytest.mark.slow
    def test_selftest(self, tmp_path):
        code, doc = _run(tmp_path, "selftest")
        assert code == EXIT_OK
        assert all(r["passed"] for r in doc["result"])


def test_exit_code_constants():
    assert (EXIT_OK, EXIT_PRECONDITION, EXIT_RUNTIME) == (0, 1, 2)
