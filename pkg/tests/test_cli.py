"""Command-line flows: subcommands, exit codes, output determinism."""

import json

import numpy as np
import pytest

from nestor.cli import main, resolve_threads
from nestor.exceptions import DegeneracyError, InvalidInputError
from nestor.io import sha256_file


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run("simulate", "--p", 6, "--n", 50, "--reps", 2, "--seed", 3, "--out", out)
    assert code == 0
    return out


class TestSimulate:
    def test_layout_and_truth(self, sim_dir):
        assert (sim_dir / "manifest.json").exists()
        truth = json.loads((sim_dir / "rep_000" / "truth.json").read_text())
        assert truth["influence_class"] in ("Minor", "Medium", "Major")
        adj = np.asarray(truth["adjacency"])
        assert adj.shape == (7, 7)

    def test_reruns_bit_identical(self, sim_dir, tmp_path):
        assert run("simulate", "--p", 6, "--n", 50, "--reps", 2, "--seed", 3,
                   "--out", tmp_path / "again") == 0
        a = sha256_file(sim_dir / "rep_001" / "counts.csv")
        b = sha256_file(tmp_path / "again" / "rep_001" / "counts.csv")
        assert a == b


class TestFit:
    def test_r0_writes_edges_only(self, sim_dir, tmp_path):
        out = tmp_path / "fit0"
        code = run("fit", sim_dir / "rep_000" / "counts.csv", "--r", 0,
                   "--max-iter", 40, "--out", out)
        assert code in (0, 4)
        assert (out / "edges.csv").exists()
        assert (out / "trace.csv").exists()
        assert not (out / "hidden_means.csv").exists()
        header = (out / "edges.csv").read_text().splitlines()
        assert header[0] == "# schema nestor/edges/v1"
        assert header[1] == "k,l,P_kl,omega_kl"
        # 6 observed nodes -> 15 pairs
        assert len(header) == 2 + 15

    def test_r1_with_clique_file(self, sim_dir, tmp_path, capsys):
        cliques = tmp_path / "cl.txt"
        cliques.write_text("s01,s03\n")
        out = tmp_path / "fit1"
        code = run("fit", sim_dir / "rep_000" / "counts.csv", "--r", 1,
                   "--cliques", cliques, "--out", out)
        assert code in (0, 4)
        assert (out / "hidden_means.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["cliques"] == [["s01", "s03"]]
        assert set(manifest["inputs"]) == {"counts", "cliques"}
        captured = capsys.readouterr()
        assert "kept candidate" in captured.out

    def test_rerun_digests_identical(self, sim_dir, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = run("fit", sim_dir / "rep_000" / "counts.csv", "--r", 1,
                       "--seed", 2, "--max-iter", 30, "--out", out)
            assert code in (0, 4)
            outs.append(json.loads((out / "manifest.json").read_text())["outputs"])
        assert outs[0] == outs[1]

    def test_nonconvergence_exit_code(self, sim_dir, tmp_path):
        # one iteration cannot reach the threshold on this data
        code = run("fit", sim_dir / "rep_000" / "counts.csv", "--r", 0,
                   "--max-iter", 1, "--out", tmp_path / "stub")
        assert code == 4
        assert (tmp_path / "stub" / "edges.csv").exists()


class TestSelect:
    def test_small_grid(self, sim_dir, tmp_path):
        out = tmp_path / "sel"
        code = run("select", sim_dir / "rep_000" / "counts.csv",
                   "--r-grid", "0,1", "--folds", 3, "--trees", 8,
                   "--seed", 1, "--out", out)
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["r_best"] in (0, 1)
        lines = (out / "pcl.csv").read_text().splitlines()
        assert lines[1] == "r,fold,pcl"
        # 2 r values x (3 folds + total)
        assert len(lines) == 2 + 2 * 4


class TestBenchmark:
    def test_tiny_oracle_run(self, tmp_path):
        out = tmp_path / "bench"
        code = run("benchmark", "--mode", "oracle", "--reps", 2, "--p", 6,
                   "--n", 40, "--seed", 4, "--out", out)
        assert code == 0
        lines = (out / "summary.csv").read_text().splitlines()
        assert lines[1].startswith("class,n,auc_mean")
        reports = (out / "reports.csv").read_text().splitlines()
        assert len(reports) >= 3


class TestExitCodes:
    def test_missing_counts_file(self, tmp_path):
        assert run("fit", tmp_path / "ghost.csv", "--out", tmp_path / "o") == 2

    def test_bad_alpha(self, sim_dir, tmp_path):
        assert run("fit", sim_dir / "rep_000" / "counts.csv",
                   "--alpha", "soon", "--out", tmp_path / "o") == 2

    def test_bad_r_grid(self, sim_dir, tmp_path):
        assert run("select", sim_dir / "rep_000" / "counts.csv",
                   "--r-grid", "0;1", "--out", tmp_path / "o") == 2

    def test_unknown_clique_species(self, sim_dir, tmp_path):
        cliques = tmp_path / "cl.txt"
        cliques.write_text("s01,nessie\n")
        assert run("fit", sim_dir / "rep_000" / "counts.csv", "--r", 1,
                   "--cliques", cliques, "--out", tmp_path / "o") == 2

    def test_usage_error(self):
        assert run("fit") == 2

    def test_degenerate_fit(self, sim_dir, tmp_path, monkeypatch, capsys):
        def boom(*args, **kwargs):
            raise DegeneracyError("no usable candidate run")

        monkeypatch.setattr("nestor.cli.fit_network", boom)
        code = run("fit", sim_dir / "rep_000" / "counts.csv", "--out", tmp_path / "o")
        assert code == 3
        assert "error:" in capsys.readouterr().err

    def test_version_flag(self, capsys):
        assert run("--version") == 0
        assert "nestor" in capsys.readouterr().out


class TestThreads:
    def test_default_without_env(self, monkeypatch):
        monkeypatch.delenv("NESTOR_THREADS", raising=False)
        assert resolve_threads(None) == 1
        assert resolve_threads(3) == 3

    def test_env_caps_request(self, monkeypatch):
        monkeypatch.setenv("NESTOR_THREADS", "2")
        assert resolve_threads(None) == 2
        assert resolve_threads(8) == 2
        assert resolve_threads(1) == 1

    def test_invalid_env_rejected(self, monkeypatch):
        monkeypatch.setenv("NESTOR_THREADS", "many")
        with pytest.raises(InvalidInputError):
            resolve_threads(None)

    def test_bad_request_rejected(self, monkeypatch):
        monkeypatch.delenv("NESTOR_THREADS", raising=False)
        with pytest.raises(InvalidInputError):
            resolve_threads(0)
