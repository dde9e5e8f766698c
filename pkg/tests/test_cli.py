import csv
import json
import os

import numpy as np
import pytest

from oraclebundle import cli, serialize
from oraclebundle.agents import gen_resource
from oraclebundle.serialize import SchemaError


def run_cli(args):
    return cli.main(args)


class TestRun:
    def test_resource_example_end_to_end(self, tmp_path):
        trace = tmp_path / "t.csv"
        summary = tmp_path / "s.txt"
        code = run_cli(["--example", "resource", "--seed", "1",
                        "--trace", str(trace), "--summary", str(summary)])
        assert code == 0
        with open(trace) as f:
            rows = list(csv.reader(f))
        assert ",".join(rows[0]) == cli.TRACE_HEADER
        h = [float(r[1]) for r in rows[1:]]
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))
        # omega_true column blank without --reference
        assert all(r[5] == "" for r in rows[1:])
        text = summary.read_text()
        assert "status=gap" in text
        assert "omega_final=" in text
        # gap-curve figure rendered alongside the CSV
        assert (tmp_path / "t.png").exists()

    def test_reference_populates_true_gap(self, tmp_path):
        trace = tmp_path / "t.csv"
        summary = tmp_path / "s.txt"
        code = run_cli(["--example", "resource", "--seed", "2", "--reference",
                        "--trace", str(trace), "--summary", str(summary)])
        assert code == 0
        with open(trace) as f:
            rows = list(csv.reader(f))
        finals = [float(r[5]) for r in rows[1:] if r[5] != ""]
        assert finals and all(v >= -1e-6 for v in finals)
        assert "h_star=" in summary.read_text()

    def test_max_iters_exit_code(self, tmp_path):
        code = run_cli(["--example", "resource", "--seed", "1",
                        "--max-iters", "2", "--eps-abs", "1e-12",
                        "--eps-rel", "1e-12",
                        "--summary", str(tmp_path / "s.txt")])
        assert code == 2

    def test_finite_memory_run(self, tmp_path):
        code = run_cli(["--example", "resource", "--seed", "1", "--memory", "5",
                        "--summary", str(tmp_path / "s.txt")])
        assert code == 0


class TestErrors:
    def test_missing_instance_file(self):
        assert run_cli(["--instance", "does-not-exist.json"]) == 1

    def test_usage_error(self, capsys):
        assert run_cli(["--example", "nope"]) == 1
        capsys.readouterr()

    def test_requires_a_source(self):
        assert run_cli(["--seed", "3"]) == 1

    def test_malformed_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert run_cli(["--instance", str(bad)]) == 1


class TestSerialization:
    def test_round_trip_identity(self, tmp_path):
        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        back = serialize.load_instance(path)
        assert back.name == inst.name
        np.testing.assert_array_equal(back.g.c, inst.g.c)
        np.testing.assert_array_equal(np.asarray(back.g.A_in),
                                      np.asarray(inst.g.A_in))
        np.testing.assert_array_equal(back.g.upper, inst.g.upper)
        for a, b in zip(inst.agents, back.agents):
            assert a.kind == b.kind
            pa, pb = a.payload(), b.payload()
            for k in pa:
                assert np.array_equal(np.asarray(pa[k]), np.asarray(pb[k])), k

    def test_loaded_instance_solves_identically(self, tmp_path):
        from oraclebundle import SolverParams, solve

        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        back = serialize.load_instance(path)
        r1 = solve(inst.g, inst.agents, SolverParams())
        r2 = solve(back.g, back.agents, SolverParams())
        assert r1.h_best == pytest.approx(r2.h_best, abs=1e-12)

    def test_missing_field_named(self, tmp_path):
        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        doc = json.loads(path.read_text())
        del doc["structured"]["c"]
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="structured.*'c'"):
            serialize.load_instance(path)

    def test_version_mismatch_names_expected(self, tmp_path):
        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        doc = json.loads(path.read_text())
        doc["version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="expected 1.*99"):
            serialize.load_instance(path)

    def test_unknown_agent_kind(self, tmp_path):
        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        doc = json.loads(path.read_text())
        doc["agents"][0]["kind"] = "mystery"
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="agents\\[0\\].*mystery"):
            serialize.load_instance(path)

    def test_block_size_consistency_checked(self, tmp_path):
        inst = gen_resource(5, n=4, M=3)
        path = tmp_path / "inst.json"
        serialize.save_instance(inst, path)
        doc = json.loads(path.read_text())
        doc["agents"] = doc["agents"][:2]
        path.write_text(json.dumps(doc))
        with pytest.raises(SchemaError, match="block sizes"):
            serialize.load_instance(path)
