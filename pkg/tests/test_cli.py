import csv
import json

import numpy as np
import pytest

from pertree.cli import main


@pytest.fixture(scope="module")
def ex2_cert(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synthesize", "--system", "builtin:example2", "--mode", "litpc",
                 "--period", "2", "--out", str(out)]) == 0
    return out / "certificate_litpc_N2.json"


def test_synthesize_exit_codes(tmp_path, capsys):
    assert main(["synthesize", "--system", "builtin:example2", "--mode", "static",
                 "--period", "1", "--out", str(tmp_path)]) == 2
    assert "infeasible" in capsys.readouterr().out
    assert main(["synthesize", "--system", "builtin:example1", "--mode", "static",
                 "--period-range", "1:3", "--first", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "N=2: feasible" in out and "N=3" not in out
    assert (tmp_path / "certificate_static_N2.json").exists()


def test_malformed_inputs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synthesize", "--system", str(bad), "--mode", "static", "--period", "1",
                 "--out", str(tmp_path)]) == 1
    assert main(["synthesize", "--system", str(tmp_path / "missing.json"), "--mode", "static",
                 "--period", "1", "--out", str(tmp_path)]) == 1
    assert main(["synthesize", "--system", "builtin:example2", "--mode", "litpc",
                 "--period-range", "3:x", "--out", str(tmp_path)]) == 1
    assert main(["synthesize", "--system", "builtin:example2", "--constrained", "--mode", "litpc",
                 "--period", "2", "--out", str(tmp_path)]) == 1


def test_verify_pass_and_tampered_fail(tmp_path, ex2_cert, capsys):
    assert main(["verify", "--system", "builtin:example2", "--certificate", str(ex2_cert),
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "verification.json").read_text())
    assert report["passed"] and report["fslf"]["n_scenarios"] == 16
    capsys.readouterr()

    d = json.loads(ex2_cert.read_text())
    d["gains"][1][2][0][0] += 1.0
    tampered = tmp_path / "tampered.json"
    tampered.write_text(json.dumps(d))
    assert main(["verify", "--system", "builtin:example2", "--certificate", str(tampered),
                 "--out", str(tmp_path / "t.json")]) == 2
    out = capsys.readouterr().out
    assert "FAIL" in out and "failing scenario [2," in out

    assert main(["verify", "--system", "builtin:example1", "--certificate", str(ex2_cert),
                 "--out", str(tmp_path)]) == 1


def test_simulate_zero_state_and_determinism(tmp_path, ex2_cert):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--system", "builtin:example2", "--certificate", str(ex2_cert),
                 "--x0", "0,0", "--horizon", "6", "--out", str(a)]) == 0
    with open(a / "trajectory.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 7
    assert all(float(r["x0"]) == 0 and float(r["x1"]) == 0 for r in rows)
    for folder in (a, b):
        assert main(["simulate", "--system", "builtin:example2", "--certificate", str(ex2_cert),
                     "--x0", "boundary", "--seed", "3", "--realization", "vertices",
                     "--dump-tree", "--out", str(folder)]) == 0
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    tree = json.loads((a / "tree.json").read_text())
    assert len(tree["stages"][2]["nodes"]) == 16
    assert main(["simulate", "--system", "builtin:example2", "--certificate", str(ex2_cert),
                 "--x0", "1,2,3", "--out", str(a)]) == 1


def test_compare_single_method(tmp_path):
    assert main(["compare", "--system", "builtin:example3", "--constrained",
                 "--methods", "litpc:2", "--reference", "litpc:2", "--points", "32",
                 "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "compare.json").read_text())
    assert data["rows"][0]["ratio"] == pytest.approx(1.0)
    folder = tmp_path / "boundaries" / "litpc_N2"
    names = sorted(p.name for p in folder.iterdir())
    assert names == ["t0_j0.csv"] + [f"t1_j{j}.csv" for j in range(4)]
    pts = np.loadtxt(folder / "t1_j2.csv", delimiter=",", skiprows=1)
    assert pts.shape == (32, 2)
    assert main(["compare", "--system", "builtin:example3", "--methods", "bogus:2",
                 "--out", str(tmp_path)]) == 1
