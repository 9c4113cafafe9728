import csv
import json
import os

import pytest

from beliefpic import cli

SCALAR = cli.bundled_scenario("scalar_example")
FROZEN = cli.bundled_scenario("frozen")


def load(path):
    with open(path) as fh:
        return json.load(fh)


def write(tmp_path, name, data):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return str(p)


def summary(out):
    return dict(line.split(" = ", 1) for line in (out / "summary.txt").read_text().splitlines() if " = " in line)


def test_scalar_example_reports_t_star(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", SCALAR, "--out", str(out)]) == 0
    s = summary(out)
    assert float(s["t_star"]) == 1.0
    assert float(s["pde_vs_lqg_max_abs_value_error_t0"]) < 2e-3
    for name in ("manifest.json", "summary.txt", "covariance.csv", "pde.csv", "lqg.csv"):
        assert (out / name).exists()


def test_frozen_sigma_column_constant(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["simulate", "--scenario", FROZEN, "--out", str(out), "--paths", "200"]) == 0
    with open(out / "closed_loop.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 51
    assert len({r["Sigma_00"] for r in rows}) == 1


def test_malformed_json_exit_2_and_no_output(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    out = tmp_path / "o"
    assert cli.main(["oracle", "--scenario", str(bad), "--out", str(out)]) == 2
    assert not out.exists()
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["error"] == "parse"


def test_missing_file_and_bad_flags_exit_2(tmp_path):
    assert cli.main(["oracle", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["oracle", "--bogus"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("B"),
    lambda d: d.update(lam=1.0),
    lambda d: d.update({"lambda": -1.0}),
    lambda d: d.update(R_a=[[0.0]]),
    lambda d: d.update(n=2),
    lambda d: d.update(mu0=[0.0, 1.0]),
    lambda d: d.update(Sigma0=[[-1.0]]),
    lambda d: d.update(dt=0.3),
    lambda d: d.update(sensing={"type": "scaled"}),
    lambda d: d.update(experiment={"kind": "teleport"}),
])
def test_validation_errors_exit_3(tmp_path, mutate):
    data = load(SCALAR)
    mutate(data)
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", write(tmp_path, "s.json", data), "--out", str(out)]) == 3
    assert not out.exists()


def test_infeasible_exit_4(tmp_path, capsys):
    data = load(SCALAR)
    data["T"] = 2.0
    path = write(tmp_path, "s.json", data)
    assert cli.main(["oracle", "--scenario", path, "--out", str(tmp_path / "a")]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "infeasible"
    assert "status = infeasible" in (tmp_path / "a" / "summary.txt").read_text()
    assert cli.main(["simulate", "--scenario", path, "--out", str(tmp_path / "b"), "--paths", "50"]) == 4


def test_unstable_explicit_grid_exit_3(tmp_path):
    data = load(SCALAR)
    data["experiment"] = {"kind": "oracle", "pde": {"dmu": 0.01, "dt": 0.01, "scheme": "explicit"}}
    assert cli.main(["run", "--scenario", write(tmp_path, "s.json", data), "--out", str(tmp_path / "o")]) == 3


def test_numerical_failure_exit_5(tmp_path, capsys):
    # a stiff reaction term with a coarse time step drives Crank-Nicolson negative
    data = load(SCALAR)
    data.update({"lambda": 0.01, "R_a": [[0.01]]})
    data["experiment"] = {"kind": "oracle", "pde": {"dmu": 0.05, "dt": 0.05}}
    assert cli.main(["run", "--scenario", write(tmp_path, "s.json", data), "--out", str(tmp_path / "o")]) == 5
    assert json.loads(capsys.readouterr().err)["error"] == "numerical"


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["value", "--scenario", SCALAR, "--out", str(out), "--paths", "3000"]) == 0
    assert (a / "value_sweep.csv").read_bytes() == (b / "value_sweep.csv").read_bytes()


def test_thread_count_does_not_change_outputs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["value", "--scenario", SCALAR, "--out", str(a), "--paths", "9000", "--threads", "1"]) == 0
    assert cli.main(["value", "--scenario", SCALAR, "--out", str(b), "--paths", "9000", "--threads", "3"]) == 0
    assert (a / "value_sweep.csv").read_bytes() == (b / "value_sweep.csv").read_bytes()


def test_seed_override_changes_output(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["value", "--scenario", SCALAR, "--out", str(a), "--paths", "500"]) == 0
    assert cli.main(["value", "--scenario", SCALAR, "--out", str(b), "--paths", "500", "--seed", "8"]) == 0
    assert load(b / "manifest.json")["scenario"]["seed"] == 8
    assert (a / "value_sweep.csv").read_bytes() != (b / "value_sweep.csv").read_bytes()


def test_manifest_round_trip(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--scenario", FROZEN, "--out", str(a), "--paths", "100", "--seed", "3"]) == 0
    manifest = load(a / "manifest.json")
    sc = manifest["scenario"]
    assert sc["seed"] == 3 and sc["experiment"]["paths"] == 100
    assert sc["experiment"]["replan_every"] == 5 and sc["R_s"] == [[0.0]]
    assert cli.main(["run", "--scenario", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "closed_loop.csv").read_bytes() == (b / "closed_loop.csv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()


def test_control_command(tmp_path):
    data = load(SCALAR)
    data["experiment"] = {"mu_points": [[-1.0], [1.0]], "paths": 2000}
    out = tmp_path / "o"
    assert cli.main(["control", "--scenario", write(tmp_path, "s.json", data), "--out", str(out)]) == 0
    with open(out / "control.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mu_0"] for r in rows] == ["-1.0", "1.0"]
    assert float(rows[0]["u_a_0"]) > 0 > float(rows[1]["u_a_0"])


def test_compare_command(tmp_path):
    data = load(SCALAR)
    data["experiment"] = {"seeds": 3, "paths": 100, "replan_every": 10}
    out = tmp_path / "o"
    assert cli.main(["compare", "--scenario", write(tmp_path, "s.json", data), "--out", str(out)]) == 0
    lines = (out / "compare.csv").read_text().splitlines()
    assert lines[0] == "seed,cost_selector,cost_fixed,difference"
    assert len(lines) == 4
    assert "mean_difference" in summary(out)


def test_multivariate_oracle(tmp_path):
    data = {
        "A": [[0.0, 1.0], [0.0, 0.0]], "B": [[0.0], [1.0]], "H": [[0.3, 0.0], [0.0, 0.3]],
        "sigma_o": [[1.0]], "R_a": [[1.0]], "lambda": 0.5, "T": 0.2, "dt": 0.02,
        "sensing": {"type": "affine", "C_list": [[[1.0, 0.0]], [[0.0, 1.0]]]},
        "q": {"S": [[1.0, 0.0], [0.0, 1.0]]}, "phi": {"S": [[1.0, 0.0], [0.0, 1.0]]},
        "Sigma0": [[1.0, 0.0], [0.0, 1.0]], "mu0": [0.0, 0.0], "experiment": {"kind": "oracle", "lqg_substeps": 1},
    }
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", write(tmp_path, "s.json", data), "--out", str(out)]) == 0
    assert (out / "lqg.csv").read_text().splitlines()[0] == "t,P_00,P_01,P_10,P_11,b_0,b_1,c"
    assert load(out / "manifest.json")["scenario"]["ell_s"] == 2


def test_check_command_fault_injection(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["check", "--level", "fast", "--tol-match", "0.1", "--out", str(out)])
    text = capsys.readouterr().out
    assert code == 1
    assert "[FAIL] M1" in text
    assert os.path.exists(out / "checks.csv")
