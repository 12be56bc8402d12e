import csv
import json

import numpy as np
import pytest

from doubleswitch.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from doubleswitch.config import load_config
from doubleswitch.errors import InvalidArgument


def run(*argv):
    return main([*argv, "-q"])


def test_check_passes_on_linear3d(tmp_path):
    assert run("check", "--family", "linear3d", "--out", str(tmp_path)) == EXIT_OK
    report = json.loads((tmp_path / "check_report.json").read_text(encoding="utf-8"))
    assert report["passed"]


def test_check_fails_on_span_deficient(tmp_path):
    assert run("check", "--family", "span-deficient-4d", "--out", str(tmp_path)) == EXIT_FAIL
    report = json.loads((tmp_path / "check_report.json").read_text())
    failed = {c["check"] for c in report["checks"] if c["status"] == "fail"}
    assert failed == {"controllability"} and not report["passed"]


def test_check_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run("check", "--family", "nonlinear3d", "--out", str(a))
    run("check", "--family", "nonlinear3d", "--out", str(b))
    assert (a / "check_report.json").read_bytes() == (b / "check_report.json").read_bytes()


def test_malformed_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json", encoding="utf-8")
    assert run("check", "--config", str(bad), "--out", str(tmp_path)) == EXIT_USAGE
    assert run("check", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)) == EXIT_USAGE
    assert run("check", "--out", str(tmp_path)) == EXIT_USAGE
    assert run("check", "--family", "nope", "--out", str(tmp_path)) == EXIT_USAGE


@pytest.mark.parametrize("raw", [
    {"family": "linear3d", "bogus": 1},
    {"family": "linear3d", "tolerances": {"eig": -1}},
    {"family": "linear3d", "sweep": {"predictor": "cubic"}},
    {"params": {}},
    [1, 2],
])
def test_config_validation(raw):
    with pytest.raises(InvalidArgument):
        load_config(raw)


def test_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"family": "linear3d", "oracle": {"samples": 2}, "seed": 5}))
    cfg = load_config(path)
    assert cfg.oracle["samples"] == 2 and cfg.oracle["resolution"] == 1e-3
    assert cfg.seed == 5 and cfg.sweep["r_path"] == "0:0.1:20"
    assert cfg.fixture.id == "linear3d"


def test_derived_config_builds_a_nominal(tmp_path, linear3d):
    # linear3d written out as polynomial fields: f0 = A x + c, f1 = b1, f2 = b2
    A, c = np.diag([0.1, -0.2, 0.3]), [0.0, -0.4, 0.0]
    drift = [[[A[i, i], [int(j == i) for j in range(3)]], [c[i], [0, 0, 0]]] for i in range(3)]
    const = lambda b: {"base": [[[v, [0, 0, 0]]] for v in b]}  # noqa: E731
    raw = {
        "system": {"dimension": 3, "drift": {"base": drift, "per_param": [[[[1.0, [0, 0, 0]]], [], []]]},
                   "control1": const([1.0, 0.7, 0.9]), "control2": const([-1.0, 1.0, 0.5])},
        "nominal": {"derive": {"x0": [0.0, 0.0, 0.0], "tau": 1.0, "T": 2.0}},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    fx = load_config(path).fixture
    assert np.allclose(fx.ext.ell0.p, linear3d.ext.ell0.p, atol=1e-9)
    assert run("check", "--config", str(path), "--out", str(tmp_path)) == EXIT_OK


def test_secondvar(tmp_path):
    assert run("secondvar", "--family", "linear3d", "--out", str(tmp_path)) == EXIT_OK
    rep = json.loads((tmp_path / "secondvar_report.json").read_text())
    assert rep["coercive"] and rep["rho"] > 0
    assert (tmp_path / "form_V_nu1.json").exists() and (tmp_path / "form_V_nu2.json").exists()
    one = tmp_path / "one"
    assert run("secondvar", "--family", "linear3d", "--nu", "2", "--out", str(one)) == EXIT_OK
    assert not (one / "form_V_nu1.json").exists()


def test_continue_writes_sweep(tmp_path):
    assert run("continue", "--family", "linear3d", "--r-path", "0:0.1:4", "--out", str(tmp_path)) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv", encoding="utf-8")))
    assert len(rows) == 5
    # 17 significant digits survive the round trip
    rep = json.loads((tmp_path / "sweep.json").read_text())
    assert [float(r["T"]) for r in rows] == [rec["T"] for rec in rep["records"]]
    assert rep["passed"] and rep["complete"]


def test_continue_steps_zero_gives_nominal_only(tmp_path):
    assert run("continue", "--family", "linear3d", "--steps", "0", "--out", str(tmp_path)) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert len(rows) == 1 and float(rows[0]["T"]) == pytest.approx(2.0, abs=1e-12)


def test_continue_with_tube_and_oracle(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"family": "linear3d", "tube": {"n_starts": 4, "samples": 2},
                               "oracle": {"samples": 2, "coarse": 0.02, "resolution": 2e-3}}))
    code = run("continue", "--config", str(cfg), "--r-path", "0:0.1:2", "--tube-check", "--oracle-validate",
               "--out", str(tmp_path))
    assert code == EXIT_OK
    rep = json.loads((tmp_path / "sweep.json").read_text())
    assert len(rep["tube"]) == 2 and all(t["verdict"] for t in rep["tube"])
    assert len(rep["oracle"]) == 2 and all(o["difference"] <= 4e-3 for o in rep["oracle"])


def test_continue_fails_on_singular_family(tmp_path):
    code = run("continue", "--family", "span-deficient-4d", "--r-path", "0:0.05:2", "--out", str(tmp_path))
    assert code == EXIT_FAIL


def test_continue_bad_path(tmp_path):
    assert run("continue", "--family", "linear3d", "--r-path", "0:x:2", "--out", str(tmp_path)) == EXIT_USAGE


def test_oracle_subcommand(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"family": "linear3d", "oracle": {"coarse": 0.02}}))
    assert run("oracle", "--config", str(cfg), "--resolution", "2e-3", "--out", str(tmp_path)) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "oracle.csv")))
    assert rows[0][:2] == ["r1", "best_T"]
    assert float(rows[1][1]) == pytest.approx(2.0, abs=2e-3)


def test_plot(tmp_path):
    run("continue", "--family", "linear3d", "--r-path", "0:0.1:3", "--out", str(tmp_path))
    assert run("plot", str(tmp_path / "sweep.csv"), "--out", str(tmp_path / "fig.png")) == EXIT_OK
    assert (tmp_path / "fig.png").stat().st_size > 0
    single = tmp_path / "single"
    run("continue", "--family", "linear3d", "--steps", "0", "--out", str(single))
    assert run("plot", str(single / "sweep.csv"), "--out", str(single)) == EXIT_OK
    assert (single / "sweep.png").exists()


def test_plot_missing_or_empty(tmp_path):
    assert run("plot", str(tmp_path / "none.csv"), "--out", str(tmp_path)) == EXIT_USAGE
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert run("plot", str(empty), "--out", str(tmp_path)) == EXIT_USAGE


def test_families(capsys):
    assert main(["families"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "linear3d" in out and "controllability" in out


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
