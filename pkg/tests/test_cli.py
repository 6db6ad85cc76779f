import json

import pytest

from mkvctl.cli import ExperimentConfig, RunRecord, compare_runs, main, run, shipped_config
from mkvctl.errors import ComparisonError, ConfigError


@pytest.mark.parametrize("name", ["two-action-toy", "systemic-risk-lq", "zero", "drift-only", "toy-two-atoms"])
def test_config_round_trip_bytes(name):
    cfg = ExperimentConfig.load(shipped_config(name))
    text = cfg.to_json()
    again = ExperimentConfig.from_json(text)
    assert again.to_json() == text
    assert again.hash == cfg.hash


def test_hash_changes_with_content():
    a = ExperimentConfig.load(shipped_config("zero"))
    assert a.with_overrides(seed=5).hash != a.hash


def test_bad_config_pointer():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict({"problem": {"name": "zero"}, "sim": {"N": 0}})
    assert e.value.pointer == "/sim/N"
    with pytest.raises(ConfigError) as e:
        ExperimentConfig.from_dict({"problem": {"name": "zero"}, "bogus": 1})
    assert e.value.pointer == "/"


def test_unknown_problem():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"problem": {"name": "nope"}}).problem()


def test_run_deterministic(tmp_path):
    a = run("value-direct", shipped_config("two-action-toy"), out=tmp_path / "a", repeats=2,
            seed=None).results
    b = run("value-direct", shipped_config("two-action-toy"), out=tmp_path / "b", repeats=2).results
    assert a == b
    assert (tmp_path / "a" / "results.json").exists()
    header = (tmp_path / "a" / "direct_table.csv").read_text().splitlines()[0]
    assert header.startswith("# config_hash=")


def test_drift_only_value(tmp_path):
    rec = run("value-direct", shipped_config("drift-only"), out=tmp_path)
    assert rec.results["direct"]["value"] == pytest.approx(1.0, abs=1e-12)
    assert rec.results["analytic"]["value"] == 1.0


def test_verify_zero(tmp_path):
    rec = run("verify", shipped_config("zero"), out=tmp_path)
    for k, v in rec.residuals.items():
        if not k.endswith("_pass"):
            assert v == 0.0, k
    assert all(v for k, v in rec.residuals.items() if k.endswith("_pass"))
    assert (tmp_path / "residuals.csv").exists()


def test_exit_code_and_error_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": {"name": "zero"}, "sim": {"n_steps": -1}}))
    out = tmp_path / "out"
    assert main(["value-direct", "--config", str(bad), "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError" and err["pointer"] == "/sim/n_steps"
    assert json.loads((out / "error.json").read_text()) == err


def test_capacity_exit_code(tmp_path):
    cfg = ExperimentConfig.load(shipped_config("systemic-risk-lq")).data
    cfg["catalog"] = {"k": 6, "L": 2, "cap": 100}
    path = tmp_path / "big.json"
    path.write_text(json.dumps(cfg))
    assert main(["value-direct", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_bad_nu_bounds(tmp_path):
    assert main(["value-randomized", "--config", "zero", "--nu-bounds", "x", "--out", str(tmp_path)]) == 2


def test_compare_runs():
    a = RunRecord("value-direct", "toy", "h", "b", {"direct": {"value": 1.0, "ci": 0.1},
                                                    "randomized": {"value": 0.5, "ci": 0.1}})
    b = RunRecord("value-direct", "toy", "h", "b", {"direct": {"value": 1.5, "ci": 0.1},
                                                    "randomized": {"value": 0.5, "ci": 0.1}})
    d = compare_runs(a, b)
    assert [r["route"] for r in d["diff"]] == ["direct"]
    assert not d["all_within"]
    with pytest.raises(ComparisonError):
        compare_runs(a, RunRecord("value-direct", "other", "h", "b", {}))


@pytest.mark.slow
def test_two_action_toy_regression(tmp_path):
    ref = json.loads(shipped_config("two-action-toy.reference").read_text())
    rec = run("verify", shipped_config("two-action-toy"), out=tmp_path)
    tol = ref["tolerance"]
    for route, v in ref["values"].items():
        assert rec.results[route]["value"] == pytest.approx(v["value"], abs=tol["values_abs"])
    for k, v in ref["residuals"].items():
        assert rec.residuals[k] == pytest.approx(v, abs=tol["residuals_abs"])
