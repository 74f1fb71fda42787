import json

import jsonschema
import pytest

from phlab import cli

SMALL = {"n_iter": 2000, "n_orbits": 4, "n_particles": 256, "burn_in": 100, "n_steps": 200, "n_pairs": 8}


def config(preset, task=None, **params):
    cfg = cli.load_preset(preset)
    if task:
        cfg["task"] = task
    cfg["params"] = params
    return cfg


def test_at_least_seven_presets():
    assert len(cli.preset_names()) >= 7


@pytest.mark.parametrize("name", cli.preset_names())
def test_preset_is_schema_valid(name):
    cfg = cli.load_preset(name)
    jsonschema.validate(cfg, cli._schema())
    cli.validate_config(cfg)
    assert cfg["expected_verdict"]


def test_presets_command_lists_all(capsys):
    assert cli.main(["presets"]) == 0
    out = capsys.readouterr().out
    assert all(n in out for n in cli.preset_names())


def test_unknown_key_rejected(tmp_path):
    cfg = config("shear")
    cfg["bogus"] = 1
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["validate", str(p)]) == 2
    cfg = config("shear", n_iterations=5)
    p.write_text(json.dumps(cfg))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_json_and_missing_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == 2
    assert cli.main(["validate", str(tmp_path / "absent.json")]) == 2


def test_semantic_error_is_config_exit(tmp_path):
    cfg = config("affine_order4")
    cfg["system"]["fibre"]["L"] = [[2, 1], [1, 1]]  # not elliptic
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    assert cli.main(["validate", str(p)]) == 2


def test_numerical_failure_exit(tmp_path):
    cfg = config("shear", "holonomy", n_pairs=1, n_points=1, tol=1e-30)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert cli.main(["run", str(p), "--out", str(out)]) == 3
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "numerical_failure" and rep["error"]["type"] == "NoConvergence"


def test_inconclusive_writes_report(tmp_path):
    cfg = config("affine_order6", gate_factor=0.0, **SMALL)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert cli.main(["run", str(p), "--out", str(out)]) == 4
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "inconclusive"
    assert rep["outputs"]["residuals"]["passed"] is False
    assert (out / "disintegration.csv").exists()


def test_out_dir_precedence(tmp_path, monkeypatch):
    cfg = {"output_dir": str(tmp_path / "cfg")}
    monkeypatch.delenv("PHLAB_OUT", raising=False)
    assert cli.resolve_out_dir(None, cfg) == tmp_path / "cfg"
    monkeypatch.setenv("PHLAB_OUT", str(tmp_path / "env"))
    assert cli.resolve_out_dir(None, cfg) == tmp_path / "env"
    assert cli.resolve_out_dir(str(tmp_path / "flag"), cfg) == tmp_path / "flag"
    monkeypatch.delenv("PHLAB_OUT")
    assert str(cli.resolve_out_dir(None, {})) == cli.DEFAULT_OUT


def test_hash_is_canonical():
    a = {"x": 1, "y": [1, 2]}
    b = {"y": [1, 2], "x": 1}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash(a) != cli.config_hash({"x": 2, "y": [1, 2]})


def _report_text(path):
    rep = json.loads((path / "report.json").read_text())
    return json.dumps(cli.strip_timestamp(rep), sort_keys=True)


@pytest.mark.parametrize("task", ["exponents", "classify"])
def test_reports_reproducible(tmp_path, task):
    cfg = cli.effective_config(config("perturbed", task, **SMALL))
    cli.run(cfg, tmp_path / "a")
    cli.run(cfg, tmp_path / "b")
    assert _report_text(tmp_path / "a") == _report_text(tmp_path / "b")
    for name in json.loads((tmp_path / "a" / "report.json").read_text())["artifacts"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_outputs_independent_of_workers(tmp_path):
    one, _ = cli.run(cli.effective_config(config("perturbed", "exponents", **SMALL), workers=1), tmp_path / "a")
    two, _ = cli.run(cli.effective_config(config("perturbed", "exponents", **SMALL), workers=2), tmp_path / "b")
    assert one["outputs"] == two["outputs"]
    assert (tmp_path / "a" / "exponent_orbits.csv").read_bytes() == (tmp_path / "b" / "exponent_orbits.csv").read_bytes()


def test_seed_override_changes_result(tmp_path):
    a, _ = cli.run(cli.effective_config(config("perturbed", "exponents", **SMALL), seed=1), tmp_path / "a")
    b, _ = cli.run(cli.effective_config(config("perturbed", "exponents", **SMALL), seed=2), tmp_path / "b")
    assert a["config"]["seed"] == 1
    assert a["outputs"]["lambda_plus"] != b["outputs"]["lambda_plus"]


def test_perturbed_exponents_symmetric_with_gap(tmp_path):
    rep, code = cli.run(cli.effective_config(config("perturbed", "exponents", n_iter=20000, n_orbits=8)), tmp_path)
    assert code == 0
    out = rep["outputs"]
    assert out["symmetry_holds"] and out["gap_significant"]
    assert (tmp_path / "exponent_series.csv").read_text().startswith("n,lambda_plus\n")


def test_holonomy_task_on_affine(tmp_path):
    rep, code = cli.run(cli.effective_config(config("affine_order4", "holonomy", n_pairs=10, n_points=3)), tmp_path)
    assert code == 0
    assert rep["outputs"]["max_fit_deviation"] < 1e-6
    assert rep["outputs"]["max_abs_det_minus_one"] < 1e-6


def test_accessibility_rejects_non_affine(tmp_path):
    assert cli.main(["run", "shear", "--task", "accessibility", "--out", str(tmp_path)]) == 2


def test_uniformize_moebius(tmp_path):
    cfg = cli.effective_config(config("moebius_rotation", "uniformize", check_verdict=False))
    rep, code = cli.run(cfg, tmp_path)
    assert code == 0
    assert rep["outputs"]["coefficient_error"] < 1e-6


@pytest.mark.slow
@pytest.mark.parametrize("name", cli.preset_names())
def test_preset_expected_verdict(tmp_path, name):
    assert cli.main(["run", name, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["expected_verdict_met"], rep["warnings"]
    assert rep["outputs"]["label"] == rep["config"]["expected_verdict"]
    if rep["outputs"]["invariant_structure"] is not None:
        assert rep["outputs"]["invariant_structure"]["max_distance"] < 0.05
