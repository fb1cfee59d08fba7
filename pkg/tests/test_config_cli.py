from __future__ import annotations

import hashlib
import json

import pytest

from levybsde.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main
from levybsde.config import ConfigError, ConfigParseError, parse_json, validate
from levybsde.experiments import fmt, table
from levybsde.scenarios import get, list_scenarios

SOLVE = {
    "kind": "solve", "seed": 1,
    "model": {"gamma": 0.0, "sigma": 1.0, "jump_atoms": [[1.0, 2.0]]},
    "net": {"n": 4, "coarse": 2},
    "generator": {"name": "zero"},
    "terminal": {"type": "x"},
    "n_paths": 500,
}


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return str(p)


def test_valid_config_round_trip():
    cfg = validate(SOLVE)
    assert cfg.kind == "solve" and cfg.build_net().m == 2
    assert cfg.sha256() == validate(json.loads(cfg.canonical_json())).sha256()


def test_all_field_errors_reported_together():
    raw = {"kind": "solve", "model": {"sigma": -1}, "net": {"n": 0}, "generator": {"name": "cubic"},
           "terminal": {"type": "x"}, "colour": "red", "n_paths": 1, "tolerances": {"a": "x"}}
    with pytest.raises(ConfigError) as exc:
        validate(raw)
    fields = {f for f, _ in exc.value.errors}
    assert {"seed", "model", "net.n", "generator.name", "colour", "n_paths", "tolerances.a"} <= fields


def test_required_fields_per_kind():
    with pytest.raises(ConfigError) as exc:
        validate({"kind": "rates", "seed": 0})
    assert {f for f, _ in exc.value.errors} == {"model", "generator", "terminal", "n_paths"}
    assert validate({"kind": "counterexample", "seed": 0}).kind == "counterexample"


def test_terminal_times_must_be_net_points():
    raw = dict(SOLVE, terminal={"type": "digital", "times": [0.3]})
    with pytest.raises(ConfigError, match="not a net point"):
        validate(raw)


def test_kernel_marks_must_match_model():
    kernel = {"partition": [0.0, 1.0], "atoms": [[0.0, 1.0], [2.0, 1.0]],
              "levels": [{"n": 1, "entries": [{"alpha": [1], "marks": [0], "coef": 1.0}]}]}
    raw = dict(SOLVE, terminal={"type": "kernel", "kernel": kernel})
    with pytest.raises(ConfigError, match="mark atoms"):
        validate(raw)


def test_parse_error_location():
    with pytest.raises(ConfigParseError) as exc:
        parse_json('{"kind": "solve",\n "seed": }')
    assert exc.value.line == 2


def test_fmt_and_table():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(True) == "true"
    assert fmt("a,b") == '"a,b"'
    assert table(["a", "b"], [[1, 2.5]]) == "a,b\n1,2.5\n"


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) >= 10
    assert main(["list-scenarios", "--kind", "regularity"]) == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    assert out and all(" regularity " in line for line in out)
    assert main(["list-scenarios", "--kind", "bogus"]) == EXIT_OK
    assert capsys.readouterr().out == ""


def test_every_acceptance_criterion_has_a_scenario():
    crits = {s.criterion for s in list_scenarios()}
    assert set(range(1, 11)) <= crits
    for s in list_scenarios():
        assert s.build().name == s.name
    with pytest.raises(KeyError):
        get("nope")


def test_validate_command(tmp_path, capsys):
    assert main(["validate", write(tmp_path, SOLVE)]) == EXIT_OK
    assert main(["validate", "builtin:counterexample"]) == EXIT_OK
    bad = write(tmp_path, '{"kind": "solve", "seed": 1,,}', "bad.json")
    assert main(["validate", bad]) == EXIT_CONFIG
    assert "line 1, column" in capsys.readouterr().err
    invalid = write(tmp_path, {"kind": "solve"}, "inv.json")
    assert main(["validate", invalid]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "seed: is mandatory" in err and "model: required" in err


def test_run_writes_manifest(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "builtin:counterexample", "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["kind"] == "counterexample" and manifest["passed"]
    assert "results/ratio_table.csv" in manifest["files"]
    for rel, digest in manifest["files"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    assert "status: ok" in (out / "summary.txt").read_text()


def test_run_solve_config(tmp_path):
    cfg = dict(SOLVE, params={"max_paths_csv": 3})
    out = tmp_path / "solve"
    assert main(["run", write(tmp_path, cfg), "--out", str(out)]) == EXIT_OK
    summary = (out / "results" / "solution.csv").read_text().splitlines()
    assert summary[0] == "time,mean_Y,se_Y,mean_Zbar,se_Zbar" and len(summary) == 6
    paths = (out / "results" / "paths.csv").read_text().splitlines()
    assert paths[0] == "path,time,Y,Zbar" and len(paths) == 1 + 3 * 5


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = dict(SOLVE, net={"n": 1}, generator={"name": "linear", "params": {"a": -2.0}})
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_NUMERIC
    assert "StepTooLargeError" in capsys.readouterr().err


def test_failed_check_exit_code(tmp_path):
    cfg = {"kind": "counterexample", "seed": 0, "tolerances": {"ratio_interval": [1.0, 1.5]}}
    assert main(["run", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == EXIT_CHECK


def test_bad_thread_count(tmp_path):
    assert main(["run", "builtin:counterexample", "--threads", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
