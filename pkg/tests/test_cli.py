"""
Tests for the command-line driver.
"""
import json

import pytest

from app.cli import main, parse_budget, parse_depths
from app.models.schedule import ResourceVector
from app.services.parser import serialize_program
from app.utils.errors import CompilerError
from tests import programs


@pytest.fixture
def program_file(tmp_path, program_json):
    path = tmp_path / "copy.json"
    path.write_text(json.dumps(program_json))
    return str(path)


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def test_analyze(program_file, capsys):
    assert main(["analyze", program_file]) == 0
    report = _stdout_json(capsys)
    assert report["coarse"] == []
    assert report["fine"] == []


def test_analyze_reports_violation(tmp_path, capsys):
    path = tmp_path / "transposed.json"
    path.write_text(serialize_program(programs.transposed_reader()))

    assert main(["analyze", str(path)]) == 0
    assert [v["kind"] for v in _stdout_json(capsys)["fine"]] == ["order_mismatch"]


def test_opt_stop_after(tmp_path, capsys):
    path = tmp_path / "fanout.json"
    path.write_text(serialize_program(programs.spmc_fanout()))

    assert main(["opt", str(path), "--stop-after", "coarse"]) == 0
    report = _stdout_json(capsys)
    assert report["stages"] == ["coarse"]
    assert report["dse"] is None


def test_opt_simulate_and_emit(program_file, tmp_path, capsys):
    """Test the full flow with simulation and artifact output."""
    out = tmp_path / "out"
    code = main(["opt", program_file, "--simulate", "--numeric-mode", "int", "--seed", "2", "--emit", str(out)])

    assert code == 0
    report = _stdout_json(capsys)
    assert report["simulation"]["outcome"] == "completed"
    assert report["simulation"]["reference_match"] is True
    assert (out / "report.json").exists()
    assert (out / "trace.jsonl").exists()


def test_simulate_with_inputs_file(program_file, tmp_path, capsys):
    inputs = tmp_path / "inputs.json"
    inputs.write_text(json.dumps({"x": [1, 2, 3, 4]}))

    assert main(["simulate", program_file, "--numeric-mode", "int", "--inputs", str(inputs)]) == 0
    payload = _stdout_json(capsys)
    assert payload["outcome"] == "completed"
    assert payload["reference_match"] is True


def test_simulate_reports_deadlock(tmp_path, capsys):
    path = tmp_path / "double.json"
    path.write_text(serialize_program(programs.double_reader()))

    assert main(["simulate", str(path), "--numeric-mode", "int"]) == 0
    payload = _stdout_json(capsys)
    assert payload["outcome"] == "deadlock"
    assert payload["deadlock"]["classification"] == "starved_reader"


def test_malformed_program(tmp_path, capsys):
    """Test that a parse error exits 2 with a JSON error on stderr."""
    path = tmp_path / "broken.json"
    path.write_text("{")

    assert main(["analyze", str(path)]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "PARSE_ERROR"


def test_missing_file(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "absent.json")]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "READ_FAILED"


def test_bad_budget_option(program_file, capsys):
    assert main(["opt", program_file, "--budget", "dsp=lots"]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "INVALID_OPTION"


def test_budget_exceeded_exit_code(program_file):
    assert main(["opt", program_file, "--budget", "dsp=0,bram=0,lut=0,ff=0"]) == 4


def test_parse_budget():
    device = ResourceVector(dsp=100, bram18k=200, lut=300, ff=400)
    budget = parse_budget("dsp=10,bram=20", device)
    assert (budget.dsp, budget.bram18k, budget.lut, budget.ff) == (10, 20, 300, 400)
    assert parse_budget(None, device) == device


def test_parse_depths():
    assert parse_depths(["a=4", "b=16"]) == {"a": 4, "b": 16}
    with pytest.raises(CompilerError) as exc:
        parse_depths(["a=0"])
    assert exc.value.error_code == "INVALID_OPTION"
