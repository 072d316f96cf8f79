"""
Tests for program parsing, validation and serialization.
"""
import json

import pytest

from app.models.program import AffineExpr, Constraint
from app.services.ir_builder import array, load, loop, node, program, store
from app.services.parser import parse_program, parse_tensors, program_from_dict, serialize_program
from app.utils.errors import ProgramParseError
from tests import programs


def test_affine_parse_and_evaluate():
    """Test affine text parsing."""
    expr = AffineExpr.parse("h + 2*kh - 1")
    assert expr.coeff("h") == 1
    assert expr.coeff("kh") == 2
    assert expr.constant == -1
    assert expr.evaluate({"h": 3, "kh": 2}) == 6


def test_affine_rejects_garbage():
    with pytest.raises(ValueError):
        AffineExpr.parse("h * w")


def test_constraint_parse():
    """Test guard text parsing."""
    c = Constraint.parse("h + kh >= 2")
    assert c.holds({"h": 1, "kh": 1})
    assert not c.holds({"h": 0, "kh": 1})
    assert Constraint.parse("w == 0").holds({"w": 0})


def test_parse_program_json(program_json):
    """Test parsing the wire format."""
    parsed = parse_program(json.dumps(program_json))

    assert parsed.name == "copy"
    assert parsed.node_names == ("produce", "consume")
    assert parsed.array("x").is_external
    assert not parsed.array("t").is_external


def test_serialize_round_trip():
    """Test that serialization re-parses to the same program."""
    original = programs.mini_pipeline()
    assert parse_program(serialize_program(original)) == original


def test_mini_pipeline_shape():
    mini = programs.mini_pipeline()
    assert len(mini.nodes) == 3
    assert [a.name for a in mini.arrays if not a.is_external] == ["padded", "conv_out"]


def test_malformed_json_reports_position():
    with pytest.raises(ProgramParseError) as exc:
        parse_program("{not json")
    assert exc.value.error_code == "PARSE_ERROR"
    assert exc.value.exit_code == 2
    assert "line 1" in exc.value.location


def test_missing_field(program_json):
    del program_json["nodes"][0]["name"]
    with pytest.raises(ProgramParseError) as exc:
        program_from_dict(program_json)
    assert exc.value.location == "$.nodes[0]"


def test_rank_mismatch(program_json):
    """Test that index arity must match the array rank."""
    program_json["nodes"][0]["body"][0]["loop"]["children"][0]["stmt"]["index"] = ["i", 0]
    with pytest.raises(ProgramParseError, match="rank mismatch"):
        program_from_dict(program_json)


def test_unbound_loop_variable(program_json):
    program_json["nodes"][1]["body"][0]["loop"]["children"][0]["stmt"]["index"] = ["j"]
    with pytest.raises(ProgramParseError, match="not an enclosing loop variable"):
        program_from_dict(program_json)


def test_wrong_arity(program_json):
    program_json["nodes"][1]["body"][0]["loop"]["children"][1]["stmt"]["operands"] = ["v"]
    with pytest.raises(ProgramParseError, match="takes 2 operand"):
        program_from_dict(program_json)


def test_non_integer_bound(program_json):
    program_json["nodes"][0]["body"][0]["loop"]["upper"] = 4.5
    with pytest.raises(ProgramParseError, match="integer constant"):
        program_from_dict(program_json)


def test_validation_rules():
    """Test the structural invariants enforced on construction."""
    with pytest.raises(ProgramParseError, match="duplicate array"):
        program("p", [array("a", 4), array("a", 4)], [])
    with pytest.raises(ProgramParseError, match="duplicate node"):
        program("p", [array("a", 4)], [node("n", loop("i", 4, store("a", ["i"], 0)))] * 2)
    with pytest.raises(ProgramParseError, match="shadows"):
        program("p", [array("a", 4)], [node("n", loop("i", 2, loop("i", 2, store("a", ["i"], 0))))])
    with pytest.raises(ProgramParseError, match="no iterations"):
        program("p", [array("a", 4)], [node("n", loop("i", 0, store("a", ["i"], 0)))])
    with pytest.raises(ProgramParseError, match="undeclared"):
        program("p", [], [node("n", loop("i", 4, store("a", ["i"], 0)))])


def test_external_arrays_cannot_connect_nodes():
    """Test that an external array written by one node and read by another is rejected."""
    with pytest.raises(ProgramParseError, match="external arrays cannot connect nodes"):
        program(
            "p",
            [array("x", 4, external=True), array("y", 4, external=True), array("z", 4, external=True)],
            [
                node("a", loop("i", 4, load("v", "x", "i"), store("y", ["i"], "v"))),
                node("b", loop("i", 4, load("v", "y", "i"), store("z", ["i"], "v"))),
            ],
        )


def test_parse_tensors(program_json):
    parsed = program_from_dict(program_json)
    tensors = parse_tensors(json.dumps({"x": [1, 2, 3, 4]}), parsed, integer_mode=True)
    assert tensors["x"].tolist() == [1, 2, 3, 4]

    with pytest.raises(ProgramParseError, match="expected 4 values"):
        parse_tensors(json.dumps({"x": [1, 2]}), parsed)
    with pytest.raises(ProgramParseError, match="unknown array"):
        parse_tensors(json.dumps({"nope": [1]}), parsed)
