"""
Tests for the sequential reference interpreter.
"""
import numpy as np
import pytest

from app.services.interpreter import (
    Arithmetic,
    input_arrays,
    output_arrays,
    random_inputs,
    reference_execute,
    wrap_int32,
)
from app.services.ir_builder import array, load, loop, node, program, store
from app.utils.errors import ExecutionError
from tests import programs


def test_mini_conv_all_ones(mini_pipeline, ones_inputs):
    """Test that interior outputs of a 3x3 all-ones convolution are 9."""
    result = reference_execute(mini_pipeline, ones_inputs, integer_mode=True)

    out = result["out"]
    assert out.shape == (6, 6)
    assert (out[1:5, 1:5] == 9).all()
    assert out[0, 0] == 4
    assert out[0, 2] == 6


def test_max_pool_iota():
    """Test 2x2 max pooling against a brute-force window max."""
    x = np.arange(16, dtype=np.int64).reshape(4, 4)
    result = reference_execute(programs.max_pool(), {"x": x}, integer_mode=True)

    expected = x.reshape(2, 2, 2, 2).max(axis=(1, 3))
    assert result["y"].tolist() == expected.tolist() == [[5, 7], [13, 15]]


def test_matmul_reference():
    rng = np.random.default_rng(3)
    a = rng.integers(-5, 6, size=(4, 4))
    b = rng.integers(-5, 6, size=(4, 4))
    result = reference_execute(programs.matmul_k_outer(), {"A": a, "B": b}, integer_mode=True)
    assert result["D"].tolist() == (a @ b).tolist()


def test_prefix_sum():
    x = np.arange(1, 9, dtype=np.int64)
    result = reference_execute(programs.prefix_sum(), {"x": x}, integer_mode=True)
    assert result["y"].tolist() == np.cumsum(x).tolist()


def test_deterministic():
    """Test that two runs on identical inputs are bit-identical."""
    mini = programs.mini_pipeline()
    inputs = random_inputs(mini, seed=7, integer_mode=False)
    first = reference_execute(mini, inputs, integer_mode=False)
    second = reference_execute(mini, inputs, integer_mode=False)
    assert all(np.array_equal(first[k], second[k]) for k in first)


def test_input_and_output_arrays(mini_pipeline):
    assert input_arrays(mini_pipeline) == ["x", "weight"]
    assert output_arrays(mini_pipeline) == ["out"]


def test_missing_input(mini_pipeline):
    with pytest.raises(ExecutionError, match="missing input"):
        reference_execute(mini_pipeline, {"x": np.zeros((6, 6))})


def test_out_of_bounds():
    """Test that an out-of-range index is a runtime error, not a silent write."""
    bad = program(
        "oob",
        [array("x", 4, external=True), array("y", 4, external=True)],
        [node("n", loop("i", 4, load("v", "x", "i + 1"), store("y", ["i"], "v")))],
    )
    with pytest.raises(ExecutionError, match="out-of-bounds"):
        reference_execute(bad, {"x": np.zeros(4)})


def test_uninitialized_read():
    bad = program(
        "uninit",
        [array("t", 4), array("y", 4, external=True)],
        [node("n", loop("i", 4, load("v", "t", "i"), store("y", ["i"], "v")))],
    )
    with pytest.raises(ExecutionError, match="never-written"):
        reference_execute(bad, {})


def test_integer_wraparound():
    """Test 32-bit two's complement wrapping in integer mode."""
    ints = Arithmetic(integer_mode=True)
    assert wrap_int32(2**31) == -(2**31)
    assert ints.apply("add", [2**31 - 1, 1]) == -(2**31)
    assert ints.apply("div", [-7, 2]) == -3
    assert ints.constant("-inf") == -(2**31)


def test_random_inputs_reproducible(mini_pipeline):
    first = random_inputs(mini_pipeline, seed=11, integer_mode=True)
    second = random_inputs(mini_pipeline, seed=11, integer_mode=True)
    assert set(first) == {"x", "weight"}
    assert np.array_equal(first["x"], second["x"])
    assert first["x"].min() >= -8 and first["x"].max() <= 8
