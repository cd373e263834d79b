import json

import numpy as np
import pytest

from conftest import DATA_DIR
from errors import DimensionMismatch, InstanceIoError, ParseError
from model import (Instance, SolverPoint, inequality_rows, instance_to_dict, is_feasible, objective,
                   objective_lifted, objective_perspective, read_instance, validate, write_instance)


def test_generated_instance_is_valid(small_mv, small_ssp, sectioned_mv):
    assert validate(small_mv) == []
    assert validate(small_ssp) == []
    assert validate(sectioned_mv) == []


def test_validate_flags_indefinite_q(small_mv):
    bad = small_mv.replace(Q=small_mv.Q - 10.0 * np.eye(small_mv.n))
    assert "Q PSD" in validate(bad)


def test_validate_flags_bounds_and_cardinality(example1):
    report = validate(example1.replace(lb=[3.0], ub=[1.0], cardinality=2))
    assert any(r.startswith("a_i < b_i") for r in report)
    assert any("K ≤ n" in r for r in report)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        Instance(Q=np.eye(2), c=np.zeros(3), h=np.zeros(3), A=np.zeros((0, 3)), B=np.zeros((0, 3)),
                 d=np.zeros(0), lb=np.zeros(3), ub=np.ones(3))


def test_example_one_feasibility_and_objective(example1):
    on = SolverPoint(x=np.array([2.0]), y=np.array([1.0]))
    off = SolverPoint(x=np.array([0.0]), y=np.array([0.0]))
    outside = SolverPoint(x=np.array([0.5]), y=np.array([1.0]))
    assert is_feasible(example1, on) and is_feasible(example1, off)
    assert not is_feasible(example1, outside)
    assert objective(example1, on) == pytest.approx(-4.0)
    assert objective(example1, off) == 0.0


def test_example_one_objective_ordering(example1):
    """f <= f_{u,v} <= f_rho on y <= x <= 3y with (u, v) = (-1, 1) and rho = 1."""
    for y in np.linspace(0.05, 1.0, 21):
        for x in np.linspace(y, 3.0 * y, 21):
            p = SolverPoint(x=np.array([x]), y=np.array([y]))
            f = objective(example1, p)
            f_uv = objective_lifted(example1, p, [-1.0], [1.0])
            f_p = objective_perspective(example1, p, [1.0])
            assert f_uv - f >= -1e-10
            assert f_p - f_uv >= -1e-10


def test_perspective_zero_over_zero(example1):
    p = SolverPoint(x=np.array([0.0]), y=np.array([0.0]))
    assert objective_perspective(example1, p, [1.0]) == 0.0
    q = SolverPoint(x=np.array([1.0]), y=np.array([0.0]))
    assert objective_perspective(example1, q, [1.0]) == np.inf


def test_lifted_objective_agrees_on_binary_points(small_mv, rng):
    n = small_mv.n
    for _ in range(50):
        y = (rng.random(n) < 0.5).astype(float)
        x = y * rng.uniform(small_mv.lb, small_mv.ub)
        p = SolverPoint(x=x, y=y)
        u, v = rng.standard_normal(n), rng.random(n)
        f = objective(small_mv, p)
        assert objective_lifted(small_mv, p, u, v) == pytest.approx(f, abs=1e-9 * (1.0 + abs(f)))


def test_inequality_rows_stack_equality_and_cardinality(sectioned_mv, small_mv):
    A, B, d = inequality_rows(sectioned_mv)
    assert d.shape[0] == sectioned_mv.m + 2 * sectioned_mv.equality.rows
    A, B, d = inequality_rows(small_mv)
    assert d.shape[0] == small_mv.m + 1
    np.testing.assert_array_equal(B[-1], np.ones(small_mv.n))
    assert d[-1] == small_mv.cardinality


def test_round_trip(tmp_path, small_mv, sectioned_mv):
    for inst in (small_mv, sectioned_mv):
        path = write_instance(inst, tmp_path / "inst.json")
        assert read_instance(path) == inst


def test_shipped_example_file(example1):
    assert read_instance(DATA_DIR / "example1.json") == example1


def test_missing_file(tmp_path):
    with pytest.raises(InstanceIoError):
        read_instance(tmp_path / "missing.json")


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n "n": 1,\n "m": oops\n}\n')
    with pytest.raises(ParseError) as info:
        read_instance(path)
    assert info.value.line == 3


def test_wrong_length_reports_field(tmp_path, example1):
    doc = instance_to_dict(example1)
    doc["c"] = [1.0, 2.0]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError) as info:
        read_instance(path)
    assert info.value.field == "c"


def test_unknown_key_rejected(tmp_path, example1):
    doc = instance_to_dict(example1)
    doc["extra"] = 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ParseError):
        read_instance(path)
