import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pertree.benchmarks import REFERENCE_GAINS, definition, example
from pertree.system import (
    ConstraintPolytope,
    UncertainLinearSystem,
    UncertaintyRealization,
    enumerate_vertex_sequences,
    interpolate_dynamics,
    interval_to_vertices,
    load_constraints,
    load_system,
    sample_realization,
)


def test_vertex_selection_by_unit_alpha(ex1):
    A, B = interpolate_dynamics(ex1, np.eye(ex1.n_d)[0])
    np.testing.assert_array_equal(A, ex1.vertices[0][0])
    np.testing.assert_array_equal(B, ex1.vertices[0][1])


def test_symmetric_vertices_average_to_zero():
    sys = UncertainLinearSystem([(np.eye(2), np.ones((2, 1))), (-np.eye(2), -np.ones((2, 1)))])
    A, B = interpolate_dynamics(sys, [0.5, 0.5])
    np.testing.assert_array_equal(A, np.zeros((2, 2)))
    np.testing.assert_array_equal(B, np.zeros((2, 1)))


def test_example1_midpoint_is_vertex_average(ex1):
    A, _ = interpolate_dynamics(ex1, np.full(8, 1 / 8))
    expected = np.mean([A for A, _ in ex1.vertices], axis=0)
    np.testing.assert_allclose(A, expected, atol=1e-12)
    np.testing.assert_allclose(A, [[1.0, 1.12], [0.0, 1.0]], atol=1e-12)


def test_interpolation_rejects_bad_alpha(ex2):
    with pytest.raises(ValueError):
        interpolate_dynamics(ex2, [1.0, 0.0])
    with pytest.raises(ValueError):
        interpolate_dynamics(ex2, [0.6, 0.6, -0.2, 0.0])
    with pytest.raises(ValueError):
        interpolate_dynamics(ex2, [0.5, 0.5, 0.1, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
       st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4))
def test_interpolation_is_affine(a, b):
    sys, _ = example("example2")
    a = np.array(a) / sum(a)
    b = np.array(b) / sum(b)
    Am, Bm = interpolate_dynamics(sys, 0.5 * (a + b))
    Aa, Ba = interpolate_dynamics(sys, a)
    Ab, Bb = interpolate_dynamics(sys, b)
    np.testing.assert_allclose(Am, 0.5 * (Aa + Ab), atol=1e-12)
    np.testing.assert_allclose(Bm, 0.5 * (Ba + Bb), atol=1e-12)


def test_interval_expansion_counts(ex1, ex2):
    assert ex2.n_d == 4
    assert ex1.n_d == 8
    sys = interval_to_vertices([[1.0, 2.0], [0.0, [3.0, 3.0]]], [[1.0], [0.0]])
    assert sys.n_d == 1
    np.testing.assert_array_equal(sys.vertices[0][0], [[1.0, 2.0], [0.0, 3.0]])


def test_interval_order_is_lexicographic():
    A = [[[0.0, 1.0], [10.0, 20.0]], [0.0, 1.0]]
    sys = interval_to_vertices(A, [[1.0], [0.0]])
    firsts = [A[0, 0] for A, _ in sys.vertices]
    seconds = [A[0, 1] for A, _ in sys.vertices]
    assert firsts == [0.0, 0.0, 1.0, 1.0]
    assert seconds == [10.0, 20.0, 10.0, 20.0]
    fast = interval_to_vertices(A, [[1.0], [0.0]], first_varies_fastest=True)
    assert [A[0, 0] for A, _ in fast.vertices] == [0.0, 1.0, 0.0, 1.0]


def test_interval_rejects_reversed_bounds():
    with pytest.raises(ValueError):
        interval_to_vertices([[[2.0, 1.0]]], [[1.0]])


def test_one_hot_interpolation_reproduces_every_vertex(ex1):
    for i in range(ex1.n_d):
        A, B = interpolate_dynamics(ex1, np.eye(ex1.n_d)[i])
        np.testing.assert_array_equal(A, ex1.vertices[i][0])
        np.testing.assert_array_equal(B, ex1.vertices[i][1])


def test_system_validation():
    with pytest.raises(ValueError):
        UncertainLinearSystem([])
    with pytest.raises(ValueError):
        UncertainLinearSystem([(np.ones((2, 3)), np.ones((2, 1)))])
    with pytest.raises(ValueError):
        UncertainLinearSystem([(np.eye(2), np.ones((2, 1))), (np.eye(3), np.ones((3, 1)))])


def test_constraint_rows_are_normalized():
    cons = ConstraintPolytope([[2.0, 0.0]], [[0.0]], rhs=[4.0])
    np.testing.assert_array_equal(cons.F, [[0.5, 0.0]])
    with pytest.raises(ValueError):
        ConstraintPolytope([[1.0, 0.0]], [[0.0]], rhs=[0.0])
    with pytest.raises(ValueError):
        ConstraintPolytope([[1.0, 0.0]], [[0.0]], rhs=[-1.0])


def test_box_constraints_of_example3(ex3):
    sys, cons = ex3
    assert cons.n_c == 6
    x = np.array([1.5, -1.5])
    u = np.array([1.0])
    assert np.allclose(np.max(cons.F @ x + cons.E @ u), 1.0)
    assert np.all(cons.F @ (0.99 * x) + cons.E @ (0.99 * u) < 1.0)


def test_vertex_only_realization_is_reproducible(ex1):
    sys = UncertainLinearSystem([(np.eye(1), np.ones((1, 1))), (-np.eye(1), np.ones((1, 1)))])
    r1 = sample_realization(sys, 3, "vertices-only", seed=7)
    r2 = sample_realization(sys, 3, "vertices-only", seed=7)
    assert r1.alphas.shape == (3, 2)
    assert r1.is_vertex_only
    np.testing.assert_array_equal(r1.alphas, r2.alphas)
    np.testing.assert_array_equal(r1.vertex_labels(), r2.vertex_labels())


def test_interior_realization_is_strictly_positive(ex2):
    r = sample_realization(ex2, 200, "interior", seed=3)
    assert np.all(r.alphas > 0)
    np.testing.assert_allclose(r.alphas.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        r.vertex_labels()


def test_realization_validation():
    with pytest.raises(ValueError):
        UncertaintyRealization(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        sample_realization(example("example2")[0], 0)


def test_vertex_sequence_count():
    assert len(list(enumerate_vertex_sequences(2, 3))) == 8


def test_json_and_toml_round_trip(tmp_path, ex3):
    d = definition("example3")
    p = tmp_path / "sys.json"
    p.write_text(json.dumps(d))
    sys, cons = load_system(p)
    for (A, B), (A2, B2) in zip(sys.vertices, ex3[0].vertices):
        np.testing.assert_array_equal(A, A2)
        np.testing.assert_array_equal(B, B2)
    np.testing.assert_array_equal(cons.F, ex3[1].F)

    toml = tmp_path / "sys.toml"
    toml.write_text(
        'name = "scalar"\n'
        '[[vertices]]\nA = [[0.5]]\nB = [[1.0]]\n'
        '[[vertices]]\nA = [[1.25]]\nB = [[1.0]]\n'
        '[constraints]\nstate_bounds = [[-2.0, 2.0]]\ninput_bounds = [[-1.0, 1.0]]\n')
    sys, cons = load_system(toml)
    assert sys.n_d == 2 and sys.vertices[1][0][0, 0] == 1.25
    assert cons.n_c == 4
    cfile = tmp_path / "cons.json"
    cfile.write_text(json.dumps({"F": [[1.0]], "E": [[0.0]], "rhs": [3.0]}))
    assert load_constraints(cfile, sys).F[0, 0] == pytest.approx(1 / 3)


def test_malformed_system_definition(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"name": "x"}))
    with pytest.raises(ValueError):
        load_system(p)


def test_reference_gain_shapes():
    g = REFERENCE_GAINS["example2"]
    assert np.array(g["K0"]).shape == (1, 2)
    assert np.array(g["K1"]).shape == (4, 1, 2)
