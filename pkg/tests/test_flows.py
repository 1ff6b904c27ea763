import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbitlab.builtins import builtin_family
from orbitlab.errors import DivergenceError, EvaluationError, PreconditionError
from orbitlab.fields import FieldFamily, VectorField
from orbitlab.flows import (
    ControlLaw,
    _rk4,
    default_step,
    family_rhs,
    flow,
    gronwall_bound,
    integrate_field,
    integrate_laws,
    integrate_subunit,
    quadruple_defect,
)
from orbitlab.orbits import random_laws

ROTATION = VectorField.from_strings(["x2", "-x1"])


def _rotation_exact(x0, t):
    c, s = math.cos(t), math.sin(t)
    return np.array([c * x0[0] + s * x0[1], -s * x0[0] + c * x0[1]])


def test_unit_field_flow():
    np.testing.assert_allclose(integrate_field(VectorField.from_strings(["1", "0"]), [0, 0], 1.0).endpoint, [1, 0])


def test_example_first_field_from_origin_lands_on_graph(example):
    np.testing.assert_allclose(integrate_field(example.field(0), [0.0, 0.0], 1.0).endpoint, [1.0, 1.0], atol=1e-12)


def test_rotation_returns_after_full_turn():
    h = default_step(2 * math.pi)
    end = integrate_field(ROTATION, [1.0, 0.5], 2 * math.pi).endpoint
    assert np.linalg.norm(end - [1.0, 0.5]) <= 10 * h**4


def test_backward_flow_is_negated_field():
    tr = integrate_field(ROTATION, [1.0, 0.0], -0.7)
    np.testing.assert_allclose(tr.endpoint, _rotation_exact([1.0, 0.0], -0.7), atol=1e-12)
    assert tr.times[-1] == pytest.approx(-0.7)


def test_constant_control_on_plane(plane):
    tr = integrate_subunit(plane, ControlLaw.constant([1.0, 0.0], 5.0), [0.2, 0.3])
    np.testing.assert_allclose(tr.endpoint, [5.2, 0.3], atol=1e-12)
    assert tr.budget == 5.0


def test_displacement_within_budget_on_plane(plane, rng):
    for _ in range(20):
        law = ControlLaw.random(2, 2.0, 6, rng)
        tr = integrate_subunit(plane, law, [0.0, 0.0])
        assert np.linalg.norm(tr.endpoint) <= law.budget + 1e-12


def test_example_paths_stay_on_graph(example, rng):
    for _ in range(10):
        tr = integrate_subunit(example, ControlLaw.random(2, 1.0, 5, rng), [0.0, 0.0])
        x1, x2 = tr.states.T
        assert np.max(np.abs(x2 - x1 * np.abs(x1))) <= 1e-6


def test_non_subunit_law_rejected(plane):
    law = ControlLaw.constant([2.0, 0.0], 1.0)
    with pytest.raises(PreconditionError):
        integrate_subunit(plane, law, [0, 0])
    np.testing.assert_allclose(integrate_subunit(plane, law, [0, 0], relaxed=True).endpoint, [2, 0])


def test_control_law_validation():
    with pytest.raises(ValueError):
        ControlLaw(np.array([0.0, 1.0, 1.0]), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ControlLaw(np.array([0.5, 1.0]), np.zeros((1, 2)))


def test_concatenated_laws_add_budgets(rng):
    a, b = ControlLaw.random(2, 0.3, 2, rng), ControlLaw.random(2, 0.5, 3, rng)
    ab = a.then(b)
    assert ab.T == pytest.approx(0.8) and ab.is_subunit()
    np.testing.assert_array_equal(ab.value_at(0.35), b.values[0])


def test_divergence_guard():
    blow = VectorField.from_strings(["x1^2"])
    with pytest.raises(DivergenceError):
        flow(blow, [[1.0]], 2.0)


def test_evaluation_error_names_field():
    # with a binary step the state lands exactly on x1 = 0
    fam = FieldFamily.from_strings([["1", "1/x1"]])
    with pytest.raises(EvaluationError) as info:
        integrate_subunit(fam, ControlLaw.constant([1.0], 1.0), [-0.5, 0.0], h=0.125)
    assert "Y1" in str(info.value)


def test_quadruple_defect_of_field_with_itself(example):
    V = example.field(0)
    assert np.linalg.norm(quadruple_defect(V, V, 0.1, 0.05, [0.3, 0.7])) <= 1e-12


def test_quadruple_defect_closed_form():
    V1 = VectorField.from_strings(["1", "0"])
    V2 = VectorField.from_strings(["0", "x1"])
    for t in (0.05, 0.1, 0.3):
        np.testing.assert_allclose(quadruple_defect(V1, V2, t, t, [0.4, -0.2]), [0.0, -t * t], atol=1e-12)


def test_gronwall_examples():
    assert gronwall_bound(0.0, 1.0, 3.0) == 0.0
    assert gronwall_bound(2.0, 1.0, 0.0) == 0.0
    assert gronwall_bound(1.0, 1.0, 1.0) == pytest.approx(math.e - 1, rel=1e-15)
    with pytest.raises(ValueError):
        gronwall_bound(1.0, 0.0, 1.0)


def test_one_step_update_is_exact_on_smooth_family(rng):
    fam = builtin_family("grushin")
    law = ControlLaw.random(2, 0.1, 1, rng)
    h = 0.01
    tr = integrate_subunit(fam, law, [0.3, 0.2], h)
    rhs = family_rhs(fam)
    U = law.values[0][:, None]
    dt = law.T / (len(tr.states) - 1)
    for i in range(len(tr.states) - 1):
        nxt = _rk4(rhs, tr.states[i][:, None], U, dt)[:, 0]
        assert np.array_equal(nxt, tr.states[i + 1])


def test_discrete_speed_bound(example, rng):
    law = ControlLaw.random(2, 1.0, 4, rng)
    tr = integrate_subunit(example, law, [0.2, -0.3])
    speeds = np.linalg.norm(np.diff(tr.states, axis=0), axis=1) / np.diff(tr.times)
    col_max = np.max(np.linalg.norm(example.frames(tr.states), axis=1))
    assert np.all(speeds <= law.bound * col_max * math.sqrt(2) + 1e-6)


def test_step_halving_improves_smooth_error():
    errs = []
    for h in (0.1, 0.05, 0.025):
        errs.append(np.linalg.norm(integrate_field(ROTATION, [1.0, 0.0], 3.0, h).endpoint - _rotation_exact([1, 0], 3.0)))
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


def test_step_halving_improves_across_kinks(example):
    ref = integrate_subunit(example, ControlLaw.constant([0.6, 0.8], 1.0), [-0.3, 0.5], 1e-5).endpoint
    errs = [np.linalg.norm(integrate_subunit(example, ControlLaw.constant([0.6, 0.8], 1.0), [-0.3, 0.5], h).endpoint
                           - ref) for h in (0.04, 0.02, 0.01)]
    assert errs[0] >= errs[1] >= errs[2]


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-2, 2), st.floats(-2, 2))
def test_flow_group_law_and_reversibility(t, s, a, b):
    for V in (ROTATION, builtin_family("grushin").field(1)):
        x = np.array([[a, b]])
        h = 1e-3
        tol = 10 * h**4 * (abs(t) + abs(s)) + 1e-13 * (1 + abs(a) + abs(b))
        np.testing.assert_allclose(flow(V, flow(V, x, s, h), t, h), flow(V, x, t + s, h), atol=tol * 10 + 1e-12)
        np.testing.assert_allclose(flow(V, flow(V, x, t, h), -t, h), x, atol=tol * 10 + 1e-12)


def test_trajectory_csv(tmp_path, example, rng):
    tr = integrate_subunit(example, ControlLaw.random(2, 0.1, 2, rng), [0, 0], 0.01)
    path = tmp_path / "traj.csv"
    tr.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,x1,x2,u1,u2" and len(lines) == len(tr.times) + 1


def test_batched_laws_match_single_runs(example):
    laws = random_laws(2, 0.5, 3, 5, seed=4)
    _, S = integrate_laws(example, laws, [0.1, 0.2], 0.01)
    for i, law in enumerate(laws):
        np.testing.assert_allclose(S[i], integrate_subunit(example, law, [0.1, 0.2], 0.01).states, atol=1e-14)
