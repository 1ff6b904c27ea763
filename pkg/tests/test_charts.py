import csv

import numpy as np
import pytest

from orbitlab.charts import (
    audit_chart,
    beta_audit,
    beta_defect,
    build_chart,
    chart_map,
    fit_chart,
    inclusion_constant,
    injectivity_audit,
    jacobian_lipschitz,
    project,
    quadruple_audit,
    select_basis,
    slice_audit,
    span_agreement_audit,
    tangency_audit,
    v_fields,
)
from orbitlab.errors import DegenerateBasisError, DegeneratePointError, ShrinkRadiusError
from orbitlab.fields import FieldFamily


def _F(t):
    return t * np.abs(t)


ROTATED = FieldFamily.from_strings([["0.6", "0.8"], ["-0.8", "0.6"]], name="rotated")
REDUNDANT = FieldFamily.from_strings([["1", "0"], ["0", "1"], ["1", "1"]], name="redundant")
SCALED = FieldFamily.from_strings([["1", "0"], ["x1", "0"]], name="scaled")


# ---------------------------------------------------------------- basis selection


def test_redundant_frame_tie_break_picks_first_pair():
    b = select_basis(REDUNDANT, [0.2, 0.3])
    assert b.p == 2 and b.I == (0, 1) and b.K == (0, 1)
    assert b.to_json()["I"] == [1, 2]


def test_example_basis_on_and_off_graph(example):
    on = select_basis(example, [0.0, 0.0])
    assert on.p == 1 and on.I == (0,)
    off = select_basis(example, [0.5, 0.8])
    assert off.p == 2 and off.I == (0, 1) and off.K == (0, 1)
    assert 0 < off.eta_quality <= 1


def test_rank_zero_point_is_rejected(balan):
    with pytest.raises(DegeneratePointError):
        select_basis(balan, [0.0, 0.0])


def test_ill_conditioned_block_is_rejected(example):
    # forcing p = 2 a hair off the graph leaves a nearly singular block
    with pytest.raises(DegenerateBasisError):
        select_basis(example, [0.5, 0.25 + 1e-9], p=2)


# ---------------------------------------------------------------- normalized fields


def test_orthonormal_frame_gives_identity_coordinates():
    b = select_basis(ROTATED, [0.0, 0.0])
    V = np.column_stack([v([0.1, 0.2]) for v in v_fields(ROTATED, b)])
    np.testing.assert_allclose(V, np.eye(2), atol=1e-15)


def test_example_off_graph_normalized_fields(example):
    x = np.array([0.5, 0.8])
    b = select_basis(example, x)
    V1, V2 = v_fields(example, b)
    np.testing.assert_allclose(V1(x), [1.0, 0.0], atol=1e-14)
    np.testing.assert_allclose(V2(x), [0.0, 1.0], atol=1e-14)


def test_scaled_pair_with_rank_one():
    b = select_basis(SCALED, [2.0, 0.0])
    assert b.p == 1 and b.I == (1,)
    (V,) = v_fields(SCALED, b)
    np.testing.assert_allclose(V([1.5, 0.3]), [1.0, 0.0])


def test_beta_is_an_inverse(example, rng):
    b = select_basis(example, [0.5, 0.8])
    X = np.array([0.5, 0.8]) + 0.05 * rng.normal(size=(30, 2))
    assert beta_defect(example, b, X) <= 1e-12


def test_degenerate_block_raises_shrink_radius(example):
    b = select_basis(example, [0.5, 0.8])
    (_, V2) = v_fields(example, b)
    with pytest.raises(ShrinkRadiusError):
        V2([0.5, 0.25])


# ---------------------------------------------------------------- chart map


def test_chart_origin_maps_to_base_point(example):
    b = select_basis(example, [0.5, 0.8])
    np.testing.assert_array_equal(chart_map(example, b, [0.0, 0.0]), [0.5, 0.8])


def test_plane_chart_is_affine(plane, rng):
    b = select_basis(plane, [1.0, -2.0])
    U = rng.uniform(-1, 1, size=(10, 2))
    np.testing.assert_allclose(chart_map(plane, b, U), U + [1.0, -2.0], atol=1e-14)


def test_example_graph_chart(example):
    b = select_basis(example, [0.0, 0.0])
    t = np.linspace(-0.9, 0.9, 13)
    X = chart_map(example, b, t[:, None])
    np.testing.assert_allclose(X[:, 0], t, atol=1e-12)
    np.testing.assert_allclose(X[:, 1], _F(t), atol=1e-6)


def test_k_coordinates_are_exact(example, rng):
    ch = build_chart(example, [0.5, 0.8])
    U = ch.ball_samples(20, seed=1)
    X = ch.phi(U)
    np.testing.assert_allclose(X[:, list(ch.basis.K)], ch.x0[list(ch.basis.K)] + U, atol=1e-12)


def test_grid_stays_in_ball_and_csv(example, tmp_path):
    ch = build_chart(example, [0.5, 0.8], delta=0.1)
    G = ch.grid(6)
    assert len(G) > 0 and np.all(np.linalg.norm(G, axis=1) < 0.1)
    path = tmp_path / "chart.csv"
    ch.write_csv(path, per_axis=6)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["u1", "u2", "x1", "x2"]
    assert len(rows) == len(G) + 1


def test_projection_recovers_parameters(example):
    ch = build_chart(example, [0.0, 0.0], delta=0.5)
    U = np.array([[-0.3], [0.1], [0.4]])
    U2, X2 = project(ch, ch.phi(U))
    np.testing.assert_allclose(U2, U, atol=1e-12)


# ---------------------------------------------------------------- audits


def test_constant_frame_tangency(plane):
    # Phi is affine, so only rounding through the RK4 steps remains
    ch = build_chart(plane, [0.0, 0.0], delta=0.5)
    assert tangency_audit(ch) <= 1e-8


def test_example_tangency(example):
    assert tangency_audit(build_chart(example, [0.0, 0.0], delta=0.5)) <= 1e-4
    assert tangency_audit(build_chart(example, [0.5, 0.8])) <= 1e-4


def test_span_agreement(example, balan, plane):
    s = span_agreement_audit(build_chart(example, [0.0, 0.0], delta=0.5))
    assert s["passed"] and s["ranks"] == [1]
    s = span_agreement_audit(build_chart(balan, [0.0, 1.0], delta=0.2))
    assert s["passed"] and s["ranks"] == [2]
    assert span_agreement_audit(build_chart(plane, [0.0, 0.0], delta=0.5))["passed"]


def test_slice_constant_frame(plane):
    ch = build_chart(plane, [0.0, 0.0], delta=0.5)
    assert slice_audit(ch, 0.2).max_residual <= 1e-8


def test_slice_example_graph(example):
    ch = build_chart(example, [0.0, 0.0], delta=0.5)
    rep = slice_audit(ch, 0.2)
    assert rep.conclusive
    assert rep.max_residual <= 1e-5


def test_slice_counterexample_leaves_chart(counterexample):
    ch = build_chart(counterexample, [-0.5, 0.0], p=1)
    assert ch.delta > 0.4
    rep = slice_audit(ch, 0.4)
    assert rep.max_residual >= 1e-2
    assert rep.worst_end is not None


def test_slice_rejects_nonpositive_sigma(plane):
    with pytest.raises(ValueError):
        slice_audit(build_chart(plane, [0, 0], delta=0.5), 0.0)


def test_beta_quadruple_injectivity(example):
    ch = build_chart(example, [0.5, 0.8])
    assert beta_audit(ch) <= 1e-9
    assert quadruple_audit(ch) <= 1e-3
    assert injectivity_audit(ch) >= 0.5
    assert np.isfinite(jacobian_lipschitz(ch))
    assert inclusion_constant(ch) >= 1.0


def test_auto_radius_avoids_the_graph(example):
    ch = build_chart(example, [0.5, 0.8])
    assert ch.meta["delta_auto"]
    # the graph is at vertical distance 0.55 and the horizontal ray meets it near x1 = 0.894
    assert 0.001 <= ch.delta < 0.4


def test_audit_report_and_fit(example):
    ch, rep = fit_chart(example, [0.5, 0.8], sigma=0.02)
    assert rep.passed
    js = rep.to_json()
    assert js["passed"] is True and js["basis"]["p"] == 2
    assert audit_chart(ch, sigma=None).slice is None
