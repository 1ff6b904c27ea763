import numpy as np
import pytest
from scipy import integrate

from orbitlab.builtins import builtin_family
from orbitlab.fields import FieldFamily, lipschitz_estimate
from orbitlab.mollify import (
    MollifiedFamily,
    MollifierKernel,
    SmoothField,
    friedrichs_residual,
    kernel_for,
    mollified_structure_residual,
    mollify_scalar,
    residual_ladder,
    sigma_max,
    wedge_derivative_identity_check,
    wedge_identity_audit,
)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_kernel_mass_and_moments(n):
    k = kernel_for(n)
    assert abs(k.mass - 1.0) <= 1e-6
    assert np.max(np.abs(k.moments())) <= 1e-12
    assert np.all(k.weights >= 0)
    assert np.all(np.sum(k.nodes**2, axis=1) < 1.0)


def test_kernel_profile_support():
    k = kernel_for(2)
    assert k.chi([[0.0, 1.0]])[0] == 0.0 and k.chi([[2.0, 0.0]])[0] == 0.0
    assert k.chi([[0.0, 0.0]])[0] == pytest.approx(k.c_n * np.exp(-1.0))


def test_kernel_normalization_against_dense_quadrature():
    # c_1 from adaptive quadrature of the bump on (-1, 1)
    mass, _ = integrate.quad(lambda y: np.exp(-1.0 / (1.0 - y * y)), -1, 1)
    assert kernel_for(1).c_n == pytest.approx(1.0 / mass, rel=1e-2)


def test_kernel_rejects_high_dimension():
    with pytest.raises(ValueError):
        MollifierKernel.build(4)


def test_mollify_constant_and_affine():
    assert mollify_scalar("3.5", 0.2, [0.1, 0.4]) == pytest.approx(3.5, abs=1e-6)
    assert mollify_scalar("2*x1 - x2 + 1", 0.3, [0.5, -0.2]) == pytest.approx(2.2, abs=1e-6)


def test_mollified_abs_at_kink_against_dense_quadrature():
    v = mollify_scalar("abs(x1)", 1.0, [0.0])
    assert 0.0 < v < 1.0
    bump = lambda y: np.exp(-1.0 / (1.0 - y * y))
    num, _ = integrate.quad(lambda y: abs(y) * bump(y), -1, 1)
    den, _ = integrate.quad(bump, -1, 1)
    assert v == pytest.approx(num / den, rel=1e-2)


def test_mollify_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        mollify_scalar("x1", 0.0, [0.0])


def test_mollification_error_bounded_by_lipschitz_constant(example, rng):
    box = [[-1, 1], [-1, 1]]
    L = lipschitz_estimate(example, box, 2000)
    for sigma in (0.1, 0.05):
        mf = MollifiedFamily.of(example, sigma)
        X = rng.uniform(-0.8, 0.8, size=(100, 2))
        err = np.linalg.norm(mf.frames(X) - example.frames(X), axis=1).max(axis=0)
        assert np.all(err <= L * sigma * 1.01)


def test_friedrichs_residual_of_constant_fields(plane):
    np.testing.assert_array_equal(friedrichs_residual(plane, 0, 1, 0.1, [0.3, 0.2]), [0.0, 0.0])


def test_friedrichs_residual_of_linear_fields_vanishes():
    fam = FieldFamily.from_strings([["x2", "-x1"], ["x1 + 2*x2", "x2"]])
    for sigma in (0.1, 0.05, 0.025):
        assert np.linalg.norm(friedrichs_residual(fam, 0, 1, sigma, [0.3, -0.4])) <= 1e-10


def test_friedrichs_residual_shrinks_for_smooth_fields():
    fam = FieldFamily.from_strings([["1", "x1^2"], ["x2^2", "x1*x2"]])
    norms = [np.linalg.norm(friedrichs_residual(fam, 0, 1, s, [0.3, 0.5])) for s in (0.2, 0.1, 0.05)]
    # observed order at least 1 in sigma
    assert norms[1] <= 0.55 * norms[0] and norms[2] <= 0.55 * norms[1]


@pytest.mark.parametrize("x", [(0.5, 0.5), (0.5, 0.26), (0.02, 0.3)])
def test_example_friedrichs_bounded_at_point(example, x):
    norms = [np.linalg.norm(friedrichs_residual(example, 0, 1, s, x)) for s in (0.1, 0.05, 0.025)]
    assert max(norms) <= 5.0


def test_structure_residual_with_zero_coefficients_equals_friedrichs(example):
    x = np.array([0.5, 0.4])
    zero = lambda X: np.zeros((len(X), 2))
    np.testing.assert_allclose(
        mollified_structure_residual(example, zero, 0, 1, 0.05, x), friedrichs_residual(example, 0, 1, 0.05, x),
        atol=1e-13,
    )


def test_grushin_structure_ladder_bounded():
    rep = residual_ladder(builtin_family("grushin"), 0, 1, [[1, 2], [1, 2]], samples=8, structure=True)
    assert rep.bounded


def test_example_structure_ladder_bounded(example):
    rep = residual_ladder(example, 0, 1, [[0.2, 1], [0.2, 1]], samples=8, structure=True)
    assert rep.bounded


def test_sigma_max_and_domain_report(example):
    assert sigma_max([[0.2, 1], [0.2, 1]], [[-1, 2], [-1, 2]]) == pytest.approx(0.5)
    rep = residual_ladder(example, 0, 1, [[0.2, 1], [0.2, 1]], samples=4, outer_box=[[0.1, 1.1], [0.1, 1.1]])
    assert rep.sigma_max == pytest.approx(0.05) and rep.left_domain


def test_wedge_identity_zero_field(rng):
    U = [SmoothField.affine(rng.normal(size=(2, 2))), SmoothField.affine(rng.normal(size=(2, 2)))]
    assert wedge_derivative_identity_check(U, SmoothField.constant([0.0, 0.0]), (0, 1), [0.1, 0.2]) == 0.0


def test_wedge_identity_grade_one_linear(rng):
    for _ in range(10):
        U = [SmoothField.affine(rng.normal(size=(3, 3)), rng.normal(size=3))]
        X = SmoothField.affine(rng.normal(size=(3, 3)), rng.normal(size=3))
        for k in range(3):
            assert wedge_derivative_identity_check(U, X, (k,), rng.normal(size=3)) <= 1e-6


def test_wedge_identity_grade_two_nonconstant_direction(rng):
    U = [SmoothField.affine(rng.normal(size=(3, 3))), SmoothField.affine(rng.normal(size=(3, 3)))]
    X = SmoothField.affine(rng.normal(size=(3, 3)), rng.normal(size=3))
    for K in [(0, 1), (0, 2), (1, 2)]:
        assert wedge_derivative_identity_check(U, X, K, rng.normal(size=3)) <= 1e-6


def test_wedge_identity_on_mollified_example(example):
    assert wedge_identity_audit(MollifiedFamily.of(example, 0.05), samples=5, seed=1) <= 1e-5
