"""Mollification of field coefficients and the diagnostics built on it.

``f^(sigma)(x) = sum_i w_i f(x - sigma y_i)`` where ``y_i`` are the nodes of a
midpoint grid on the unit ball and ``w_i`` the normalized bump
``exp(-1/(1-|y|^2))`` times the cell volume.  Derivatives of mollified
coefficients are exact derivatives of that quadrature sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import Expression
from .fields import FieldFamily, as_box, avoid_kinks
from .involutivity import commutators, least_norm, sample_box
from .multivector import index_sets

GRID = 17
SIGMA_LADDER = (0.1, 0.05, 0.025)
LADDER_RATIO = 4.0
H_FD = 1e-5


def _bump(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


@dataclass(frozen=True)
class MollifierKernel:
    """Bump ``c_n exp(-1/(1-|y|^2))`` on a ``GRID^n`` midpoint grid clipped to the unit ball.

    ``c_n`` is fixed so that the discrete mass is 1; ``weights`` already
    include the kernel values, the cell volume and ``c_n``.
    """

    n: int
    nodes: np.ndarray
    weights: np.ndarray
    c_n: float
    points_per_axis: int = GRID

    @classmethod
    def build(cls, n: int, points_per_axis: int = GRID) -> "MollifierKernel":
        if n < 1 or n > 3:
            raise ValueError("the tensor grid is provided for n <= 3 only")
        step = 2.0 / points_per_axis
        axis = -1.0 + step * (np.arange(points_per_axis) + 0.5)
        grid = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
        r2 = np.sum(grid**2, axis=1)
        keep = r2 < 1.0
        nodes = grid[keep]
        raw = _bump(r2[keep]) * step**n
        c_n = 1.0 / raw.sum()
        return cls(n, nodes, raw * c_n, c_n, points_per_axis)

    def chi(self, y) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return self.c_n * _bump(np.sum(y**2, axis=1))

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def moments(self) -> np.ndarray:
        """First moments ``sum_i w_i y_i`` (zero by symmetry)."""
        return self.weights @ self.nodes


_KERNELS: dict[tuple[int, int], MollifierKernel] = {}


def kernel_for(n: int, points_per_axis: int = GRID) -> MollifierKernel:
    key = (n, points_per_axis)
    if key not in _KERNELS:
        _KERNELS[key] = MollifierKernel.build(n, points_per_axis)
    return _KERNELS[key]


def _shifted(X: np.ndarray, sigma: float, kernel: MollifierKernel) -> np.ndarray:
    """All quadrature points ``x - sigma y_i``: (m, n) -> (m * N, n)."""
    return (X[:, None, :] - sigma * kernel.nodes[None, :, :]).reshape(-1, X.shape[1])


def mollify_scalar(f, sigma: float, x, kernel: MollifierKernel | None = None) -> float:
    """Quadrature value of ``int f(x - sigma y) chi(y) dy`` for an expression (or DSL string)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    expr = Expression.parse(f) if isinstance(f, str) else f
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = max(len(x), 1)
    kernel = kernel or kernel_for(n)
    pts = x[None, :] - sigma * kernel.nodes
    vals = np.broadcast_to(expr(pts.T), (len(pts),))
    return float(kernel.weights @ vals)


@dataclass(frozen=True, eq=False)
class MollifiedFamily:
    """The fields ``Y_j^(sigma) = g_j^(sigma) . grad`` of a base family."""

    base: FieldFamily
    sigma: float
    kernel: MollifierKernel

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def of(cls, base: FieldFamily, sigma: float, kernel: MollifierKernel | None = None) -> "MollifiedFamily":
        return cls(base, sigma, kernel or kernel_for(base.n))

    @property
    def n(self) -> int:
        return self.base.n

    @property
    def q(self) -> int:
        return self.base.q

    def _average(self, values: np.ndarray, m: int) -> np.ndarray:
        N = len(self.kernel.weights)
        return np.tensordot(values.reshape(m, N, *values.shape[1:]), self.kernel.weights, axes=([1], [0]))

    def frames(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._average(self.base.frames(_shifted(X, self.sigma, self.kernel)), len(X))

    def jacobians(self, X) -> np.ndarray:
        """(m, q, n, n): derivative of the quadrature sum, term by term."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._average(self.base.jacobians(_shifted(X, self.sigma, self.kernel)), len(X))

    def commutators(self, X) -> np.ndarray:
        """(m, q, q, n) brackets of the mollified fields."""
        F = self.frames(X)
        J = self.jacobians(X)
        JG = np.einsum("mkab,mbj->mjka", J, F)
        return JG - JG.transpose(0, 2, 1, 3)

    def mollified_commutators(self, X) -> np.ndarray:
        """(m, q, q, n) mollification of the a.e. brackets of the base fields."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return self._average(commutators(self.base, _shifted(X, self.sigma, self.kernel)), len(X))

    def field(self, j: int) -> "SmoothField":
        return SmoothField(self.n, lambda X: self.frames(X)[:, :, j], lambda X: self.jacobians(X)[:, j])


@dataclass(frozen=True)
class SmoothField:
    """A field given by batched value (m, n) and Jacobian (m, n, n) callables."""

    n: int
    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def affine(cls, A, b=None) -> "SmoothField":
        A = np.asarray(A, dtype=float)
        b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
        return cls(
            A.shape[0],
            lambda X: np.atleast_2d(X) @ A.T + b,
            lambda X: np.broadcast_to(A, (len(np.atleast_2d(X)),) + A.shape).copy(),
        )

    @classmethod
    def constant(cls, v) -> "SmoothField":
        v = np.asarray(v, dtype=float)
        return cls.affine(np.zeros((len(v), len(v))), v)


# ------------------------------------------------------------------ residuals


def friedrichs_residual(family: FieldFamily, j: int, k: int, sigma: float, x, kernel=None) -> np.ndarray:
    """``b_jk^sigma(x) = ([Y_j^s, Y_k^s] - [Y_j, Y_k]^s)(x) / sigma``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    X = np.atleast_2d(np.asarray(x, dtype=float))
    mf = MollifiedFamily(family, sigma, kernel or kernel_for(family.n))
    out = (mf.commutators(X)[:, j, k] - mf.mollified_commutators(X)[:, j, k]) / sigma
    return out[0] if np.ndim(x) == 1 else out


def coefficient_field(family: FieldFamily, j: int, k: int) -> Callable[[np.ndarray], np.ndarray]:
    """``X -> c_jk(X)`` (m, q), least-norm structure coefficients point by point."""

    def c(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        F = family.frames(X)
        W = commutators(family, X)[:, j, k]
        return np.array([least_norm(F[i], W[i]).coefficients for i in range(len(X))])

    return c


def mollified_structure_residual(
    family: FieldFamily, coeffs, j: int, k: int, sigma: float, x, kernel=None
) -> np.ndarray:
    """``([Y_j^s, Y_k^s] - sum_i (c_jk^i)^s Y_i^s)(x) / sigma``.

    ``coeffs`` maps a batch (m, n) to coefficients (m, q); None uses the
    least-norm coefficients of the family.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    coeffs = coeffs or coefficient_field(family, j, k)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    kernel = kernel or kernel_for(family.n)
    mf = MollifiedFamily(family, sigma, kernel)
    c_sigma = mf._average(np.asarray(coeffs(_shifted(X, sigma, kernel))), len(X))  # (m, q)
    out = (mf.commutators(X)[:, j, k] - np.einsum("mnq,mq->mn", mf.frames(X), c_sigma)) / sigma
    return out[0] if np.ndim(x) == 1 else out


@dataclass
class LadderReport:
    sigmas: list
    sup_norms: list
    ratio: float
    bound: float = LADDER_RATIO
    sigma_max: float | None = None
    left_domain: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def decaying(self) -> bool:
        """Sups never increase as sigma shrinks (a decaying ladder cannot signal blow-up)."""
        order = np.argsort(self.sigmas)[::-1]
        vals = np.asarray(self.sup_norms)[order]
        return bool(np.all(np.diff(vals) <= 1e-12 * max(vals.max(), 1e-300)))

    @property
    def bounded(self) -> bool:
        return self.ratio <= self.bound or self.decaying

    def to_json(self) -> dict:
        return {
            "sigmas": self.sigmas,
            "sup_norms": self.sup_norms,
            "ratio": self.ratio,
            "bound": self.bound,
            "decaying": self.decaying,
            "bounded": self.bounded,
            "sigma_max": self.sigma_max,
            "left_domain": self.left_domain,
        }


def _ratio(values: Sequence[float]) -> float:
    hi, lo = max(values), min(values)
    if hi == 0.0:
        return 1.0
    return math.inf if lo == 0.0 else hi / lo


def sigma_max(box, outer_box) -> float:
    """Default admissible radius: half the distance from the box to the boundary of the outer box."""
    lo, hi = np.asarray(box, float)[:, 0], np.asarray(box, float)[:, 1]
    olo, ohi = np.asarray(outer_box, float)[:, 0], np.asarray(outer_box, float)[:, 1]
    return float(min(np.min(lo - olo), np.min(ohi - hi))) / 2.0


def residual_ladder(
    family: FieldFamily,
    j: int,
    k: int,
    box,
    sigmas: Sequence[float] = SIGMA_LADDER,
    samples: int = 64,
    seed: int = 0,
    structure: bool = False,
    outer_box=None,
) -> LadderReport:
    """Sup over box samples of ``|b_jk^sigma|`` (or of the structure residual) for each sigma.

    The same sample points are used at every sigma; points are kept off kink
    loci.  With ``outer_box`` the admissible radius is half the distance to its
    boundary and ``left_domain`` records whether some sigma exceeds it.
    """
    lo, hi = as_box(box, family.n)
    X = sample_box(np.stack([lo, hi], axis=1), family.n, samples, seed)
    if family.has_kinks:
        X = np.array([avoid_kinks(family, x) for x in X])
    coeffs = coefficient_field(family, j, k) if structure else None
    sups = []
    for s in sigmas:
        if structure:
            r = mollified_structure_residual(family, coeffs, j, k, s, X)
        else:
            r = friedrichs_residual(family, j, k, s, X)
        sups.append(float(np.max(np.linalg.norm(r, axis=1))))
    smax = sigma_max(np.stack([lo, hi], axis=1), outer_box) if outer_box is not None else None
    left = smax is not None and max(sigmas) > smax
    return LadderReport(list(map(float, sigmas)), sups, _ratio(sups), sigma_max=smax, left_domain=left)


# ------------------------------------------------------------------ wedge-derivative identity


def _minor(vectors: np.ndarray, rows: Sequence[int]) -> float:
    """``dx^rows(U_1, ..., U_p)`` for U stacked as columns of an (n, p) matrix; rows may repeat."""
    return float(np.linalg.det(vectors[list(rows), :]))


def wedge_derivative_identity_check(fields: Sequence[SmoothField], X: SmoothField, K: Sequence[int], x,
                                    h_fd: float = H_FD) -> float:
    """Defect of the rule for differentiating ``dx^K(U_1, ..., U_p)`` along X.

    The left side is a central difference along ``X(x)``; the right side is
    ``sum_a dx^K(.., [X, U_a], ..) + sum_{g, b} d_g f^{k_b} dx^{K with k_b -> g}(U)``.
    K is 0-based.
    """
    x = np.asarray(x, dtype=float)
    K = tuple(K)
    p = len(fields)
    if len(K) != p:
        raise ValueError("K must have one entry per field")
    f = X.value(x[None])[0]
    Df = X.jacobian(x[None])[0]

    def D(y):
        U = np.stack([u.value(y[None])[0] for u in fields], axis=1)
        return _minor(U, K)

    lhs = (D(x + h_fd * f) - D(x - h_fd * f)) / (2 * h_fd)
    U = np.stack([u.value(x[None])[0] for u in fields], axis=1)
    rhs = 0.0
    for a, u in enumerate(fields):
        br = u.jacobian(x[None])[0] @ f - Df @ U[:, a]
        V = U.copy()
        V[:, a] = br
        rhs += _minor(V, K)
    for b in range(p):
        for g in range(X.n):
            rows = list(K)
            rows[b] = g
            rhs += Df[K[b], g] * _minor(U, rows)
    return abs(lhs - rhs)


def wedge_identity_audit(mf: MollifiedFamily, samples: int = 20, seed: int = 0, box=None) -> float:
    """Max identity defect over random points, random constant X and every K in I(p, n), p = min(n, q)."""
    rng = np.random.default_rng(seed)
    n, q = mf.n, mf.q
    p = min(n, q)
    lo, hi = (np.full(n, -1.0), np.full(n, 1.0)) if box is None else as_box(box, n)
    fields = [mf.field(j) for j in range(p)]
    worst = 0.0
    for _ in range(samples):
        x = lo + (hi - lo) * rng.random(n)
        if mf.base.has_kinks:
            x = avoid_kinks(mf.base, x)
        X = SmoothField.constant(rng.normal(size=n))
        for K in index_sets(p, n):
            worst = max(worst, wedge_derivative_identity_check(fields, X, K, x))
    return worst
