"""Independent oracles for the test-suite: exact rational linear algebra and symbolic brackets."""

from __future__ import annotations

from fractions import Fraction

import numpy as np
import sympy as sp


def _rref(M: list[list[Fraction]]) -> tuple[list[list[Fraction]], list[int]]:
    """Reduced row echelon form by exact pivoted elimination; returns (R, pivot columns)."""
    R = [row[:] for row in M]
    rows, cols = len(R), len(R[0]) if R else 0
    pivots = []
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, rows) if R[i][c] != 0), None)
        if pivot is None:
            continue
        R[r], R[pivot] = R[pivot], R[r]
        lead = R[r][c]
        R[r] = [v / lead for v in R[r]]
        for i in range(rows):
            if i != r and R[i][c] != 0:
                f = R[i][c]
                R[i] = [a - f * b for a, b in zip(R[i], R[r])]
        pivots.append(c)
        r += 1
        if r == rows:
            break
    return R, pivots


def _matmul(A, B):
    return [[sum((a * b for a, b in zip(row, col)), Fraction(0)) for col in zip(*B)] for row in A]


def _transpose(A):
    return [list(r) for r in zip(*A)]


def _inverse(A):
    n = len(A)
    aug = [row[:] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(A)]
    R, piv = _rref(aug)
    assert piv[:n] == list(range(n)), "singular"
    return [row[n:] for row in R]


def exact_min_norm_solution(Y: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``Y^+ b`` in exact rational arithmetic via the full-rank factorization ``Y = C F``.

    C holds the pivot columns of Y and F the nonzero rows of its RREF, so
    ``Y^+ = F^T (F F^T)^{-1} (C^T C)^{-1} C^T``.
    """
    M = [[Fraction(float(v)) for v in row] for row in Y]
    bb = [[Fraction(float(v))] for v in b]
    R, piv = _rref(M)
    q = Y.shape[1]
    if not piv:
        return np.zeros(q)
    F = R[: len(piv)]
    C = [[row[c] for c in piv] for row in M]
    Ct = _transpose(C)
    Ft = _transpose(F)
    x = _matmul(Ct, bb)
    x = _matmul(_inverse(_matmul(Ct, C)), x)
    x = _matmul(_inverse(_matmul(F, Ft)), x)
    x = _matmul(Ft, x)
    return np.array([float(v[0]) for v in x])


def exact_rank(Y: np.ndarray) -> int:
    return len(_rref([[Fraction(float(v)) for v in row] for row in Y])[1])


def random_rank_matrix(rng: np.random.Generator, n: int, q: int, r: int) -> np.ndarray:
    """Integer-valued n x q matrix of exact rank r (products of small integers are exact in floats)."""
    while True:
        A = rng.integers(-3, 4, size=(n, r))
        B = rng.integers(-3, 4, size=(r, q))
        Y = (A @ B).astype(float) * 2.0 ** int(rng.integers(-2, 3))
        if exact_rank(Y) == r:
            return Y


X1, X2 = sp.symbols("x1 x2", real=True)


def symbolic_bracket(g_j, g_k, point) -> np.ndarray:
    """``Jac(g_k) g_j - Jac(g_j) g_k`` by sympy differentiation, evaluated at ``point``."""
    xs = (X1, X2)
    gj, gk = sp.Matrix(g_j), sp.Matrix(g_k)
    expr = gk.jacobian(xs) * gj - gj.jacobian(xs) * gk
    subs = dict(zip(xs, [sp.nsimplify(v) for v in point]))
    return np.array([float(sp.N(e.subs(subs), 30)) for e in expr])


BALAN = ([sp.exp(-1 / (X1**2 + X2**2)), 0], [0, X1**2 + X2**2])
COUNTEREXAMPLE = ([1, 0], [0, sp.exp(-1 / X1**2)])


def balan_displayed_coefficients(x) -> np.ndarray:
    """The decomposition ``[Y1, Y2] = a Y1 + b Y2`` with ``a = 2 x2 / |x|^2``, ``b = 2 x1 e^{-1/|x|^2} / |x|^2``."""
    x1, x2 = x
    r2 = x1 * x1 + x2 * x2
    return np.array([2 * x2 / r2, 2 * x1 * np.exp(-1 / r2) / r2])
