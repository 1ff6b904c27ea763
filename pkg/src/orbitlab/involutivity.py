"""Commutators, least-norm structure coefficients and the involutivity audit.

The structure coefficients of a pair ``(j, k)`` at x are the minimum-norm
least-squares solution of ``Y_x c = [Y_j, Y_k]_x``.  They are computed as the
limit ``lim_{delta -> 0} (delta I + Y^T Y)^{-1} Y^T b`` taken down a finite
ladder of regularization parameters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.stats import qmc

from .errors import EvaluationError, IllConditionedWarning
from .fields import FieldFamily, as_box, avoid_kinks

DELTA_LADDER = (1e-4, 1e-6, 1e-8, 1e-10)
SETTLE_RTOL = 1e-9
MAX_SWEEPS = 100
NULL_RTOL = 1e-10
COEFF_THRESHOLD = 25.0
RESIDUAL_TOL = 1e-8


# ------------------------------------------------------------------ commutators


def commutators(family: FieldFamily, X) -> np.ndarray:
    """All brackets for a batch: (m, n) -> (m, q, q, n) with ``[Y_j, Y_k]`` at ``[:, j, k]``.

    Uses the a.e. Jacobians; ``C[:, j, k]`` and ``C[:, k, j]`` are exact negatives.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    F = family.frames(X)  # (m, n, q)
    J = family.jacobians(X)  # (m, q, n, n)
    JG = np.einsum("mkab,mbj->mjka", J, F)  # Jac(g_k) g_j
    return JG - JG.transpose(0, 2, 1, 3)


def commutator(family: FieldFamily, j: int, k: int, x, jitter: bool = True) -> np.ndarray:
    """``[Y_j, Y_k]_x = Jac(g_k) g_j - Jac(g_j) g_k`` (0-based field indices).

    Points on a kink locus are nudged off it first unless ``jitter`` is False.
    """
    x = np.asarray(x, dtype=float).reshape(family.n)
    if jitter:
        x = avoid_kinks(family, x)
    return commutators(family, x[None])[0, j, k]


# ------------------------------------------------------------------ least norm


@dataclass(frozen=True)
class LeastNormResult:
    coefficients: np.ndarray
    delta: float
    sweeps: int
    rank: int


def _row_space_basis(Y: np.ndarray) -> np.ndarray:
    """Orthonormal basis (q, r) of the complement of the numerical null space of Y.

    Rank is decided on the column-equilibrated matrix so that a tiny but
    independent column is not mistaken for a null direction.
    """
    q = Y.shape[1]
    norms = np.linalg.norm(Y, axis=0)
    live = norms > 0
    if not live.any():
        return np.zeros((q, 0))
    Ye = Y[:, live] / norms[live]
    _, s, Vt = np.linalg.svd(Ye)
    r = int(np.sum(s > NULL_RTOL * s[0]))
    # null space of Y: dead columns plus D^{-1} N' for the equilibrated null vectors N'
    null_live = Vt[r:].T / norms[live, None]
    null = np.zeros((q, null_live.shape[1] + int((~live).sum())))
    null[np.flatnonzero(live), : null_live.shape[1]] = null_live
    null[np.flatnonzero(~live), null_live.shape[1]:] = np.eye(int((~live).sum()))
    if null.shape[1] == 0:
        return np.eye(q)
    Qn, _ = np.linalg.qr(null)
    Q, _ = np.linalg.qr(np.concatenate([Qn, np.eye(q)], axis=1))
    return Q[:, Qn.shape[1]:q]


def least_norm(Y, b, delta_ladder: Sequence[float] = DELTA_LADDER) -> LeastNormResult:
    """Minimum-norm least-squares solution of ``Y c = b`` as a regularized limit.

    The numerical null space is split off first; on the remaining
    full-column-rank problem ``B`` (columns equilibrated), the iteration
    ``x <- x + (delta I + B^T B)^{-1} (B^T b - B^T B x)`` runs at each delta
    of the ladder until successive iterates agree to ``SETTLE_RTOL``.
    """
    Y = np.asarray(Y, dtype=float)
    b = np.asarray(b, dtype=float)
    ladder = [float(d) for d in delta_ladder]
    if not ladder or any(d <= 0 for d in ladder) or any(a <= c for a, c in zip(ladder, ladder[1:])):
        raise ValueError("delta ladder must be strictly decreasing positive reals")
    q = Y.shape[1]
    Q = _row_space_basis(Y)
    r = Q.shape[1]
    if r == 0:
        return LeastNormResult(np.zeros(q), ladder[0], 0, 0)
    B = Y @ Q
    scale = np.linalg.norm(B, axis=0)
    Be = B / scale
    G = Be.T @ Be
    rhs = Be.T @ b
    x = np.zeros(r)
    prev = x
    sweeps = 0
    settled_at = None
    for delta in ladder:
        A = G + delta * np.eye(r)
        settled_at = None
        for _ in range(MAX_SWEEPS):
            nxt = x + np.linalg.solve(A, rhs - G @ x)
            sweeps += 1
            prev, x = x, nxt
            if np.linalg.norm(x - prev) <= SETTLE_RTOL * max(np.linalg.norm(x), 1e-300):
                settled_at = delta
                break
    if settled_at is None:
        warnings.warn(
            IllConditionedWarning(
                "least-norm iteration did not settle on the delta ladder",
                last_iterates=(Q @ (prev / scale), Q @ (x / scale)),
            ),
            stacklevel=2,
        )
        settled_at = ladder[-1]
    return LeastNormResult(Q @ (x / scale), settled_at, sweeps, r)


def pinv_least_norm(Y, b, delta_ladder: Sequence[float] = DELTA_LADDER) -> tuple[np.ndarray, float]:
    """``(c, delta)``: the least-norm solution and the smallest delta at which it settled."""
    res = least_norm(Y, b, delta_ladder)
    return res.coefficients, res.delta


# ------------------------------------------------------------------ structure coefficients


@dataclass(frozen=True)
class StructureCoefficients:
    point: np.ndarray
    pair: tuple[int, int]
    coefficients: np.ndarray
    residual: float
    delta: float
    delta_ladder: tuple[float, ...] = DELTA_LADDER
    bracket: np.ndarray | None = None

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coefficients))


def structure_coefficients(
    family: FieldFamily, j: int, k: int, x, delta_ladder: Sequence[float] = DELTA_LADDER, jitter: bool = True
) -> StructureCoefficients:
    x = np.asarray(x, dtype=float).reshape(family.n)
    if jitter:
        x = avoid_kinks(family, x)
    Y = family.frames(x[None])[0]
    w = commutators(family, x[None])[0, j, k]
    c, delta = pinv_least_norm(Y, w, delta_ladder)
    residual = float(np.linalg.norm(Y @ c - w))
    return StructureCoefficients(x, (j, k), c, residual, delta, tuple(delta_ladder), w)


# ------------------------------------------------------------------ domain audit


@dataclass
class InvolutivityReport:
    family: str
    box: list
    samples: int
    seed: int
    coeff_threshold: float
    residual_tol: float
    sup_coeff: dict  # "j,k" (1-based) -> sup |c_jk|
    sup_residual: float
    argmax: dict  # "j,k" -> point where sup |c_jk| is attained
    flagged: list  # [{"point", "pair", "coeff", "residual", "reason"}]
    nonfinite: int = 0
    trend: list = field(default_factory=list)

    @property
    def verdict(self) -> str:
        return "pass" if not self.flagged and self.nonfinite == 0 else "fail"

    @property
    def sup_coeff_all(self) -> float:
        return max(self.sup_coeff.values(), default=0.0)

    def to_json(self, max_flags: int = 20) -> dict:
        return {
            "family": self.family,
            "box": self.box,
            "samples": self.samples,
            "seed": self.seed,
            "coeff_threshold": self.coeff_threshold,
            "residual_tol": self.residual_tol,
            "sup_coeff": self.sup_coeff,
            "sup_residual": self.sup_residual,
            "argmax": self.argmax,
            "flag_count": len(self.flagged),
            "flags": self.flagged[:max_flags],
            "nonfinite": self.nonfinite,
            "trend": self.trend,
            "verdict": self.verdict,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def sample_box(box, n: int, samples: int, seed: int) -> np.ndarray:
    """Scrambled Halton points in the box (deterministic given seed)."""
    lo, hi = as_box(box, n)
    pts = qmc.Halton(d=n, scramble=True, seed=seed).random(samples)
    return lo + (hi - lo) * pts


def _pair_key(j: int, k: int) -> str:
    return f"{j + 1},{k + 1}"


def domain_audit(
    family: FieldFamily,
    box,
    samples: int = 2000,
    seed: int = 0,
    coeff_threshold: float = COEFF_THRESHOLD,
    residual_tol: float = RESIDUAL_TOL,
    delta_ladder: Sequence[float] = DELTA_LADDER,
    nested: int = 0,
) -> InvolutivityReport:
    """Sup of |c_jk| and of the residual over a low-discrepancy sample of the box.

    A point is flagged when a coefficient exceeds ``coeff_threshold`` or the
    residual exceeds ``residual_tol``.  With ``nested > 0`` the audit is
    repeated on that many boxes shrinking by half towards the location of the
    largest coefficient, and the sups are listed in ``trend``.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    box = np.asarray(box, dtype=float)
    X = sample_box(box, family.n, samples, seed)
    X = np.array([avoid_kinks(family, x) for x in X]) if family.has_kinks else X
    pairs = list(combinations(range(family.q), 2))
    sup = {_pair_key(j, k): 0.0 for j, k in pairs}
    arg = {_pair_key(j, k): None for j, k in pairs}
    sup_res = 0.0
    flags = []
    nonfinite = 0
    with np.errstate(all="ignore"):
        try:
            F = family.frames(X)
            C = commutators(family, X)
            good = np.ones(len(X), dtype=bool)
        except EvaluationError:
            F, C, good = _pointwise(family, X)
    for i, x in enumerate(X):
        if not good[i]:
            nonfinite += 1
            flags.append({"point": x.tolist(), "pair": None, "coeff": None, "residual": None, "reason": "non-finite"})
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditionedWarning)
            for j, k in pairs:
                w = C[i, j, k]
                c = least_norm(F[i], w, delta_ladder).coefficients
                res = float(np.linalg.norm(F[i] @ c - w))
                mag = float(np.linalg.norm(c))
                key = _pair_key(j, k)
                if mag > sup[key] or arg[key] is None:
                    sup[key], arg[key] = max(mag, sup[key]), x.tolist()
                sup_res = max(sup_res, res)
                reason = []
                if mag > coeff_threshold:
                    reason.append("coefficient")
                if res > residual_tol:
                    reason.append("residual")
                if reason:
                    flags.append({"point": x.tolist(), "pair": key, "coeff": mag, "residual": res,
                                  "reason": "+".join(reason)})
    report = InvolutivityReport(
        family.name, box.tolist(), samples, seed, coeff_threshold, residual_tol, sup, sup_res, arg, flags, nonfinite
    )
    if nested > 0 and pairs:
        report.trend = nested_trend(family, box, report, nested, samples, seed, delta_ladder)
    return report


def _pointwise(family: FieldFamily, X):
    m = len(X)
    F = np.zeros((m, family.n, family.q))
    C = np.zeros((m, family.q, family.q, family.n))
    good = np.ones(m, dtype=bool)
    for i, x in enumerate(X):
        try:
            F[i] = family.frames(x[None])[0]
            C[i] = commutators(family, x[None])[0]
        except EvaluationError:
            good[i] = False
    return F, C, good


def nested_trend(family, box, report: InvolutivityReport, levels: int, samples: int, seed: int, delta_ladder):
    """Sups over boxes halving around the worst point: a growing trend suggests blow-up."""
    key = max(report.sup_coeff, key=lambda k: report.sup_coeff[k])
    centre = np.asarray(report.argmax[key], dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    half = (hi - lo) / 2
    out = [{"half_width": half.tolist(), "sup_coeff": report.sup_coeff_all}]
    for _ in range(levels):
        half = half / 2
        c = np.clip(centre, lo + half, hi - half)
        sub = np.stack([c - half, c + half], axis=1)
        r = domain_audit(family, sub, samples, seed, report.coeff_threshold, report.residual_tol, delta_ladder)
        out.append({"half_width": half.tolist(), "sup_coeff": r.sup_coeff_all})
    return out
