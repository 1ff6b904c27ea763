"""Exponential-map charts ``Phi(u) = exp(sum_j u_j V_j) x0`` and their diagnostics.

At a point of rank p, the chart uses p fields ``Y_I`` and p coordinates K.
The normalized fields ``V = Y_I beta^T`` with ``beta = A^{-1}``,
``A[k, l] = g_{i_k}^{K_l}``, have the identity as their K-components, so the
K-coordinates of ``Phi(u)`` are exactly ``x0_K + u``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DegenerateBasisError, DegeneratePointError, ShrinkRadiusError
from .fields import FieldFamily, VectorField
from .flows import ControlLaw, _explain_family, default_step, integrate_laws, quadruple_defect, run
from .multivector import DEFAULT_TOL_REL, TIE_RTOL, best_index, lambda_p, pointwise_rank, ranks

COND_MAX = 1e6
DELTA_CAP = 1.0
DELTA_FLOOR = 1e-3
RAY_SAMPLES = 200
TANGENCY_TOL = 1e-4
BETA_TOL = 1e-9
H_FD = 1e-5
PROJECTION_STEPS = 20


@dataclass(frozen=True)
class ChartBasis:
    x0: np.ndarray
    p: int
    I: tuple[int, ...]
    K: tuple[int, ...]
    eta_quality: float
    block_cond: float

    def to_json(self) -> dict:
        return {
            "x0": self.x0.tolist(),
            "p": self.p,
            "I": [i + 1 for i in self.I],
            "K": [k + 1 for k in self.K],
            "eta_quality": self.eta_quality,
            "block_cond": self.block_cond,
        }


def _blocks(family: FieldFamily, basis: ChartBasis, X: np.ndarray):
    """Frames restricted to I (m, n, p) and the blocks A[m, k, l] = g_{i_k}^{K_l}."""
    F = family.frames(X)[:, :, list(basis.I)]
    A = F[:, list(basis.K), :].transpose(0, 2, 1)
    return F, A


def select_basis(family: FieldFamily, x0, tol_rel: float = DEFAULT_TOL_REL, p: int | None = None) -> ChartBasis:
    """p from the pointwise rank (unless given), I maximizing ``|Y_I|``, K maximizing ``|Y_I^K|``."""
    x0 = np.asarray(x0, dtype=float).reshape(family.n)
    frame = family.frames(x0[None])[0]
    if p is None:
        p = pointwise_rank(frame, tol_rel)
    if p < 1:
        raise DegeneratePointError(f"rank 0 at {x0.tolist()}: the orbit is the point itself")
    I = best_index(frame, p)
    wedges = lambda_p(frame, p)
    row = np.abs(wedges.wedge(I))
    top = row.max()
    K = wedges.cols[int(np.flatnonzero(row >= top * (1 - TIE_RTOL))[0])]
    overall = np.abs(wedges.entries).max()
    block = frame[list(K)][:, list(I)]
    cond = float(np.linalg.cond(block))
    if not np.isfinite(cond) or cond > COND_MAX:
        raise DegenerateBasisError(f"coordinate block condition {cond:.3e} exceeds {COND_MAX:g}")
    return ChartBasis(x0, p, tuple(I), tuple(K), float(top / overall) if overall > 0 else 0.0, cond)


def beta_matrices(family: FieldFamily, basis: ChartBasis, X) -> np.ndarray:
    """(m, p, p) matrices beta(x) with ``sum_k beta_i^k g_{i_k}^{K_l} = delta_i^l``."""
    _, A = _blocks(family, basis, np.atleast_2d(X))
    return np.linalg.inv(A)


def beta_defect(family: FieldFamily, basis: ChartBasis, X) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _, A = _blocks(family, basis, X)
    B = np.linalg.inv(A)
    return float(np.max(np.abs(B @ A - np.eye(basis.p))))


def _v_frames(family: FieldFamily, basis: ChartBasis, X: np.ndarray, check: bool = True) -> np.ndarray:
    """(m, n, p): column i is V_i at each point."""
    F, A = _blocks(family, basis, X)
    if check:
        cond = np.linalg.cond(A)
        if not np.all(np.isfinite(cond)) or np.max(cond) > COND_MAX:
            raise ShrinkRadiusError(f"coordinate block condition {np.max(cond):.3e} exceeds {COND_MAX:g}")
    B = np.linalg.inv(A)
    return np.einsum("mnk,mik->mni", F, B)


def v_fields(family: FieldFamily, basis: ChartBasis) -> list[VectorField]:
    """``V_i = sum_k beta_i^k Y_{i_k}``; evaluation raises ShrinkRadiusError where the block degenerates."""
    out = []
    for i in range(basis.p):

        def f(X, _i=i):
            return _v_frames(family, basis, np.atleast_2d(X))[:, :, _i]

        out.append(VectorField(family.n, f, family.kink_args if family.has_kinks else None, f"V{i + 1}"))
    return out


def _block_cond(family: FieldFamily, basis: ChartBasis, X: np.ndarray) -> np.ndarray:
    with np.errstate(all="ignore"):
        c = np.linalg.cond(_blocks(family, basis, X)[1])
    return np.where(np.isfinite(c), c, np.inf)


def _ray_distance(family: FieldFamily, basis: ChartBasis, cap: float = DELTA_CAP) -> float:
    """Distance along the coordinate rays from x0 over which the block condition stays below COND_MAX.

    Each ray is sampled on a grid and every interior local maximum of the
    condition number is refined by a bounded scalar search, so a narrow
    crossing of a degenerate locus between two samples is not missed.
    """
    ts = np.linspace(0.0, cap, RAY_SAMPLES + 1)
    step = cap / RAY_SAMPLES
    best = cap
    for a in range(family.n):
        for sgn in (1.0, -1.0):
            e = sgn * np.eye(family.n)[a]
            cond = _block_cond(family, basis, basis.x0 + ts[:, None] * e)
            bad = list(np.flatnonzero(cond > COND_MAX))
            peaks = np.flatnonzero((cond[1:-1] >= cond[:-2]) & (cond[1:-1] >= cond[2:])) + 1
            for i in peaks:
                res = minimize_scalar(
                    lambda t: -min(_block_cond(family, basis, (basis.x0 + t * e)[None])[0], 1e300),
                    bounds=(ts[i - 1], ts[i + 1]), method="bounded", options={"xatol": 1e-12},
                )
                if -res.fun > COND_MAX:
                    bad.append(i - 1 if res.x < ts[i] else i)
            if bad:
                best = min(best, float(ts[min(bad)]) - step)
    return max(best, 0.0)


@dataclass
class Chart:
    family: FieldFamily
    basis: ChartBasis
    delta: float
    h: float
    meta: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.basis.p

    @property
    def x0(self) -> np.ndarray:
        return self.basis.x0

    def v_frames(self, X, check: bool = True) -> np.ndarray:
        return _v_frames(self.family, self.basis, np.atleast_2d(np.asarray(X, dtype=float)), check)

    def phi(self, U) -> np.ndarray:
        """Batch of chart points: (m, p) parameters -> (m, n)."""
        U = np.atleast_2d(np.asarray(U, dtype=float))
        fam, basis = self.family, self.basis

        def rhs(Xc, Uc):
            V = _v_frames(fam, basis, Xc.T)
            return np.einsum("mnp,pm->nm", V, Uc)

        X0 = np.repeat(self.x0[:, None], len(U), axis=1)
        kinks = fam.col_kinks if fam.has_kinks else None
        end = run(rhs, kinks, X0, [(1.0, np.ascontiguousarray(U.T))], self.h, record=False,
                  explain=_explain_family(fam))
        return end.T

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return self.phi(u.reshape(1, -1))[0] if u.ndim == 1 else self.phi(u)

    def fields(self) -> list[VectorField]:
        return v_fields(self.family, self.basis)

    def ball_samples(self, count: int, seed: int = 0, radius: float | None = None) -> np.ndarray:
        """Uniform samples of the parameter ball of the given radius (default delta)."""
        rng = np.random.default_rng(seed)
        r = self.delta if radius is None else radius
        d = rng.normal(size=(count, self.p))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * (r * rng.random((count, 1)) ** (1.0 / self.p))

    def grid(self, per_axis: int = 10) -> np.ndarray:
        """Tensor grid of the parameter cube, restricted to the open ball of radius delta."""
        axis = np.linspace(-self.delta, self.delta, per_axis + 2)[1:-1]
        G = np.stack(np.meshgrid(*([axis] * self.p), indexing="ij"), axis=-1).reshape(-1, self.p)
        return G[np.linalg.norm(G, axis=1) < self.delta]

    def write_csv(self, path, per_axis: int = 10) -> None:
        U = self.grid(per_axis)
        X = self.phi(U)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"u{j + 1}" for j in range(self.p)] + [f"x{a + 1}" for a in range(self.family.n)])
            for u, x in zip(U, X):
                w.writerow([repr(float(v)) for v in u] + [repr(float(v)) for v in x])


def build_chart(
    family: FieldFamily, x0, tol_rel: float = DEFAULT_TOL_REL, p: int | None = None,
    delta: float | None = None, h: float | None = None,
) -> Chart:
    """Chart at x0.  Without ``delta``, use half the ray distance over which the block stays well conditioned."""
    basis = select_basis(family, x0, tol_rel, p)
    auto = delta is None
    if auto:
        delta = max(0.5 * _ray_distance(family, basis), DELTA_FLOOR)
    return Chart(family, basis, float(delta), h or default_step(1.0), {"delta_auto": auto})


def chart_map(family: FieldFamily, basis: ChartBasis, u, h: float | None = None) -> np.ndarray:
    """``Phi(u)``: time-1 flow of the frozen field ``sum_j u_j V_j`` from x0."""
    u = np.asarray(u, dtype=float)
    chart = Chart(family, basis, math.inf, h or default_step(1.0))
    return chart(u)


# ------------------------------------------------------------------ audits


def tangency_audit(chart: Chart, samples: int = 20, h_fd: float = H_FD, seed: int = 0) -> float:
    """Max over sampled u of ``|central difference dPhi/du_k - V_k(Phi(u))|``."""
    U = chart.ball_samples(samples, seed, radius=max(chart.delta - 2 * h_fd, 0.0))
    p = chart.p
    E = h_fd * np.eye(p)
    pts = np.concatenate([U, (U[:, None, :] + E).reshape(-1, p), (U[:, None, :] - E).reshape(-1, p)])
    X = chart.phi(pts)
    m = len(U)
    base = X[:m]
    plus = X[m: m + m * p].reshape(m, p, -1)
    minus = X[m + m * p:].reshape(m, p, -1)
    D = (plus - minus) / (2 * h_fd)  # (m, p, n)
    V = chart.v_frames(base).transpose(0, 2, 1)  # (m, p, n)
    return float(np.max(np.linalg.norm(D - V, axis=2)))


def beta_audit(chart: Chart, samples: int = 20, seed: int = 0) -> float:
    X = chart.phi(chart.ball_samples(samples, seed))
    return beta_defect(chart.family, chart.basis, np.concatenate([chart.x0[None], X]))


def span_agreement_audit(chart: Chart, samples: int = 20, seed: int = 0, tol_rel: float = DEFAULT_TOL_REL):
    """Rank of ``[V-frame | Y-frame]`` at chart images; passes iff it equals p everywhere.

    Only chart images are sampled: the identity is about a d-neighbourhood of
    x0, which need not contain any Euclidean ball.
    """
    X = chart.phi(chart.ball_samples(samples, seed))
    M = np.concatenate([chart.v_frames(X), chart.family.frames(X)], axis=2)
    r = ranks(M, tol_rel)
    return {"passed": bool(np.all(r == chart.p)), "ranks": sorted(set(int(v) for v in r)), "samples": len(X)}


def quadruple_audit(chart: Chart, ts: Sequence[float] = (0.05, 0.1), samples: int = 5, seed: int = 0,
                    h: float | None = None) -> float:
    """Max of ``|defect| / |ts|`` over chart points, field pairs (j < k, or j = k when p = 1) and t, s in ts."""
    pts = chart.phi(chart.ball_samples(samples, seed, radius=0.5 * chart.delta))
    V = chart.fields()
    pairs = [(j, k) for j in range(chart.p) for k in range(j + 1, chart.p)] or [(0, 0)]
    worst = 0.0
    for j, k in pairs:
        for t in ts:
            for s in ts:
                for sign in (1.0, -1.0):
                    D = quadruple_defect(V[j], V[k], t, sign * s, pts, h or chart.h)
                    worst = max(worst, float(np.max(np.linalg.norm(D, axis=1))) / abs(t * s))
    return worst


def injectivity_audit(chart: Chart, per_axis: int = 10) -> float:
    """min over grid pairs of ``|Phi(u) - Phi(v)| / |u - v|``."""
    U = chart.grid(per_axis)
    X = chart.phi(U)
    du = np.linalg.norm(U[:, None] - U[None], axis=2)
    dx = np.linalg.norm(X[:, None] - X[None], axis=2)
    off = du > 0
    return float(np.min(dx[off] / du[off])) if off.any() else math.inf


def jacobian_lipschitz(chart: Chart, samples: int = 10, seed: int = 0, h_fd: float = H_FD) -> float:
    """Largest difference quotient of the sampled Jacobian of Phi (finite for a C^{1,1} chart)."""
    U = chart.ball_samples(samples, seed, radius=0.9 * chart.delta)
    p = chart.p
    E = h_fd * np.eye(p)
    P = chart.phi((U[:, None, :] + E).reshape(-1, p)).reshape(len(U), p, -1)
    M = chart.phi((U[:, None, :] - E).reshape(-1, p)).reshape(len(U), p, -1)
    J = (P - M) / (2 * h_fd)
    worst = 0.0
    for a in range(len(U)):
        for b in range(a + 1, len(U)):
            du = np.linalg.norm(U[a] - U[b])
            if du > 0:
                worst = max(worst, float(np.linalg.norm(J[a] - J[b]) / du))
    return worst


def inclusion_constant(chart: Chart, samples: int = 20, seed: int = 0) -> float:
    """C with ``Phi(B(0, delta)) in B_d(x0, C delta)``.

    ``Phi(u)`` is reached by the control ``Y_I`` coefficients ``beta^T u`` along
    the chart path, whose sup is at most ``|u| max |beta|``; the constant is the
    largest operator norm of beta over sampled chart points.
    """
    X = chart.phi(chart.ball_samples(samples, seed))
    B = beta_matrices(chart.family, chart.basis, np.concatenate([chart.x0[None], X]))
    return float(np.max(np.linalg.norm(B, ord=2, axis=(1, 2))))


@dataclass
class SliceReport:
    sigma: float
    max_residual: float
    probes: int
    inconclusive: int
    worst_start: list | None = None
    worst_end: list | None = None

    @property
    def conclusive(self) -> bool:
        return self.inconclusive < self.probes

    def to_json(self) -> dict:
        return {
            "sigma": self.sigma,
            "max_residual": self.max_residual,
            "probes": self.probes,
            "inconclusive": self.inconclusive,
            "worst_start": self.worst_start,
            "worst_end": self.worst_end,
        }


def project(chart: Chart, Y) -> tuple[np.ndarray, np.ndarray]:
    """Chart parameters of the points nearest Y along the K-coordinates, and their images.

    Starts from ``u = y_K - x0_K`` and applies up to PROJECTION_STEPS
    corrections ``u <- u + (y_K - Phi_K(u))``.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    K = list(chart.basis.K)
    U = Y[:, K] - chart.x0[K]
    X = chart.phi(U)
    for _ in range(PROJECTION_STEPS):
        corr = Y[:, K] - X[:, K]
        if np.max(np.abs(corr)) <= 1e-13:
            break
        U = U + corr
        X = chart.phi(U)
    return U, X


def slice_audit(chart: Chart, sigma: float, probes: int = 40, seed: int = 0, h: float | None = None,
                segments: int = 4) -> SliceReport:
    """Max distance from endpoints of budget-sigma subunit paths to the chart image.

    Paths start at chart points ``Phi(u)`` with ``|u| <= delta - sigma``; the
    controls are the constant primitive moves ``+-e_j`` and random laws.
    Endpoints whose projection leaves the parameter ball are counted as
    inconclusive and left out of the max.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    fam = chart.family
    q = fam.q
    rng = np.random.default_rng(seed)
    r0 = max(chart.delta - sigma, 0.0)
    starts_u = chart.ball_samples(max(1, probes // (2 * q + 1)), seed, radius=r0)
    if r0 > 0:
        extremes = np.concatenate([r0 * 0.999 * np.eye(chart.p), -r0 * 0.999 * np.eye(chart.p)])
        starts_u = np.concatenate([np.zeros((1, chart.p)), extremes, starts_u])
    starts = chart.phi(starts_u)
    laws = []
    for j in range(q):
        for sgn in (1.0, -1.0):
            laws.append(ControlLaw.uniform(np.repeat(sgn * np.eye(q)[j][None], segments, axis=0), sigma))
    while len(laws) < max(probes // len(starts), 2 * q + 1):
        laws.append(ControlLaw.random(q, sigma, segments, rng))
    h = h or default_step(sigma)
    ends = []
    start_of = []
    for i, x in enumerate(starts):
        _, S = integrate_laws(fam, laws, x, h)
        ends.append(S[:, -1, :])
        start_of += [i] * len(laws)
    ends = np.concatenate(ends)
    U, X = project(chart, ends)
    inside = np.linalg.norm(U, axis=1) < chart.delta
    res = np.linalg.norm(ends - X, axis=1)
    res[~inside] = -1.0
    worst = int(np.argmax(res))
    if res[worst] < 0:
        return SliceReport(sigma, math.nan, len(ends), int((~inside).sum()))
    return SliceReport(sigma, float(res[worst]), len(ends), int((~inside).sum()),
                       starts[start_of[worst]].tolist(), ends[worst].tolist())


@dataclass
class ChartReport:
    basis: dict
    delta: float
    tangency: float
    beta_defect: float
    span: dict
    quadruple: float
    injectivity: float
    jacobian_lipschitz: float
    inclusion_constant: float
    slice: dict | None
    halvings: int

    @property
    def passed(self) -> bool:
        ok = self.tangency <= TANGENCY_TOL and self.beta_defect <= BETA_TOL and self.span["passed"]
        ok = ok and self.quadruple <= 1e-3 and self.injectivity >= 0.5
        if self.slice is not None:
            r = self.slice["max_residual"]
            ok = ok and r == r and r <= 1e-5
        return ok

    def to_json(self) -> dict:
        return {
            "basis": self.basis,
            "delta": self.delta,
            "tangency": self.tangency,
            "beta_defect": self.beta_defect,
            "span": self.span,
            "quadruple_per_ts": self.quadruple,
            "injectivity": self.injectivity,
            "jacobian_lipschitz": self.jacobian_lipschitz,
            "inclusion_constant": self.inclusion_constant,
            "slice": self.slice,
            "halvings": self.halvings,
            "passed": self.passed,
        }


def audit_chart(chart: Chart, sigma: float | None = 0.05, seed: int = 0) -> ChartReport:
    slice_rep = slice_audit(chart, sigma, seed=seed).to_json() if sigma else None
    return ChartReport(
        chart.basis.to_json(), chart.delta, tangency_audit(chart, seed=seed), beta_audit(chart, seed=seed),
        span_agreement_audit(chart, seed=seed), quadruple_audit(chart, seed=seed), injectivity_audit(chart),
        jacobian_lipschitz(chart, seed=seed), inclusion_constant(chart, seed=seed), slice_rep, 0,
    )


def fit_chart(family: FieldFamily, x0, tol_rel: float = DEFAULT_TOL_REL, p: int | None = None,
              sigma: float | None = 0.05, seed: int = 0, h: float | None = None) -> tuple[Chart, ChartReport]:
    """Build a chart with automatic delta and halve it on any audit failure (floor DELTA_FLOOR)."""
    chart = build_chart(family, x0, tol_rel, p, None, h)
    halvings = 0
    while True:
        try:
            rep = audit_chart(chart, sigma if sigma is None or sigma < chart.delta else None, seed)
        except ShrinkRadiusError:
            rep = None
        if rep is not None and (rep.passed or chart.delta / 2 < DELTA_FLOOR):
            rep.halvings = halvings
            return chart, rep
        if chart.delta / 2 < DELTA_FLOOR:
            raise ShrinkRadiusError("no admissible chart radius above the floor")
        chart = Chart(family, chart.basis, chart.delta / 2, chart.h, chart.meta)
        halvings += 1
