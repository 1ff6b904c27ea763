"""Rank stability along subunit paths, orbit sampling and control-distance bounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import PreconditionError
from .fields import FieldFamily
from .flows import ControlLaw, integrate_controls, integrate_laws, integrate_subunit
from .involutivity import least_norm
from .multivector import DEFAULT_TOL_REL, index_sets, minors_batch, ranks

# Orbit audits compare minors against tol_rel = 1e-8.  On a kink locus RK4
# stages leave the locus by O(dt^2), so the default step is small enough that
# the accumulated drift (O(h^2) per unit time) stays well below that level.
ORBIT_STEP = 2.5e-4
C_RANGE = (1e-3, 1e3)
BISECTIONS = 60
ZERO_TOL = 1e-8


def random_laws(q: int, T: float, segments: int, count: int, seed: int = 0) -> list[ControlLaw]:
    """``count`` random subunit laws with shared breakpoints (deterministic given seed)."""
    rng = np.random.default_rng(seed)
    return [ControlLaw.random(q, T, segments, rng) for _ in range(count)]


def _lambda_vectors(family: FieldFamily, states: np.ndarray, p: int) -> np.ndarray:
    """(..., n) states -> (..., C(q,p)*C(n,p)) flattened Lambda_p."""
    flat = states.reshape(-1, family.n)
    lam = minors_batch(family.frames(flat), p).reshape(len(flat), -1)
    return lam.reshape(states.shape[:-1] + (lam.shape[1],))


def _trajectories(family: FieldFamily, x, laws: Sequence[ControlLaw], h: float):
    """Group laws by breakpoints and integrate each group as a batch; yields (times, states (n_t, n))."""
    groups: dict[bytes, list[int]] = {}
    for i, law in enumerate(laws):
        groups.setdefault(law.breakpoints.tobytes(), []).append(i)
    out = [None] * len(laws)
    for idx in groups.values():
        times, states = integrate_laws(family, [laws[i] for i in idx], x, h)
        for a, i in enumerate(idx):
            out[i] = (times, states[a])
    return out


# ------------------------------------------------------------------ rank stability


@dataclass
class RankStabilityRecord:
    x: np.ndarray
    p: int
    lambda_norm: float
    times: list  # per law
    curves: list  # per law: |Lambda_p(gamma(t)) - Lambda_p(x)|
    lambda_curves: list  # per law: |Lambda_p(gamma(t))|
    C_hat: float
    frame_scale: float
    laws: list = field(default_factory=list)

    @property
    def zero_case(self) -> bool:
        return self.lambda_norm == 0.0

    @property
    def max_drift(self) -> float:
        return max((float(np.max(c)) for c in self.curves), default=0.0)

    @property
    def passed(self) -> bool:
        if self.zero_case:
            return self.max_drift <= ZERO_TOL * self.frame_scale
        return math.isfinite(self.C_hat)

    def bound(self, t) -> np.ndarray:
        return self.lambda_norm * np.expm1(self.C_hat * np.asarray(t, dtype=float))

    def to_json(self) -> dict:
        return {
            "x": self.x.tolist(),
            "p": self.p,
            "lambda_norm": self.lambda_norm,
            "paths": len(self.curves),
            "C_hat": self.C_hat if math.isfinite(self.C_hat) else None,
            "max_drift": self.max_drift,
            "zero_case": self.zero_case,
            "passed": self.passed,
        }


def _bound_holds(C: float, a: float, times_curves) -> bool:
    for t, c in times_curves:
        win = t <= 1.0 / C
        if np.any(c[win] > a * np.expm1(C * t[win]) * (1 + 1e-12) + 1e-15):
            return False
    return True


def fit_gronwall_constant(a: float, times_curves, c_range=C_RANGE) -> float:
    """Smallest C in ``c_range`` with ``curve <= a (e^{Ct} - 1)`` on ``[0, 1/C]`` (bisection in log C).

    Larger C raises the bound and shrinks the window, so validity is monotone
    in C.  Returns inf when the upper end of the range does not validate.
    """
    lo, hi = c_range
    if not _bound_holds(hi, a, times_curves):
        return math.inf
    if _bound_holds(lo, a, times_curves):
        return lo
    for _ in range(BISECTIONS):
        mid = math.sqrt(lo * hi)
        if _bound_holds(mid, a, times_curves):
            hi = mid
        else:
            lo = mid
    return hi


def rank_stability_audit(
    family: FieldFamily, x, laws: Sequence[ControlLaw], p: int, h: float | None = None
) -> RankStabilityRecord:
    """Track ``|Lambda_p(gamma(t)) - Lambda_p(x)|`` along each law and fit the smallest Gronwall constant."""
    x = np.asarray(x, dtype=float)
    h = h or ORBIT_STEP
    for law in laws:
        if not law.is_subunit():
            raise PreconditionError("rank stability is audited along subunit laws only")
    lam0 = _lambda_vectors(family, x, p)
    a = float(np.linalg.norm(lam0))
    scale = max(1.0, float(np.linalg.norm(family.frames(x[None])[0])) ** p)
    times, curves, lcurves = [], [], []
    for t, states in _trajectories(family, x, laws, h):
        lam = _lambda_vectors(family, states, p)
        times.append(t)
        curves.append(np.linalg.norm(lam - lam0, axis=1))
        lcurves.append(np.linalg.norm(lam, axis=1))
    C = fit_gronwall_constant(a, list(zip(times, curves))) if a > 0 else math.nan
    return RankStabilityRecord(x, p, a, times, curves, lcurves, C, scale, list(laws))


@dataclass
class WedgeDriftRecord:
    I: tuple
    eta: float
    C: float
    wedge_norm: float
    times: np.ndarray
    curve: np.ndarray
    t_max: float
    C_fit: float

    @property
    def bound(self) -> np.ndarray:
        return self.C * self.times / self.eta * self.wedge_norm

    @property
    def passed(self) -> bool:
        win = self.times <= self.t_max
        return bool(np.all(self.curve[win] <= self.bound[win] * (1 + 1e-12) + 1e-15))

    def to_json(self) -> dict:
        return {"I": [i + 1 for i in self.I], "eta": self.eta, "C": self.C, "C_fit": self.C_fit,
                "wedge_norm": self.wedge_norm, "t_max": self.t_max, "passed": self.passed}


def single_wedge_drift(
    family: FieldFamily, x, I, law: ControlLaw, eta: float, C: float | None = None,
    t_max: float = 0.1, h: float | None = None,
) -> WedgeDriftRecord:
    """Check ``|Y_I(gamma(t)) - Y_I(x)| <= C (t/eta) |Y_I(x)|`` for t <= t_max.

    ``C_fit`` is the smallest constant that works on the sampled curve; when
    ``C`` is not given it is used as the checked constant.
    """
    x = np.asarray(x, dtype=float)
    I = tuple(I)
    p = len(I)
    rows = index_sets(p, family.q)
    F0 = family.frames(x[None])
    M0 = minors_batch(F0, p)[0]
    norms = np.linalg.norm(M0, axis=1)
    wI = norms[rows.index(I)]
    if not wI > eta * norms.max():
        raise PreconditionError(f"|Y_I| = {wI:.6g} is not above eta * max = {eta * norms.max():.6g}")
    h = h or ORBIT_STEP
    traj = integrate_subunit(family, law, x, h)
    M = minors_batch(family.frames(traj.states), p)[:, rows.index(I)]
    curve = np.linalg.norm(M - M0[rows.index(I)], axis=1)
    t = traj.times
    win = (t > 0) & (t <= t_max)
    C_fit = float(np.max(curve[win] * eta / (t[win] * wI))) if win.any() else 0.0
    return WedgeDriftRecord(I, eta, C_fit if C is None else C, float(wI), t, curve, t_max, C_fit)


# ------------------------------------------------------------------ orbit sampling


@dataclass
class OrbitSample:
    x0: np.ndarray
    points: np.ndarray  # (N, n); row 0 is x0
    parents: np.ndarray  # (N,), -1 for x0
    controls: np.ndarray  # (N, q) constant control of the move that reached the point
    levels: np.ndarray
    h_mov: float
    h: float
    ranks: np.ndarray
    tol_rel: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def d_upper(self) -> np.ndarray:
        """Witness budgets: level * h_mov (every move is a unit control for time h_mov)."""
        norms = np.linalg.norm(self.controls, axis=1)
        out = np.zeros(len(self))
        for i in range(1, len(self)):
            out[i] = out[self.parents[i]] + self.h_mov * norms[i]
        return out

    def witness(self, i: int) -> ControlLaw | None:
        chain = []
        while i > 0:
            chain.append(self.controls[i])
            i = int(self.parents[i])
        if not chain:
            return None
        vals = np.array(chain[::-1])
        return ControlLaw(self.h_mov * np.arange(len(vals) + 1), vals)

    def rank_histogram(self) -> dict[int, int]:
        vals, counts = np.unique(self.ranks, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def write_csv(self, path) -> None:
        n = self.points.shape[1]
        d = self.d_upper
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{a + 1}" for a in range(n)] + ["rank", "d_upper"])
            for x, r, du in zip(self.points, self.ranks, d):
                w.writerow([repr(float(v)) for v in x] + [int(r), repr(float(du))])


def _moves(q: int, branching: int, rng: np.random.Generator, primitive_only: bool) -> np.ndarray:
    eye = np.eye(q)
    prim = np.concatenate([eye, -eye])
    extra = max(0, branching - 2 * q)
    if primitive_only or extra == 0:
        return prim[:branching] if branching < 2 * q else prim
    d = rng.normal(size=(extra, q))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.concatenate([prim, d])


def _bfs(family, x0, h_mov, depth, branching, seed, h, primitive_only):
    rng = np.random.default_rng(seed)
    res = h_mov / 4
    x0 = np.asarray(x0, dtype=float)
    points = [x0]
    parents = [-1]
    controls = [np.zeros(family.q)]
    levels = [0]
    seen = {tuple(np.floor(x0 / res).astype(np.int64))}
    frontier = [0]
    for level in range(1, depth + 1):
        if not frontier:
            break
        moves = _moves(family.q, branching, rng, primitive_only)
        starts = np.array([points[i] for i in frontier])
        X0 = np.repeat(starts, len(moves), axis=0)
        U = np.tile(moves, (len(frontier), 1))[:, None, :]
        ends = integrate_controls(family, X0, [h_mov], U, h)
        new = []
        for r, x in enumerate(ends):
            key = tuple(np.floor(x / res).astype(np.int64))
            if key in seen:
                continue
            seen.add(key)
            points.append(x)
            parents.append(frontier[r // len(moves)])
            controls.append(moves[r % len(moves)])
            levels.append(level)
            new.append(len(points) - 1)
        frontier = new
    return np.array(points), np.array(parents), np.array(controls), np.array(levels)


def orbit_sample(
    family: FieldFamily,
    x0,
    h_mov: float = 0.25,
    depth: int = 6,
    branching: int | None = None,
    seed: int = 0,
    h: float | None = None,
    tol_rel: float = DEFAULT_TOL_REL,
    compare_primitive: bool = False,
) -> OrbitSample:
    """Breadth-first cloud of points reachable from x0 by unit moves of duration ``h_mov``.

    Each level applies the primitive moves ``+-e_j`` (flows of ``+-Y_j``) and
    ``branching - 2q`` random unit directions to every new point of the
    previous level; endpoints falling in an already visited cell of side
    ``h_mov/4`` are dropped.  With ``compare_primitive`` a second cloud using
    primitive moves only is grown and the fraction of points farther than
    ``h_mov`` from it is reported as ``meta["primitive_gap"]``.
    """
    if h_mov <= 0 or depth < 1:
        raise ValueError("h_mov and depth must be positive")
    branching = branching or 2 * family.q + 4
    h = h or ORBIT_STEP
    pts, par, ctl, lev = _bfs(family, x0, h_mov, depth, branching, seed, h, False)
    sample = OrbitSample(np.asarray(x0, float), pts, par, ctl, lev, h_mov, h,
                         ranks(family.frames(pts), tol_rel), tol_rel,
                         {"branching": branching, "depth": depth, "seed": seed})
    if compare_primitive:
        prim = _bfs(family, x0, h_mov, depth, 2 * family.q, seed, h, True)[0]
        dist, _ = cKDTree(prim).query(pts)
        sample.meta["primitive_points"] = int(len(prim))
        sample.meta["primitive_gap"] = float(np.mean(dist > h_mov))
    return sample


@dataclass
class RankConstancyReport:
    histogram: dict
    reference_rank: int
    flags: int
    tol_rel: float
    flagged_points: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return len(self.histogram) == 1

    def to_json(self, max_points: int = 20) -> dict:
        return {
            "histogram": {str(k): v for k, v in self.histogram.items()},
            "reference_rank": self.reference_rank,
            "flags": self.flags,
            "tol_rel": self.tol_rel,
            "flagged_points": self.flagged_points[:max_points],
            "passed": self.passed,
        }


def rank_constancy_audit(sample: OrbitSample, family: FieldFamily, tol_rel: float = DEFAULT_TOL_REL):
    """Ranks over the cloud; points whose rank differs from the seed point's are flagged."""
    if len(sample) == 0:
        raise ValueError("empty sample")
    r = ranks(family.frames(sample.points), tol_rel)
    hist = {int(v): int(c) for v, c in zip(*np.unique(r, return_counts=True))}
    bad = np.flatnonzero(r != r[0])
    return RankConstancyReport(hist, int(r[0]), int(len(bad)), tol_rel, sample.points[bad].tolist())


# ------------------------------------------------------------------ control distance

H_SEARCH = 0.02
SEARCH_STEPS = 8
INNER_TOL_FACTOR = 1e-2
STEP_MIN = 1e-10
RHO_MIN = 1e-3


@dataclass
class DistanceEstimate:
    distance: float
    law: ControlLaw | None
    reached: bool
    penalty: float
    evaluations: int
    source: str = ""

    def to_json(self) -> dict:
        return {
            "distance": self.distance if self.reached else None,
            "reached": self.reached,
            "penalty": self.penalty,
            "evaluations": self.evaluations,
            "source": self.source,
            "law": self.law.to_json() if self.law is not None else None,
        }


class _Problem:
    """Endpoint penalty of time-1 controls ``w`` (S, q) with fixed duration fractions."""

    def __init__(self, family, x, y, fracs, fine: bool = False):
        self.family, self.x, self.y = family, x, y
        self.fracs = np.asarray(fracs, dtype=float)
        self.fine = fine
        self.evals = 0

    def step(self, R: float) -> float:
        # coarse: a fixed number of RK4 steps per segment; fine: H_SEARCH in physical time
        if self.fine:
            return H_SEARCH / max(1.0, R)
        return 1.0 / (SEARCH_STEPS * len(self.fracs))

    def penalties(self, W: np.ndarray, R: float) -> np.ndarray:
        self.evals += 1
        X0 = np.repeat(self.x[None], len(W), axis=0)
        ends = integrate_controls(self.family, X0, self.fracs, W, self.step(R))
        return np.linalg.norm(ends - self.y, axis=1)


def _project(W: np.ndarray, R: float) -> np.ndarray:
    norms = np.linalg.norm(W, axis=-1, keepdims=True)
    return W * np.minimum(1.0, R / np.maximum(norms, 1e-300))


def _compass(prob: _Problem, w, p, R, target, step, max_iter):
    """Compass search on the endpoint penalty inside the radius-R ball (all coordinate moves per batch)."""
    S, q = w.shape
    dirs = np.concatenate([np.eye(S * q), -np.eye(S * q)]).reshape(-1, S, q)
    it = 0
    # stop once the step is negligible next to the remaining penalty: a local
    # minimum of the penalty above the target, not worth refining
    while p > target and step > max(STEP_MIN * max(1.0, R), 1e-3 * (p - target)) and it < max_iter:
        cands = _project(w[None] + step * dirs, R)
        ps = prob.penalties(cands, R)
        best = int(np.argmin(ps))
        if ps[best] < p:
            w, p = cands[best], float(ps[best])
            step *= 1.5
        else:
            step *= 0.5
        it += 1
    return w, p


def _descend(prob: _Problem, w, target, max_iter, max_evals):
    """Reach (double R until the target is met) then shrink R while staying feasible."""
    R = max(float(np.max(np.linalg.norm(w, axis=1))), 1e-12)
    p = float(prob.penalties(w[None], R)[0])
    for _ in range(8):
        w, p = _compass(prob, w, p, R, target, 0.25 * R, max_iter)
        if p <= target or prob.evals >= max_evals:
            break
        R *= 2.0
    if p > target:
        return w, p, False
    R = float(np.max(np.linalg.norm(w, axis=1)))
    rho = 0.25
    while rho >= RHO_MIN and prob.evals < max_evals:
        R2 = R * (1 - rho)
        w2 = _project(w, R2)
        p2 = float(prob.penalties(w2[None], R2)[0])
        w2, p2 = _compass(prob, w2, p2, R2, target, rho * R, max_iter)
        if p2 <= target:
            w, p, R = w2, p2, float(np.max(np.linalg.norm(w2, axis=1)))
        else:
            rho *= 0.5
    return w, p, True


def _polish(prob: _Problem, w, target, max_iter):
    """Restore the target on the fine model, letting R grow slightly if needed."""
    R = float(np.max(np.linalg.norm(w, axis=1)))
    p = float(prob.penalties(w[None], R)[0])
    for grow in (0.0, 1e-4, 1e-3, 1e-2):
        if p <= target:
            return w, p, True
        R2 = R * (1 + grow)
        w, p = _compass(prob, w, p, R2, target, max(p, target), max_iter)
    return w, p, p <= target


def _law_from(w: np.ndarray, fracs: np.ndarray) -> ControlLaw:
    R = float(np.max(np.linalg.norm(w, axis=1)))
    bp = np.concatenate([[0.0], np.cumsum(fracs)]) * R
    bp[-1] = R
    return ControlLaw(bp, w / R)


def cc_distance_upper(
    family: FieldFamily,
    x,
    y,
    segments: int = 4,
    restarts: int = 4,
    seed: int = 0,
    h: float | None = None,
    tol: float = 1e-4,
    warm_starts: Sequence[ControlLaw] = (),
    max_iter: int = 60,
    max_evals: int = 600,
) -> DistanceEstimate:
    """Upper bound for the control distance from x to y by search over piecewise-constant controls.

    Controls are parametrized on the unit time interval: ``w_s`` on the s-th
    fraction, and the corresponding subunit law runs ``u = w / max|w|`` for
    time ``max|w|``.  Each candidate (the warm starts, then ``restarts`` seeded
    starts) is driven to the endpoint by compass search and then shrunk.  The
    best candidate whose re-integration at step h lands within ``tol`` of y
    wins; ties go to the lexicographically smaller control table.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if segments < 1:
        raise ValueError("segments must be positive")
    if np.linalg.norm(x - y) <= tol:
        return DistanceEstimate(0.0, None, True, float(np.linalg.norm(x - y)), 0, "identity")
    target = tol * INNER_TOL_FACTOR
    starts = []
    for i, law in enumerate(warm_starts):
        starts.append((f"warm{i}", law.durations / law.T, law.values * law.T))
    fr = np.full(segments, 1.0 / segments)
    F0 = family.frames(x[None])[0]
    u0 = least_norm(F0, y - x).coefficients
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        if r == 0:
            W = np.repeat(u0[None], segments, axis=0)
        else:
            scale = max(np.linalg.norm(u0), np.linalg.norm(y - x))
            W = u0[None] + scale * rng.normal(size=(segments, family.q))
        if not np.any(W):
            W = np.full((segments, family.q), np.linalg.norm(y - x) / math.sqrt(family.q))
        starts.append((f"restart{r}", fr, W))

    best = None
    total = 0
    best_pen = math.inf
    for name, fracs, W in starts:
        prob = _Problem(family, x, y, fracs)
        w, p, ok = _descend(prob, np.array(W, dtype=float), target, max_iter, max_evals)
        total += prob.evals
        if ok:
            fine = _Problem(family, x, y, fracs, fine=True)
            w, p, ok = _polish(fine, w, target, max_iter)
            total += fine.evals
        best_pen = min(best_pen, p)
        if not ok:
            continue
        law = _law_from(w, fracs)
        end = integrate_subunit(family, law, x, h or None, relaxed=True).endpoint
        pen = float(np.linalg.norm(end - y))
        if pen > tol:
            continue
        cand = DistanceEstimate(law.T, law, True, pen, 0, name)
        if best is None or (cand.distance, law.values.ravel().tolist()) < (
            best.distance, best.law.values.ravel().tolist()
        ):
            best = cand
    if best is None:
        return DistanceEstimate(math.inf, None, False, best_pen, total, "unreached")
    best.evaluations = total
    return best
