"""Fixed-step flows of vector fields and of controlled families.

All integration uses the classical fourth-order Runge-Kutta step.  Families
with abs/sign/sqrt coefficients carry kink indicators; a step across which an
indicator changes strict sign (outside a band of width dt^2) is redone with
``REFINE`` sub-steps, nested at most twice, which shrinks the one-step error
of a kink crossing by about ``REFINE^2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, PreconditionError
from .fields import FieldFamily, VectorField

BLOWUP = 1e6
REFINE = 32
REFINE_DEPTH = 2
KINK_DEADBAND = 1e-12
SUBUNIT_SLACK = 1e-12


def default_step(T: float) -> float:
    return 1e-3 * max(1.0, abs(T))


@dataclass(frozen=True)
class ControlLaw:
    """Piecewise-constant control: ``values[i]`` on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)
        if bp.ndim != 1 or len(bp) != len(vals) + 1:
            raise ValueError("need one more breakpoint than control values")
        if bp[0] != 0.0 or np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must start at 0 and increase strictly")

    @classmethod
    def constant(cls, u, T: float) -> "ControlLaw":
        return cls(np.array([0.0, T]), np.atleast_2d(np.asarray(u, dtype=float)))

    @classmethod
    def uniform(cls, values, T: float) -> "ControlLaw":
        values = np.atleast_2d(np.asarray(values, dtype=float))
        return cls(np.linspace(0.0, T, len(values) + 1), values)

    @classmethod
    def random(cls, q: int, T: float, segments: int, rng: np.random.Generator) -> "ControlLaw":
        """Random subunit law: directions uniform on the sphere, magnitudes uniform in [0, 1]."""
        d = rng.normal(size=(segments, q))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = rng.random((segments, 1))
        return cls.uniform(d * r, T)

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def q(self) -> int:
        return self.values.shape[1]

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def bound(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    @property
    def budget(self) -> float:
        """``T * max|u|``: an upper bound for the control distance to the endpoint."""
        return self.T * self.bound

    def is_subunit(self) -> bool:
        return self.bound <= 1.0 + SUBUNIT_SLACK

    def then(self, other: "ControlLaw") -> "ControlLaw":
        bp = np.concatenate([self.breakpoints, self.T + other.breakpoints[1:]])
        return ControlLaw(bp, np.concatenate([self.values, other.values]))

    def value_at(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.values[min(max(i, 0), len(self.values) - 1)]

    def to_json(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    law: ControlLaw | None
    h: float
    method: str = "rk4"
    meta: dict = field(default_factory=dict)

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def budget(self) -> float:
        return self.law.budget if self.law is not None else float(abs(self.times[-1] - self.times[0]))

    def write_csv(self, path) -> None:
        n = self.states.shape[1]
        q = self.law.q if self.law is not None else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{a + 1}" for a in range(n)] + [f"u{j + 1}" for j in range(q)])
            for t, x in zip(self.times, self.states):
                u = self.law.value_at(t).tolist() if self.law is not None else []
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])


# ------------------------------------------------------------------ engine
#
# The engine keeps states in column layout (n, m) so that compiled kernels
# see one contiguous array per coordinate.  Public functions take (m, n).

Rhs = Callable[[np.ndarray, np.ndarray | None], np.ndarray]
Kinks = Callable[[np.ndarray], np.ndarray | None] | None


def _strict_signs(k: np.ndarray, band: float = KINK_DEADBAND) -> np.ndarray:
    s = np.sign(k)
    s[np.abs(k) <= band] = 0.0
    return s


def _band(dt: float) -> float:
    # A state riding along a kink locus picks up O(dt^3) sign noise from the
    # RK stages; a genuine crossing moves the argument by O(dt).  Flips inside
    # a dt^2 band are left alone: their one-step error is O(dt^3) anyway.
    return max(KINK_DEADBAND, dt * dt)


def _rk4(rhs: Rhs, X, U, dt):
    k1 = rhs(X, U)
    k2 = rhs(X + (0.5 * dt) * k1, U)
    k3 = rhs(X + (0.5 * dt) * k2, U)
    k4 = rhs(X + dt * k3, U)
    return X + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _stages(rhs: Rhs, X, U, dt):
    """The points at which one RK4 step evaluates the right-hand side."""
    pts = [X]
    k = rhs(X, U)
    for c in (0.5, 0.5, 1.0):
        pts.append(X + (c * dt) * k)
        k = rhs(pts[-1], U)
    return pts


def _refine(rhs: Rhs, kinks: Kinks, X, U, dt, depth):
    for _ in range(REFINE):
        X, _ = _advance(rhs, kinks, X, U, dt / REFINE, None, depth + 1)
    return X


def _advance(rhs: Rhs, kinks: Kinks, X, U, dt, s0=None, depth=0):
    """One step; returns the new state and the strict kink signs there (or None)."""
    Xn = _rk4(rhs, X, U, dt)
    if kinks is None:
        return Xn, None
    band = _band(dt)
    if s0 is None:
        s0 = _strict_signs(kinks(X), band)
    s1 = _strict_signs(kinks(Xn), band)
    if depth >= REFINE_DEPTH:
        return Xn, s1
    crossed = np.any(s0 * s1 < 0, axis=0)
    if crossed.any():
        Us = U[:, crossed] if U is not None else None
        Xn[:, crossed] = _refine(rhs, kinks, X[:, crossed], Us, dt, depth)
        s1[:, crossed] = _strict_signs(kinks(Xn[:, crossed]), band)
    return Xn, s1


def _steps(duration: float, h: float) -> int:
    return max(1, math.ceil(duration / h - 1e-9))


def _guard(X, explain=None):
    if np.all(np.isfinite(X)) and np.max(np.abs(X), initial=0.0) <= BLOWUP:
        return
    if explain is not None and not np.all(np.isfinite(X)):
        explain()
    raise DivergenceError(f"state norm exceeded {BLOWUP:g}")


def run(
    rhs: Rhs, kinks: Kinks, X0, segments: Sequence[tuple[float, np.ndarray | None]], h: float,
    record: bool = True, explain=None,
):
    """Integrate a batch (column layout) through consecutive segments ``(duration, controls)``.

    ``X0`` is (n, m) and each control block (q, m).  Returns ``(times, states)``
    with states (m, N+1, n) when ``record``; otherwise the endpoints (n, m).
    ``explain(X)`` may raise a more specific error when the state goes non-finite.
    """
    X = np.array(X0, dtype=float)
    times = [0.0]
    states = [X.copy()] if record else None
    t = 0.0
    signs = None
    with np.errstate(all="ignore"):
        for duration, U in segments:
            k = _steps(duration, h)
            dt = duration / k
            signs = None  # the kink band depends on dt
            for i in range(k):
                Xprev = X
                X, signs = _advance(rhs, kinks, X, U, dt, signs)
                _guard(X, None if explain is None else (
                    lambda: [explain(P) for P in _stages(rhs, Xprev, U, dt)]))
                if record:
                    states.append(X.copy())
                    times.append(t + (i + 1) * dt)
            t += duration
    if record:
        return np.array(times), np.stack(states, axis=0).transpose(2, 0, 1)
    return X


def family_rhs(family: FieldFamily) -> Rhs:
    kernel = family.controlled_kernel

    def rhs(X, U):
        return np.array(kernel(X, U, np.zeros(X.shape[1])))

    return rhs


def _explain_family(family: FieldFamily):
    def explain(Xcol):
        family.frames(Xcol.T)  # raises EvaluationError naming the field when coefficients blow up

    return explain


def field_rhs(field: VectorField, sign: float = 1.0) -> Rhs:
    if field.col_fn is not None:
        g = field.col_fn
    else:
        g = lambda X: np.asarray(field.fn(X.T)).T  # noqa: E731
    if sign == 1.0:
        return lambda X, U: g(X)
    return lambda X, U: -g(X)


def _field_kinks(field: VectorField) -> Kinks:
    if field.col_kinks is not None:
        return field.col_kinks
    if field.kinks is None:
        return None

    def k(X):
        v = field.kinks(X.T)
        return None if v is None else np.asarray(v).T

    return k


# ------------------------------------------------------------------ public API


def flow(field: VectorField, X0, t: float, h: float | None = None) -> np.ndarray:
    """Endpoints ``e^{tV} x`` for a batch of starting points (negative t runs the negated field)."""
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    if t == 0:
        return X0.copy()
    h = h or default_step(t)
    rhs = field_rhs(field, math.copysign(1.0, t))
    return run(rhs, _field_kinks(field), X0.T, [(abs(t), None)], h, record=False).T


def integrate_field(field: VectorField, x0, t: float, h: float | None = None) -> Trajectory:
    h = h or default_step(t)
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    if t == 0:
        return Trajectory(np.zeros(1), x0.copy(), None, h)
    times, states = run(field_rhs(field, math.copysign(1.0, t)), _field_kinks(field), x0.T, [(abs(t), None)], h)
    return Trajectory(math.copysign(1.0, t) * times, states[0], None, h)


def integrate_controls(family: FieldFamily, X0, durations, controls, h: float, record: bool = False):
    """Batch of piecewise-constant controls sharing breakpoints.

    ``controls`` has shape (m, S, q) and ``durations`` shape (S,).
    """
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    controls = np.asarray(controls, dtype=float)
    segs = [(float(d), np.ascontiguousarray(controls[:, s, :].T)) for s, d in enumerate(durations)]
    kinks = family.col_kinks if family.has_kinks else None
    out = run(family_rhs(family), kinks, X0.T, segs, h, record=record, explain=_explain_family(family))
    return out if record else out.T


def integrate_subunit(
    family: FieldFamily, law: ControlLaw, x0, h: float | None = None, relaxed: bool = False
) -> Trajectory:
    """Solve ``x' = sum_j u_j(t) Y_j(x)`` from x0 under a piecewise-constant law."""
    if not relaxed and not law.is_subunit():
        raise PreconditionError(f"control bound {law.bound:.6g} exceeds 1; pass relaxed=True to allow it")
    if law.q != family.q:
        raise ValueError(f"law has {law.q} controls, family has {family.q} fields")
    h = h or default_step(law.T)
    times, states = integrate_controls(
        family, np.asarray(x0, float)[None], law.durations, law.values[None], h, record=True
    )
    return Trajectory(times, states[0], law, h)


def integrate_laws(family: FieldFamily, laws: Sequence[ControlLaw], x0, h: float | None = None):
    """Integrate many laws from one point; laws sharing breakpoints run as one batch.

    Returns ``(times, states)`` with states (m, N+1, n); all laws must share breakpoints.
    """
    bp = laws[0].breakpoints
    if any(len(l.breakpoints) != len(bp) or not np.array_equal(l.breakpoints, bp) for l in laws):
        raise ValueError("batched laws must share breakpoints")
    h = h or default_step(laws[0].T)
    X0 = np.repeat(np.asarray(x0, float)[None], len(laws), axis=0)
    controls = np.stack([l.values for l in laws])
    return integrate_controls(family, X0, laws[0].durations, controls, h, record=True)


def quadruple_defect(Vj: VectorField, Vk: VectorField, t: float, s: float, x, h: float | None = None) -> np.ndarray:
    """``e^{-tVj} e^{-sVk} e^{tVj} e^{sVk} x - x`` (rightmost flow first); batched over x."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    h = h or default_step(max(abs(t), abs(s)))
    Y = flow(Vk, X, s, h)
    Y = flow(Vj, Y, t, h)
    Y = flow(Vk, Y, -s, h)
    Y = flow(Vj, Y, -t, h)
    D = Y - X
    return D[0] if np.ndim(x) == 1 else D


def gronwall_bound(a: float, b: float, t: float) -> float:
    """``(a/b)(e^{bt} - 1)``, the bound implied by ``f(t) <= a t + b int_0^t f``."""
    if b <= 0:
        raise ValueError("b must be positive")
    if a < 0 or t < 0:
        raise ValueError("a and t must be non-negative")
    return a / b * math.expm1(b * t)
