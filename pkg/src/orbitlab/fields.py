"""Families of locally Lipschitz vector fields on R^n.

A family ``{Y_1, ..., Y_q}`` stores every coefficient ``g_j^a`` as an
:class:`~orbitlab.expr.Expression`.  Evaluation is compiled to numpy and works
on a single point (shape ``(n,)``) or on a batch of points (shape ``(m, n)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from .errors import EvaluationError, VariableIndexError
from .expr import Const, Expression, compile_many, kink_arguments, max_variable, to_numpy_source

KINK_JITTER = 1e-9
KINK_FIRE = 1e-12
H_FD = 1e-5


@dataclass(frozen=True)
class PointFrame:
    """The frame matrix ``Y_x`` (column j is ``Y_j(x)``) at a point."""

    point: np.ndarray
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def q(self) -> int:
        return self.matrix.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.matrix[:, j]


@dataclass(frozen=True, eq=False)
class FieldFamily:
    """q vector fields on R^n; ``components[j][a]`` is the a-th coefficient of Y_{j+1}."""

    n: int
    components: tuple[tuple[Expression, ...], ...]
    name: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("dimension must be positive")
        if not self.components:
            raise ValueError("a family needs at least one field")
        for j, field in enumerate(self.components):
            if len(field) != self.n:
                raise ValueError(f"field Y{j + 1} has {len(field)} components, expected {self.n}")
            for a, e in enumerate(field):
                if e.nvars > self.n:
                    raise VariableIndexError(
                        f"Y{j + 1} component {a + 1} uses x{e.nvars} but the dimension is {self.n}"
                    )

    @classmethod
    def from_strings(cls, fields: Sequence[Sequence[str]], name: str = "", n: int | None = None):
        comps = tuple(tuple(Expression.parse(s) for s in f) for f in fields)
        return cls(n if n is not None else len(comps[0]), comps, name)

    @property
    def q(self) -> int:
        return len(self.components)

    def to_strings(self) -> list[list[str]]:
        return [[str(e) for e in f] for f in self.components]

    def subfamily(self, order: Sequence[int], name: str | None = None) -> "FieldFamily":
        """Fields relabelled as ``Y_{order[0]}, Y_{order[1]}, ...`` (0-based indices)."""
        return FieldFamily(self.n, tuple(self.components[j] for j in order), name or self.name)

    # -- compiled kernels -------------------------------------------------

    @cached_property
    def _values_fn(self):
        return compile_many([e.root for f in self.components for e in f])

    @cached_property
    def _jac_fn(self):
        nodes = [e.diff(b + 1).root for f in self.components for e in f for b in range(self.n)]
        return compile_many(nodes)

    @cached_property
    def _kink_nodes(self):
        seen = {}
        for f in self.components:
            for e in f:
                for arg in kink_arguments(e.root):
                    seen.setdefault(str(Expression(arg)), arg)
        return list(seen.values())

    @cached_property
    def _kink_fn(self):
        return compile_many(self._kink_nodes) if self._kink_nodes else None

    @property
    def has_kinks(self) -> bool:
        return bool(self._kink_nodes)

    # Column-layout kernels for the integrators: ``x`` is (n, m), ``u`` is
    # (q, m) and ``z`` a zero array of length m; every entry is an m-array.

    @cached_property
    def controlled_kernel(self):
        """``(x, u, z) -> tuple`` of the n components of ``sum_j u_j Y_j(x)``."""
        comps = []
        for a in range(self.n):
            terms = []
            for j in range(self.q):
                node = self.components[j][a].root
                if isinstance(node, Const) and node.value == 0.0:
                    continue
                if isinstance(node, Const) and node.value == 1.0:
                    terms.append(f"u[{j}]")
                else:
                    terms.append(f"{to_numpy_source(node)} * u[{j}]")
            comps.append(" + ".join(terms) if terms else "z")
        return eval(f"lambda x, u, z: ({', '.join(comps)},)", {"np": np})  # noqa: S307

    def field_kernel(self, j: int):
        """``(x, z) -> tuple`` of the n components of Y_{j+1}(x)."""
        comps = []
        for e in self.components[j]:
            src = to_numpy_source(e.root)
            comps.append(f"{src} + z" if e.is_constant else src)
        return eval(f"lambda x, z: ({', '.join(comps)},)", {"np": np})  # noqa: S307

    @cached_property
    def kink_kernel(self):
        """``(x, z) -> tuple`` of kink-argument arrays, or None for smooth families."""
        if not self._kink_nodes:
            return None
        comps = []
        for node in self._kink_nodes:
            src = to_numpy_source(node)
            comps.append(f"{src} + z" if max_variable(node) == 0 else src)
        return eval(f"lambda x, z: ({', '.join(comps)},)", {"np": np})  # noqa: S307

    # -- evaluation ---------------------------------------------------------

    def frames(self, X) -> np.ndarray:
        """Frame matrices for a batch: ``X`` shape (m, n) -> (m, n, q)."""
        X = np.asarray(X, dtype=float)
        m = X.shape[0]
        with np.errstate(all="ignore"):
            vals = self._values_fn(X.T)
        out = np.empty((m, self.n, self.q))
        i = 0
        for j in range(self.q):
            for a in range(self.n):
                out[:, a, j] = vals[i]
                i += 1
        if not np.isfinite(out).all():
            bad = np.argwhere(~np.isfinite(out))[0]
            raise EvaluationError(
                f"non-finite coefficient at x={X[bad[0]].tolist()}", field=int(bad[2]), component=int(bad[1])
            )
        return out

    def evaluate(self, x) -> PointFrame:
        x = np.asarray(x, dtype=float).reshape(self.n)
        return PointFrame(x.copy(), self.frames(x[None, :])[0])

    def jacobians(self, X) -> np.ndarray:
        """a.e. Jacobians ``d g_j^a / d x_b`` for a batch: (m, n) -> (m, q, n, n)."""
        X = np.asarray(X, dtype=float)
        m = X.shape[0]
        with np.errstate(all="ignore"):
            vals = self._jac_fn(X.T)
        out = np.empty((m, self.q, self.n, self.n))
        i = 0
        for j in range(self.q):
            for a in range(self.n):
                for b in range(self.n):
                    out[:, j, a, b] = vals[i]
                    i += 1
        if not np.isfinite(out).all():
            bad = np.argwhere(~np.isfinite(out))[0]
            raise EvaluationError(
                f"non-finite derivative at x={X[bad[0]].tolist()}", field=int(bad[1]), component=int(bad[2])
            )
        return out

    def kink_args(self, X) -> np.ndarray | None:
        """Values of every abs/sign/sqrt argument, shape (m, k); None for smooth families."""
        if self._kink_fn is None:
            return None
        X = np.asarray(X, dtype=float)
        with np.errstate(all="ignore"):
            vals = self._kink_fn(X.T)
        return np.stack([np.broadcast_to(v, X.shape[:1]) for v in vals], axis=1)

    def field(self, j: int) -> "VectorField":
        """The single field Y_{j+1} as a batched vector field."""

        def f(X, _j=j):
            return self.frames(X)[:, :, _j]

        kernel = self.field_kernel(j)

        def col(X):
            with np.errstate(all="ignore"):
                return np.array(kernel(X, np.zeros(X.shape[1])))

        return VectorField(
            self.n, f, self.kink_args if self.has_kinks else None, f"{self.name}:Y{j + 1}",
            col_fn=col, col_kinks=self.col_kinks if self.has_kinks else None,
        )

    def col_kinks(self, X) -> np.ndarray | None:
        """Kink arguments in column layout: (n, m) -> (k, m)."""
        if self.kink_kernel is None:
            return None
        with np.errstate(all="ignore"):
            return np.array(self.kink_kernel(X, np.zeros(X.shape[1])))


@dataclass(frozen=True)
class VectorField:
    """A batched vector field ``f(X) -> (m, n)``, optionally carrying kink indicators."""

    n: int
    fn: Callable[[np.ndarray], np.ndarray]
    kinks: Callable[[np.ndarray], np.ndarray | None] | None = None
    name: str = ""
    # optional column-layout versions ((n, m) in, (n, m) / (k, m) out) used by the integrators
    col_fn: Callable[[np.ndarray], np.ndarray] | None = None
    col_kinks: Callable[[np.ndarray], np.ndarray | None] | None = None

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.fn(X[None, :])[0]
        return self.fn(X)

    def scaled(self, c: float) -> "VectorField":
        col = None if self.col_fn is None else (lambda X, _g=self.col_fn: c * _g(X))
        return VectorField(
            self.n, lambda X, _f=self.fn: c * _f(X), self.kinks, f"{c}*{self.name}",
            col_fn=col, col_kinks=self.col_kinks,
        )

    @classmethod
    def from_strings(cls, components: Sequence[str], name: str = "") -> "VectorField":
        fam = FieldFamily.from_strings([components], name=name)
        return fam.field(0)


def evaluate(family: FieldFamily, x) -> PointFrame:
    return family.evaluate(x)


def kink_margin(family: FieldFamily, x) -> float:
    """Smallest |argument| of any abs/sign/sqrt node at x (inf for smooth families)."""
    k = family.kink_args(np.asarray(x, float).reshape(1, -1))
    if k is None or k.size == 0:
        return float("inf")
    return float(np.min(np.abs(k)))


def avoid_kinks(family: FieldFamily, x, jitter: float = KINK_JITTER, fire: float = KINK_FIRE) -> np.ndarray:
    """Return x, or x nudged by ``jitter`` off any kink locus it sits on."""
    x = np.asarray(x, dtype=float).reshape(family.n)
    if kink_margin(family, x) > fire:
        return x
    n = family.n
    # fixed, deterministic directions; a few rotations suffice off measure-zero sets
    for t in range(1, 9):
        d = np.array([np.sin(1.0 + t * (a + 1) * 0.7548776662) for a in range(n)])
        d /= np.linalg.norm(d)
        y = x + jitter * d
        if kink_margin(family, y) > fire:
            return y
    return x + jitter * d


def jacobian_ae(family: FieldFamily, j: int, x) -> np.ndarray:
    """``d g_j^a / d x_b`` at x from the a.e. derivative expressions (j is 0-based)."""
    x = np.asarray(x, dtype=float).reshape(1, family.n)
    return family.jacobians(x)[0, j]


def jacobian_fd(family: FieldFamily, j: int, x, h: float = H_FD) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = family.n
    pts = np.concatenate([x + h * np.eye(n), x - h * np.eye(n)])
    cols = family.frames(pts)[:, :, j]
    return ((cols[:n] - cols[n:]) / (2 * h)).T


def lipschitz_estimate(family: FieldFamily, box, samples: int = 1000, seed: int = 0) -> np.ndarray:
    """Largest sampled difference quotient ``|g_j(x) - g_j(y)| / |x - y|`` per field.

    Half of the pairs are spread over the whole box, the other half are local
    pairs at 1% of the box size, which find steep directions faster.
    """
    lo, hi = as_box(box, family.n)
    rng = np.random.default_rng(seed)
    m_global = samples // 2
    m_local = samples - m_global
    X = lo + (hi - lo) * rng.random((samples, family.n))
    Yg = lo + (hi - lo) * rng.random((m_global, family.n))
    step = rng.normal(size=(m_local, family.n))
    step *= (0.01 * np.linalg.norm(hi - lo)) / np.linalg.norm(step, axis=1, keepdims=True)
    Yl = np.clip(X[m_global:] + step, lo, hi)
    Y = np.concatenate([Yg, Yl])
    dist = np.linalg.norm(X - Y, axis=1)
    keep = dist > 0
    FX = family.frames(X[keep])
    FY = family.frames(Y[keep])
    ratio = np.linalg.norm(FX - FY, axis=1) / dist[keep, None]
    return ratio.max(axis=0) if ratio.size else np.zeros(family.q)


def as_box(box, n: int) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(box, dtype=float)
    if b.shape != (n, 2):
        raise ValueError(f"box must have shape ({n}, 2), got {b.shape}")
    lo, hi = b[:, 0], b[:, 1]
    if not np.all(hi > lo):
        raise ValueError("box is degenerate")
    return lo, hi
