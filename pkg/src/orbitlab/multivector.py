"""Minors of frame matrices, the rank functional and Cramer solves.

Index tuples are 0-based in the Python API: ``index_sets(2, 3)`` is
``[(0, 1), (0, 2), (1, 2)]``.  Reports print them 1-based.

For a frame ``Y`` (n x q), grade ``p``, field tuple ``J`` and coordinate tuple
``K``, the minor ``Y_J^K`` is ``det Y[K][:, J]``.  The rank functional
``Lambda_p`` collects all of them; ``|Lambda_p| > 0`` iff rank ``Y >= p``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import DegenerateBasisError
from .fields import PointFrame

DEFAULT_TOL_REL = 1e-8
DEGENERATE_WEDGE = 1e-12
TIE_RTOL = 1e-12


@lru_cache(maxsize=None)
def index_sets(p: int, mu: int) -> tuple[tuple[int, ...], ...]:
    """Strictly increasing p-tuples from range(mu), in lexicographic order."""
    if p < 1 or p > mu:
        return ()
    return tuple(combinations(range(mu), p))


def _matrix(frame) -> np.ndarray:
    return frame.matrix if isinstance(frame, PointFrame) else np.asarray(frame, dtype=float)


@dataclass(frozen=True)
class WedgeSpectrum:
    """Minors ``Y_J^K`` for J in ``rows`` and K in ``cols``; ``entries[a, b]`` is for (rows[a], cols[b])."""

    p: int
    rows: tuple[tuple[int, ...], ...]
    cols: tuple[tuple[int, ...], ...]
    entries: np.ndarray

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.entries**2)))

    def minor(self, J, K) -> float:
        return float(self.entries[self.rows.index(tuple(J)), self.cols.index(tuple(K))])

    def wedge(self, J) -> np.ndarray:
        """Components of ``Y_J`` in the basis ``e_K``."""
        return self.entries[self.rows.index(tuple(J))]

    def wedge_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.entries**2, axis=1))

    def as_vector(self) -> np.ndarray:
        return self.entries.ravel()


def _gather_minors(M: np.ndarray, rows, cols) -> np.ndarray:
    """M (m, n, q) -> minors (m, len(rows), len(cols)) with rows=J field tuples, cols=K coordinate tuples."""
    Jidx = np.asarray(rows, dtype=int)
    Kidx = np.asarray(cols, dtype=int)
    sub = M[:, Kidx[None, :, :, None], Jidx[:, None, None, :]]
    return np.linalg.det(sub)


def minors_batch(frames: np.ndarray, p: int) -> np.ndarray:
    """All p-minors for a batch of frames: (m, n, q) -> (m, C(q,p), C(n,p))."""
    frames = np.asarray(frames, dtype=float)
    _, n, q = frames.shape
    rows, cols = index_sets(p, q), index_sets(p, n)
    if not rows or not cols:
        return np.zeros((frames.shape[0], 0, 0))
    return _gather_minors(frames, rows, cols)


def lambda_p(frame, p: int) -> WedgeSpectrum:
    M = _matrix(frame)
    n, q = M.shape
    if not 1 <= p <= min(n, q):
        raise ValueError(f"grade p={p} outside 1..{min(n, q)}")
    rows, cols = index_sets(p, q), index_sets(p, n)
    return WedgeSpectrum(p, rows, cols, _gather_minors(M[None], rows, cols)[0])


def lambda_norms(frames: np.ndarray, p: int) -> np.ndarray:
    m = minors_batch(frames, p)
    return np.sqrt(np.sum(m**2, axis=(1, 2)))


def ranks(frames: np.ndarray, tol_rel: float = DEFAULT_TOL_REL) -> np.ndarray:
    """Numerical rank of each frame: largest p with ``|Lambda_p| > tol_rel * max(1, |Y|_F^p)``."""
    frames = np.asarray(frames, dtype=float)
    if not 0 < tol_rel < 1:
        raise ValueError("tol_rel must lie in (0, 1)")
    m, n, q = frames.shape
    fro = np.sqrt(np.sum(frames**2, axis=(1, 2)))
    out = np.zeros(m, dtype=int)
    undecided = np.ones(m, dtype=bool)
    for p in range(min(n, q), 0, -1):
        if not undecided.any():
            break
        idx = np.flatnonzero(undecided)
        norms = lambda_norms(frames[idx], p)
        hit = norms > tol_rel * np.maximum(1.0, fro[idx] ** p)
        out[idx[hit]] = p
        undecided[idx[hit]] = False
    return out


def pointwise_rank(frame, tol_rel: float = DEFAULT_TOL_REL) -> int:
    return int(ranks(_matrix(frame)[None], tol_rel)[0])


def best_index(frame, p: int) -> tuple[int, ...]:
    """The J in I(p, q) maximizing ``|Y_J|``; near-ties go to the lexicographically first."""
    wedges = lambda_p(frame, p)
    norms = wedges.wedge_norms()
    top = norms.max()
    first = int(np.flatnonzero(norms >= top * (1 - TIE_RTOL))[0])
    return wedges.rows[first]


def interior_substitute(I, k: int, W, frame) -> WedgeSpectrum:
    """Components of ``Y_{i_1} ^ ... ^ W ^ ... ^ Y_{i_p}`` with W in slot k (0-based)."""
    M = _matrix(frame).copy()
    I = tuple(I)
    if not 0 <= k < len(I):
        raise ValueError(f"slot {k} outside 0..{len(I) - 1}")
    cols = np.array(M[:, list(I)])
    cols[:, k] = np.asarray(W, dtype=float)
    p = len(I)
    K = index_sets(p, M.shape[0])
    slot = tuple(range(p))
    return WedgeSpectrum(p, (I,), K, _gather_minors(cols[None], (slot,), K)[0])


def cramer_solve(I, W, frame) -> tuple[np.ndarray, float]:
    """Coefficients xi with ``sum_k xi_k Y_{i_k} = W``, by the wedge form of Cramer's rule.

    Returns ``(xi, residual)`` where residual is ``|sum_k xi_k Y_{i_k} - W|``.
    """
    M = _matrix(frame)
    I = tuple(I)
    W = np.asarray(W, dtype=float)
    base = lambda_p(M[:, list(I)], len(I)).wedge((tuple(range(len(I)))))
    denom = float(base @ base)
    if np.sqrt(denom) < DEGENERATE_WEDGE:
        raise DegenerateBasisError(f"|Y_I| = {np.sqrt(denom):.3e} below {DEGENERATE_WEDGE}")
    xi = np.array([base @ interior_substitute(I, k, W, M).entries[0] / denom for k in range(len(I))])
    residual = float(np.linalg.norm(M[:, list(I)] @ xi - W))
    return xi, residual
