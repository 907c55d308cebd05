"""Small dense linear-algebra kernels and seedable random streams.

Everything here is deterministic and stateless.  The matrices involved are
small (leaf counts up to ~25, pair-indexed matrices up to a few hundred rows),
so the routines are thin, checked wrappers around LAPACK via numpy/scipy.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as sla

__all__ = [
    "NumericalError",
    "determinant2",
    "cholesky",
    "eigh",
    "solve_spd",
    "condition_number_spd",
    "make_rng",
    "substream",
]

#: Identifier of the bit generator behind every stream; bump when changing it.
RNG_ALGORITHM = "philox4x64-seedsequence-v1"


class NumericalError(ArithmeticError):
    """Raised when a matrix fails a numerical precondition (PSD, conditioning)."""


def determinant2(a, b, c, d):
    """Return ``a*d - b*c`` for the 2x2 matrix ``[[a, b], [c, d]]``.

    Works elementwise on arrays.
    """
    return a * d - b * c


def _inf_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a).sum(axis=1))) if a.size else 0.0


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``L @ L.T == a``.

    Raises
    ------
    NumericalError
        If ``a`` is not symmetric positive definite or the residual
        exceeds ``1e-10 * ||a||_inf``.
    """
    a = np.asarray(a, dtype=float)
    try:
        low = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite: {exc}") from None
    if _inf_norm(low @ low.T - a) > 1e-10 * max(_inf_norm(a), 1e-300):
        raise NumericalError("Cholesky residual too large")
    return low


def eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition with a fixed eigenvector sign convention.

    Eigenvalues are ascending.  Each eigenvector is flipped so that its first
    component of magnitude above ``1e-12`` is positive, which makes derived
    quantities reproducible across LAPACK builds.
    """
    a = np.asarray(a, dtype=float)
    w, v = np.linalg.eigh(a)
    for col in range(v.shape[1]):
        nz = np.flatnonzero(np.abs(v[:, col]) > 1e-12)
        if nz.size and v[nz[0], col] < 0:
            v[:, col] = -v[:, col]
    return w, v


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a`` without inverting."""
    a = np.asarray(a, dtype=float)
    try:
        factor = sla.cho_factor(a, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite: {exc}") from None
    return sla.cho_solve(factor, np.asarray(b, dtype=float))


def condition_number_spd(a: np.ndarray) -> float:
    """``lambda_max / lambda_min``; ``inf`` when the smallest eigenvalue is <= 0."""
    w = np.linalg.eigvalsh(np.asarray(a, dtype=float))
    if w[0] <= 0:
        return float("inf")
    return float(w[-1] / w[0])


def make_rng(seed: int | None = None, *key: int) -> np.random.Generator:
    """Counter-based generator for ``seed``, optionally keyed by integer indices.

    ``make_rng(s, i)`` and ``make_rng(s, j)`` are independent streams for
    ``i != j``; ``make_rng(s)`` is yet another stream.  The same arguments
    always reproduce the same draws.
    """
    if seed is None:
        raise ValueError("a seed is required; hidden entropy is not allowed")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def substream(seed: int, index: int, tag: int = 0) -> np.random.Generator:
    """Per-replicate stream derived from ``(seed, tag, index)``."""
    return make_rng(seed, tag, index)
