"""Second compound matrices, Wishart 2-minor moments and samplers.

Index conventions
-----------------
Pairs ``(i, j)`` with ``i < j`` are ordered lexicographically; ``pairs(m)[p]``
is the pair at position ``p``.  A minor ``det(A[I, J])`` always takes the
rows of ``I`` and the columns of ``J`` in ascending order.  Because
``det W_{I,J} = det W_{J,I}`` for symmetric ``W``, covariances of minors are
reported over unordered minor pairs ``(I, J)`` with ``I <= J``.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np
from scipy import sparse, special

from .geometry import SymMatrix, as_sym, check_psd
from .numerics import NumericalError, cholesky, eigh
from .trees import Quartet

__all__ = [
    "pairs",
    "pair_position",
    "minor_pairs",
    "compound2",
    "minor",
    "minor_estimator",
    "cov_w2_entry",
    "cov_W2",
    "cov_S2",
    "cov_Q",
    "quartet_minor_indices",
    "MinorCovariance",
    "sym_sqrt",
    "sample_mvn",
    "sample_wishart",
    "sample_inverse_wishart",
    "chi2_sf",
    "chi2_cdf",
]

Pair = tuple[int, int]


@lru_cache(maxsize=None)
def pairs(m: int) -> tuple[Pair, ...]:
    return tuple(itertools.combinations(range(m), 2))


def pair_position(i: int, j: int, m: int) -> int:
    """Lexicographic rank of the pair ``{i, j}`` among all pairs of ``range(m)``."""
    if i == j:
        raise ValueError("a pair needs two distinct indices")
    i, j = min(i, j), max(i, j)
    if not 0 <= i < j < m:
        raise ValueError(f"pair ({i}, {j}) out of range for m={m}")
    return i * m - i * (i + 1) // 2 + (j - i - 1)


@lru_cache(maxsize=None)
def minor_pairs(m: int) -> tuple[tuple[Pair, Pair], ...]:
    """Unordered minor pairs ``(I, J)`` with ``I <= J`` in lexicographic order."""
    ps = pairs(m)
    return tuple((ps[a], ps[b]) for a in range(len(ps)) for b in range(a, len(ps)))


def compound2(a: np.ndarray) -> np.ndarray:
    """Second compound matrix: entry ``(I, J)`` is ``det(a[I, J])``."""
    a = np.asarray(a, dtype=float)
    m = a.shape[0]
    if a.ndim != 2 or a.shape[1] != m or m < 2:
        raise ValueError("compound2 needs a square matrix of size >= 2")
    ps = np.array(pairs(m))
    r0, r1 = ps[:, 0], ps[:, 1]
    return (a[np.ix_(r0, r0)] * a[np.ix_(r1, r1)]
            - a[np.ix_(r0, r1)] * a[np.ix_(r1, r0)])


def minor(a: np.ndarray, rows: Sequence[int], cols: Sequence[int]):
    """``det(a[rows, cols])`` for index pairs, broadcasting over leading axes."""
    (i, j), (k, l) = sorted(rows), sorted(cols)
    return a[..., i, k] * a[..., j, l] - a[..., i, l] * a[..., j, k]


def minor_estimator(s, n: int, I: Sequence[int], J: Sequence[int]) -> float:
    """Unbiased estimate ``det(S[I, J]) / (n (n - 1))`` of ``det(C[I, J])``."""
    if n < 2:
        raise ValueError("the minor estimator needs n >= 2")
    a = s.values if isinstance(s, SymMatrix) else np.asarray(s, dtype=float)
    return minor(a, I, J) / (n * (n - 1))


# ---------------------------------------------------------------------------
# cov(W^(2)) for a standard Wishart W_m(n, I)


def cov_w2_entry(I: Pair, J: Pair, K: Pair, L: Pair, n: float) -> float:
    """``cov(det W[I, J], det W[K, L])`` for standard Wishart ``W_m(n, I)``.

    Scalar reference evaluation of the block formulas; entries outside the
    diagonal blocks (different symmetric differences) are zero.
    """
    I, J, K, L = (tuple(sorted(x)) for x in (I, J, K, L))
    d1 = set(I) ^ set(J)
    d2 = set(K) ^ set(L)
    if d1 != d2:
        return 0.0
    if not d1:  # I == J and K == L
        common = len(set(I) & set(K))
        if I == K:
            return 2.0 * n * (2 * n + 1) * (n - 1)
        return 2.0 * n * (n - 1) ** 2 if common == 1 else 0.0
    if len(d1) == 2:
        i, j = sorted(d1)
        (k,) = set(I) & set(J)
        (l,) = set(K) & set(L)
        if k == l:
            return float(n * (n + 2) * (n - 1))
        k, l = min(k, l), max(k, l)
        sign = -1.0 if (i < k < j < l) or (k < i < l < j) else 1.0
        return sign * n * (n - 1) ** 2
    i, j, k, l = sorted(d1)
    split = {
        frozenset([(i, j), (k, l)]): 0,
        frozenset([(i, k), (j, l)]): 1,
        frozenset([(i, l), (j, k)]): 2,
    }
    x = split[frozenset([I, J])]
    y = split[frozenset([K, L])]
    a, b = 2.0 * n * (n - 1), float(n * (n - 1))
    block = ((a, b, -b), (b, a, b), (-b, b, a))
    return block[x][y]


@lru_cache(maxsize=32)
def _ordered_cov_w2(m: int, n: float) -> sparse.csr_matrix:
    """cov over *ordered* minor pairs, index ``A * M + B`` for minor ``(A, B)``."""
    M = comb(m, 2)
    pos = {p: q for q, p in enumerate(pairs(m))}
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []

    def add(A, B, C, D, v):
        for x, y in {(A, B), (B, A)}:
            for z, w in {(C, D), (D, C)}:
                rows.append(x * M + y)
                cols.append(z * M + w)
                vals.append(v)

    var0 = 2.0 * n * (2 * n + 1) * (n - 1)
    cov0 = 2.0 * n * (n - 1) ** 2
    for A, p in enumerate(pairs(m)):
        for C, q in enumerate(pairs(m)):
            if A == C:
                add(A, A, C, C, var0)
            elif set(p) & set(q):
                add(A, A, C, C, cov0)

    diag2 = float(n * (n + 2) * (n - 1))
    off2 = float(n * (n - 1) ** 2)
    for i, j in pairs(m):
        rest = [x for x in range(m) if x != i and x != j]
        for k in rest:
            X = (pos[tuple(sorted((i, k)))], pos[tuple(sorted((j, k)))])
            for l in rest:
                Y = (pos[tuple(sorted((i, l)))], pos[tuple(sorted((j, l)))])
                if k == l:
                    v = diag2
                else:
                    kk, ll = min(k, l), max(k, l)
                    v = -off2 if (i < kk < j < ll) or (kk < i < ll < j) else off2
                add(*X, *Y, v)

    a4, b4 = 2.0 * n * (n - 1), float(n * (n - 1))
    block = ((a4, b4, -b4), (b4, a4, b4), (-b4, b4, a4))
    for i, j, k, l in itertools.combinations(range(m), 4):
        minors = (
            (pos[(i, j)], pos[(k, l)]),
            (pos[(i, k)], pos[(j, l)]),
            (pos[(i, l)], pos[(j, k)]),
        )
        for x in range(3):
            for y in range(3):
                add(*minors[x], *minors[y], block[x][y])

    out = sparse.coo_matrix((vals, (rows, cols)), shape=(M * M, M * M)).tocsr()
    out.sum_duplicates()
    return out


def _unordered_rows(m: int) -> np.ndarray:
    M = comb(m, 2)
    pos = {p: q for q, p in enumerate(pairs(m))}
    return np.array([pos[I] * M + pos[J] for I, J in minor_pairs(m)], dtype=int)


def _pair_label(I: Pair, J: Pair, names: Sequence[str]) -> str:
    sep = "" if all(len(s) == 1 for s in names) else ","
    return sep.join(names[x] for x in I) + "|" + sep.join(names[x] for x in J)


@dataclass
class MinorCovariance:
    """Covariance matrix of 2-minors, indexed by ``minors`` (row pair, column pair)."""

    matrix: np.ndarray
    minors: list[tuple[Pair, Pair]]
    n: float
    source: str = "standard"
    names: tuple[str, ...] | None = None
    scale: np.ndarray | None = field(default=None, repr=False)

    @property
    def labels(self) -> list[str]:
        names = self.names or tuple(str(i + 1) for i in range(1 + max(max(I + J) for I, J in self.minors)))
        return [_pair_label(I, J, names) for I, J in self.minors]

    def is_psd(self, rtol: float = 1e-8) -> bool:
        a = self.matrix
        if not np.allclose(a, a.T, rtol=0, atol=rtol * max(1.0, np.abs(a).max())):
            return False
        w = np.linalg.eigvalsh(a)
        return bool(w[0] >= -rtol * max(abs(w[-1]), 1e-300))

    def to_csv(self, path) -> None:
        labels = self.labels
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow([""] + labels)
            for lab, row in zip(labels, self.matrix):
                wr.writerow([lab] + [f"{v:.17g}" for v in row])


def cov_W2(m: int, n: float) -> MinorCovariance:
    """Exact covariance of the 2-minors of a standard Wishart ``W_m(n, I)``."""
    if m < 2 or n < 1:
        raise ValueError("cov_W2 needs m >= 2 and n >= 1")
    idx = _unordered_rows(m)
    full = _ordered_cov_w2(m, float(n))
    mat = full[idx][:, idx].toarray()
    return MinorCovariance(mat, list(minor_pairs(m)), n, "standard")


def _sandwich_rows(b2: np.ndarray, minors: Sequence[tuple[int, int]]) -> np.ndarray:
    """Rows of ``B2 (x) B2`` for the requested (row-pair, col-pair) positions."""
    return np.stack([np.outer(b2[A], b2[B]).ravel() for A, B in minors])


def _propagate(c: np.ndarray, n: float, minor_pos: Sequence[tuple[int, int]]) -> np.ndarray:
    m = c.shape[0]
    b2 = compound2(sym_sqrt(c))
    k = _sandwich_rows(b2, minor_pos)
    cov = _ordered_cov_w2(m, float(n))
    return k @ (cov @ k.T)


def cov_S2(c, n: float) -> MinorCovariance:
    """Covariance of the 2-minors of ``S ~ W_m(n, C)``, over unordered minor pairs.

    Computed as the congruence of the standard-Wishart covariance by
    ``(C^{1/2})^(2) (x) (C^{1/2})^(2)``.
    """
    c = as_sym(c, "covariance")
    m = c.dim
    if m > 12:
        raise ValueError("full cov_S2 is limited to m <= 12; use cov_Q for selected minors")
    if n < 2:
        raise ValueError("n must be at least 2")
    pos = {p: q for q, p in enumerate(pairs(m))}
    mp = minor_pairs(m)
    mat = _propagate(c.values, n, [(pos[I], pos[J]) for I, J in mp])
    return MinorCovariance(0.5 * (mat + mat.T), list(mp), n, "propagated", c.names, c.values)


def quartet_minor_indices(q: Quartet, names: Sequence[str]) -> tuple[Pair, Pair]:
    """Quartet ``ij|kl`` -> (rows {i, j}, columns {k, l}) as sorted index pairs."""
    pos = {s: x for x, s in enumerate(names)}
    try:
        i, j, k, l = (pos[s] for s in q.taxa)
    except KeyError as exc:
        raise KeyError(f"quartet {q} uses leaf {exc.args[0]!r} not in {list(names)}") from None
    return tuple(sorted((i, j))), tuple(sorted((k, l)))


def cov_Q(c, n: float, quartets: Sequence[Quartet]) -> MinorCovariance:
    """Covariance of the estimators ``Q_{ij,kl}`` for the given quartets."""
    c = as_sym(c, "covariance")
    if n < 2:
        raise ValueError("n must be at least 2")
    m = c.dim
    minors = [quartet_minor_indices(q, c.names) for q in quartets]
    pos = {p: x for x, p in enumerate(pairs(m))}
    mat = _propagate(c.values, n, [(pos[I], pos[J]) for I, J in minors])
    mat = 0.5 * (mat + mat.T) / (n * (n - 1)) ** 2
    return MinorCovariance(mat, minors, n, "propagated", c.names, c.values)


# ---------------------------------------------------------------------------
# Square roots and samplers


def sym_sqrt(c) -> np.ndarray:
    """Symmetric PSD square root by spectral decomposition."""
    a = c.values if isinstance(c, SymMatrix) else np.asarray(c, dtype=float)
    w, v = eigh(a)
    top = max(abs(w[-1]), 1e-300)
    if w[0] < -1e-10 * top:
        raise NumericalError(f"not PSD (min eigenvalue {w[0]:.3g})")
    w = np.clip(w, 0.0, None)
    b = (v * np.sqrt(w)) @ v.T
    b = 0.5 * (b + b.T)
    if np.max(np.abs(b @ b - a)) > 1e-9 * top:
        raise NumericalError("square root residual too large")
    return b


def _factor(c: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L^T = c``; falls back to the symmetric root if singular."""
    try:
        return cholesky(c)
    except NumericalError:
        check_psd(c)
        return sym_sqrt(c)


def sample_mvn(c, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n x m`` matrix of i.i.d. ``N(0, c)`` rows."""
    a = as_sym(c, "covariance").values
    low = _factor(a)
    z = rng.standard_normal((int(n), a.shape[0]))
    return z @ low.T


def sample_wishart(c, n: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``S ~ W_m(n, c)`` by the Bartlett decomposition.

    For integer ``n < m`` (singular Wishart) the scatter of ``n`` normal
    draws is used instead.  With ``size`` the result has a leading axis.
    """
    a = as_sym(c, "covariance").values
    m = a.shape[0]
    low = _factor(a)
    reps = 1 if size is None else int(size)
    if n <= m - 1:
        if float(n) != int(n) or n < 1:
            raise ValueError(f"degrees of freedom {n} too small for dimension {m}")
        x = rng.standard_normal((reps, m, int(n)))
        y = low @ x
        out = y @ y.transpose(0, 2, 1)
    else:
        t = np.zeros((reps, m, m))
        df = n - np.arange(m)
        t[:, np.arange(m), np.arange(m)] = np.sqrt(rng.chisquare(df, size=(reps, m)))
        r, s = np.tril_indices(m, -1)
        t[:, r, s] = rng.standard_normal((reps, r.size))
        y = low @ t
        out = y @ y.transpose(0, 2, 1)
    out = 0.5 * (out + out.transpose(0, 2, 1))
    return out[0] if size is None else out


def sample_inverse_wishart(df: float, scale, rng: np.random.Generator,
                           size: int | None = None) -> np.ndarray:
    """Draw ``X ~ IW(df, scale)``, i.e. ``X^{-1} ~ W(df, scale^{-1})``."""
    a = as_sym(scale, "covariance").values
    m = a.shape[0]
    if df <= m - 1:
        raise ValueError(f"inverse-Wishart needs df > m - 1 (df={df}, m={m})")
    if np.linalg.eigvalsh(a)[0] <= 0:
        raise NumericalError("inverse-Wishart scale must be positive definite")
    w = sample_wishart(np.linalg.inv(a), df, rng, size=size)
    out = np.linalg.inv(w)
    axes = (0, 2, 1) if out.ndim == 3 else (1, 0)
    return 0.5 * (out + out.transpose(axes))


def chi2_sf(x, p: int):
    """Upper tail ``P(chi2_p > x)`` via the regularized incomplete gamma function."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("chi2_sf needs x >= 0")
    if p < 1:
        raise ValueError("degrees of freedom must be >= 1")
    out = special.gammaincc(p / 2.0, x / 2.0)
    return float(out) if out.ndim == 0 else out


def chi2_cdf(x, p: int):
    x = np.asarray(x, dtype=float)
    out = special.gammainc(p / 2.0, np.clip(x, 0, None) / 2.0)
    return float(out) if out.ndim == 0 else out
