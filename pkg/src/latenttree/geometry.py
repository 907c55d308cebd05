"""Tree metrics, phylogenetic oranges and the latent tree correlation space.

Membership tests here are geometric: equalities are checked within a fixed
tolerance on exact (population) matrices.  For sample data use
:mod:`latenttree.inference`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numerics import NumericalError
from .trees import Quartet, Tree, quartets_of

__all__ = [
    "SymMatrix",
    "MembershipVerdict",
    "SignPatternError",
    "as_sym",
    "corr_from_tree",
    "corr_from_cov",
    "dist_from_corr",
    "corr_from_dist",
    "uniform_edge_weights",
    "constant_edge_weights",
    "is_tree_metric",
    "is_tree_metric_for",
    "in_PO",
    "in_PO_T",
    "in_M_T",
    "tree_compatible",
    "T_compatible",
    "sign_canonicalize",
    "reconstruct_tree",
    "neighbor_joining",
    "check_psd",
]

ROLES = ("distance", "correlation", "covariance", "scatter")
DEFAULT_TOL = 1e-9


def default_names(m: int) -> tuple[str, ...]:
    return tuple(str(i + 1) for i in range(m))


@dataclass(frozen=True, eq=False)
class SymMatrix:
    """Dense symmetric matrix tagged with a role and leaf names.

    ``values`` is copied, symmetrized and made read-only on construction.
    """

    values: np.ndarray
    role: str = "covariance"
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        a = np.array(self.values, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ValueError(f"expected a non-empty square matrix, got shape {a.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        m = a.shape[0]
        scale = max(1.0, float(np.max(np.abs(a))))
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix has non-finite entries")
        if np.max(np.abs(a - a.T)) > 1e-10 * scale:
            raise ValueError("matrix is not symmetric")
        a = 0.5 * (a + a.T)
        names = default_names(m) if self.names is None else tuple(map(str, self.names))
        if len(names) != m or len(set(names)) != m or not all(names):
            raise ValueError("leaf names must be unique, nonempty and match the dimension")
        if self.role == "distance":
            if np.any(np.abs(np.diag(a)) > 1e-12) or np.any(a < -1e-12):
                raise ValueError("distance matrix needs zero diagonal and nonnegative entries")
            a = np.clip(a, 0.0, None)
            np.fill_diagonal(a, 0.0)
        elif self.role == "correlation":
            if np.any(np.abs(np.diag(a) - 1) > 1e-10) or np.any(np.abs(a) > 1 + 1e-10):
                raise ValueError("correlation matrix needs unit diagonal and entries in [-1, 1]")
            a = np.clip(a, -1.0, 1.0)
            np.fill_diagonal(a, 1.0)
        else:
            check_psd(a)
        a.setflags(write=False)
        object.__setattr__(self, "values", a)
        object.__setattr__(self, "names", names)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def index(self, label: str) -> int:
        try:
            return self.names.index(str(label))
        except ValueError:
            raise KeyError(f"unknown leaf {label!r}") from None

    def reordered(self, labels: Sequence[str]) -> "SymMatrix":
        """Same matrix with rows/columns in the order of ``labels``."""
        labels = [str(s) for s in labels]
        if sorted(labels) != sorted(self.names):
            raise ValueError(
                f"leaf labels {sorted(labels)} do not match matrix names {sorted(self.names)}"
            )
        idx = [self.index(s) for s in labels]
        return SymMatrix(self.values[np.ix_(idx, idx)], self.role, tuple(labels))

    def with_values(self, values: np.ndarray, role: str | None = None) -> "SymMatrix":
        return SymMatrix(values, role or self.role, self.names)

    def __repr__(self):
        return f"SymMatrix(role={self.role!r}, names={self.names!r},\n{self.values!r})"


def check_psd(a: np.ndarray) -> np.ndarray:
    """Return eigenvalues of ``a``; raise if any is below ``-1e-10 * lambda_max``."""
    w = np.linalg.eigvalsh(np.asarray(a, dtype=float))
    if w[0] < -1e-10 * max(abs(w[-1]), 1e-300):
        raise NumericalError(f"matrix is not positive semidefinite (min eigenvalue {w[0]:.3g})")
    return w


def as_sym(x, role: str, names: Sequence[str] | None = None) -> SymMatrix:
    if isinstance(x, SymMatrix):
        if x.role == role or (role in ("covariance", "scatter") and x.role in ("covariance", "scatter")):
            return x
        return SymMatrix(x.values, role, x.names)
    return SymMatrix(np.asarray(x, dtype=float), role, names)


@dataclass
class MembershipVerdict:
    """Outcome of a membership test.

    ``witness`` describes the most violated constraint when ``member`` is
    false: ``kind``, the ``leaves`` involved and the ``slack`` by which the
    constraint fails.
    """

    member: bool
    witness: dict | None = None
    tol: float = DEFAULT_TOL
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"member": self.member, "witness": self.witness, "tol": self.tol, "flags": list(self.flags)}


def _fail(kind: str, leaves, slack: float, tol: float, flags=()) -> MembershipVerdict:
    return MembershipVerdict(
        False, {"kind": kind, "leaves": [str(s) for s in leaves], "slack": float(slack)}, tol, list(flags)
    )


# ---------------------------------------------------------------------------
# Parameterization


def _check_weights(t: Tree, w: Mapping) -> dict:
    out = {}
    for e, val in w.items():
        key = (min(e), max(e))
        if key in out:
            raise ValueError(f"edge {key} weighted twice")
        out[key] = float(val)
    if set(out) != set(t.edges):
        raise ValueError("edge weights must cover exactly the edges of the tree")
    return out


def uniform_edge_weights(t: Tree, lo: float, hi: float, rng: np.random.Generator) -> dict:
    """Independent ``U[lo, hi]`` weights, drawn in canonical edge order."""
    return dict(zip(t.edges, rng.uniform(lo, hi, size=len(t.edges)).tolist()))


def constant_edge_weights(t: Tree, value: float) -> dict:
    return {e: float(value) for e in t.edges}


def corr_from_tree(t: Tree, w: Mapping) -> SymMatrix:
    """Leaf correlations as products of edge correlations along paths."""
    w = _check_weights(t, w)
    if any(abs(v) > 1 for v in w.values()):
        raise ValueError("edge correlations must lie in [-1, 1]")
    m = t.n_leaves
    r = np.eye(m)
    for a, b in itertools.combinations(range(m), 2):
        val = 1.0
        for e in t.path_edges(a, b):
            val *= w[e]
        r[a, b] = r[b, a] = val
    return SymMatrix(r, "correlation", t.leaves)


def corr_from_cov(s) -> SymMatrix:
    s = as_sym(s, "covariance")
    d = np.sqrt(np.diag(s.values))
    if np.any(d <= 0):
        raise NumericalError("zero variance; correlation undefined")
    r = s.values / np.outer(d, d)
    return SymMatrix(np.clip(r, -1, 1), "correlation", s.names)


def dist_from_corr(r) -> SymMatrix:
    r = as_sym(r, "correlation")
    off = r.values[~np.eye(r.dim, dtype=bool)]
    if np.any(off <= 0):
        raise ValueError("distances are defined only for strictly positive correlations")
    return SymMatrix(-np.log(r.values), "distance", r.names)


def corr_from_dist(d) -> SymMatrix:
    d = as_sym(d, "distance")
    return SymMatrix(np.exp(-d.values), "correlation", d.names)


# ---------------------------------------------------------------------------
# Four-point conditions


def _three_sums(a: np.ndarray):
    """Arrays indexed by (i, j, k, l): a_ik+a_jl, a_il+a_jk, a_ij+a_kl."""
    s1 = a[:, None, :, None] + a[None, :, None, :]
    s2 = a[:, None, None, :] + a[None, :, :, None]
    s3 = a[:, :, None, None] + a[None, None, :, :]
    return s1, s2, s3


def _three_products(a: np.ndarray):
    p1 = a[:, None, :, None] * a[None, :, None, :]
    p2 = a[:, None, None, :] * a[None, :, :, None]
    p3 = a[:, :, None, None] * a[None, None, :, :]
    return p1, p2, p3


def _worst(slack: np.ndarray, tol: float):
    """Index tuple of the largest slack if it exceeds ``tol``, else None."""
    flat = int(np.argmax(slack))
    val = slack.flat[flat]
    if val > tol:
        return np.unravel_index(flat, slack.shape), float(val)
    return None


def is_tree_metric(d, tol: float = DEFAULT_TOL) -> MembershipVerdict:
    """Four-point condition over all (not necessarily distinct) 4-tuples."""
    d = as_sym(d, "distance")
    s = np.sort(np.stack(_three_sums(d.values)), axis=0)
    hit = _worst(s[2] - s[1], tol)
    if hit:
        idx, slack = hit
        return _fail("four-point", [d.names[i] for i in idx], slack, tol)
    return MembershipVerdict(True, None, tol)


def _quartet_index(q: Quartet, names: Sequence[str]):
    pos = {s: i for i, s in enumerate(names)}
    return tuple(pos[s] for s in q.taxa)


def _quartet_arrays(t: Tree, names: Sequence[str]):
    qs = quartets_of(t)
    idx = np.array([_quartet_index(q, names) for q in qs], dtype=int).reshape(-1, 4)
    return qs, idx


def _aligned(x: "SymMatrix", t: Tree) -> "SymMatrix":
    if set(x.names) != set(t.leaves):
        raise ValueError(f"matrix names {sorted(x.names)} do not match tree leaves {sorted(t.leaves)}")
    return x.reordered(t.leaves)


def is_tree_metric_for(d, t: Tree, tol: float = DEFAULT_TOL) -> MembershipVerdict:
    """Tree metric on the fixed topology ``t``: metric plus the quartet conditions."""
    d = _aligned(as_sym(d, "distance"), t)
    a = d.values
    names = d.names
    # metric: a[i, j] <= a[i, k] + a[k, j]
    tri = a[:, :, None] - a[:, None, :] - a[None, :, :]
    hit = _worst(tri, tol)
    if hit:
        (i, j, k), slack = hit
        return _fail("metric", [names[i], names[j], names[k]], slack, tol)
    if t.n_leaves < 4:
        return MembershipVerdict(True, None, tol)
    qs, idx = _quartet_arrays(t, names)
    i, j, k, l = idx.T
    cross1 = a[i, k] + a[j, l]
    cross2 = a[i, l] + a[j, k]
    inner = a[i, j] + a[k, l]
    eq = np.abs(cross1 - cross2)
    ineq = inner - np.minimum(cross1, cross2)
    worst = np.maximum(eq, ineq)
    h = int(np.argmax(worst))
    if worst[h] > tol:
        kind = "quartet-equality" if eq[h] >= ineq[h] else "quartet-inequality"
        return _fail(kind, qs[h].taxa, worst[h], tol)
    return MembershipVerdict(True, None, tol)


def _negative_entry(r: SymMatrix, tol: float):
    a = r.values
    if np.any(a < 0):
        i, j = np.unravel_index(int(np.argmin(a)), a.shape)
        return _fail("negative-entry", [r.names[i], r.names[j]], -a[i, j], tol)
    return None


def in_PO(r, tol: float = DEFAULT_TOL) -> MembershipVerdict:
    """Membership in the union of phylogenetic oranges over all trees.

    For every 4-tuple the two smallest of the three cross products must agree
    up to the factor ``exp(tol)``, mirroring an additive ``tol`` on
    ``-log`` distances.
    """
    r = as_sym(r, "correlation")
    neg = _negative_entry(r, tol)
    if neg is not None:
        return neg
    p = np.sort(np.stack(_three_products(r.values)), axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = np.where(p[1] > p[0] * np.exp(tol), np.log(p[1]) - np.log(p[0]), 0.0)
    hit = _worst(slack, tol)
    if hit:
        idx, val = hit
        return _fail("four-point", [r.names[i] for i in idx], val, tol)
    return MembershipVerdict(True, None, tol)


def _triple_indices(m: int) -> np.ndarray:
    return np.array(list(itertools.combinations(range(m), 3)), dtype=int).reshape(-1, 3)


def in_PO_T(r, t: Tree, tol: float = DEFAULT_TOL) -> MembershipVerdict:
    """Membership in the phylogenetic orange of ``t`` (nonnegative correlations)."""
    r = _aligned(as_sym(r, "correlation"), t)
    neg = _negative_entry(r, tol)
    if neg is not None:
        return neg
    a = r.values
    names = r.names
    if t.n_leaves >= 4:
        qs, idx = _quartet_arrays(t, names)
        i, j, k, l = idx.T
        p_ik_jl = a[i, k] * a[j, l]
        p_il_jk = a[i, l] * a[j, k]
        p_ij_kl = a[i, j] * a[k, l]
        eq = np.abs(p_ik_jl - p_il_jk)
        ineq = np.maximum(p_ik_jl, p_il_jk) - p_ij_kl
        worst = np.maximum(eq, ineq)
        h = int(np.argmax(worst))
        if worst[h] > tol:
            kind = "tetrad-equality" if eq[h] >= ineq[h] else "tetrad-inequality"
            return _fail(kind, qs[h].taxa, worst[h], tol)
    hit = _triangle_slack(a)
    if hit is not None:
        (i, j, k), slack = hit
        if slack > tol:
            return _fail("triangle", [names[i], names[j], names[k]], slack, tol)
    return MembershipVerdict(True, None, tol)


def _triangle_slack(a: np.ndarray):
    """Largest ``a_ij a_ik - a_jk`` over distinct triples, with its (j, i, k) roles."""
    m = a.shape[0]
    if m < 3:
        return None
    tri = _triple_indices(m)
    best = None
    for rot in ((0, 1, 2), (1, 0, 2), (2, 0, 1)):
        c, x, y = (tri[:, r] for r in rot)  # c is the shared vertex
        slack = a[c, x] * a[c, y] - a[x, y]
        h = int(np.argmax(slack))
        if best is None or slack[h] > best[1]:
            best = ((int(x[h]), int(c[h]), int(y[h])), float(slack[h]))
    return best


def _triple_sign(a: np.ndarray, names, tol):
    m = a.shape[0]
    if m < 3:
        return None
    tri = _triple_indices(m)
    i, j, k = tri.T
    prod = a[i, j] * a[i, k] * a[j, k]
    h = int(np.argmin(prod))
    if prod[h] < -tol:
        return _fail("triple-sign", [names[i[h]], names[j[h]], names[k[h]]], -prod[h], tol)
    return None


def in_M_T(r, t: Tree, tol: float = DEFAULT_TOL) -> MembershipVerdict:
    """Membership of a correlation matrix in the latent tree model of ``t``."""
    r = _aligned(as_sym(r, "correlation"), t)
    v = in_PO_T(r.with_values(np.abs(r.values)), t, tol)
    if not v.member:
        return v
    bad = _triple_sign(r.values, r.names, tol)
    return bad if bad is not None else MembershipVerdict(True, None, tol)


def _corr_of(s, require_psd: bool = True) -> tuple[SymMatrix, list[str]]:
    """Correlation rescaling of a covariance/correlation input, plus flags."""
    flags = []
    if isinstance(s, SymMatrix):
        role = s.role
        a = s.values
        names = s.names
    else:
        a = np.asarray(s, dtype=float)
        role = "correlation" if np.allclose(np.diag(a), 1.0) else "covariance"
        names = None
    if role == "distance":
        raise ValueError("expected a covariance or correlation matrix")
    if require_psd:
        check_psd(a)
    else:
        try:
            check_psd(a)
        except NumericalError:
            flags.append("not-psd")
    d = np.sqrt(np.diag(a))
    if np.any(d <= 0):
        raise NumericalError("zero variance; correlation undefined")
    r = SymMatrix(np.clip(a / np.outer(d, d), -1, 1), "correlation", names)
    if np.any(r.values[~np.eye(r.dim, dtype=bool)] == 0):
        flags.append("zero-entries")
    return r, flags


def _psd_verdict(tol, flags) -> MembershipVerdict:
    if "not-psd" in flags:
        return MembershipVerdict(False, {"kind": "not-psd", "leaves": [], "slack": 0.0}, tol, flags)
    return MembershipVerdict(True, None, tol, flags)


def _triangle_product(a: np.ndarray, names, tol, flags):
    """Sign condition on the product of the three triangle minors of each triple."""
    m = a.shape[0]
    if m < 3:
        return None
    i, j, k = _triple_indices(m).T
    f1 = a[i, j] - a[i, k] * a[j, k]
    f2 = a[i, k] - a[i, j] * a[j, k]
    f3 = a[j, k] - a[i, j] * a[i, k]
    prod = f1 * f2 * f3
    h = int(np.argmin(prod))
    if prod[h] < -tol:
        return _fail("triangle-product", [names[i[h]], names[j[h]], names[k[h]]], -prod[h], tol, flags)
    return None


def tree_compatible(s, tol: float = DEFAULT_TOL, mode: str = "full",
                    require_psd: bool = True) -> MembershipVerdict:
    """Compatibility with the latent tree model of *some* tree.

    ``mode="triples"`` checks only the product-of-triangle-minors sign on
    every triple; ``mode="full"`` also requires ``|R|`` to lie in the union
    of phylogenetic oranges.  With ``require_psd=False`` an indefinite input
    is evaluated anyway and, if no constraint fails, rejected as ``not-psd``.
    """
    if mode not in ("full", "triples"):
        raise ValueError(f"unknown mode {mode!r}")
    r, flags = _corr_of(s, require_psd)
    bad = _triangle_product(r.values, r.names, tol, flags)
    if bad is not None:
        return bad
    if mode == "full":
        v = in_PO(r.with_values(np.abs(r.values)), tol)
        if not v.member:
            v.flags = flags
            return v
    return _psd_verdict(tol, flags)


def T_compatible(s, t: Tree, tol: float = DEFAULT_TOL,
                 require_psd: bool = True) -> MembershipVerdict:
    """Compatibility with the latent tree model on the fixed tree ``t``.

    The ratio constraints are evaluated in cross-product form so zero
    denominators are never divided by; they are reported in ``flags``.
    """
    r, flags = _corr_of(s, require_psd)
    r = _aligned(r, t)
    a = r.values
    bad = _triangle_product(a, r.names, tol, flags)
    if bad is not None:
        return bad
    if t.n_leaves >= 4:
        qs, idx = _quartet_arrays(t, r.names)
        i, j, k, l = idx.T
        num1 = a[i, k] * a[j, l]
        num2 = a[i, l] * a[j, k]
        den = a[i, j] * a[k, l]
        if np.any(den == 0):
            flags.append("zero-denominator")
        eq = np.abs(num1 - num2)
        ineq = np.maximum(num1 * den - den * den, num2 * den - den * den)
        worst = np.maximum(eq, ineq)
        h = int(np.argmax(worst))
        if worst[h] > tol:
            kind = "tetrad-equality" if eq[h] >= ineq[h] else "tetrad-inequality"
            return _fail(kind, qs[h].taxa, worst[h], tol, flags)
    return _psd_verdict(tol, flags)


# ---------------------------------------------------------------------------
# Signs and reconstruction


class SignPatternError(ValueError):
    def __init__(self, message: str, triple=None):
        super().__init__(message)
        self.triple = triple


def sign_canonicalize(r) -> tuple[np.ndarray, SymMatrix]:
    """Diagonal ``D`` (as a sign vector) making ``D R D`` entrywise nonnegative.

    ``D_11 = 1`` and ``D_ii = sign(r_1i)``.
    """
    r = as_sym(r, "correlation")
    a = r.values
    m = r.dim
    off = ~np.eye(m, dtype=bool)
    if np.any(a[off] == 0):
        i, j = np.argwhere((a == 0) & off)[0]
        raise SignPatternError(
            f"zero correlation between {r.names[i]} and {r.names[j]}; block-diagonal case unsupported",
            (r.names[i], r.names[j]),
        )
    signs = np.ones(m)
    signs[1:] = np.sign(a[0, 1:])
    out = signs[:, None] * a * signs[None, :]
    if np.any(out < 0):
        i, j = np.argwhere(out < 0)[0]
        triple = (r.names[0], r.names[i], r.names[j])
        raise SignPatternError(
            f"not sign-canonicalizable: negative triple product on {triple}", triple
        )
    return signs, r.with_values(out)


def neighbor_joining(d: np.ndarray, names: Sequence[str]) -> Tree:
    """Saitou-Nei neighbor joining; returns the unrooted binary topology."""
    names = list(names)
    m = len(names)
    if m < 3:
        raise ValueError("neighbor joining needs at least three taxa")
    dist = np.array(d, dtype=float)
    active = list(range(m))
    labels = {i: names[i] for i in range(m)}
    edges = []
    nxt = m
    while len(active) > 3:
        k = len(active)
        sub = dist[np.ix_(active, active)]
        total = sub.sum(axis=1)
        qmat = (k - 2) * sub - total[:, None] - total[None, :]
        np.fill_diagonal(qmat, np.inf)
        a, b = np.unravel_index(int(np.argmin(qmat)), qmat.shape)
        u, v = active[a], active[b]
        new_row = 0.5 * (dist[u] + dist[v] - dist[u, v])
        grown = np.zeros((nxt + 1, nxt + 1))
        grown[:nxt, :nxt] = dist
        grown[nxt, :nxt] = grown[:nxt, nxt] = new_row[:nxt]
        dist = grown
        edges += [(u, nxt), (v, nxt)]
        active = [x for x in active if x not in (u, v)] + [nxt]
        nxt += 1
    for x in active:
        edges.append((x, nxt))
    return Tree(edges, labels)


def _classify_quartets(a: np.ndarray, names, tol):
    resolved = {}
    for combo in itertools.combinations(range(len(names)), 4):
        i, j, k, l = combo
        cands = [
            ((i, j), (k, l), a[i, j] * a[k, l]),
            ((i, k), (j, l), a[i, k] * a[j, l]),
            ((i, l), (j, k), a[i, l] * a[j, k]),
        ]
        cands.sort(key=lambda c: c[2], reverse=True)
        if cands[0][2] - cands[1][2] > tol:
            (p, q), (x, y), _ = cands[0]
            resolved[combo] = Quartet((names[p], names[q]), (names[x], names[y]))
    return resolved


def _contract(t: Tree, keep: set) -> Tree:
    """Contract every internal edge of ``t`` not in ``keep``."""
    parent = list(range(t.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in t.internal_edges:
        if e not in keep:
            parent[find(e[0])] = find(e[1])
    edges = {(find(u), find(v)) for u, v in t.edges if find(u) != find(v)}
    return Tree(edges, {i: t.label(i) for i in range(t.n_leaves)})


def reconstruct_tree(r, tol: float = DEFAULT_TOL) -> Tree:
    """Recover the tree topology from a (generic) model correlation matrix.

    Quartet topologies are read off ``|R|``; neighbor joining on
    ``-log|R|`` amalgamates them, unsupported edges are contracted, and the
    result must resolve every classified quartet exactly as classified.
    """
    r = as_sym(r, "correlation")
    a = np.abs(r.values)
    names = r.names
    m = r.dim
    if np.any(a[~np.eye(m, dtype=bool)] == 0):
        raise ValueError("reconstruction needs nonzero correlations")
    if m == 3:
        return Tree([(0, 3), (1, 3), (2, 3)], dict(enumerate(names)))
    if m < 3:
        raise ValueError("need at least three leaves")
    resolved = _classify_quartets(a, names, tol)
    if not resolved:
        raise ValueError("star/unresolved: no quartet topology is resolved")
    nj = neighbor_joining(-np.log(a), names)
    keep = set()
    for e in nj.internal_edges:
        side = nj.edge_side(e)
        for q in resolved.values():
            (i, j), (k, l) = q.left, q.right
            if ({i, j} <= side and not ({k, l} & side)) or ({k, l} <= side and not ({i, j} & side)):
                keep.add(e)
                break
    tree = _contract(nj, keep)
    for q in resolved.values():
        (i, j), (k, l) = q.left, q.right
        others = (Quartet((i, k), (j, l)), Quartet((i, l), (j, k)))
        if not tree.displays(q) or any(tree.displays(o) for o in others):
            raise ValueError(f"not tree-like: quartet {q} is not displayed by the amalgamated tree")
    return tree
