"""Leaf-labelled unrooted trees, Newick I/O, and quartet systems.

A :class:`Tree` is stored in a canonical node numbering: leaves are
``0..m-1`` in natural label order, inner nodes follow in a deterministic
pre-order.  Two trees with the same leaf-labelled topology therefore compare
equal and serialize identically.
"""

from __future__ import annotations

import itertools
import re
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tree",
    "Quartet",
    "QuartetSet",
    "NewickError",
    "label_key",
    "parse_newick",
    "serialize_newick",
    "path_edges",
    "quartets_of",
    "minimal_determining_quartets",
    "testing_quartets",
    "tetrad_jacobian_rank",
    "enumerate_binary_trees",
    "double_factorial",
]

Edge = tuple[int, int]


def label_key(label: str):
    """Natural sort key: numeric labels sort numerically and before the rest."""
    if label.isdigit():
        return (0, int(label), label)
    return (1, 0, label)


def _edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


class Tree:
    """Undirected leaf-labelled tree with no degree-2 nodes.

    Parameters
    ----------
    edges : iterable of (int, int)
        Node pairs; node ids are arbitrary hashables and get renumbered.
    labels : mapping
        Leaf node -> label.  Every degree-1 node must be labelled and only
        those nodes may be labelled.
    """

    __slots__ = ("_adj", "_labels", "_leaf_index", "edges", "leaves", "__dict__")

    def __init__(self, edges: Iterable[tuple], labels: Mapping):
        adj: dict = {}
        n_edges = 0
        for u, v in edges:
            if u == v:
                raise ValueError(f"self loop at node {u!r}")
            adj.setdefault(u, set()).add(v)
            adj.setdefault(v, set()).add(u)
            n_edges += 1
        if not adj:
            raise ValueError("a tree needs at least two leaves")
        if sum(len(s) for s in adj.values()) != 2 * n_edges:
            raise ValueError("duplicate edges")
        if n_edges != len(adj) - 1:
            raise ValueError("edge count does not match a tree (|E| != |U| - 1)")
        leaves = [u for u, nb in adj.items() if len(nb) == 1]
        for u, nb in adj.items():
            if len(nb) == 2:
                raise ValueError(f"inner node {u!r} has degree 2")
        if set(labels) != set(leaves):
            raise ValueError("labels must be given for exactly the leaves")
        names = [str(labels[u]) for u in leaves]
        if any(not s for s in names):
            raise ValueError("empty leaf label")
        if len(set(names)) != len(names):
            raise ValueError("duplicate leaf labels")

        # canonical renumbering
        order = sorted(leaves, key=lambda u: label_key(str(labels[u])))
        new_id = {u: i for i, u in enumerate(order)}
        m = len(order)
        start = order[0]
        seen = {start}
        stack = [start]
        while stack:  # connectivity check
            x = stack.pop()
            for y in adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        if len(seen) != len(adj):
            raise ValueError("graph is not connected")

        # min leaf label reachable through each directed edge, for child ordering
        if m > 2:
            root = next(iter(adj[start]))
            nxt = m
            stack = [(root, None)]
            min_leaf: dict = {}
            post: list = []
            while stack:
                x, parent = stack.pop()
                post.append((x, parent))
                for y in adj[x]:
                    if y != parent and len(adj[y]) > 1:
                        stack.append((y, x))
            for x, parent in reversed(post):
                best = min(
                    (new_id[y] if len(adj[y]) == 1 else min_leaf[y])
                    for y in adj[x]
                    if y != parent
                )
                min_leaf[x] = best
            # pre-order numbering, children ordered by smallest leaf
            stack = [(root, None)]
            while stack:
                x, parent = stack.pop()
                new_id[x] = nxt
                nxt += 1
                kids = [y for y in adj[x] if y != parent and len(adj[y]) > 1]
                kids.sort(key=lambda y: min_leaf[y], reverse=True)
                stack.extend((y, x) for y in kids)

        self._adj = tuple(
            tuple(sorted(new_id[y] for y in adj[x]))
            for x in sorted(adj, key=lambda u: new_id[u])
        )
        self._labels = tuple(str(labels[u]) for u in order)
        self._leaf_index = {s: i for i, s in enumerate(self._labels)}
        self.edges: tuple[Edge, ...] = tuple(
            sorted({_edge(new_id[u], new_id[v]) for u in adj for v in adj[u]})
        )
        self.leaves: tuple[str, ...] = self._labels

    # -- basic structure -------------------------------------------------
    @property
    def n_leaves(self) -> int:
        return len(self._labels)

    @property
    def n_nodes(self) -> int:
        return len(self._adj)

    @property
    def nodes(self) -> range:
        return range(len(self._adj))

    def neighbors(self, u: int) -> tuple[int, ...]:
        return self._adj[u]

    def degree(self, u: int) -> int:
        return len(self._adj[u])

    def is_leaf(self, u: int) -> bool:
        return u < len(self._labels)

    def label(self, u: int) -> str:
        return self._labels[u]

    def leaf_node(self, label: str) -> int:
        try:
            return self._leaf_index[str(label)]
        except KeyError:
            raise KeyError(f"unknown leaf label {label!r}") from None

    @property
    def inner_nodes(self) -> range:
        return range(len(self._labels), len(self._adj))

    @property
    def internal_edges(self) -> tuple[Edge, ...]:
        m = len(self._labels)
        return tuple(e for e in self.edges if e[0] >= m and e[1] >= m)

    def is_binary(self) -> bool:
        return all(len(self._adj[u]) == 3 for u in self.inner_nodes)

    # -- paths and splits ------------------------------------------------
    def path_edges(self, u: int, v: int) -> tuple[Edge, ...]:
        """Edges on the unique path from ``u`` to ``v`` in walking order."""
        n = len(self._adj)
        for x in (u, v):
            if not (isinstance(x, (int, np.integer)) and 0 <= x < n):
                raise KeyError(f"unknown node {x!r}")
        if u == v:
            return ()
        parent = {u: None}
        queue = deque([u])
        while queue:
            x = queue.popleft()
            if x == v:
                break
            for y in self._adj[x]:
                if y not in parent:
                    parent[y] = x
                    queue.append(y)
        path = []
        x = v
        while parent[x] is not None:
            path.append(_edge(x, parent[x]))
            x = parent[x]
        path.reverse()
        return tuple(path)

    @cached_property
    def _leaf_paths(self) -> dict[tuple[int, int], frozenset]:
        m = len(self._labels)
        return {
            (a, b): frozenset(self.path_edges(a, b))
            for a, b in itertools.combinations(range(m), 2)
        }

    def leaf_path(self, a: str, b: str) -> frozenset:
        i, j = self.leaf_node(a), self.leaf_node(b)
        if i == j:
            return frozenset()
        return self._leaf_paths[(min(i, j), max(i, j))]

    def edge_side(self, e: Edge) -> frozenset[str]:
        """Leaf labels on the ``e[1]`` side of edge ``e``."""
        u, v = e
        if v not in self._adj[u]:
            raise KeyError(f"{e!r} is not an edge")
        seen = {u, v}
        stack = [v]
        out = []
        while stack:
            x = stack.pop()
            if self.is_leaf(x):
                out.append(self._labels[x])
            for y in self._adj[x]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        return frozenset(out)

    @cached_property
    def splits(self) -> frozenset[frozenset[str]]:
        """Non-trivial splits, each stored as the side without the first leaf."""
        first = self._labels[0]
        out = set()
        for e in self.internal_edges:
            side = self.edge_side(e)
            if first in side:
                side = frozenset(self._labels) - side
            out.add(side)
        return frozenset(out)

    def displays(self, q: "Quartet") -> bool:
        """True iff the leaf paths of both cherries of ``q`` share no edge."""
        (i, j), (k, l) = q.left, q.right
        return not (self.leaf_path(i, j) & self.leaf_path(k, l))

    # -- dunder ----------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, Tree):
            return NotImplemented
        return self._labels == other._labels and self.edges == other.edges

    def __hash__(self):
        return hash((self._labels, self.edges))

    def __repr__(self):
        return f"Tree({serialize_newick(self)!r})"

    def relabel(self, mapping: Mapping[str, str]) -> "Tree":
        """Copy with leaf labels replaced through ``mapping``."""
        labels = {i: mapping.get(s, s) for i, s in enumerate(self._labels)}
        return Tree(self.edges, labels)


# ---------------------------------------------------------------------------
# Quartets


@dataclass(frozen=True, order=False)
class Quartet:
    """Unordered split ``ij|kl`` of four distinct leaves, kept canonical."""

    left: tuple[str, str]
    right: tuple[str, str]

    def __post_init__(self):
        a = tuple(sorted(map(str, self.left), key=label_key))
        b = tuple(sorted(map(str, self.right), key=label_key))
        if len(a) != 2 or len(b) != 2 or len(set(a + b)) != 4:
            raise ValueError(f"quartet needs four distinct leaves, got {a}|{b}")
        if label_key(b[0]) < label_key(a[0]):
            a, b = b, a
        object.__setattr__(self, "left", a)
        object.__setattr__(self, "right", b)

    @classmethod
    def of(cls, i, j, k, l) -> "Quartet":
        return cls((i, j), (k, l))

    @classmethod
    def parse(cls, text: str) -> "Quartet":
        """Parse ``"12|34"`` (single-character labels) or ``"a,b|c,d"``."""
        try:
            lhs, rhs = text.strip().split("|")
        except ValueError:
            raise ValueError(f"cannot parse quartet {text!r}") from None

        def side(s):
            s = s.strip()
            parts = [p.strip() for p in s.split(",")] if "," in s else list(s)
            if len(parts) != 2 or not all(parts):
                raise ValueError(f"cannot parse quartet {text!r}")
            return tuple(parts)

        return cls(side(lhs), side(rhs))

    @property
    def taxa(self) -> tuple[str, str, str, str]:
        return self.left + self.right

    def sort_key(self):
        return tuple(label_key(s) for s in self.taxa)

    def __str__(self):
        if all(len(s) == 1 for s in self.taxa):
            return "".join(self.left) + "|" + "".join(self.right)
        return ",".join(self.left) + "|" + ",".join(self.right)

    def __repr__(self):
        return f"Quartet({str(self)!r})"


class QuartetSet(tuple):
    """Ordered tuple of distinct quartets with a provenance ``tag``."""

    TAGS = ("determining", "testing", "arbitrary")

    def __new__(cls, quartets: Iterable[Quartet] = (), tag: str = "arbitrary"):
        items = tuple(q if isinstance(q, Quartet) else Quartet.parse(q) for q in quartets)
        if len(set(items)) != len(items):
            raise ValueError("duplicate quartets")
        if tag not in cls.TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        obj = super().__new__(cls, items)
        obj.tag = tag
        return obj

    def __repr__(self):
        return f"QuartetSet([{', '.join(map(str, self))}], tag={self.tag!r})"

    def as_strings(self) -> list[str]:
        return [str(q) for q in self]


# ---------------------------------------------------------------------------
# Newick


class NewickError(ValueError):
    """Malformed Newick input; ``position`` is the 0-based character offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


_LABEL = re.compile(r"[A-Za-z0-9_.\-]+")
_LENGTH = re.compile(r"[0-9eE.+\-]+")


def parse_newick(text: str) -> Tree:
    """Parse a (rooted or unrooted) Newick string into an unrooted :class:`Tree`.

    Branch lengths and inner-node labels are accepted and discarded.
    Degree-2 nodes, including a bifurcating root, are suppressed.
    """
    pos = 0
    n = len(text)
    children: dict[int, list[int]] = {}
    labels: dict[int, str] = {}
    counter = itertools.count()

    def skip_ws():
        nonlocal pos
        while pos < n and text[pos].isspace():
            pos += 1

    def read_label():
        nonlocal pos
        skip_ws()
        mt = _LABEL.match(text, pos)
        if not mt:
            return None
        pos = mt.end()
        return mt.group(0)

    def read_length():
        nonlocal pos
        skip_ws()
        if pos < n and text[pos] == ":":
            pos += 1
            skip_ws()
            mt = _LENGTH.match(text, pos)
            if not mt:
                raise NewickError("expected branch length after ':'", pos)
            try:
                float(mt.group(0))
            except ValueError:
                raise NewickError(f"bad branch length {mt.group(0)!r}", pos) from None
            pos = mt.end()

    def subtree() -> int:
        nonlocal pos
        skip_ws()
        node = next(counter)
        children[node] = []
        if pos < n and text[pos] == "(":
            pos += 1
            while True:
                children[node].append(subtree())
                skip_ws()
                if pos >= n:
                    raise NewickError("unbalanced parentheses", pos)
                if text[pos] == ",":
                    pos += 1
                    continue
                if text[pos] == ")":
                    pos += 1
                    break
                raise NewickError(f"unexpected character {text[pos]!r}", pos)
            read_label()  # inner labels / support values are ignored
        else:
            start = pos
            lab = read_label()
            if lab is None:
                raise NewickError("empty leaf label", start)
            labels[node] = lab
        read_length()
        return node

    subtree()
    skip_ws()
    if pos >= n or text[pos] != ";":
        if pos < n and text[pos] == ")":
            raise NewickError("unbalanced parentheses", pos)
        raise NewickError("expected ';'", pos)
    pos += 1
    skip_ws()
    if pos != n:
        raise NewickError("trailing characters after ';'", pos)

    names = list(labels.values())
    dup = {s for s in names if names.count(s) > 1}
    if dup:
        first = sorted(dup)[0]
        raise NewickError(f"duplicate leaf label {first!r}", text.find(first))

    adj: dict[int, set[int]] = {u: set() for u in children}
    for u, kids in children.items():
        for v in kids:
            adj[u].add(v)
            adj[v].add(u)
    # drop unlabelled dangling nodes, then smooth degree-2 nodes
    changed = True
    while changed:
        changed = False
        for u in list(adj):
            if u in labels:
                continue
            if len(adj[u]) <= 1:
                for v in adj.pop(u):
                    adj[v].discard(u)
                changed = True
            elif len(adj[u]) == 2:
                a, b = adj.pop(u)
                adj[a].discard(u)
                adj[b].discard(u)
                adj[a].add(b)
                adj[b].add(a)
                changed = True
    if len(labels) < 2:
        raise NewickError("tree needs at least two leaves", 0)
    for u in labels:
        if len(adj[u]) != 1:
            raise NewickError(f"labelled node {labels[u]!r} is not a leaf", 0)
    edges = {_edge(u, v) for u in adj for v in adj[u]}
    return Tree(edges, labels)


def serialize_newick(t: Tree) -> str:
    """Deterministic unrooted Newick string (no branch lengths)."""
    m = t.n_leaves
    if m == 2:
        return f"({t.label(0)},{t.label(1)});"
    root = t.neighbors(0)[0]

    def render(x, parent):
        if t.is_leaf(x):
            return t.label(x), x
        parts = [render(y, x) for y in t.neighbors(x) if y != parent]
        parts.sort(key=lambda p: p[1])
        return "(" + ",".join(p[0] for p in parts) + ")", parts[0][1]

    return render(root, None)[0] + ";"


def path_edges(t: Tree, u: int, v: int) -> tuple[Edge, ...]:
    return t.path_edges(u, v)


# ---------------------------------------------------------------------------
# Quartet systems


def _require(t: Tree, *, binary: bool = False, min_leaves: int = 4):
    if t.n_leaves < min_leaves:
        raise ValueError(f"need at least {min_leaves} leaves, tree has {t.n_leaves}")
    if binary and not t.is_binary():
        raise ValueError("tree must be binary")


def quartets_of(t: Tree) -> QuartetSet:
    """All quartets ``ij|kl`` whose cherry paths are edge-disjoint."""
    _require(t)
    out = []
    for a, b, c, d in itertools.combinations(t.leaves, 4):
        for q in (Quartet.of(a, b, c, d), Quartet.of(a, c, b, d), Quartet.of(a, d, b, c)):
            if t.displays(q):
                out.append(q)
    out.sort(key=Quartet.sort_key)
    return QuartetSet(out, tag="arbitrary")


def _closest_leaf(t: Tree, start: int, blocked: int) -> int:
    """Nearest leaf (by edge count, then label) in the branch at ``start``."""
    frontier = [start]
    seen = {start, blocked}
    while frontier:
        found = [x for x in frontier if t.is_leaf(x)]
        if found:
            return min(found, key=lambda x: label_key(t.label(x)))
        nxt = []
        for x in frontier:
            for y in t.neighbors(x):
                if y not in seen:
                    seen.add(y)
                    nxt.append(y)
        frontier = nxt
    raise AssertionError("branch without leaves")


def minimal_determining_quartets(t: Tree) -> QuartetSet:
    """One quartet per internal edge, built from the closest leaf in each branch."""
    _require(t, binary=True)
    out = []
    for u, v in t.internal_edges:
        a = [t.label(_closest_leaf(t, x, u)) for x in t.neighbors(u) if x != v]
        b = [t.label(_closest_leaf(t, y, v)) for y in t.neighbors(v) if y != u]
        out.append(Quartet(tuple(a), tuple(b)))
    out.sort(key=Quartet.sort_key)
    return QuartetSet(out, tag="determining")


def _generic_correlations(t: Tree, seed: int) -> dict[tuple[str, str], float]:
    rng = np.random.default_rng(seed)
    w = dict(zip(t.edges, rng.uniform(0.6, 0.9, size=len(t.edges))))
    out = {}
    for a, b in itertools.combinations(t.leaves, 2):
        r = float(np.prod([w[e] for e in t.leaf_path(a, b)]))
        out[(a, b)] = out[(b, a)] = r
    return out


def _tetrad_gradient(q: Quartet, rho, pair_pos) -> np.ndarray:
    """Gradient of ``rho_ik rho_jl - rho_il rho_jk`` in off-diagonal coordinates."""
    (i, j), (k, l) = q.left, q.right
    g = np.zeros(len(pair_pos))
    g[pair_pos[(i, k)]] += rho[(j, l)]
    g[pair_pos[(j, l)]] += rho[(i, k)]
    g[pair_pos[(i, l)]] -= rho[(j, k)]
    g[pair_pos[(j, k)]] -= rho[(i, l)]
    return g


def _rank(rows: list[np.ndarray], tol: float) -> int:
    if not rows:
        return 0
    sv = np.linalg.svd(np.array(rows), compute_uv=False)
    return int(np.sum(sv > tol * max(sv[0], 1.0)))


def _pair_positions(labels: Sequence[str]) -> dict[tuple[str, str], int]:
    pos = {}
    for idx, (a, b) in enumerate(itertools.combinations(labels, 2)):
        pos[(a, b)] = pos[(b, a)] = idx
    return pos


def tetrad_jacobian_rank(t: Tree, quartets: Iterable[Quartet], seed: int = 0,
                         tol: float = 1e-8) -> int:
    """Rank of the tetrad Jacobian of ``quartets`` at a generic point of ``t``."""
    rho = _generic_correlations(t, seed)
    pos = _pair_positions(t.leaves)
    return _rank([_tetrad_gradient(q, rho, pos) for q in quartets], tol)


def testing_quartets(t: Tree, seed: int = 0, tol: float = 1e-8) -> QuartetSet:
    """Algebraically independent displayed quartets, one per model codimension.

    Quartets are scanned in canonical order and kept when they raise the rank
    of the tetrad Jacobian at a fixed generic model point.
    """
    _require(t, binary=True)
    m = t.n_leaves
    target = m * (m - 1) // 2 - (2 * m - 3)
    rho = _generic_correlations(t, seed)
    pos = _pair_positions(t.leaves)
    rows: list[np.ndarray] = []
    chosen: list[Quartet] = []
    for q in quartets_of(t):
        g = _tetrad_gradient(q, rho, pos)
        if _rank(rows + [g], tol) > len(rows):
            rows.append(g)
            chosen.append(q)
            if len(chosen) == target:
                break
    if len(chosen) != target:
        raise RuntimeError(
            f"tetrad Jacobian reached rank {len(chosen)}, expected {target}"
        )
    return QuartetSet(chosen, tag="testing")


def double_factorial(k: int) -> int:
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


def enumerate_binary_trees(labels: Sequence[str], cap: int = 10) -> list[Tree]:
    """All ``(2m-5)!!`` binary topologies on ``labels`` by stepwise leaf insertion."""
    labels = [str(s) for s in labels]
    m = len(labels)
    if m < 3:
        raise ValueError("need at least three labels")
    if m > cap:
        raise ValueError(f"{m} labels exceeds the enumeration cap of {cap}")
    if len(set(labels)) != m:
        raise ValueError("duplicate labels")
    labels = sorted(labels, key=label_key)
    # leaves are nodes 0..m-1, inner nodes m, m+1, ...
    partial = [[(0, m), (1, m), (2, m)]]
    for leaf in range(3, m):
        inner = m + leaf - 2
        grown = []
        for edges in partial:
            for idx, (u, v) in enumerate(edges):
                new = edges[:idx] + edges[idx + 1:]
                new += [(u, inner), (inner, v), (inner, leaf)]
                grown.append(new)
        partial = grown
    names = dict(enumerate(labels))
    return [Tree(edges, names) for edges in partial]

