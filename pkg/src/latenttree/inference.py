"""Tetrad chi-square tests and inverse-Wishart compatibility probabilities.

The tetrad statistic is ``Q' V^{-1} Q`` where ``Q`` stacks the unbiased
minor estimates ``det(S[ij, kl]) / (n (n-1))`` of the tested quartets and
``V`` is their exact Wishart covariance evaluated at the plug-in covariance
``S / n`` (the proxy covariance).  ``S`` is always the scatter matrix
``X' X`` of ``n`` mean-zero observations.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .geometry import SymMatrix, as_sym, check_psd
from .numerics import NumericalError, condition_number_spd, make_rng, solve_spd
from .trees import (
    Quartet,
    QuartetSet,
    Tree,
    enumerate_binary_trees,
    label_key,
    minimal_determining_quartets,
    serialize_newick,
    testing_quartets,
)
from .wishart import chi2_sf, cov_Q, minor, quartet_minor_indices, sample_inverse_wishart

__all__ = [
    "TestReport",
    "ExploratoryReport",
    "QuartetScreen",
    "BayesReport",
    "NearSingularError",
    "scatter_from_data",
    "tetrad_statistic",
    "quartet_test",
    "confirmatory_test",
    "exploratory_scan",
    "quartet_screen",
    "bayes_compatibility",
    "prescreen_and_confirm",
    "MAX_CONDITION",
]

MAX_CONDITION = 1e12
WEAK_CORRELATION = 0.02
BAYES_BUDGET = 1e10


class NearSingularError(NumericalError):
    """The proxy covariance of the tested minors is numerically singular."""


@dataclass
class TestReport:
    __test__ = False  # not a pytest class

    statistic: float
    dof: int
    p_value: float
    quartets: QuartetSet
    n: float
    condition_number: float
    covariance_mode: str = "proxy"
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "dof": self.dof,
            "p_value": self.p_value,
            "quartets": self.quartets.as_strings(),
            "n": self.n,
            "seed": None,
            "mode": self.covariance_mode,
            "condition_number": self.condition_number,
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def scatter_from_data(x, center: bool = True) -> tuple[np.ndarray, int]:
    """Scatter matrix and its Wishart degrees of freedom from an ``n x m`` data matrix.

    Centering by the sample mean costs one degree of freedom.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be a 2-d array (observations x variables)")
    n = x.shape[0]
    if center:
        x = x - x.mean(axis=0)
        n -= 1
    return x.T @ x, n


def _scatter(s, names) -> SymMatrix:
    if isinstance(s, SymMatrix):
        return s
    return SymMatrix(np.asarray(s, dtype=float), "scatter", names)


def tetrad_statistic(s, n: float, quartets: Sequence[Quartet],
                     names: Sequence[str] | None = None) -> TestReport:
    """Simultaneous vanishing-tetrad statistic for ``quartets``.

    Parameters
    ----------
    s : SymMatrix or array
        Scatter matrix ``X' X`` (``n`` times the sample covariance).
    n : int
        Wishart degrees of freedom of ``s`` (sample size for known-mean data).
    quartets : sequence of Quartet
        Hypothesized quartets; each ``ij|kl`` tests ``det(C[ij, kl]) = 0``.
    """
    s = _scatter(s, names)
    m = s.dim
    qs = quartets if isinstance(quartets, QuartetSet) else QuartetSet(quartets)
    if not qs:
        raise ValueError("no quartets to test")
    if n <= m:
        raise ValueError(f"need n > m (n={n}, m={m})")
    minors = [quartet_minor_indices(q, s.names) for q in qs]
    a = s.values
    qhat = np.array([minor(a, I, J) for I, J in minors]) / (n * (n - 1))
    cov = cov_Q(SymMatrix(a / n, "covariance", s.names), n, qs)
    v = cov.matrix
    cond = condition_number_spd(v)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NearSingularError(
            f"near-singular tetrad covariance (condition number {cond:.3g}) "
            "- reduce or re-select quartet set"
        )
    stat = float(qhat @ solve_spd(v, qhat))
    stat = max(stat, 0.0)
    notes = []
    d = np.sqrt(np.diag(a))
    r = a / np.outer(d, d)
    for q in qs:
        for x, y in itertools.combinations(q.taxa, 2):
            i, j = s.index(x), s.index(y)
            if abs(r[i, j]) < WEAK_CORRELATION:
                notes.append(f"weak sample correlation between {x} and {y}: {r[i, j]:.3g}")
    notes = sorted(set(notes))
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return TestReport(stat, len(qs), chi2_sf(stat, len(qs)), qs, n, cond, warnings=notes)


def quartet_test(s, n: float, q: Quartet, names: Sequence[str] | None = None) -> TestReport:
    """Single-tetrad test of ``q`` (one degree of freedom)."""
    if isinstance(q, str):
        q = Quartet.parse(q)
    return tetrad_statistic(s, n, QuartetSet([q]), names)


def confirmatory_test(s, n: float, t: Tree, names: Sequence[str] | None = None,
                      quartets: Sequence[Quartet] | None = None) -> TestReport:
    """Test every tetrad constraint of the binary tree ``t`` at once.

    Uses an algebraically independent quartet set whose size equals the
    model codimension ``C(m,2) - (2m-3)``, unless ``quartets`` is given.
    """
    s = _scatter(s, names)
    if set(s.names) != set(t.leaves):
        raise ValueError(
            f"matrix names {sorted(s.names)} do not match tree leaves {sorted(t.leaves)}"
        )
    qs = testing_quartets(t) if quartets is None else QuartetSet(quartets, tag="testing")
    return tetrad_statistic(s, n, qs)


@dataclass
class ExploratoryReport:
    ranked: list[tuple[Tree, TestReport]]
    alpha: float
    bonferroni_alpha: float
    surviving: list[Tree]
    candidate: Tree | None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "bonferroni_alpha": self.bonferroni_alpha,
            "candidate": serialize_newick(self.candidate) if self.candidate else None,
            "surviving": [serialize_newick(t) for t in self.surviving],
            "ranked": [
                {"tree": serialize_newick(t), **rep.to_dict()} for t, rep in self.ranked
            ],
        }


@lru_cache(maxsize=16)
def _scan_plan(labels: tuple[str, ...]) -> tuple[tuple[Tree, QuartetSet], ...]:
    return tuple((t, minimal_determining_quartets(t)) for t in enumerate_binary_trees(labels))


def exploratory_scan(s, n: float, labels: Sequence[str] | None = None, alpha: float = 0.05,
                     cap: int = 7) -> ExploratoryReport:
    """Rank every binary tree on ``labels`` by its determining-quartet test.

    A tree survives when its p-value is at least ``alpha / (number of trees)``;
    the candidate is the surviving tree with the largest p-value.
    """
    s = _scatter(s, None if labels is None else [str(x) for x in labels])
    labels = tuple(s.names)
    m = len(labels)
    if m > cap:
        raise ValueError(
            f"{m} leaves exceeds the exploratory cap of {cap}; use quartet_screen instead"
        )
    if m < 4:
        raise ValueError("exploratory scan needs at least four leaves")
    plan = _scan_plan(tuple(sorted(labels, key=label_key)))
    results = [(t, tetrad_statistic(s, n, qs)) for t, qs in plan]
    # stable sort keeps enumeration order among ties
    results.sort(key=lambda tr: -tr[1].p_value)
    threshold = alpha / len(results)
    surviving = [t for t, rep in results if rep.p_value >= threshold]
    candidate = surviving[0] if surviving else None
    return ExploratoryReport(results, alpha, threshold, surviving, candidate)


@dataclass
class QuartetScreen:
    """Per 4-subset topology calls: a Quartet, or None when unresolved."""

    classification: dict[tuple[str, str, str, str], Quartet | None]
    p_values: dict[tuple[str, str, str, str], dict[str, float]]
    alpha: float

    def resolved(self) -> list[Quartet]:
        return [q for q in self.classification.values() if q is not None]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "subsets": [
                {
                    "leaves": list(key),
                    "topology": str(q) if q is not None else "unresolved",
                    "p_values": self.p_values[key],
                }
                for key, q in self.classification.items()
            ],
        }


def quartet_screen(s, n: float, alpha: float = 0.05,
                   names: Sequence[str] | None = None) -> QuartetScreen:
    """Test the three topologies of every 4-subset with single-tetrad tests."""
    s = _scatter(s, names)
    labels = sorted(s.names, key=label_key)
    cls, pv = {}, {}
    for a, b, c, d in itertools.combinations(labels, 4):
        tops = (Quartet.of(a, b, c, d), Quartet.of(a, c, b, d), Quartet.of(a, d, b, c))
        reps = [quartet_test(s, n, q) for q in tops]
        pv[(a, b, c, d)] = {str(q): r.p_value for q, r in zip(tops, reps)}
        keep = [q for q, r in zip(tops, reps) if r.p_value >= alpha]
        cls[(a, b, c, d)] = keep[0] if len(keep) == 1 else None
    return QuartetScreen(cls, pv, alpha)


# ---------------------------------------------------------------------------
# Inverse-Wishart posterior compatibility


@dataclass
class BayesReport:
    probability: float
    draws: int
    satisfied: int
    seed: int
    constraint_kind: str
    prior: dict
    n: float
    target: list[str] | None = None

    def to_dict(self) -> dict:
        return {
            "probability": self.probability,
            "draws": self.draws,
            "satisfied": self.satisfied,
            "seed": self.seed,
            "mode": self.constraint_kind,
            "prior": self.prior,
            "n": self.n,
            "target": self.target,
        }


def _triple_indicator(c: np.ndarray, i: int, j: int, k: int) -> np.ndarray:
    """Sign test on the product of the three triangle minors, per draw."""
    f1 = c[:, k, k] * c[:, i, j] - c[:, i, k] * c[:, j, k]
    f2 = c[:, j, j] * c[:, i, k] - c[:, i, j] * c[:, j, k]
    f3 = c[:, i, i] * c[:, j, k] - c[:, i, j] * c[:, i, k]
    return f1 * f2 * f3 >= 0


def _to_correlation(c: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.einsum("nii->ni", c))
    return c / (d[:, :, None] * d[:, None, :])


def bayes_compatibility(s, n: float, draws: int, seed: int, mode: str = "triples",
                        triple: Sequence[str] | None = None, quartet: Quartet | str | None = None,
                        names: Sequence[str] | None = None, n0: float | None = None,
                        prior_scale=None, chunk: int = 1024) -> BayesReport:
    """Posterior probability that the covariance satisfies tree inequalities.

    The prior is inverse-Wishart ``IW(n0, C0)`` with defaults ``n0 = m`` and
    ``C0 = I``, so the posterior is ``IW(n0 + n, C0 + S)``.  Each draw is
    rescaled to a correlation matrix and scored:

    ``mode="triples"``
        product-of-triangle-minors sign on ``triple`` or, by default, on
        every triple jointly;
    ``mode="quartet-full"``
        both tetrad inequalities of ``quartet`` and the triple condition on
        its four leaf triples.
    """
    s = _scatter(s, names)
    check_psd(s.values)
    m = s.dim
    if draws < 1:
        raise ValueError("need at least one draw")
    if draws * m ** 3 > BAYES_BUDGET:
        raise ValueError(f"draws * m^3 = {draws * m ** 3:.3g} exceeds the budget {BAYES_BUDGET:.0e}")
    n0 = float(m) if n0 is None else float(n0)
    c0 = np.eye(m) if prior_scale is None else as_sym(prior_scale, "covariance").values
    post_df = n0 + n
    post_scale = c0 + s.values
    idx = {x: i for i, x in enumerate(s.names)}

    if mode == "triples":
        if triple is not None:
            if len(set(triple)) != 3:
                raise ValueError("a triple needs three distinct leaves")
            triples = [tuple(idx[str(x)] for x in triple)]
            target = [str(x) for x in triple]
        else:
            if m < 3:
                raise ValueError("need at least three variables")
            triples = list(itertools.combinations(range(m), 3))
            target = None
        tetrads = []
    elif mode == "quartet-full":
        if quartet is None:
            raise ValueError("mode quartet-full needs a quartet ij|kl")
        q = Quartet.parse(quartet) if isinstance(quartet, str) else quartet
        i, j, k, l = (idx[x] for x in q.taxa)
        triples = list(itertools.combinations((i, j, k, l), 3))
        # sigma_il sigma_jk <= sigma_ij sigma_kl and sigma_ik sigma_jl <= sigma_ij sigma_kl
        tetrads = [((i, l), (j, k), (i, j), (k, l)), ((i, k), (j, l), (i, j), (k, l))]
        target = [str(q)]
    else:
        raise ValueError(f"unknown mode {mode!r}")

    hits = 0
    done = 0
    block = 0
    while done < draws:
        # every block comes from its own stream and is always drawn in full,
        # so the first N indicators do not depend on N
        rng = make_rng(seed, block)
        size = min(chunk, draws - done)
        c = _to_correlation(sample_inverse_wishart(post_df, post_scale, rng, size=chunk))[:size]
        ok = np.ones(size, dtype=bool)
        for a, b, e in triples:
            ok &= _triple_indicator(c, a, b, e)
        for (p1, p2, p3, p4) in tetrads:
            lhs = c[:, p1[0], p1[1]] * c[:, p2[0], p2[1]]
            rhs = c[:, p3[0], p3[1]] * c[:, p4[0], p4[1]]
            ok &= lhs - rhs <= 0
        hits += int(ok.sum())
        done += size
        block += 1
    prior = {"n0": n0, "C0": "identity" if prior_scale is None else "custom"}
    return BayesReport(hits / draws, draws, hits, int(seed), mode, prior, n, target)


def prescreen_and_confirm(s, n: float, t: Tree, draws: int, seed: int,
                          threshold: float = 0.1, names: Sequence[str] | None = None):
    """Posterior triple pre-screen followed, if passed, by the confirmatory test.

    Returns ``(bayes_report, test_report_or_None)``.
    """
    bayes = bayes_compatibility(s, n, draws, seed, mode="triples", names=names)
    if bayes.probability < threshold:
        return bayes, None
    return bayes, confirmatory_test(s, n, t, names=names)
