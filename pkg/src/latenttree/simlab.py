"""Simulation studies: data from latent tree models and tetrad-test replications.

Randomness is organized by stream keys under a single experiment seed:
``(seed, 1)`` draws the edge weights once per experiment, and replicate
``i`` uses ``(seed, 2, i)``.  Replicates can therefore run in any order or
in several processes and still give identical results.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .geometry import SymMatrix, constant_edge_weights, in_M_T, uniform_edge_weights
from .inference import exploratory_scan, tetrad_statistic
from .numerics import RNG_ALGORITHM, make_rng, substream
from .trees import (
    Quartet,
    QuartetSet,
    Tree,
    minimal_determining_quartets,
    parse_newick,
    serialize_newick,
    testing_quartets,
)
from .wishart import chi2_cdf

__all__ = [
    "WeightLaw",
    "ExperimentConfig",
    "Histogram",
    "PowerResult",
    "RecoveryResult",
    "VolumeEstimate",
    "gen_tree_data",
    "ks_distance",
    "make_histogram",
    "null_distribution_experiment",
    "power_experiment",
    "recovery_experiment",
    "volume_ratio_tripod",
    "write_manifest",
]

WEIGHT_STREAM = 1
REPLICATE_STREAM = 2
DEFAULT_BINS = 40


@dataclass(frozen=True)
class WeightLaw:
    """How edge correlations are chosen: ``uniform``, ``fixed`` or ``explicit``."""

    kind: str
    lo: float = 0.5
    hi: float = 1.0
    value: float = 0.7
    weights: Mapping | None = None

    def __post_init__(self):
        if self.kind == "uniform":
            if not 0 <= self.lo <= self.hi <= 1:
                raise ValueError("uniform weight law needs 0 <= lo <= hi <= 1")
        elif self.kind == "fixed":
            if not -1 < self.value < 1:
                raise ValueError("fixed edge correlation must lie in (-1, 1)")
        elif self.kind == "explicit":
            if self.weights is None:
                raise ValueError("explicit weight law needs weights")
        else:
            raise ValueError(f"unknown weight law {self.kind!r}")

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "WeightLaw":
        return cls("uniform", lo=lo, hi=hi)

    @classmethod
    def fixed(cls, value: float) -> "WeightLaw":
        return cls("fixed", value=value)

    @classmethod
    def explicit(cls, weights: Mapping) -> "WeightLaw":
        return cls("explicit", weights=dict(weights))

    def draw(self, t: Tree, rng: np.random.Generator) -> dict:
        if self.kind == "uniform":
            return uniform_edge_weights(t, self.lo, self.hi, rng)
        if self.kind == "fixed":
            return constant_edge_weights(t, self.value)
        return dict(self.weights)

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform", "lo": self.lo, "hi": self.hi}
        if self.kind == "fixed":
            return {"kind": "fixed", "value": self.value}
        return {"kind": "explicit", "weights": {f"{u}-{v}": x for (u, v), x in self.weights.items()}}


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation study.

    ``quartets`` is a single Quartet (or ``"ij|kl"`` string), a sequence of
    quartets, or one of ``"determining"`` / ``"testing"`` to derive the set
    from ``tree``.
    """

    tree: Tree
    weight_law: WeightLaw
    n: int = 60
    reps: int = 2000
    seed: int = 0
    quartets: object = "testing"

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.n < 1:
            raise ValueError("n must be at least 1")

    def quartet_set(self) -> QuartetSet:
        q = self.quartets
        if q == "determining":
            return minimal_determining_quartets(self.tree)
        if q == "testing":
            return testing_quartets(self.tree)
        if isinstance(q, (Quartet, str)):
            return QuartetSet([Quartet.parse(q) if isinstance(q, str) else q])
        return QuartetSet(q)

    def to_dict(self) -> dict:
        return {
            "tree": serialize_newick(self.tree),
            "weight_law": self.weight_law.to_dict(),
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "quartets": self.quartet_set().as_strings(),
        }


def gen_tree_data(t: Tree, w: Mapping, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n x m`` Gaussian sample of the leaves, columns in ``t.leaves`` order.

    Every node has unit variance: a child ``v`` of ``u`` across edge ``e`` is
    ``rho_e * Z_u + sqrt(1 - rho_e^2) * eps_v``.  Hidden nodes are discarded.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    weights = {tuple(sorted(e)): float(x) for e, x in w.items()}
    if set(weights) != set(t.edges):
        raise ValueError("weights must cover exactly the tree's edges")
    for e, x in weights.items():
        if abs(x) >= 1:
            raise ValueError(f"edge {e} has |correlation| {abs(x)} >= 1 (degenerate noise)")
    root = t.n_leaves if t.n_nodes > t.n_leaves else 0
    z = np.empty((t.n_nodes, n))
    z[root] = rng.standard_normal(n)
    stack, seen = [root], {root}
    while stack:
        u = stack.pop()
        for v in sorted(t.neighbors(u)):
            if v in seen:
                continue
            seen.add(v)
            r = weights[(min(u, v), max(u, v))]
            z[v] = r * z[u] + np.sqrt(1.0 - r * r) * rng.standard_normal(n)
            stack.append(v)
    return z[: t.n_leaves].T.copy()


# ---------------------------------------------------------------------------
# Histograms


def ks_distance(x: Sequence[float], dof: int) -> float:
    """Kolmogorov-Smirnov distance between the sample ``x`` and ``chi2(dof)``."""
    x = np.sort(np.asarray(x, dtype=float))
    k = x.size
    f = chi2_cdf(x, dof)
    i = np.arange(1, k + 1)
    return float(max(np.max(i / k - f), np.max(f - (i - 1) / k)))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray
    dof: int
    ks: float
    mean: float
    variance: float
    values: np.ndarray = field(repr=False)

    @property
    def reps(self) -> int:
        return int(self.counts.sum())

    def rows(self) -> list[tuple[float, float, int, float]]:
        return [
            (float(lo), float(hi), int(c), float(d))
            for lo, hi, c, d in zip(self.edges[:-1], self.edges[1:], self.counts, self.density)
        ]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["bin_lo", "bin_hi", "count", "chi2_density_at_mid"])
            for lo, hi, c, d in self.rows():
                out.writerow([repr(lo), repr(hi), c, repr(d)])

    def to_dict(self) -> dict:
        return {
            "dof": self.dof,
            "reps": self.reps,
            "ks_distance": self.ks,
            "mean": self.mean,
            "variance": self.variance,
            "bins": [
                {"bin_lo": lo, "bin_hi": hi, "count": c, "chi2_density_at_mid": d}
                for lo, hi, c, d in self.rows()
            ],
        }


def make_histogram(values: Sequence[float], dof: int, bins: int = DEFAULT_BINS) -> Histogram:
    """Equal-width bins from 0 to ``max(values, chi2 99.9% quantile)``."""
    v = np.asarray(values, dtype=float)
    top = max(float(v.max()) if v.size else 0.0, float(stats.chi2.ppf(0.999, dof)))
    counts, edges = np.histogram(v, bins=bins, range=(0.0, top))
    mids = 0.5 * (edges[:-1] + edges[1:])
    dens = stats.chi2.pdf(mids, dof)
    return Histogram(edges, counts, dens, dof, ks_distance(v, dof), float(v.mean()),
                     float(v.var(ddof=1)) if v.size > 1 else 0.0, v)


# ---------------------------------------------------------------------------
# Replication engine


def _statistics(args) -> list[tuple[float, float]]:
    t, w, n, qs, seed, indices = args
    out = []
    for i in indices:
        x = gen_tree_data(t, w, n, substream(seed, i, REPLICATE_STREAM))
        with warnings.catch_warnings():
            # weak-correlation warnings are expected noise in replications
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = tetrad_statistic(SymMatrix(x.T @ x, "scatter", t.leaves), n, qs)
        out.append((rep.statistic, rep.p_value))
    return out


def _run(t: Tree, w: dict, n: int, qs: QuartetSet, seed: int, reps: int,
         workers: int) -> np.ndarray:
    if workers <= 1:
        out = _statistics((t, w, n, qs, seed, range(reps)))
    else:
        chunks = np.array_split(np.arange(reps), workers)
        jobs = [(t, w, n, qs, seed, c.tolist()) for c in chunks]
        with ProcessPoolExecutor(workers) as pool:
            out = [r for part in pool.map(_statistics, jobs) for r in part]
    return np.array(out, dtype=float).reshape(reps, 2)


def _weights(cfg: ExperimentConfig) -> dict:
    return cfg.weight_law.draw(cfg.tree, make_rng(cfg.seed, WEIGHT_STREAM))


def null_distribution_experiment(cfg: ExperimentConfig, workers: int = 1,
                                 bins: int = DEFAULT_BINS) -> Histogram:
    """Sampling distribution of the tetrad statistic for true quartets.

    Edge weights are drawn once; each replicate draws ``n`` observations
    from the resulting model and tests ``cfg.quartet_set()``.
    """
    qs = cfg.quartet_set()
    shown = [q for q in qs if not cfg.tree.displays(q)]
    if shown:
        raise ValueError(f"quartets not displayed by the tree: {[str(q) for q in shown]}")
    res = _run(cfg.tree, _weights(cfg), cfg.n, qs, cfg.seed, cfg.reps, workers)
    return make_histogram(res[:, 0], len(qs), bins)


@dataclass
class PowerResult:
    histogram: Histogram
    rejection_rate: float
    alpha: float
    p_values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"rejection_rate": self.rejection_rate, "alpha": self.alpha,
                "histogram": self.histogram.to_dict()}


def power_experiment(cfg: ExperimentConfig, alpha: float = 0.05, workers: int = 1,
                     bins: int = DEFAULT_BINS, require_false: bool = True) -> PowerResult:
    """Rejection rate at ``alpha`` for ``cfg.quartet_set()``.

    With ``require_false=False`` true quartets are allowed, which turns this
    into a size check.
    """
    qs = cfg.quartet_set()
    if require_false and all(cfg.tree.displays(q) for q in qs):
        raise ValueError("power experiment needs at least one quartet not displayed by the tree")
    res = _run(cfg.tree, _weights(cfg), cfg.n, qs, cfg.seed, cfg.reps, workers)
    rate = float(np.mean(res[:, 1] < alpha))
    return PowerResult(make_histogram(res[:, 0], len(qs), bins), rate, alpha, res[:, 1])


@dataclass
class RecoveryResult:
    fraction: float
    successes: int
    reps: int
    alpha: float
    candidates: list[str] = field(repr=False)

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "successes": self.successes, "reps": self.reps,
                "alpha": self.alpha}


def recovery_experiment(t: Tree, rho: float, n: int, reps: int, alpha: float,
                        seed: int) -> RecoveryResult:
    """Fraction of replicates whose exploratory candidate is ``t``.

    A replicate counts when the highest-p tree equals ``t`` and its p-value
    clears the Bonferroni threshold ``alpha / (number of trees)``.
    """
    w = constant_edge_weights(t, rho)
    hits, cands = 0, []
    for i in range(reps):
        x = gen_tree_data(t, w, n, substream(seed, i, REPLICATE_STREAM))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = exploratory_scan(SymMatrix(x.T @ x, "scatter", t.leaves), n, alpha=alpha)
        cand = rep.candidate
        cands.append(serialize_newick(cand) if cand is not None else "")
        hits += cand == t
    return RecoveryResult(hits / reps, hits, reps, alpha, cands)


# ---------------------------------------------------------------------------
# Tripod volume


@dataclass
class VolumeEstimate:
    estimate: float
    stderr: float
    kept: int
    total: int
    psd_filter: bool

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "stderr": self.stderr, "kept": self.kept,
                "total": self.total, "psd_filter": self.psd_filter}


TRIPOD = parse_newick("(1,2,3);")


def tripod_member(r12, r13, r23) -> np.ndarray:
    """Vectorized tripod model membership of correlation triples.

    Each correlation must dominate the product of the other two in absolute
    value, and the product of all three must be nonnegative.  Agrees with
    ``in_M_T`` on the tripod off a measure-zero boundary.
    """
    r12, r13, r23 = (np.asarray(x, dtype=float) for x in (r12, r13, r23))
    a12, a13, a23 = np.abs(r12), np.abs(r13), np.abs(r23)
    return (
        (a12 >= a13 * a23) & (a13 >= a12 * a23) & (a23 >= a12 * a13) & (r12 * r13 * r23 >= 0)
    )


def volume_ratio_tripod(N: int, seed: int, psd_filter: bool = True,
                        chunk: int = 250_000) -> VolumeEstimate:
    """Monte Carlo share of 3x3 correlation matrices lying in the tripod model.

    Draws uniform ``(r12, r13, r23)`` in ``[-1, 1]^3``; with ``psd_filter``
    only points of the elliptope are kept (the proper ratio).  Without it the
    denominator is the whole cube, a diagnostic mode.
    """
    if N < 10_000:
        raise ValueError("N must be at least 10^4")
    rng = make_rng(seed)
    kept = hit = 0
    done = 0
    while done < N:
        size = min(chunk, N - done)
        r12, r13, r23 = rng.uniform(-1.0, 1.0, size=(3, size))
        keep = np.ones(size, dtype=bool)
        if psd_filter:
            det = 1 + 2 * r12 * r13 * r23 - r12 ** 2 - r13 ** 2 - r23 ** 2
            keep = det >= 0
        kept += int(keep.sum())
        hit += int(tripod_member(r12[keep], r13[keep], r23[keep]).sum())
        done += size
    p = hit / kept if kept else float("nan")
    se = float(np.sqrt(p * (1 - p) / kept)) if kept else float("nan")
    return VolumeEstimate(p, se, kept, N, psd_filter)


def check_tripod_member(r12: float, r13: float, r23: float) -> bool:
    """Scalar route through ``in_M_T``, used to cross-check ``tripod_member``."""
    r = np.array([[1.0, r12, r13], [r12, 1.0, r23], [r13, r23, 1.0]])
    return in_M_T(r, TRIPOD, tol=0.0).member


# ---------------------------------------------------------------------------
# Manifests


def write_manifest(directory, experiment: str, config: dict, result: dict) -> str:
    """Write ``manifest.json`` with the full configuration and policies."""
    os.makedirs(directory, exist_ok=True)
    doc = {
        "experiment": experiment,
        "config": config,
        "result": result,
        "policy": {
            "rng": RNG_ALGORITHM,
            "weight_stream": [WEIGHT_STREAM],
            "replicate_stream": [REPLICATE_STREAM, "<index>"],
            "weights": "drawn once per experiment, shared by all replicates",
            "binning": "equal width from 0 to max(largest statistic, chi2 0.999 quantile)",
            "ks": "exact chi2 CDF, no binning",
        },
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=float)
    return path
