import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_binary_tree
from latenttree.geometry import SymMatrix, constant_edge_weights, corr_from_tree, uniform_edge_weights
from latenttree.inference import (
    NearSingularError,
    bayes_compatibility,
    confirmatory_test,
    exploratory_scan,
    prescreen_and_confirm,
    quartet_screen,
    quartet_test,
    scatter_from_data,
    tetrad_statistic,
)
from latenttree.numerics import make_rng
from latenttree.simlab import gen_tree_data
from latenttree.trees import Quartet, parse_newick, serialize_newick
from latenttree.wishart import sample_wishart


def model_scatter(t, w, n):
    c = corr_from_tree(t, w)
    return SymMatrix(n * c.values, "scatter", c.names)


def sampled_scatter(t, w, n, seed):
    c = corr_from_tree(t, w)
    return SymMatrix(sample_wishart(c.values, n, make_rng(seed)), "scatter", c.names)


@pytest.fixture
def quintet_weights(quintet):
    return uniform_edge_weights(quintet, 0.5, 1.0, np.random.default_rng(7))


# ---------------------------------------------------------------------------
# tetrad statistic


def test_exact_model_statistic_vanishes(quintet, quintet_weights):
    s = model_scatter(quintet, quintet_weights, 60)
    for qs in (["12|34"], ["12|35", "15|34"], ["12|34", "12|35", "15|34"]):
        rep = tetrad_statistic(s, 60, [Quartet.parse(q) for q in qs])
        # products of path weights agree only up to rounding
        assert rep.statistic == pytest.approx(0.0, abs=1e-20)
        assert rep.p_value >= 1 - 1e-12
        assert rep.dof == len(qs)


def test_false_quartet_rejected_at_exact_model(quintet, quintet_weights):
    s = model_scatter(quintet, quintet_weights, 500)
    rep = quartet_test(s, 500, "13|24")
    assert rep.statistic > 10 and rep.p_value < 1e-3


@pytest.mark.filterwarnings("ignore:weak sample correlation")
def test_p_value_decreases_with_statistic(quintet, quintet_weights):
    reps = [quartet_test(sampled_scatter(quintet, quintet_weights, 60, k), 60, "13|24")
            for k in range(20)]
    reps.sort(key=lambda r: r.statistic)
    assert all(a.p_value >= b.p_value for a, b in zip(reps, reps[1:]))


@pytest.mark.filterwarnings("ignore:weak sample correlation")
def test_scale_invariance(quintet):
    rng = np.random.default_rng(9)
    qs = [Quartet.parse(q) for q in ("12|34", "12|35", "15|34")]
    for k in range(100):
        w = uniform_edge_weights(quintet, 0.3, 0.95, rng)
        s = sampled_scatter(quintet, w, 60, 1000 + k)
        d = rng.uniform(0.1, 10.0, 5)
        a = tetrad_statistic(s, 60, qs).statistic
        b = tetrad_statistic(s.with_values(d[:, None] * s.values * d), 60, qs).statistic
        assert abs(a - b) <= 1e-8 * max(1.0, abs(a))


def test_relabel_invariance(quintet, quintet_weights):
    s = sampled_scatter(quintet, quintet_weights, 60, 3)
    perm = [4, 2, 0, 3, 1]
    names = [s.names[i] for i in perm]
    p = SymMatrix(s.values[np.ix_(perm, perm)], "scatter", names)
    qs = [Quartet.parse("12|34"), Quartet.parse("15|34")]
    assert tetrad_statistic(p, 60, qs).statistic == pytest.approx(
        tetrad_statistic(s, 60, qs).statistic, rel=1e-10)


def test_quartet_orientation_irrelevant(quintet, quintet_weights):
    s = sampled_scatter(quintet, quintet_weights, 60, 4)
    a = quartet_test(s, 60, "12|34").statistic
    b = quartet_test(s, 60, Quartet.of("4", "3", "2", "1")).statistic
    assert a == b


def test_near_singular_quartet_set():
    s = SymMatrix(50 * np.eye(4), "scatter")
    qs = [Quartet.parse(q) for q in ("12|34", "13|24", "14|23")]
    with pytest.raises(NearSingularError, match="re-select"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tetrad_statistic(s, 50, qs)


def test_too_few_observations(quintet, quintet_weights):
    s = model_scatter(quintet, quintet_weights, 5)
    with pytest.raises(ValueError, match="n > m"):
        quartet_test(s, 5, "12|34")


def test_weak_correlation_warning():
    c = np.eye(4) + 0.5 * (np.ones((4, 4)) - np.eye(4))
    c[0, 1] = c[1, 0] = 0.01
    with pytest.warns(RuntimeWarning, match="weak"):
        rep = quartet_test(SymMatrix(40 * c, "scatter"), 40, "13|24")
    assert rep.warnings


def test_report_json(quintet, quintet_weights):
    rep = confirmatory_test(sampled_scatter(quintet, quintet_weights, 60, 5), 60, quintet)
    d = json.loads(rep.to_json())
    assert set(d) >= {"statistic", "dof", "p_value", "quartets", "n", "seed", "mode"}
    assert d["dof"] == 3 and d["mode"] == "proxy"
    assert d["quartets"] == ["12|34", "12|35", "15|34"]


def test_confirmatory_names_must_match(quintet, quintet_weights):
    s = model_scatter(quintet, quintet_weights, 60)
    with pytest.raises(ValueError):
        confirmatory_test(s, 60, parse_newick("((a,b),c,(d,e));"))


@given(st.integers(5, 7), st.integers(0, 2 ** 32 - 1))
def test_confirmatory_dof_is_codimension(m, seed):
    rng = np.random.default_rng(seed)
    t = random_binary_tree(m, rng)
    w = uniform_edge_weights(t, 0.5, 0.9, rng)
    rep = confirmatory_test(model_scatter(t, w, 200), 200, t)
    assert rep.dof == m * (m - 1) // 2 - (2 * m - 3)
    assert rep.p_value >= 1 - 1e-9


def test_scatter_from_data():
    x = np.arange(12.0).reshape(4, 3)
    s, df = scatter_from_data(x)
    assert df == 3
    np.testing.assert_allclose(s, 3 * np.cov(x, rowvar=False))
    s, df = scatter_from_data(x, center=False)
    assert df == 4
    np.testing.assert_allclose(s, x.T @ x)


# ---------------------------------------------------------------------------
# exploratory scan and screen


def test_exploratory_exact_model(quintet, quintet_weights):
    rep = exploratory_scan(model_scatter(quintet, quintet_weights, 60), 60)
    assert len(rep.ranked) == 15
    assert rep.bonferroni_alpha == pytest.approx(0.05 / 15)
    assert rep.candidate == quintet
    assert all(r.p_value >= rep.bonferroni_alpha for t, r in rep.ranked if t in rep.surviving)
    ps = [r.p_value for _, r in rep.ranked]
    assert ps == sorted(ps, reverse=True)
    d = rep.to_dict()
    assert d["candidate"] == serialize_newick(quintet) and len(d["ranked"]) == 15


def test_exploratory_cap():
    t = parse_newick("(1,2,(3,(4,(5,(6,(7,8))))));")
    s = model_scatter(t, constant_edge_weights(t, 0.8), 100)
    with pytest.raises(ValueError, match="quartet_screen"):
        exploratory_scan(s, 100)


def test_screen_exact_model(quintet, quintet_weights):
    screen = quartet_screen(model_scatter(quintet, quintet_weights, 10000), 10000)
    got = sorted(str(q) for q in screen.resolved())
    assert got == ["12|34", "12|35", "12|45", "15|34", "25|34"]
    assert len(screen.to_dict()["subsets"]) == 5


def test_screen_star_unresolved():
    t = parse_newick("(1,2,3,4,5);")
    screen = quartet_screen(model_scatter(t, constant_edge_weights(t, 0.8), 200), 200)
    assert screen.resolved() == []


# ---------------------------------------------------------------------------
# posterior compatibility


def tripod_scatter(n):
    t = parse_newick("(1,2,3);")
    return model_scatter(t, constant_edge_weights(t, 0.9), n)


def test_bayes_in_unit_interval_and_deterministic():
    s = tripod_scatter(50)
    a = bayes_compatibility(s, 50, 3000, seed=5)
    b = bayes_compatibility(s, 50, 3000, seed=5)
    assert 0.0 <= a.probability <= 1.0
    assert a.to_dict() == b.to_dict()
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_bayes_prefix_consistent():
    c = np.array([[1.0, 0.1, 0.05], [0.1, 1.0, 0.08], [0.05, 0.08, 1.0]])
    s = SymMatrix(20 * c, "scatter")
    counts = [bayes_compatibility(s, 20, n, seed=3).satisfied for n in (700, 1400, 2800)]
    assert counts[0] <= counts[1] <= counts[2]
    ps = [bayes_compatibility(s, 20, n, seed=3).probability for n in (2000, 4000, 8000, 16000)]
    for p, q, n in zip(ps, ps[1:], (2000, 4000, 8000)):
        assert abs(p - q) <= 4 * np.sqrt(0.25 / n)


def test_bayes_direction():
    assert bayes_compatibility(tripod_scatter(200), 200, 10000, seed=0).probability >= 0.95
    c = np.array([[1.0, -0.4, 0.4], [-0.4, 1.0, 0.4], [0.4, 0.4, 1.0]])
    bad = bayes_compatibility(SymMatrix(1000 * c, "scatter"), 1000, 10000, seed=0)
    assert bad.probability <= 0.05


def test_bayes_single_triple(quintet, quintet_weights):
    s = model_scatter(quintet, quintet_weights, 100)
    rep = bayes_compatibility(s, 100, 2000, seed=1, triple=("1", "2", "3"))
    assert rep.target == ["1", "2", "3"] and rep.probability > 0.5


def test_bayes_quartet_full():
    t = parse_newick("((1,2),(3,4));")
    s = model_scatter(t, constant_edge_weights(t, 0.8), 2000)
    good = bayes_compatibility(s, 2000, 4000, seed=2, mode="quartet-full", quartet="12|34")
    bad = bayes_compatibility(s, 2000, 4000, seed=2, mode="quartet-full", quartet="13|24")
    assert good.probability > 0.9 and bad.probability < 0.05
    assert good.to_dict()["mode"] == "quartet-full"


def test_bayes_errors():
    s = tripod_scatter(20)
    with pytest.raises(ValueError, match="budget"):
        bayes_compatibility(s, 20, 10 ** 9, seed=0)
    with pytest.raises(ValueError):
        bayes_compatibility(s, 20, 10, seed=0, mode="nope")
    with pytest.raises(ValueError):
        bayes_compatibility(s, 20, 0, seed=0)


def test_bayes_report_schema():
    d = bayes_compatibility(tripod_scatter(30), 30, 100, seed=8).to_dict()
    assert {"probability", "draws", "seed", "mode", "prior"} <= set(d)
    assert d["prior"] == {"n0": 3.0, "C0": "identity"}


def test_prescreen(quintet, quintet_weights):
    x = gen_tree_data(quintet, quintet_weights, 200, make_rng(4))
    s, df = scatter_from_data(x)
    s = SymMatrix(s, "scatter", [str(i) for i in range(1, 6)])
    bayes, rep = prescreen_and_confirm(s, df, quintet, 2000, seed=4)
    assert bayes.probability >= 0.1 and rep is not None and rep.dof == 3
    bayes, rep = prescreen_and_confirm(s, df, quintet, 2000, seed=4, threshold=1.01)
    assert rep is None
