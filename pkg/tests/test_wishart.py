import mpmath
import numpy as np
import pytest

from latenttree.geometry import SymMatrix
from latenttree.numerics import NumericalError, make_rng
from latenttree.trees import Quartet, QuartetSet
from latenttree.wishart import (
    chi2_cdf,
    chi2_sf,
    compound2,
    cov_Q,
    cov_S2,
    cov_W2,
    cov_w2_entry,
    minor,
    minor_estimator,
    minor_pairs,
    pair_position,
    pairs,
    sample_inverse_wishart,
    sample_mvn,
    sample_wishart,
    sym_sqrt,
)


def random_corr(m, rng):
    a = rng.standard_normal((m, m + 3))
    c = a @ a.T
    d = np.sqrt(np.diag(c))
    return c / np.outer(d, d)


def lookup(cov):
    return {mp: x for x, mp in enumerate(cov.minors)}


def minors_of(s, mps):
    """Stack of det(S[I, J]) over ``mps`` for a batch of matrices."""
    return np.stack([minor(s, I, J) for I, J in mps], axis=-1)


# ---------------------------------------------------------------------------
# indexing and compounds


def test_pair_positions():
    for m in range(2, 7):
        ps = pairs(m)
        assert len(ps) == m * (m - 1) // 2
        assert [pair_position(i, j, m) for i, j in ps] == list(range(len(ps)))
        assert all(i < j for i, j in ps)


def test_minor_pairs_count():
    for m in range(2, 6):
        p = m * (m - 1) // 2
        assert len(minor_pairs(m)) == p * (p + 1) // 2


def test_compound2_basic():
    np.testing.assert_array_equal(compound2(np.eye(5)), np.eye(10))
    a = np.array([[1.0, 2.0], [3.0, 5.0]])
    np.testing.assert_array_equal(compound2(a), [[-1.0]])


def test_compound2_cauchy_binet():
    rng = np.random.default_rng(3)
    for m in (4, 5):
        for _ in range(100):
            a, b = rng.standard_normal((2, m, m))
            lhs, rhs = compound2(a @ b), compound2(a) @ compound2(b)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9 * np.abs(rhs).max())


def test_compound2_symmetric_input_is_symmetric():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5, 5))
    a = a + a.T
    c = compound2(a)
    np.testing.assert_allclose(c, c.T)


def test_minor_estimator_examples():
    assert minor_estimator(2 * np.eye(4), 5, (0, 1), (0, 1)) == pytest.approx(0.2)
    assert minor_estimator(np.eye(4), 5, (0, 1), (2, 3)) == 0.0
    with pytest.raises(ValueError):
        minor_estimator(np.eye(4), 1, (0, 1), (0, 1))


def test_minor_estimator_unbiased():
    rng = make_rng(11)
    c = random_corr(4, np.random.default_rng(11))
    w = sample_wishart(c, 8, rng, size=20000)
    for I, J in [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 1), (0, 1)), ((0, 1), (1, 2))]:
        q = minor(w, I, J) / (8 * 7)
        se = q.std(ddof=1) / np.sqrt(q.size)
        assert abs(q.mean() - minor(c, I, J)) < 3.5 * se


# ---------------------------------------------------------------------------
# cov(W^(2))


def test_cov_W2_frozen_values():
    cov = cov_W2(4, 10)
    at = lookup(cov)
    a = cov.matrix

    def v(I, J, K, L):
        return a[at[(I, J)], at[(K, L)]]

    assert v((0, 1), (0, 1), (0, 1), (0, 1)) == 3780
    assert v((0, 1), (0, 1), (0, 2), (0, 2)) == 1620
    assert v((0, 1), (0, 1), (2, 3), (2, 3)) == 0
    assert v((0, 2), (1, 2), (0, 2), (1, 2)) == 1080
    # i=1, k=3, j=2, l=4 (1-based): neither interleaving pattern -> +
    assert v((0, 2), (1, 2), (0, 3), (1, 3)) == 810
    # i=1, k=2, j=3, l=4: i<k<j<l -> -
    assert v((0, 1), (1, 2), (0, 3), (2, 3)) == -810
    # the four-set block, rows ij|kl, ik|jl, il|jk
    four = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
    block = np.array([[v(*x, *y) for y in four] for x in four])
    np.testing.assert_array_equal(block, [[180, 90, -90], [90, 180, 90], [-90, 90, 180]])
    assert set(np.unique(a)) == {-810, -90, 0, 90, 180, 810, 1080, 1620, 3780}


def test_cov_W2_matches_scalar_formula():
    for m, n in [(4, 7), (5, 3)]:
        cov = cov_W2(m, n)
        for x, (I, J) in enumerate(cov.minors):
            for y, (K, L) in enumerate(cov.minors):
                assert cov.matrix[x, y] == cov_w2_entry(I, J, K, L, n)


def symdiff(I, J):
    return frozenset(I) ^ frozenset(J)


def test_cov_W2_block_grading():
    cov = cov_W2(5, 6)
    for x, (I, J) in enumerate(cov.minors):
        for y, (K, L) in enumerate(cov.minors):
            if symdiff(I, J) != symdiff(K, L):
                assert cov.matrix[x, y] == 0


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
@pytest.mark.parametrize("n", [2, 5, 10, 50])
def test_cov_W2_psd(m, n):
    cov = cov_W2(m, n)
    np.testing.assert_array_equal(cov.matrix, cov.matrix.T)
    assert cov.is_psd()


def test_cov_W2_monte_carlo_small():
    rng = make_rng(5)
    w = sample_wishart(np.eye(4), 6, rng, size=60000)
    mps = minor_pairs(4)
    emp = np.cov(minors_of(w, mps), rowvar=False)
    exact = cov_W2(4, 6).matrix
    # standard error of a sample covariance under Gaussian-like fourth moments
    d = np.diag(exact)
    se = np.sqrt((np.outer(d, d) + exact ** 2) / w.shape[0])
    assert np.all(np.abs(emp - exact) <= 5 * se)


# ---------------------------------------------------------------------------
# cov(S^(2)) and cov(Q)


def test_cov_S2_identity():
    for m, n in [(4, 10), (5, 7)]:
        np.testing.assert_allclose(cov_S2(np.eye(m), n).matrix, cov_W2(m, n).matrix,
                                   rtol=0, atol=1e-9)


def test_cov_S2_diagonal_scaling():
    lam = np.array([0.5, 1.5, 2.0, 3.0])
    cov = cov_S2(np.diag(lam ** 2), 9)
    base = cov_W2(4, 9)
    for x, (I, J) in enumerate(cov.minors):
        for y, (K, L) in enumerate(cov.minors):
            f = np.prod(lam[list(I + J + K + L)])
            assert cov.matrix[x, y] == pytest.approx(base.matrix[x, y] * f, abs=1e-9)


def test_cov_S2_monte_carlo():
    rng = np.random.default_rng(8)
    c = random_corr(4, rng) * np.outer([1, 2, 0.5, 1.5], [1, 2, 0.5, 1.5])
    w = sample_wishart(c, 6, make_rng(8), size=200000)
    mps = minor_pairs(4)
    emp = np.cov(minors_of(w, mps), rowvar=False)
    exact = cov_S2(c, 6).matrix
    dominant = np.abs(exact) >= 0.1 * np.abs(exact).max()
    rel = np.abs(emp[dominant] - exact[dominant]) / np.abs(exact[dominant])
    assert rel.max() <= 0.03


def test_cov_S2_requires_psd():
    with pytest.raises(NumericalError):
        cov_S2(np.array([[1.0, 2.0], [2.0, 1.0]]), 5)


def test_cov_Q_identity_value():
    c = SymMatrix(np.eye(4), "covariance")
    v = cov_Q(c, 10, QuartetSet(["12|34"])).matrix
    assert v.shape == (1, 1)
    assert v[0, 0] == pytest.approx(1 / 45)


def test_cov_Q_is_subblock_of_cov_S2():
    rng = np.random.default_rng(2)
    c = SymMatrix(random_corr(5, rng), "covariance")
    qs = QuartetSet(["12|34", "12|35", "15|34"])
    sub = cov_Q(c, 20, qs).matrix
    full = cov_S2(c, 20)
    at = lookup(full)
    rows = []
    for q in qs:
        (i, j), (k, l) = (tuple(int(x) - 1 for x in side) for side in (q.left, q.right))
        rows.append(at[((i, j), (k, l))])
    np.testing.assert_allclose(sub, full.matrix[np.ix_(rows, rows)] / (20 * 19) ** 2, rtol=1e-12)


def test_cov_Q_monte_carlo_variance():
    rng = np.random.default_rng(21)
    c = random_corr(4, rng)
    n = 30
    w = sample_wishart(c, n, make_rng(21), size=100000)
    q = minor(w, (0, 1), (2, 3)) / (n * (n - 1))
    v = cov_Q(SymMatrix(c, "covariance"), n, [Quartet.parse("12|34")]).matrix[0, 0]
    assert abs(q.var(ddof=1) / v - 1) <= 0.02


def test_cov_Q_scaling():
    rng = np.random.default_rng(6)
    c = random_corr(5, rng)
    lam = rng.uniform(0.5, 2.0, 5)
    qs = QuartetSet(["12|34", "13|45", "25|34"])
    a = cov_Q(SymMatrix(c, "covariance"), 12, qs).matrix
    b = cov_Q(SymMatrix(lam[:, None] * c * lam, "covariance"), 12, qs).matrix
    f = np.array([np.prod([lam[int(x) - 1] for x in q.taxa]) for q in qs])
    np.testing.assert_allclose(b, a * np.outer(f, f), rtol=1e-10)


# ---------------------------------------------------------------------------
# square roots and samplers


def test_sym_sqrt():
    np.testing.assert_allclose(sym_sqrt(np.eye(3)), np.eye(3))
    np.testing.assert_allclose(sym_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 3))
    c = a @ a.T  # rank deficient
    b = sym_sqrt(c)
    np.testing.assert_allclose(b, b.T)
    assert np.abs(b @ b - c).max() <= 1e-9 * np.linalg.eigvalsh(c)[-1]
    with pytest.raises(NumericalError):
        sym_sqrt(np.diag([1.0, -1.0]))


def test_wishart_mean():
    c = random_corr(4, np.random.default_rng(1))
    w = sample_wishart(c, 10, make_rng(1), size=50000)
    np.testing.assert_allclose(w.mean(axis=0), 10 * c, rtol=0.02, atol=0.02 * 10)


def test_singular_wishart_branch():
    w = sample_wishart(np.eye(4), 2, make_rng(0), size=3)
    assert np.all(np.linalg.matrix_rank(w) == 2)


def test_inverse_wishart_mean():
    psi = np.array([[2.0, 0.5, 0.3], [0.5, 1.0, 0.2], [0.3, 0.2, 1.5]])
    x = sample_inverse_wishart(10, psi, make_rng(2), size=50000)
    np.testing.assert_allclose(x.mean(axis=0), psi / 6, rtol=0.03, atol=0.03 * np.abs(psi / 6).max())
    with pytest.raises(ValueError):
        sample_inverse_wishart(2, psi, make_rng(2))


def test_samplers_deterministic():
    c = random_corr(3, np.random.default_rng(3))
    a = sample_wishart(c, 7, make_rng(42), size=4)
    b = sample_wishart(c, 7, make_rng(42), size=4)
    assert a.tobytes() == b.tobytes()
    x = sample_mvn(c, 10, make_rng(42))
    assert x.shape == (10, 3)
    assert x.tobytes() == sample_mvn(c, 10, make_rng(42)).tobytes()


# ---------------------------------------------------------------------------
# chi-square tail


def mp_sf(x, p):
    return float(mpmath.gammainc(mpmath.mpf(p) / 2, mpmath.mpf(x) / 2, mpmath.inf, regularized=True))


def test_chi2_sf_examples():
    assert chi2_sf(0.0, 3) == 1.0
    assert chi2_sf(3.841459, 1) == pytest.approx(0.05, abs=1e-4)
    assert chi2_sf(5.991465, 2) == pytest.approx(0.05, abs=1e-4)
    with pytest.raises(ValueError):
        chi2_sf(-1.0, 2)


def test_chi2_sf_against_mpmath():
    mpmath.mp.dps = 40
    for p in (1, 2, 3, 5, 10, 21):
        for x in (1e-6, 0.1, 0.5, 1.0, 2.5, 7.0, 15.0, 40.0, 120.0):
            assert abs(chi2_sf(x, p) - mp_sf(x, p)) <= 1e-10
            assert abs(chi2_cdf(x, p) - (1 - mp_sf(x, p))) <= 1e-10


def test_chi2_sf_monotone():
    xs = np.linspace(0, 30, 301)
    for p in (1, 2, 3):
        assert np.all(np.diff(chi2_sf(xs, p)) <= 0)
