import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from morphkit import stattests as S
from morphkit.errors import DegenerateSample, LengthMismatch

X5 = [3, 8, 1, 12, 6]
Y5 = [9, 14, 5, 11, 15]
D10 = [1.5, -0.7, 2.2, 3.1, -1.1, 0.4, 2.8, -2.5, 1.9, 0.9]


def t_tail(t, df):
    """Upper tail of Student t by integrating its density."""
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return integrate.quad(lambda u: c * (1 + u * u / df) ** (-(df + 1) / 2), t, np.inf,
                          epsabs=1e-15, epsrel=1e-13)[0]


class TestT:
    def test_paired_identical(self):
        r = S.t_test([1, 2, 3], [1, 2, 3], "paired")
        assert r.statistic == 0 and r.p_two_sided == 1

    def test_pooled_identical(self):
        assert S.t_test([1, 2, 3, 4], [1, 2, 3, 4], "pooled").statistic == 0

    @pytest.mark.parametrize("mode", ["welch", "pooled"])
    def test_tail_oracle(self, mode):
        rng = np.random.default_rng(44)
        x, y = rng.normal(0.6, 1, 26), rng.normal(0, 1.3, 18)
        r = S.t_test(x, y, mode)
        df = r.extra["df"]
        upper = t_tail(abs(r.statistic), df)
        assert r.p_two_sided == pytest.approx(2 * upper, abs=1e-10)
        assert r.p_greater == pytest.approx(upper if r.statistic > 0 else 1 - upper, abs=1e-10)
        ref = stats.ttest_ind(x, y, equal_var=(mode == "pooled"))
        assert r.statistic == pytest.approx(ref.statistic, rel=1e-12)

    def test_paired_matches_one_sample(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=12), rng.normal(size=12)
        r = S.t_test(x, y, "paired")
        assert r.statistic == pytest.approx(stats.ttest_rel(x, y).statistic, rel=1e-12)

    def test_paired_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            S.t_test([1, 2, 3], [1, 2], "paired")

    def test_constant_equal_samples(self):
        r = S.t_test([2, 2, 2], [2, 2], "welch")
        assert r.p_two_sided == 1

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=12),
           st.lists(st.floats(-100, 100), min_size=3, max_size=12), st.floats(-50, 50))
    def test_location_equivariance(self, x, y, c):
        x, y = np.array(x), np.array(y)
        if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
            return
        base = S.t_test(x, y).statistic
        assert S.t_test(x + c, y + c).statistic == pytest.approx(base, rel=1e-6, abs=1e-6)
        shifted = S.t_test(x + abs(c) + 1, y).statistic
        assert shifted > base


def rank_sum_enumeration(x, y):
    pooled = np.concatenate([x, y])
    ranks = stats.rankdata(pooled)
    m = len(x)
    W = ranks[:m].sum()
    sums = [ranks[list(c)].sum() for c in itertools.combinations(range(len(pooled)), m)]
    sums = np.array(sums)
    return W, np.mean(sums <= W + 1e-9), np.mean(sums >= W - 1e-9)


class TestRankSum:
    def test_enumeration_oracle(self):
        r = S.wilcoxon_rank_sum(X5, Y5)
        W, pl, pg = rank_sum_enumeration(np.array(X5, float), np.array(Y5, float))
        assert r.statistic == W
        assert r.p_less == pl and r.p_greater == pg
        assert r.p_two_sided == min(1.0, 2 * min(pl, pg))
        assert "exact" in r.method

    def test_matches_scipy_exact(self):
        r = S.wilcoxon_rank_sum(X5, Y5)
        ref = stats.mannwhitneyu(X5, Y5, method="exact")
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-12)

    def test_extreme_ranking(self):
        r = S.wilcoxon_rank_sum([1, 2, 3], [4, 5, 6, 7])
        assert r.p_less == pytest.approx(1 / math.comb(7, 3), rel=1e-15)

    def test_identical_multisets(self):
        assert S.wilcoxon_rank_sum([1, 2, 3, 4], [4, 3, 2, 1]).p_two_sided >= 0.9

    def test_normal_approximation_matches_scipy(self):
        rng = np.random.default_rng(2)
        x, y = np.round(rng.normal(size=25), 1), np.round(rng.normal(0.5, 1, 20), 1)
        r = S.wilcoxon_rank_sum(x, y)
        ref = stats.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
        assert "approximation" in r.method
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-10)


class TestSignedRank:
    def test_enumeration_oracle(self):
        d = np.array(D10)
        ranks = stats.rankdata(np.abs(d))
        V = ranks[d > 0].sum()
        sums = np.array([sum(r for r, s in zip(ranks, signs) if s)
                         for signs in itertools.product([0, 1], repeat=10)])
        r = S.wilcoxon_signed_rank(d)
        assert r.statistic == V
        assert r.p_less == np.mean(sums <= V) and r.p_greater == np.mean(sums >= V)

    def test_all_positive(self):
        assert S.wilcoxon_signed_rank([1, 2, 3, 4, 5, 6]).p_greater == 1 / 2**6

    def test_symmetric(self):
        assert S.wilcoxon_signed_rank([-1, 1, -2, 2]).p_two_sided >= 0.9

    def test_zeros_dropped(self):
        r = S.wilcoxon_signed_rank([0, 0, 1, 2, -3])
        assert r.n == (3,) and r.extra["zeros_dropped"] == 2

    def test_all_zero(self):
        with pytest.raises(DegenerateSample):
            S.wilcoxon_signed_rank([0, 0, 0])

    def test_approximation_matches_scipy(self):
        d = np.round(np.random.default_rng(3).normal(0.3, 1, 30), 1)
        d = d[d != 0]
        r = S.wilcoxon_signed_rank(d)
        ref = stats.wilcoxon(d, correction=True, method="approx")
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-10)


def lilliefors_gap(x):
    x = sorted(x)
    n = len(x)
    mean = sum(x) / n
    sd = math.sqrt(sum((v - mean) ** 2 for v in x) / (n - 1))
    gap = 0.0
    for i, v in enumerate(x):
        F = 0.5 * (1 + math.erf((v - mean) / (sd * math.sqrt(2))))
        gap = max(gap, abs((i + 1) / n - F), abs(F - i / n))
    return gap


class TestLilliefors:
    def test_cdf_gap_oracle(self):
        r = S.lilliefors(range(1, 11), n_sim=1000)
        assert r.statistic == pytest.approx(lilliefors_gap(range(1, 11)), abs=1e-12)

    def test_calibration_on_normal_samples(self):
        ps = [S.lilliefors(np.random.default_rng(s).normal(size=50), n_sim=2000, seed=s).p
              for s in range(100)]
        assert sum(p > 0.01 for p in ps) >= 99

    def test_power_on_exponential(self):
        x = np.random.default_rng(7).exponential(size=100)
        assert S.lilliefors(x, n_sim=5000).p < 0.01

    def test_seeded(self):
        x = np.random.default_rng(0).normal(size=20)
        assert S.lilliefors(x, n_sim=500, seed=3).p == S.lilliefors(x, n_sim=500, seed=3).p

    def test_degenerate(self):
        with pytest.raises(DegenerateSample):
            S.lilliefors([1, 1, 1, 1])


class TestBrownForsythe:
    def test_identical_deviations(self):
        r = S.brown_forsythe([1, 2, 3, 4], [11, 12, 13, 14])
        assert r.statistic == 0 and r.p_two_sided == 1

    def test_hand_computed(self):
        # deviations: {0,0,0,0} and {5,1,1,5}; means 0 and 3
        ssb, ssw = 4 * 1.5**2 * 2, 4 * 2.0**2
        F = ssb / (ssw / 6)
        r = S.brown_forsythe([0, 0, 0, 0], [-5, -1, 1, 5])
        assert r.statistic == pytest.approx(F, rel=1e-12)
        assert r.p_two_sided == pytest.approx(stats.f.sf(F, 1, 6), rel=1e-12)
        assert r.p_two_sided < 0.05

    def test_matches_scipy_levene_median(self):
        rng = np.random.default_rng(5)
        x, y = rng.normal(size=15), rng.normal(0, 2, 12)
        ref = stats.levene(x, y, center="median")
        assert S.brown_forsythe(x, y).statistic == pytest.approx(ref.statistic, rel=1e-12)

    def test_size(self):
        rng = np.random.default_rng(99)
        hits = sum(S.brown_forsythe(rng.normal(size=20), rng.normal(size=20)).p < 0.05
                   for _ in range(1000))
        assert 30 <= hits <= 70


class TestCorrelation:
    @pytest.mark.parametrize("method", ["pearson", "spearman", "kendall"])
    def test_perfect(self, method):
        x = np.array([1.0, 3, 2, 5, 4, 8])
        assert S.correlation(x, x, method).statistic == pytest.approx(1.0)
        assert S.correlation(x, -x, method).statistic == pytest.approx(-1.0)

    def test_kendall_pair_enumeration(self):
        x = [3, 1, 4, 1, 5, 9, 2, 6]
        y = [2, 7, 1, 8, 2, 8, 1, 8]
        conc = disc = tx = ty = 0
        for i, j in itertools.combinations(range(8), 2):
            a, b = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
            conc += a * b > 0
            disc += a * b < 0
            tx += a == 0
            ty += b == 0
        tau = (conc - disc) / math.sqrt((28 - tx) * (28 - ty))
        r = S.correlation(x, y, "kendall")
        assert r.statistic == pytest.approx(tau, abs=1e-15)
        ref = stats.kendalltau(x, y, method="asymptotic")
        assert r.p_two_sided == pytest.approx(ref.pvalue, rel=1e-10)

    @pytest.mark.parametrize("method,ref", [("pearson", stats.pearsonr), ("spearman", stats.spearmanr)])
    def test_matches_scipy(self, method, ref):
        rng = np.random.default_rng(8)
        x = rng.normal(size=20)
        y = x + rng.normal(size=20)
        r = S.correlation(x, y, method)
        expected = ref(x, y)
        assert r.statistic == pytest.approx(expected[0], rel=1e-12)
        assert r.p_two_sided == pytest.approx(expected[1], rel=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegenerateSample):
            S.correlation([1, 1, 1], [1, 2, 3])


class TestKS:
    def test_identical(self):
        r = S.ks_two_sample([1, 2, 3], [3, 2, 1])
        assert r.statistic == 0 and r.p_two_sided == 1

    def test_disjoint(self):
        assert S.ks_two_sample([1, 2, 3], [4, 5]).statistic == 1

    def test_jump_point_scan(self):
        rng = np.random.default_rng(10)
        x, y = rng.normal(size=10), rng.normal(0.7, 1, 10)
        best = 0.0
        for z in np.concatenate([x, y]):
            best = max(best, abs(np.mean(x <= z) - np.mean(y <= z)))
        r = S.ks_two_sample(x, y)
        assert r.statistic == best
        lam = math.sqrt(10 * 10 / 20) * best
        series = 2 * sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, 200))
        assert r.p_two_sided == pytest.approx(series, rel=1e-10)

    def test_one_sided(self):
        r = S.ks_two_sample([1, 2, 3, 4], [3, 4, 5, 6])
        # x is stochastically smaller, so its CDF lies above: D+ carries the evidence
        assert r.extra["D_plus"] == 0.5 and r.extra["D_minus"] == 0
        assert r.p_greater == pytest.approx(math.exp(-2 * 2 * 0.25))
        assert r.p_less == 1


def cramer_double_sum(x, y):
    phi = lambda z: math.sqrt(z) / 2
    m, n = len(x), len(y)
    sxy = sum(phi((a - b) ** 2) for a in x for b in y)
    sxx = sum(phi((a - b) ** 2) for a in x for b in x)
    syy = sum(phi((a - b) ** 2) for a in y for b in y)
    return m * n / (m + n) * (2 * sxy / (m * n) - sxx / m**2 - syy / n**2)


class TestCramer:
    def test_identical(self):
        assert S.cramer_test([1, 2, 3], [3, 1, 2], n_boot=100).statistic == pytest.approx(0, abs=1e-15)

    def test_double_sum_oracle(self):
        x, y = [0.3, 1.7, 2.2, -0.4], [1.1, 3.5, 2.9, 4.0]
        assert S.cramer_test(x, y, n_boot=100).statistic == pytest.approx(cramer_double_sum(x, y), abs=1e-12)

    def test_multivariate(self):
        x = np.array([[0, 0], [1, 0], [0, 1.5]])
        y = np.array([[2, 2], [3, 1], [2.5, 2.5], [1, 3]])
        sq = lambda a, b: float(np.sum((a - b) ** 2))
        m, n = 3, 4
        phi = lambda z: math.sqrt(z) / 2
        T = m * n / (m + n) * (2 * sum(phi(sq(a, b)) for a in x for b in y) / (m * n)
                               - sum(phi(sq(a, b)) for a in x for b in x) / m**2
                               - sum(phi(sq(a, b)) for a in y for b in y) / n**2)
        assert S.cramer_test(x, y, n_boot=50).statistic == pytest.approx(T, abs=1e-12)

    def test_seeded_reproducible(self):
        x, y = [0.3, 1.7, 2.2, -0.4], [1.1, 3.5, 2.9, 4.0]
        assert S.cramer_test(x, y, 2000, 5).p == S.cramer_test(x, y, 2000, 5).p


def cvm_integral(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    m, n = len(x), len(y)
    pooled = np.concatenate([x, y])
    total = 0.0
    for z in pooled:
        total += (np.mean(x <= z) - np.mean(y <= z)) ** 2
    return m * n / (m + n) ** 2 * total


class TestCvM:
    def test_identical_is_minimum(self):
        assert S.cvm_two_sample([1, 2, 3], [3, 2, 1], n_perm=100).statistic == 0

    def test_integral_oracle(self):
        x, y = [0.3, 1.7, 2.2, -0.4, 5.0], [1.1, 3.5, 2.9, 4.0, 0.0]
        r = S.cvm_two_sample(x, y, n_perm=100)
        assert r.statistic == pytest.approx(cvm_integral(x, y), abs=1e-12)
        assert r.statistic == pytest.approx(stats.cramervonmises_2samp(x, y).statistic, abs=1e-12)

    def test_ties_use_pooled_multiplicity(self):
        x, y = [1, 1, 2, 3], [2, 2, 4, 5]
        assert S.cvm_two_sample(x, y, n_perm=10).statistic == pytest.approx(cvm_integral(x, y), abs=1e-12)

    def test_power(self):
        rng = np.random.default_rng(12)
        assert S.cvm_two_sample(rng.normal(size=20), rng.normal(2, 1, 20), n_perm=2000).p < 0.01


sample = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=4, max_size=10)


def _all_results(x, y):
    d = np.array(x[: min(len(x), len(y))]) - np.array(y[: min(len(x), len(y))])
    out = [S.wilcoxon_rank_sum(x, y), S.ks_two_sample(x, y), S.t_test(x, y),
           S.cvm_two_sample(x, y, n_perm=200), S.cramer_test(x, y, n_boot=200)]
    if np.ptp(x) > 0 and np.ptp(y) > 0:
        out.append(S.brown_forsythe(x, y))
    if np.any(d != 0):
        out.append(S.wilcoxon_signed_rank(d))
    return [r.as_dict() for r in out]


class TestProperties:
    @given(sample, sample, st.randoms(use_true_random=False))
    def test_order_invariance(self, x, y, rnd):
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            return
        xs, ys = list(x), list(y)
        rnd.shuffle(xs)
        rnd.shuffle(ys)
        a = [S.wilcoxon_rank_sum(x, y), S.ks_two_sample(x, y), S.t_test(x, y),
             S.cvm_two_sample(x, y, n_perm=200), S.cramer_test(x, y, n_boot=200),
             S.brown_forsythe(x, y), S.lilliefors(x, n_sim=200)]
        b = [S.wilcoxon_rank_sum(xs, ys), S.ks_two_sample(xs, ys), S.t_test(xs, ys),
             S.cvm_two_sample(xs, ys, n_perm=200), S.cramer_test(xs, ys, n_boot=200),
             S.brown_forsythe(xs, ys), S.lilliefors(xs, n_sim=200)]
        assert [r.as_dict() for r in a] == [r.as_dict() for r in b]

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=4, max_size=10),
           st.randoms(use_true_random=False))
    def test_paired_order_invariance(self, pairs, rnd):
        x, y = map(list, zip(*pairs))
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        xs, ys = map(list, zip(*shuffled))
        d, ds = np.subtract(x, y), np.subtract(xs, ys)
        if np.all(d == 0) or np.ptp(x) == 0 or np.ptp(y) == 0:
            return
        assert S.wilcoxon_signed_rank(d).as_dict() == S.wilcoxon_signed_rank(ds).as_dict()
        for m in ("pearson", "spearman", "kendall"):
            assert S.correlation(x, y, m).as_dict() == S.correlation(xs, ys, m).as_dict()

    @given(st.lists(st.integers(-50, 50), min_size=4, max_size=10),
           st.lists(st.integers(-50, 50), min_size=4, max_size=10))
    def test_monotone_transform_invariance(self, x, y):
        f = lambda v: np.exp(np.asarray(v, float) / 20.0) + 3 * np.asarray(v, float)
        fx, fy = f(x), f(y)
        assert S.wilcoxon_rank_sum(x, y).as_dict() == S.wilcoxon_rank_sum(fx, fy).as_dict()
        assert S.ks_two_sample(x, y).as_dict() == S.ks_two_sample(fx, fy).as_dict()
        assert S.cvm_two_sample(x, y, n_perm=100).as_dict() == S.cvm_two_sample(fx, fy, n_perm=100).as_dict()
        k = min(len(x), len(y))
        if np.ptp(x[:k]) > 0 and np.ptp(y[:k]) > 0 and k >= 3:
            for m in ("spearman", "kendall"):
                a, b = S.correlation(x[:k], y[:k], m), S.correlation(fx[:k], fy[:k], m)
                assert a.statistic == pytest.approx(b.statistic, abs=1e-12)
                assert a.p_two_sided == pytest.approx(b.p_two_sided, abs=1e-12)
        d = np.subtract(x[:k], y[:k]).astype(float)
        if np.any(d != 0):
            odd = lambda v: np.sign(v) * np.expm1(np.abs(v) / 10.0)
            assert S.wilcoxon_signed_rank(d).as_dict() == S.wilcoxon_signed_rank(odd(d)).as_dict()

    @given(sample, sample)
    def test_p_values_in_unit_interval(self, x, y):
        for r in (S.wilcoxon_rank_sum(x, y), S.ks_two_sample(x, y), S.t_test(x, y),
                  S.cvm_two_sample(x, y, n_perm=50)):
            for p in (r.p_two_sided, r.p_less, r.p_greater):
                assert p is None or 0 <= p <= 1
