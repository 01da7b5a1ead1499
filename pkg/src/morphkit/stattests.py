"""Univariate test battery: location, normality, spread, correlation and
two-sample distribution comparisons.

Test statistics are computed here; scipy is only used for distribution
tails.  Every function returns a :class:`TestResult` carrying all three
p-values (omnibus tests leave the one-sided ones as ``None``).  Unpaired
samples are sorted on entry so results do not depend on input order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import special, stats

from .errors import DegenerateSample, InvalidParameter, LengthMismatch

ALTERNATIVES = ("two_sided", "less", "greater")
EXACT_RANK_SUM_MAX = 20
EXACT_SIGNED_RANK_MAX = 15


@dataclass
class TestResult:
    statistic: float
    p_two_sided: float
    p_less: Optional[float]
    p_greater: Optional[float]
    method: str
    n: Tuple[int, ...]
    alternative: str = "two_sided"
    extra: Dict[str, float] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def p(self) -> float:
        if self.alternative == "less" and self.p_less is not None:
            return self.p_less
        if self.alternative == "greater" and self.p_greater is not None:
            return self.p_greater
        return self.p_two_sided

    def as_dict(self) -> dict:
        out = {
            "method": self.method, "statistic": self.statistic,
            "p_two_sided": self.p_two_sided, "p_less": self.p_less, "p_greater": self.p_greater,
            "n": list(self.n),
        }
        out.update(self.extra)
        return out


def _check_alt(alternative: str) -> str:
    if alternative not in ALTERNATIVES:
        raise InvalidParameter(f"alternative must be one of {ALTERNATIVES}")
    return alternative


def _vec(x, name="x", min_n=1) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size < min_n:
        raise InvalidParameter(f"{name} needs at least {min_n} observations, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameter(f"{name} contains non-finite values")
    return arr


def _clip(p: float) -> float:
    return float(min(1.0, max(0.0, p)))


def _two_sided(p_less: float, p_greater: float) -> float:
    return _clip(2.0 * min(p_less, p_greater))


# --- t tests -------------------------------------------------------------------

def t_test(x, y, mode: str = "welch", alternative: str = "two_sided") -> TestResult:
    """Two-sample (``welch`` / ``pooled``) or ``paired`` t test of mean(x) - mean(y)."""
    _check_alt(alternative)
    if mode == "paired":
        x, y = _vec(x, "x", 2), _vec(y, "y", 2)
        if x.size != y.size:
            raise LengthMismatch(f"paired samples differ in length: {x.size} vs {y.size}")
        d = np.sort(x - y)
        n = d.size
        diff, se2, df = d.mean(), d.var(ddof=1) / n, n - 1
        sizes = (n,)
    elif mode in ("welch", "pooled"):
        x, y = np.sort(_vec(x, "x", 2)), np.sort(_vec(y, "y", 2))
        m, n = x.size, y.size
        vx, vy = x.var(ddof=1), y.var(ddof=1)
        diff = x.mean() - y.mean()
        if mode == "pooled":
            df = m + n - 2
            sp = ((m - 1) * vx + (n - 1) * vy) / df
            se2 = sp * (1.0 / m + 1.0 / n)
        else:
            a, b = vx / m, vy / n
            se2 = a + b
            if se2 > 0:
                a, b = a / se2, b / se2   # normalised so tiny variances do not underflow
                df = 1.0 / (a**2 / (m - 1) + b**2 / (n - 1))
            else:
                df = m + n - 2
        sizes = (m, n)
    else:
        raise InvalidParameter(f"unknown t-test mode {mode!r}")
    if se2 == 0:
        t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        t = diff / math.sqrt(se2)
    if t == 0 and se2 == 0:
        pl = pg = 1.0
    else:
        pl, pg = float(stats.t.cdf(t, df)), float(stats.t.sf(t, df))
    return TestResult(float(t), _two_sided(pl, pg), pl, pg, f"t test ({mode})", sizes,
                      alternative, {"df": float(df), "estimate": float(diff)})


# --- rank tests ----------------------------------------------------------------

def _subset_sum_counts(weights: Sequence[int], k: Optional[int]) -> np.ndarray:
    """counts[s] = number of subsets (of size k if given) with integer weight sum s."""
    total = int(sum(weights))
    if k is None:
        counts = np.zeros(total + 1, dtype=object)
        counts[0] = 1
        for w in weights:
            counts[w:] = counts[w:] + counts[: total + 1 - w].copy()
        return counts
    table = np.zeros((k + 1, total + 1), dtype=object)
    table[0, 0] = 1
    for w in weights:
        for j in range(k, 0, -1):
            table[j, w:] = table[j, w:] + table[j - 1, : total + 1 - w]
    return table[k]


def _exact_tails(counts: np.ndarray, observed: int) -> Tuple[float, float]:
    total = sum(counts)
    le = sum(counts[: observed + 1])
    ge = sum(counts[observed:])
    return float(le / total), float(ge / total)


def _normal_tails(stat: float, mu: float, var: float) -> Tuple[float, float, float]:
    if var <= 0:
        return 1.0, 1.0, 1.0
    sd = math.sqrt(var)
    pl = float(stats.norm.cdf((stat - mu + 0.5) / sd))
    pg = float(stats.norm.sf((stat - mu - 0.5) / sd))
    dev = stat - mu
    z = (dev - math.copysign(0.5, dev)) / sd if dev != 0 else 0.0
    p2 = _clip(2.0 * min(stats.norm.cdf(z), stats.norm.sf(z)))
    return pl, pg, p2


def wilcoxon_rank_sum(x, y, alternative: str = "two_sided",
                      exact_max: int = EXACT_RANK_SUM_MAX) -> TestResult:
    """Rank-sum test; the statistic is the sum of the pooled midranks of x."""
    _check_alt(alternative)
    x, y = np.sort(_vec(x, "x")), np.sort(_vec(y, "y"))
    m, n = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = stats.rankdata(pooled)
    W = float(ranks[:m].sum())
    _, tie_counts = np.unique(pooled, return_counts=True)
    ties = bool(np.any(tie_counts > 1))
    N = m + n
    if N <= exact_max and not ties:
        counts = _subset_sum_counts(list(range(1, N + 1)), m)
        pl, pg = _exact_tails(counts, int(W))
        p2 = _two_sided(pl, pg)
        method = "Wilcoxon rank-sum (exact)"
    else:
        mu = m * (N + 1) / 2.0
        var = m * n / 12.0 * ((N + 1) - np.sum(tie_counts**3 - tie_counts) / (N * (N - 1)))
        pl, pg, p2 = _normal_tails(W, mu, float(var))
        method = "Wilcoxon rank-sum (normal approximation)"
    return TestResult(W, p2, pl, pg, method, (m, n), alternative,
                      {"U": W - m * (m + 1) / 2.0})


def wilcoxon_signed_rank(d, alternative: str = "two_sided",
                         exact_max: int = EXACT_SIGNED_RANK_MAX) -> TestResult:
    """Signed-rank test on paired differences; zero differences are dropped."""
    _check_alt(alternative)
    d = np.sort(_vec(d, "d"))
    n_zero = int(np.sum(d == 0))
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateSample("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    V = float(ranks[d > 0].sum())
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    if n <= exact_max:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _subset_sum_counts(doubled, None)
        pl, pg = _exact_tails(counts, int(round(2 * V)))
        p2 = _two_sided(pl, pg)
        method = "Wilcoxon signed-rank (exact)"
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
        pl, pg, p2 = _normal_tails(V, mu, float(var))
        method = "Wilcoxon signed-rank (normal approximation)"
    return TestResult(V, p2, pl, pg, method, (n,), alternative, {"zeros_dropped": n_zero})


# --- normality and spread ------------------------------------------------------

def _lilliefors_stat(sorted_z: np.ndarray) -> np.ndarray:
    """KS distance to the fitted normal for rows of already-sorted samples."""
    n = sorted_z.shape[-1]
    mean = sorted_z.mean(axis=-1, keepdims=True)
    sd = sorted_z.std(axis=-1, ddof=1, keepdims=True)
    cdf = special.ndtr((sorted_z - mean) / sd)
    i = np.arange(1, n + 1)
    return np.maximum((i / n - cdf).max(axis=-1), (cdf - (i - 1) / n).max(axis=-1))


def lilliefors(x, n_sim: int = 100_000, seed: int = 0, chunk: int = 10_000) -> TestResult:
    """KS test against a normal with estimated mean and SD; Monte Carlo p."""
    x = np.sort(_vec(x, "x", 4))
    if x.std() == 0:
        raise DegenerateSample("sample variance is zero")
    D = float(_lilliefors_stat(x))
    rng = np.random.default_rng(seed)
    exceed, done = 0, 0
    while done < n_sim:
        b = min(chunk, n_sim - done)
        sims = np.sort(rng.standard_normal((b, x.size)), axis=1)
        exceed += int(np.sum(_lilliefors_stat(sims) >= D - 1e-12))
        done += b
    p = (exceed + 1) / (n_sim + 1)
    return TestResult(D, p, None, None, "Lilliefors (Monte Carlo)", (x.size,),
                      extra={"n_sim": n_sim, "seed": seed})


def brown_forsythe(*groups) -> TestResult:
    """One-way ANOVA on absolute deviations from each group's median."""
    if len(groups) < 2:
        raise InvalidParameter("need at least two groups")
    zs = [np.sort(np.abs(g - np.median(g))) for g in (_vec(g, "group", 2) for g in groups)]
    k = len(zs)
    N = sum(z.size for z in zs)
    grand = np.concatenate(zs).mean()
    ssb = sum(z.size * (z.mean() - grand) ** 2 for z in zs)
    ssw = sum(((z - z.mean()) ** 2).sum() for z in zs)
    dfb, dfw = k - 1, N - k
    if ssw == 0:
        F = 0.0 if ssb == 0 else math.inf
    else:
        F = (ssb / dfb) / (ssw / dfw)
    p = 1.0 if F == 0 else float(stats.f.sf(F, dfb, dfw))
    return TestResult(float(F), p, None, None, "Brown-Forsythe", tuple(z.size for z in zs),
                      extra={"df1": dfb, "df2": dfw})


# --- correlation ---------------------------------------------------------------

def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    r = float(xc @ yc / math.sqrt((xc @ xc) * (yc @ yc)))
    return max(-1.0, min(1.0, r))


def kendall_tau_b(x, y) -> Tuple[float, float]:
    """(tau_b, S) by explicit pair counting."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    iu = np.triu_indices(x.size, 1)
    S = float(np.sum(sx[iu] * sy[iu]))
    n0 = len(iu[0])
    n1 = n0 - np.sum(sx[iu] == 0)
    n2 = n0 - np.sum(sy[iu] == 0)
    return S / math.sqrt(n1 * n2), S


def correlation(x, y, method: str = "pearson", alternative: str = "two_sided") -> TestResult:
    _check_alt(alternative)
    x, y = _vec(x, "x", 3), _vec(y, "y", 3)
    if x.size != y.size:
        raise LengthMismatch(f"x and y differ in length: {x.size} vs {y.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateSample("a variable has zero variance")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    n = x.size
    if method in ("pearson", "spearman"):
        if method == "spearman":
            r = _pearson(stats.rankdata(x), stats.rankdata(y))
        else:
            r = _pearson(x, y)
        df = n - 2
        if abs(r) == 1.0:
            t = math.copysign(math.inf, r)
        else:
            t = r * math.sqrt(df / (1 - r * r))
        pl, pg = float(stats.t.cdf(t, df)), float(stats.t.sf(t, df))
        extra = {"t": t, "df": df}
    elif method == "kendall":
        r, S = kendall_tau_b(x, y)
        _, tx = np.unique(x, return_counts=True)
        _, ty = np.unique(y, return_counts=True)
        v0 = n * (n - 1) * (2 * n + 5)
        vt = np.sum(tx * (tx - 1) * (2 * tx + 5))
        vu = np.sum(ty * (ty - 1) * (2 * ty + 5))
        v1 = np.sum(tx * (tx - 1)) * np.sum(ty * (ty - 1)) / (2.0 * n * (n - 1))
        v2 = (np.sum(tx * (tx - 1) * (tx - 2)) * np.sum(ty * (ty - 1) * (ty - 2))
              / (9.0 * n * (n - 1) * (n - 2)))
        var = (v0 - vt - vu) / 18.0 + v1 + v2
        z = S / math.sqrt(var)
        pl, pg = float(stats.norm.cdf(z)), float(stats.norm.sf(z))
        extra = {"z": z, "S": S}
    else:
        raise InvalidParameter(f"unknown correlation method {method!r}")
    return TestResult(float(r), _two_sided(pl, pg), pl, pg, f"{method} correlation", (n,),
                      alternative, extra)


# --- two-sample distribution tests ---------------------------------------------

def ecdf_at(sample: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.sort(sample), points, side="right") / sample.size


def ks_two_sample(x, y, alternative: str = "two_sided") -> TestResult:
    """Two-sample Kolmogorov-Smirnov test.

    ``greater`` uses D+ = max(F_x - F_y), i.e. the alternative that the CDF
    of x lies above that of y; ``less`` uses D- = max(F_y - F_x).
    """
    _check_alt(alternative)
    x, y = np.sort(_vec(x, "x")), np.sort(_vec(y, "y"))
    m, n = x.size, y.size
    pts = np.concatenate([x, y])
    diff = ecdf_at(x, pts) - ecdf_at(y, pts)
    d_plus = max(float(diff.max()), 0.0)
    d_minus = max(float(-diff.min()), 0.0)
    D = max(d_plus, d_minus)
    en = m * n / (m + n)
    p2 = _clip(float(special.kolmogorov(math.sqrt(en) * D)))
    pg = _clip(math.exp(-2.0 * en * d_plus**2))
    pl = _clip(math.exp(-2.0 * en * d_minus**2))
    return TestResult(D, p2, pl, pg, "two-sample Kolmogorov-Smirnov", (m, n), alternative,
                      {"D_plus": d_plus, "D_minus": d_minus})


def _sorted_rows(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise InvalidParameter("samples must be finite 1-D or 2-D arrays")
    return arr[np.lexsort(arr.T[::-1])]


def _cramer_from_dist(dist: np.ndarray, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Statistic for (batched) index sets into a pooled distance matrix."""
    m, n = ix.shape[-1], iy.shape[-1]
    dxy = np.take_along_axis(dist[ix], iy[..., None, :], axis=-1).sum(axis=(-2, -1))
    dxx = np.take_along_axis(dist[ix], ix[..., None, :], axis=-1).sum(axis=(-2, -1))
    dyy = np.take_along_axis(dist[iy], iy[..., None, :], axis=-1).sum(axis=(-2, -1))
    return m * n / (m + n) * (2.0 * dxy / (m * n) - dxx / m**2 - dyy / n**2)


def cramer_test(x, y, n_boot: int = 10_000, seed: int = 0) -> TestResult:
    """Baringhaus-Franz Cramér test with kernel phi(z) = sqrt(z)/2 applied to
    squared Euclidean distances; p from an ordinary bootstrap of the pooled sample."""
    x, y = _sorted_rows(x), _sorted_rows(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise InvalidParameter("each sample needs at least two observations")
    m, n = x.shape[0], y.shape[0]
    pooled = np.vstack([x, y])
    dist = np.sqrt(((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1)) / 2.0
    T = float(_cramer_from_dist(dist, np.arange(m), np.arange(m, m + n)))
    rng = np.random.default_rng(seed)
    exceed, done = 0, 0
    while done < n_boot:
        b = min(1000, n_boot - done)
        idx = rng.integers(0, m + n, size=(b, m + n))
        Tb = _cramer_from_dist(dist, idx[:, :m], idx[:, m:])
        exceed += int(np.sum(Tb >= T - 1e-12 * max(1.0, abs(T))))
        done += b
    return TestResult(T, exceed / n_boot, None, None, "Cramér (bootstrap)", (m, n),
                      extra={"n_boot": n_boot, "seed": seed})


def _cvm_from_labels(is_x: np.ndarray, group_ends: np.ndarray, mult: np.ndarray,
                     m: int, n: int) -> np.ndarray:
    cx = np.cumsum(is_x, axis=-1)[..., group_ends] / m
    cy = np.cumsum(~is_x, axis=-1)[..., group_ends] / n
    return m * n / (m + n) ** 2 * np.sum(mult * (cx - cy) ** 2, axis=-1)


def cvm_two_sample(x, y, n_perm: int = 10_000, seed: int = 0) -> TestResult:
    """Two-sample Cramér-von Mises criterion
    T = mn/(m+n)^2 * sum over pooled points of (F_x - F_y)^2, which equals
    Anderson's rank form when there are no ties; p by permutation."""
    x, y = np.sort(_vec(x, "x", 2)), np.sort(_vec(y, "y", 2))
    m, n = x.size, y.size
    pooled = np.concatenate([x, y])
    order = np.argsort(pooled, kind="stable")
    values = pooled[order]
    is_x = order < m
    ends = np.flatnonzero(np.append(values[1:] != values[:-1], True))
    mult = np.diff(np.concatenate([[-1], ends]))
    T = float(_cvm_from_labels(is_x, ends, mult, m, n))
    rng = np.random.default_rng(seed)
    exceed, done = 0, 0
    while done < n_perm:
        b = min(2000, n_perm - done)
        perm = np.argsort(rng.random((b, m + n)), axis=1)
        Tb = _cvm_from_labels(perm < m, ends, mult, m, n)
        exceed += int(np.sum(Tb >= T - 1e-12 * max(1.0, T)))
        done += b
    p = (exceed + 1) / (n_perm + 1)
    return TestResult(T, p, None, None, "Cramér-von Mises (permutation)", (m, n),
                      extra={"n_perm": n_perm, "seed": seed})
