"""Repeated-measures linear models with structured residual covariance.

Each subject contributes a block of ``p`` correlated observations in a fixed
within-subject order.  Fixed effects are two-level factors coded -1/+1:
``D`` diagnosis (CDR0 / CDR0.5), ``S`` side (L / R) and ``T`` timepoint
(B / F).  Interactions are written by concatenating letters, e.g. ``"DT"``.
Estimation is full maximum likelihood with the fixed effects profiled out by
generalised least squares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from .errors import DesignError, InvalidParameter, NotNested
from .longitudinal import LongRow

COV_KINDS = ("CS", "UN", "AR1", "ARH1")
FACTOR_ORDER = "SDT"
_CODES = {
    "D": {"CDR0": -1.0, "CDR0.5": 1.0},
    "S": {"L": -1.0, "R": 1.0},
    "T": {"B": -1.0, "F": 1.0},
}
# (nested, full) pairs for which the likelihood-ratio test is valid.
_NESTING = {("CS", "UN"), ("AR1", "ARH1"), ("AR1", "UN"), ("ARH1", "UN")}


@lru_cache(maxsize=None)
def _tril(p: int):
    return np.tril_indices(p)


def n_cov_params(kind: str, p: int) -> int:
    if kind == "UN":
        return p * (p + 1) // 2
    if p == 1:
        return 1
    return {"CS": 2, "AR1": 2, "ARH1": p + 1}[kind]


@dataclass
class CovStructure:
    """Residual covariance of one subject's block.

    ``params`` holds the natural parameters:
    CS (sigma2, sigma1) with sigma1 the common covariance;
    UN the lower triangle row by row (variances on the diagonal);
    AR1 (sigma2, rho); ARH1 (sigma_1^2 .. sigma_p^2, rho).
    """

    kind: str
    dim: int
    params: np.ndarray

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise InvalidParameter(f"unknown covariance kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.size != n_cov_params(self.kind, self.dim):
            raise InvalidParameter(f"{self.kind} with dim {self.dim} needs "
                                   f"{n_cov_params(self.kind, self.dim)} parameters")

    def matrix(self) -> np.ndarray:
        p, th = self.dim, self.params
        lag = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        if self.kind == "CS":
            if p == 1:
                return np.array([[th[0]]])
            return np.where(lag == 0, th[0], th[1])
        if self.kind == "UN":
            out = np.zeros((p, p))
            out[_tril(p)] = th
            return out + np.tril(out, -1).T
        if self.kind == "AR1":
            rho = th[1] if p > 1 else 0.0
            return th[0] * rho ** lag
        sd = np.sqrt(th[:p])
        rho = th[p] if p > 1 else 0.0
        return np.outer(sd, sd) * rho ** lag

    def labels(self) -> List[str]:
        p = self.dim
        if self.kind == "CS":
            return ["sigma2", "sigma1"][: n_cov_params("CS", p)]
        if self.kind == "UN":
            return [f"sigma_{i + 1}{j + 1}" if i != j else f"sigma2_{i + 1}"
                    for i in range(p) for j in range(i + 1)]
        if self.kind == "AR1":
            return ["sigma2", "rho"][: n_cov_params("AR1", p)]
        return [f"sigma2_{i + 1}" for i in range(p)] + (["rho"] if p > 1 else [])

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.labels(), map(float, self.params)))


# --- unconstrained parameterisation ------------------------------------------

def _to_natural(kind: str, p: int, z: np.ndarray) -> np.ndarray:
    if kind == "CS":
        if p == 1:
            return np.exp(z[:1])
        lam_w, lam_b = np.exp(z[0]), np.exp(z[1])
        s1 = (lam_b - lam_w) / p
        return np.array([lam_w + s1, s1])
    if kind == "UN":
        chol = np.zeros((p, p))
        chol[_tril(p)] = z
        chol[np.diag_indices(p)] = np.exp(np.diag(chol))
        return (chol @ chol.T)[_tril(p)]
    if kind == "AR1":
        return np.array([math.exp(z[0]), math.tanh(z[1])]) if p > 1 else np.exp(z[:1])
    out = np.exp(z[:p])
    return np.append(out, math.tanh(z[p])) if p > 1 else out


def _to_unconstrained(kind: str, p: int, nat: np.ndarray, floor: float) -> np.ndarray:
    lg = lambda x: math.log(max(x, floor))  # noqa: E731
    at = lambda r: math.atanh(min(max(r, -0.99), 0.99))  # noqa: E731
    if kind == "CS":
        if p == 1:
            return np.array([lg(nat[0])])
        return np.array([lg(nat[0] - nat[1]), lg(nat[0] + (p - 1) * nat[1])])
    if kind == "UN":
        full = CovStructure("UN", p, nat).matrix()
        w, vecs = np.linalg.eigh(full)
        full = (vecs * np.maximum(w, floor)) @ vecs.T
        chol = np.linalg.cholesky(full)
        chol[np.diag_indices(p)] = np.log(np.diag(chol))
        return chol[_tril(p)]
    if kind == "AR1":
        return np.array([lg(nat[0]), at(nat[1])]) if p > 1 else np.array([lg(nat[0])])
    z = [lg(v) for v in nat[:p]]
    if p > 1:
        z.append(at(nat[p]))
    return np.array(z)


# --- model specification and data --------------------------------------------

def _canon(term: str) -> str:
    letters = set(term.upper())
    if not letters <= set(FACTOR_ORDER) or len(letters) != len(term):
        raise InvalidParameter(f"bad term {term!r}; use letters from D, S, T")
    return "".join(c for c in FACTOR_ORDER if c in letters)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effect terms over D/S/T (hierarchical) plus optional covariates."""

    terms: Tuple[str, ...]
    response: str = "distance"
    covariates: Tuple[str, ...] = ()

    def __post_init__(self):
        canon = tuple(_canon(t) for t in self.terms)
        if len(set(canon)) != len(canon):
            raise InvalidParameter("duplicate terms")
        present = set(canon)
        for t in canon:
            for r in range(1, len(t)):
                for sub in combinations(t, r):
                    if "".join(sub) not in present:
                        raise InvalidParameter(f"term {t} requires {''.join(sub)} (hierarchy)")
        object.__setattr__(self, "terms", canon)

    @classmethod
    def full(cls, factors: str, response: str = "distance") -> "ModelSpec":
        """All main effects and interactions of the given factor letters."""
        f = _canon(factors)
        terms = ["".join(c) for r in range(1, len(f) + 1) for c in combinations(f, r)]
        return cls(tuple(terms), response)


@dataclass
class Blocks:
    subjects: List[str]
    y: np.ndarray          # (n, p)
    X: np.ndarray          # (n, p, q)
    labels: List[str]
    term_columns: Dict[str, List[int]]
    within_pattern: List[Tuple[str, str]]


def build_blocks(rows: Sequence[LongRow], spec: ModelSpec,
                 covariates: Optional[Mapping[str, Sequence[float]]] = None) -> Blocks:
    order: List[str] = []
    grouped: Dict[str, List[int]] = {}
    for i, r in enumerate(rows):
        if r.subject_id not in grouped:
            grouped[r.subject_id] = []
            order.append(r.subject_id)
        grouped[r.subject_id].append(i)
    if not order:
        raise DesignError("no data rows")
    pattern = [(rows[i].side, rows[i].timepoint) for i in grouped[order[0]]]
    for sid in order:
        if [(rows[i].side, rows[i].timepoint) for i in grouped[sid]] != pattern:
            raise DesignError(f"subject {sid} does not follow the common within-subject layout")
    n, p = len(order), len(pattern)
    labels = ["(Intercept)"]
    cols = [np.ones(len(rows))]
    term_columns: Dict[str, List[int]] = {}
    for term in spec.terms:
        col = np.ones(len(rows))
        for letter in term:
            attr = {"D": "group", "S": "side", "T": "timepoint"}[letter]
            try:
                col = col * np.array([_CODES[letter][getattr(r, attr)] for r in rows])
            except KeyError as exc:
                raise DesignError(f"factor {letter} has unexpected level {exc}") from None
        term_columns[term] = [len(cols)]
        labels.append(term)
        cols.append(col)
    covariates = covariates or {}
    for name in spec.covariates:
        if name not in covariates:
            raise DesignError(f"covariate {name!r} not supplied")
        vals = np.asarray(covariates[name], dtype=float)
        if vals.shape != (len(rows),):
            raise DesignError(f"covariate {name!r} must have one value per row")
        term_columns[name] = [len(cols)]
        labels.append(name)
        cols.append(vals)
    flat = np.column_stack(cols)
    idx = np.array([grouped[s] for s in order])
    X = flat[idx]
    y = np.array([r.value for r in rows], dtype=float)[idx]
    if np.linalg.matrix_rank(flat) < flat.shape[1]:
        raise DesignError("fixed-effect design is rank deficient")
    return Blocks(order, y, X, labels, term_columns, pattern)


# --- likelihood ----------------------------------------------------------------

class _Suff:
    """Per-design-pattern sufficient statistics so that each likelihood
    evaluation costs O(patterns * p^2 q) rather than O(n p^2 q)."""

    def __init__(self, X: np.ndarray, y: np.ndarray):
        n, p, q = X.shape
        flat = X.reshape(n, -1)
        uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.n, self.p = n, p
        self.Xg = uniq.reshape(-1, p, q)
        self.ng = np.bincount(inverse).astype(float)
        G = len(uniq)
        self.sy = np.zeros((G, p))
        np.add.at(self.sy, inverse, y)
        self.syy = np.zeros((G, p, p))
        np.add.at(self.syy, inverse, y[:, :, None] * y[:, None, :])

    def profile(self, sigma: np.ndarray):
        """GLS fit for a given block covariance; returns (loglik, beta, XtVX)."""
        try:
            chol = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            return -np.inf, None, None
        vinv = np.linalg.inv(sigma)
        VX = vinv @ self.Xg                                   # (G, p, q)
        xtx = np.einsum("g,gpi,gpj->ij", self.ng, self.Xg, VX)
        xty = np.einsum("gpi,gp->i", VX, self.sy)
        try:
            beta = np.linalg.solve(xtx, xty)
        except np.linalg.LinAlgError:
            return -np.inf, None, None
        m = self.Xg @ beta                                    # (G, p)
        rr = (self.syy.sum(0) - np.einsum("gi,gj->ij", self.sy, m)
              - np.einsum("gi,gj->ij", m, self.sy) + np.einsum("g,gi,gj->ij", self.ng, m, m))
        quad = float(np.sum(vinv * rr))
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        N = self.n * self.p
        ll = -0.5 * (N * math.log(2 * math.pi) + self.n * logdet + quad)
        return ll, beta, xtx


def _profile(sigma: np.ndarray, X: np.ndarray, y: np.ndarray):
    return _Suff(X, y).profile(sigma)


@dataclass
class FTest:
    term: str
    F: float
    num_df: int
    den_df: int
    p: float


@dataclass
class MixedModelFit:
    spec: ModelSpec
    cov: CovStructure
    beta: Dict[str, float]
    beta_cov: np.ndarray
    logLik: float
    k: int
    n_obs: int
    n_subjects: int
    aic: float
    bic: float
    fitted: np.ndarray
    residuals: np.ndarray
    blocks: Blocks = field(repr=False)
    converged: bool = True

    @property
    def kind(self) -> str:
        return self.cov.kind

    def summary(self) -> dict:
        return {
            "cov": self.cov.kind, "k": self.k, "logLik": self.logLik, "AIC": self.aic,
            "BIC": self.bic, "bic_n": self.n_obs, "beta": self.beta,
            "cov_params": self.cov.as_dict(),
        }


def information_criteria(loglik: float, k: int, n_obs: int) -> Tuple[float, float]:
    """(AIC, BIC) with BIC's sample size taken as the number of observations."""
    aic = -2.0 * loglik + 2.0 * k
    bic = -2.0 * loglik + k * math.log(n_obs) if n_obs > 0 else aic
    return float(aic), float(bic)


def _moment_start(kind: str, S: np.ndarray) -> np.ndarray:
    p = S.shape[0]
    diag = np.diag(S)
    if p == 1:
        return np.array([diag[0]])
    off = S[~np.eye(p, dtype=bool)]
    if p > 1:
        lag1 = [S[i, i + 1] / math.sqrt(max(diag[i] * diag[i + 1], 1e-300)) for i in range(p - 1)]
        rho = float(np.clip(np.mean(lag1), -0.95, 0.95))
    if kind == "CS":
        return np.array([diag.mean(), off.mean()])
    if kind == "UN":
        return S[_tril(p)]
    if kind == "AR1":
        return np.array([diag.mean(), rho])
    return np.append(diag, rho)


def _flip_flop(suff, X, y, S0, floor, iters=500, tol=1e-13):
    """ML for the unstructured covariance by alternating GLS and
    residual-covariance updates."""
    sigma = S0
    ll_old = -np.inf
    for _ in range(iters):
        ll, beta, _ = suff.profile(sigma)
        if beta is None:
            break
        r = y - np.einsum("npq,q->np", X, beta)
        sigma = r.T @ r / y.shape[0] + floor * np.eye(y.shape[1])
        if abs(ll - ll_old) <= tol * max(1.0, abs(ll)):
            break
        ll_old = ll
    return sigma


def fit(rows: Sequence[LongRow], spec: ModelSpec, kind: str = "CS",
        covariates: Optional[Mapping[str, Sequence[float]]] = None,
        max_iter: int = 2000, rel_tol: float = 1e-8) -> MixedModelFit:
    """Maximum-likelihood fit of ``spec`` under residual structure ``kind``."""
    if kind not in COV_KINDS:
        raise InvalidParameter(f"unknown covariance kind {kind!r}")
    blocks = build_blocks(rows, spec, covariates)
    X, y = blocks.X, blocks.y
    n, p = y.shape
    q = X.shape[2]

    flatX = X.reshape(n * p, q)
    beta_ols = np.linalg.lstsq(flatX, y.reshape(-1), rcond=None)[0]
    R = y - np.einsum("npq,q->np", X, beta_ols)
    S = R.T @ R / n
    scale = max(float(np.mean(y**2)), 1.0)
    floor = 1e-12 * scale

    suff = _Suff(X, y)
    lower = _lower_bounds(kind, p, np.zeros(n_cov_params(kind, p)), floor)

    def nll(z):
        nat = _to_natural(kind, p, np.maximum(z, lower))
        ll, _, _ = suff.profile(CovStructure(kind, p, nat).matrix())
        return -ll if np.isfinite(ll) else np.inf

    starts = [_moment_start(kind, S)]
    if kind == "UN":
        starts.insert(0, _flip_flop(suff, X, y, S + floor * np.eye(p), floor)[_tril(p)])
    elif kind == "ARH1" and p > 1:
        starts.append(np.append(np.full(p, np.mean(np.diag(S))), starts[0][-1]))
    zs = [_to_unconstrained(kind, p, s, floor) for s in starts]
    fvals = [nll(z) for z in zs]
    z_best = zs[int(np.argmin(fvals))]
    f_best = min(fvals)

    converged = True
    if np.max(np.abs(R)) > 1e-12 * math.sqrt(scale):
        for _ in range(2):
            res = optimize.minimize(
                nll, z_best, method="Nelder-Mead",
                options={"maxiter": max_iter, "xatol": 1e-9,
                         "fatol": rel_tol * max(1.0, abs(f_best)), "adaptive": len(z_best) > 4},
            )
            if res.fun < f_best - 1e-12 * max(1.0, abs(f_best)):
                z_best, f_best = res.x, res.fun
            converged = bool(res.success)

    nat = _to_natural(kind, p, np.maximum(z_best, lower))
    cov = CovStructure(kind, p, nat)
    ll, beta, xtx = suff.profile(cov.matrix())
    k = q + n_cov_params(kind, p)
    aic, bic = information_criteria(ll, k, n * p)
    fitted = np.einsum("npq,q->np", X, beta)
    return MixedModelFit(
        spec=spec, cov=cov, beta=dict(zip(blocks.labels, map(float, beta))),
        beta_cov=np.linalg.inv(xtx), logLik=float(ll), k=k, n_obs=n * p, n_subjects=n,
        aic=aic, bic=bic, fitted=fitted, residuals=y - fitted, blocks=blocks,
        converged=converged,
    )


def _lower_bounds(kind, p, z, floor):
    """Keep log-variance coordinates above log(floor); other coordinates free."""
    lo = np.full_like(z, -np.inf)
    lf = math.log(floor)
    if kind == "UN":
        diag_pos = [i * (i + 1) // 2 + i for i in range(p)]
        lo[diag_pos] = 0.5 * lf
    elif kind == "CS":
        lo[:] = lf
    elif kind == "AR1":
        lo[0] = lf
    else:
        lo[:p] = lf
    return lo


def fit_all(rows, spec, kinds=COV_KINDS, covariates=None) -> Dict[str, MixedModelFit]:
    return {k: fit(rows, spec, k, covariates) for k in kinds}


def select_by_aic(fits: Mapping[str, MixedModelFit]) -> str:
    return min(fits, key=lambda k: (fits[k].aic, COV_KINDS.index(k)))


def lrt_statistic(ll_nested: float, ll_full: float, k_nested: int, k_full: int):
    """(statistic, df, p) from two log-likelihoods."""
    stat = max(2.0 * (ll_full - ll_nested), 0.0)
    df = k_full - k_nested
    if df <= 0:
        return stat, df, 1.0 if stat == 0 else float("nan")
    return stat, df, float(stats.chi2.sf(stat, df))


def lrt(nested: MixedModelFit, full: MixedModelFit):
    same = nested.kind == full.kind
    if not same and (nested.kind, full.kind) not in _NESTING:
        raise NotNested(f"{nested.kind} is not a restriction of {full.kind}")
    if nested.spec.terms != full.spec.terms or nested.n_obs != full.n_obs:
        raise NotNested("fits differ in fixed effects or data")
    return lrt_statistic(nested.logLik, full.logLik, nested.k, full.k)


def model_comparison(fits: Mapping[str, MixedModelFit]) -> dict:
    """Information criteria per structure plus every valid nested LRT."""
    rows = {k: {"k": f.k, "logLik": f.logLik, "AIC": f.aic, "BIC": f.bic}
            for k, f in fits.items()}
    tests = []
    for a, b in sorted(_NESTING):
        if a in fits and b in fits:
            stat, df, pval = lrt(fits[a], fits[b])
            tests.append({"nested": a, "full": b, "statistic": stat, "df": df, "p": pval})
    return {"structures": rows, "lrt": tests, "selected_by_aic": select_by_aic(fits),
            "bic_n": "observations"}


def f_tests(fit_: MixedModelFit) -> List[FTest]:
    """Wald F test for every fixed-effect term.

    Denominator df follow the containment split: terms constant within a
    subject use n_subjects minus the between-subject rank; the rest use the
    within-subject residual df.  The ML Wald statistic is rescaled by
    den_df / n_ref so that balanced compound-symmetric data reproduce the
    classical split-plot ANOVA F exactly.
    """
    b = fit_.blocks
    n, p, q = b.X.shape
    between = [j for j in range(q) if np.allclose(b.X[:, :, j], b.X[:, :1, j])]
    rank_between = np.linalg.matrix_rank(b.X[:, 0, between]) if between else 0
    df_between = n - rank_between
    df_within = n * p - n - (q - rank_between)
    beta = np.array(list(fit_.beta.values()))
    out = []
    for term, cols in b.term_columns.items():
        is_between = all(c in between for c in cols)
        den_df = df_between if is_between else df_within
        n_ref = n if is_between else n * p - n
        est = beta[cols]
        sub = fit_.beta_cov[np.ix_(cols, cols)]
        wald = float(est @ np.linalg.solve(sub, est)) if np.all(np.diag(sub) > 0) else 0.0
        F = wald / len(cols) * den_df / n_ref if n_ref > 0 else float("nan")
        pval = float(stats.f.sf(F, len(cols), den_df)) if den_df > 0 else float("nan")
        out.append(FTest(term, float(F), len(cols), int(den_df), pval))
    return out


def cell_means(rows: Sequence[LongRow], by: Sequence[str]) -> List[dict]:
    """Mean response per combination of the named row attributes."""
    acc: Dict[tuple, List[float]] = {}
    for r in rows:
        key = tuple(getattr(r, a) for a in by)
        acc.setdefault(key, []).append(r.value)
    return [dict(zip(by, k), mean=float(np.mean(v)), n=len(v)) for k, v in sorted(acc.items())]
