"""Logistic discrimination of CDR0.5 versus CDR0.

Labels are integers: 1 for CDR0.5 (the "positive" class) and 0 for CDR0.
Model terms are written as strings over named predictor columns: ``"d"``,
``"d^3"`` for powers and ``"d:S"`` for products of two base variables.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import (DegenerateColumn, DegenerateLabels, InvalidParameter, LengthMismatch,
                     MissingData, SeparationWarning)

CDR0, CDR05 = 0, 1
COEF_CAP = 30.0
MAX_POWER = 9


# --- terms and design ------------------------------------------------------------

def parse_term(label: str) -> List[Tuple[str, int]]:
    """``"d^2"`` -> [("d", 2)], ``"d:S"`` -> [("d", 1), ("S", 1)]."""
    factors = []
    for part in label.split(":"):
        name, _, power = part.partition("^")
        if not name:
            raise InvalidParameter(f"bad term {label!r}")
        factors.append((name, int(power) if power else 1))
    return factors


def term_column(label: str, data: Mapping[str, Sequence[float]]) -> np.ndarray:
    col = None
    for name, power in parse_term(label):
        if name not in data:
            raise InvalidParameter(f"term {label!r} uses unknown predictor {name!r}")
        v = np.asarray(data[name], dtype=float) ** power
        col = v if col is None else col * v
    return col


def design(terms: Sequence[str], data: Mapping[str, Sequence[float]]) -> np.ndarray:
    """Model matrix without the intercept column."""
    if not terms:
        n = len(next(iter(data.values()))) if data else 0
        return np.zeros((n, 0))
    return np.column_stack([term_column(t, data) for t in terms])


def candidate_terms(continuous: Sequence[str], categorical: Sequence[str] = (),
                    max_power: int = MAX_POWER) -> List[str]:
    """Categorical main effects, powers 1..max_power of each continuous
    predictor, and all pairwise products of the base variables."""
    out = list(categorical)
    for v in continuous:
        out += [v] + [f"{v}^{k}" for k in range(2, max_power + 1)]
    base = list(categorical) + list(continuous)
    out += [f"{a}:{b}" for i, a in enumerate(base) for b in base[i + 1:]]
    return out


# --- fitting -------------------------------------------------------------------------

@dataclass
class LogisticModel:
    terms: List[str]
    beta: np.ndarray                 # intercept first
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    deviance: float
    aic: float
    n: int
    converged: bool
    separated: bool = False

    @property
    def coef(self) -> Dict[str, float]:
        return dict(zip(["(Intercept)"] + list(self.terms), map(float, self.beta)))

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(-1, len(self.terms))
        return self.beta[0] + X @ self.beta[1:]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _expit(self.linear_predictor(X))

    def predict_data(self, data: Mapping[str, Sequence[float]]) -> np.ndarray:
        return self.predict_proba(design(self.terms, data))

    def term_p(self) -> Dict[str, float]:
        return dict(zip(self.terms, map(float, self.p[1:])))

    def as_dict(self) -> dict:
        return {
            "terms": list(self.terms), "coefficients": self.coef,
            "se": dict(zip(["(Intercept)"] + self.terms, map(float, self.se))),
            "p": dict(zip(["(Intercept)"] + self.terms, map(float, self.p))),
            "deviance": self.deviance, "AIC": self.aic, "n": self.n,
            "converged": self.converged, "separated": self.separated,
        }


def _expit(eta):
    return np.exp(-np.logaddexp(0.0, -eta))


def _deviance(y, eta):
    # -2 log-likelihood, computed stably: log(1+e^eta) - y*eta
    return float(2.0 * np.sum(np.logaddexp(0.0, eta) - y * eta))


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise InvalidParameter("labels must be 0 (CDR0) or 1 (CDR0.5)")
    if y.size == 0 or y.min() == y.max():
        raise DegenerateLabels("labels are all one class")
    return y


def fit_logistic(X, y, terms: Optional[Sequence[str]] = None, max_iter: int = 100,
                 tol: float = 1e-12, cap: float = COEF_CAP) -> LogisticModel:
    """Maximum-likelihood logistic regression by Newton/IRLS.

    Columns are centred and scaled internally.  If the standardised
    coefficient norm exceeds ``cap`` the data are treated as separated:
    the fit stops at the cap and a SeparationWarning is issued.
    """
    y = _check_labels(y)
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    n, k = X.shape
    terms = list(terms) if terms is not None else [f"x{i + 1}" for i in range(k)]
    if len(terms) != k:
        raise InvalidParameter("one term label per column is required")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise DegenerateColumn(f"constant predictor column: {terms[int(np.argmin(sd))]}")
    Z = np.column_stack([np.ones(n), (X - mu) / sd])

    b = np.zeros(k + 1)
    b[0] = math.log(y.mean() / (1 - y.mean()))
    dev = _deviance(y, Z @ b)
    converged = separated = False
    for _ in range(max_iter):
        pr = _expit(Z @ b)
        w = pr * (1 - pr)
        grad = Z.T @ (y - pr)
        H = Z.T @ (Z * w[:, None])
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            b_new = b + t * step
            dev_new = _deviance(y, Z @ b_new)
            if dev_new <= dev + 1e-12 * max(1.0, dev) or t < 1e-10:
                break
            t *= 0.5
        if np.linalg.norm(b_new[1:]) > cap:
            b_new = b + step * _ray_to_cap(b, step, cap)
            dev_new = _deviance(y, Z @ b_new)
            b, dev, separated = b_new, dev_new, True
            break
        small = np.max(np.abs(t * step)) <= tol * (1.0 + np.max(np.abs(b)))
        b, dev = b_new, dev_new
        if small:
            converged = True
            break
    if separated:
        warnings.warn("complete or quasi-complete separation; coefficients capped",
                      SeparationWarning, stacklevel=2)

    pr = _expit(Z @ b)
    w = pr * (1 - pr)
    H = Z.T @ (Z * w[:, None])
    cov_z = np.linalg.pinv(H)
    # back to the original column scale: beta = A b
    A = np.eye(k + 1)
    A[1:, 1:] = np.diag(1.0 / sd)
    A[0, 1:] = -mu / sd
    beta = A @ b
    cov = A @ cov_z @ A.T
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, 0.0)
    p = 2.0 * stats.norm.sf(np.abs(z))
    return LogisticModel(terms, beta, se, z, p, dev, dev + 2.0 * (k + 1), n, converged, separated)


def _ray_to_cap(b, step, cap):
    """Largest t in [0, 1] with ||(b + t*step)[1:]|| <= cap."""
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm((b + mid * step)[1:]) <= cap:
            lo = mid
        else:
            hi = mid
    return lo


def fit_terms(terms: Sequence[str], data: Mapping[str, Sequence[float]], y, **kw) -> LogisticModel:
    return fit_logistic(design(terms, data), y, list(terms), **kw)


def score_vector(model: LogisticModel, X, y) -> np.ndarray:
    """Gradient of the log-likelihood at the model's coefficients."""
    X = np.column_stack([np.ones(len(y)), np.asarray(X, float).reshape(len(y), -1)])
    return X.T @ (np.asarray(y, float) - _expit(X @ model.beta))


# --- stepwise selection --------------------------------------------------------------

@dataclass
class StepwiseResult:
    model: LogisticModel
    path: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def _quiet_fit(terms, data, y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        try:
            return fit_terms(terms, data, y)
        except DegenerateColumn:
            return None


def stepwise_select(data: Mapping[str, Sequence[float]], y, candidates: Sequence[str],
                    start: str = "null", alpha: float = 0.05, max_steps: int = 200) -> StepwiseResult:
    """Two-phase selection.

    Phase 1 is bidirectional stepwise search minimising AIC, starting from
    the intercept-only model (``start="null"``) or from all candidates
    (``start="full"``).  Phase 2 drops the term with the largest Wald p-value
    until every remaining term has p <= alpha.  Ties are broken by term label.
    """
    y = _check_labels(y)
    candidates = sorted(dict.fromkeys(candidates))
    if start == "full":
        current = list(candidates)
    elif start == "null":
        current = []
    else:
        raise InvalidParameter("start must be 'null' or 'full'")
    cache: Dict[tuple, Optional[LogisticModel]] = {}

    def get(ts):
        key = tuple(sorted(ts))
        if key not in cache:
            cache[key] = _quiet_fit(list(key), data, y)
        return cache[key]

    model = get(current)
    path = [{"phase": 1, "action": "start", "term": None, "AIC": model.aic}]
    for _ in range(max_steps):
        moves = []
        for t in current:
            m = get([c for c in current if c != t])
            if m is not None:
                moves.append((m.aic, t, "remove", m))
        for t in candidates:
            if t not in current:
                m = get(current + [t])
                if m is not None:
                    moves.append((m.aic, t, "add", m))
        if not moves:
            break
        aic, term, action, m = min(moves, key=lambda mv: (mv[0], mv[1], mv[2]))
        if aic >= model.aic - 1e-9:
            break
        current = sorted(m.terms)
        model = m
        path.append({"phase": 1, "action": action, "term": term, "AIC": aic})

    while current:
        pvals = model.term_p()
        worst = max(sorted(pvals), key=lambda t: pvals[t])
        if pvals[worst] <= alpha:
            break
        current = [c for c in current if c != worst]
        model = get(current)
        path.append({"phase": 2, "action": "remove", "term": worst, "AIC": model.aic,
                     "p": pvals[worst]})
    notes = []
    if not current:
        notes.append("no term survived selection; intercept-only model returned")
    if model.separated:
        notes.append("selected model is at the separation cap")
    return StepwiseResult(get(current), path, notes)


# --- classification -------------------------------------------------------------------

def classify(probabilities, p_o: float) -> np.ndarray:
    """1 (CDR0.5) where p > p_o, else 0 (CDR0); a tie goes to CDR0."""
    pr = np.asarray(probabilities, dtype=float)
    if np.any((pr < 0) | (pr > 1)) or not 0 <= p_o <= 1:
        raise InvalidParameter("probabilities and threshold must lie in [0, 1]")
    return (pr > p_o).astype(int)


def aggregate_subject(labels: Sequence[int]) -> int:
    """A subject is CDR0.5 if any of its hippocampus labels is CDR0.5."""
    labels = list(labels)
    if not labels:
        raise MissingData("subject has no labels")
    return int(any(int(v) == CDR05 for v in labels))


def aggregate_by_subject(labels, subjects) -> Tuple[List[str], np.ndarray]:
    order: List[str] = []
    groups: Dict[str, List[int]] = {}
    for lab, s in zip(labels, subjects):
        if s not in groups:
            order.append(s)
            groups[s] = []
        groups[s].append(int(lab))
    return order, np.array([aggregate_subject(groups[s]) for s in order], dtype=int)


def round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class ConfusionSummary:
    """Counts: t_cdr0 CDR0 kept as CDR0; f_cdr05 CDR0 called CDR0.5;
    f_cdr0 CDR0.5 called CDR0; t_cdr05 CDR0.5 detected."""

    t_cdr0: int
    f_cdr0: int
    f_cdr05: int
    t_cdr05: int

    @property
    def n_cdr0(self) -> int:
        return self.t_cdr0 + self.f_cdr05

    @property
    def n_cdr05(self) -> int:
        return self.t_cdr05 + self.f_cdr0

    @property
    def n(self) -> int:
        return self.n_cdr0 + self.n_cdr05

    @staticmethod
    def _pct(num: int, den: int) -> Optional[Fraction]:
        return Fraction(100 * num, den) if den else None

    @property
    def ccr(self) -> Optional[Fraction]:
        return self._pct(self.t_cdr0 + self.t_cdr05, self.n)

    @property
    def sensitivity(self) -> Optional[Fraction]:
        return self._pct(self.t_cdr05, self.n_cdr05)

    @property
    def specificity(self) -> Optional[Fraction]:
        return self._pct(self.t_cdr0, self.n_cdr0)

    def percents(self) -> Dict[str, Optional[int]]:
        """Integer percentages, rounding halves up."""
        return {k: (None if v is None else round_half_up(v)) for k, v in
                (("ccr", self.ccr), ("sensitivity", self.sensitivity), ("specificity", self.specificity))}

    def as_dict(self) -> dict:
        exact = {k + "_exact": (None if v is None else float(v)) for k, v in
                 (("ccr", self.ccr), ("sensitivity", self.sensitivity), ("specificity", self.specificity))}
        return {
            "matrix": {"true_CDR0": {"classified_CDR0": self.t_cdr0, "classified_CDR0.5": self.f_cdr05},
                       "true_CDR0.5": {"classified_CDR0": self.f_cdr0, "classified_CDR0.5": self.t_cdr05}},
            **self.percents(), **exact,
        }


def confusion(labels, truth) -> ConfusionSummary:
    labels = np.asarray(labels, dtype=int).ravel()
    truth = np.asarray(truth, dtype=int).ravel()
    if labels.size != truth.size:
        raise LengthMismatch(f"{labels.size} labels for {truth.size} truths")
    return ConfusionSummary(
        t_cdr0=int(np.sum((truth == 0) & (labels == 0))),
        f_cdr0=int(np.sum((truth == 1) & (labels == 0))),
        f_cdr05=int(np.sum((truth == 0) & (labels == 1))),
        t_cdr05=int(np.sum((truth == 1) & (labels == 1))),
    )


# --- cost-optimised thresholds ----------------------------------------------------------

@dataclass(frozen=True)
class CostSpec:
    kind: str              # "C1" or "C2"
    a: float               # w1 or eta1
    b: float               # w2 or eta2

    def __post_init__(self):
        if self.kind == "C1":
            for w in (self.a, self.b):
                if w != int(w) or w < 1 or int(w) % 2 == 0:
                    raise InvalidParameter("C1 weights must be positive odd integers")
            if self.a > self.b:
                raise InvalidParameter("C1 requires w1 <= w2")
        elif self.kind == "C2":
            if self.a < 0 or self.b < 0 or abs(self.a + self.b - 1) > 1e-12:
                raise InvalidParameter("C2 weights must be non-negative and sum to 1")
        else:
            raise InvalidParameter(f"unknown cost {self.kind!r}")

    def __call__(self, c: ConfusionSummary) -> float:
        if self.kind == "C1":
            return -float((c.t_cdr0 - c.f_cdr0) ** int(self.a) * (c.t_cdr05 - c.f_cdr05) ** int(self.b))
        # Weighted (specificity, sensitivity) balance: each term is
        # (correct - incorrect) within one true class over that class size.
        spec = (c.t_cdr0 - c.f_cdr05) / c.n_cdr0 if c.n_cdr0 else 0.0
        sens = (c.t_cdr05 - c.f_cdr0) / c.n_cdr05 if c.n_cdr05 else 0.0
        return -(self.a * spec + self.b * sens)

    def as_dict(self) -> dict:
        names = ("w1", "w2") if self.kind == "C1" else ("eta1", "eta2")
        return {"cost": self.kind, names[0]: self.a, names[1]: self.b}


@dataclass
class ThresholdResult:
    intervals: List[Tuple[float, float, bool]]   # (lo, hi, hi_inclusive); lo always included
    p_opt: float
    cost: float
    summary: ConfusionSummary
    scan: List[dict]

    def as_dict(self) -> dict:
        return {"optimal_intervals": [{"lo": lo, "hi": hi, "hi_inclusive": inc} for lo, hi, inc in self.intervals],
                "p_opt": self.p_opt, "cost": self.cost, "summary": self.summary.as_dict()}


def threshold_intervals(scores) -> List[Tuple[float, float, bool]]:
    """Maximal p_o ranges in [0, 1] on which classify() is constant."""
    s = np.unique(np.asarray(scores, dtype=float))
    cuts = [0.0] + [float(v) for v in s if 0.0 < v <= 1.0]
    out = []
    for i, lo in enumerate(cuts):
        hi = cuts[i + 1] if i + 1 < len(cuts) else 1.0
        last = i + 1 == len(cuts)
        out.append((lo, hi, last))
    return out


def optimize_threshold(scores, truth, cost: CostSpec) -> ThresholdResult:
    """Exhaustive scan over the decision-relevant threshold intervals."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=int)
    if scores.shape != truth.shape:
        raise LengthMismatch("scores and truth differ in length")
    scan = []
    for lo, hi, inc in threshold_intervals(scores):
        c = confusion(classify(scores, lo), truth)
        scan.append({"lo": lo, "hi": hi, "hi_inclusive": inc, "cost": cost(c), "summary": c})
    best = min(r["cost"] for r in scan)
    opt = [r for r in scan if r["cost"] <= best + 1e-12 * max(1.0, abs(best))]
    first = opt[0]
    p_opt = 0.5 * (first["lo"] + first["hi"])
    return ThresholdResult([(r["lo"], r["hi"], r["hi_inclusive"]) for r in opt], p_opt, best,
                           first["summary"], scan)


# --- cross-validation ------------------------------------------------------------------

@dataclass
class LoocvResult:
    summary: ConfusionSummary
    probabilities: np.ndarray
    folds: List[dict]

    def as_dict(self) -> dict:
        return {"summary": self.summary.as_dict(),
                "flagged_folds": [f["subject"] for f in self.folds if f["separated"]]}


def loocv(terms: Sequence[str], data: Mapping[str, Sequence[float]], y, subjects: Sequence[str],
          p_o: float = 0.5, aggregate: bool = False,
          fitter: Callable = fit_terms) -> LoocvResult:
    """Leave-one-subject-out: every row of the held-out subject is excluded
    from the refit and then predicted."""
    y = np.asarray(y, dtype=int)
    subjects = np.asarray(subjects)
    uniq = list(dict.fromkeys(subjects.tolist()))
    if len(uniq) < 3:
        raise InvalidParameter("need at least 3 subjects")
    cols = {k: np.asarray(v, dtype=float) for k, v in data.items()}
    probs = np.empty(y.size)
    folds = []
    for s in uniq:
        test = subjects == s
        train = {k: v[~test] for k, v in cols.items()}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SeparationWarning)
            model = fitter(list(terms), train, y[~test])
        probs[test] = model.predict_data({k: v[test] for k, v in cols.items()})
        folds.append({"subject": s, "beta": model.beta.copy(),
                      "separated": model.separated or any(issubclass(w.category, SeparationWarning) for w in caught)})
    labels = classify(probs, p_o)
    if aggregate:
        _, lab = aggregate_by_subject(labels, subjects)
        _, tru = aggregate_by_subject(y, subjects)
        summary = confusion(lab, tru)
    else:
        summary = confusion(labels, y)
    return LoocvResult(summary, probs, folds)
