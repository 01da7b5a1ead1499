"""Principal components of small morphometry blocks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateColumn, InvalidParameter


@dataclass
class PcaResult:
    eigenvalues: np.ndarray
    loadings: np.ndarray          # columns are components
    prop_var: np.ndarray
    cum_prop: np.ndarray
    mode: str
    variables: List[str]
    analyzed: np.ndarray          # covariance or correlation matrix

    def as_dict(self) -> dict:
        comps = [f"PC{i + 1}" for i in range(len(self.eigenvalues))]
        return {
            "mode": self.mode,
            "eigenvalues": self.eigenvalues.tolist(),
            "prop_var": self.prop_var.tolist(),
            "cum_prop": self.cum_prop.tolist(),
            "loadings": {v: dict(zip(comps, row.tolist())) for v, row in zip(self.variables, self.loadings)},
        }


def pca(data, mode: str = "covariance", variables: Optional[Sequence[str]] = None) -> PcaResult:
    """Eigen-decomposition of the sample covariance (divisor n-1) or
    correlation matrix.  Components are sorted by decreasing eigenvalue and
    each column is signed so that its largest-magnitude entry is positive."""
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise InvalidParameter("data must be a 2-D matrix")
    n, k = X.shape
    if n < 5:
        raise InvalidParameter(f"need at least 5 rows, got {n}")
    if not np.all(np.isfinite(X)):
        raise InvalidParameter("data contains non-finite values")
    variables = list(variables) if variables is not None else [f"V{i + 1}" for i in range(k)]
    if len(variables) != k:
        raise InvalidParameter("one variable name per column is required")
    C = np.cov(X, rowvar=False, ddof=1).reshape(k, k)
    if mode == "correlation":
        sd = np.sqrt(np.diag(C))
        if np.any(sd == 0):
            raise DegenerateColumn(f"zero-variance column: {variables[int(np.argmin(sd))]}")
        C = C / np.outer(sd, sd)
        C[np.diag_indices(k)] = 1.0
    elif mode != "covariance":
        raise InvalidParameter(f"unknown PCA mode {mode!r}")
    vals, vecs = np.linalg.eigh(C)
    order = np.argsort(vals)[::-1]
    vals, vecs = np.clip(vals[order], 0.0, None), vecs[:, order]
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(k)])
    total = vals.sum()
    prop = vals / total if total > 0 else np.full(k, 1.0 / k)
    cum = np.cumsum(prop)
    cum[-1] = 1.0
    return PcaResult(vals, vecs, prop, cum, mode, variables, C)
