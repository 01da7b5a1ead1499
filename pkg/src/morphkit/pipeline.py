"""Named analyses over a subject table, assembled into one report.

Each analysis returns plain dicts (and optionally CSV series for plotting).
Random procedures draw their seeds from the request seed and a stable label,
so adding or reordering comparisons never changes another comparison's p.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import discrimination as disc
from . import mixed
from . import stattests as st
from .errors import InvalidParameter
from .longitudinal import CELL_LABELS, GROUPS, MorphTable, apc_long, apc_records, to_long
from .pca import pca
from .report import REPORT_VERSION, csv_text

ANALYSES = ("summary", "repeated", "posthoc", "correlations", "cdf", "pca", "logistic", "apc", "full")
MEASURES = ("distance", "volume", "both")
SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class AnalysisRequest:
    analysis: str = "full"
    measure: str = "both"
    seed: int = 0
    n_boot: int = 10_000
    n_perm: int = 10_000
    n_sim: int = 100_000
    max_power: int = disc.MAX_POWER

    def __post_init__(self):
        if self.analysis not in ANALYSES:
            raise InvalidParameter(f"analysis must be one of {', '.join(ANALYSES)}")
        if self.measure not in MEASURES:
            raise InvalidParameter(f"measure must be one of {', '.join(MEASURES)}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameter("seed must be a 64-bit unsigned integer")
        for name in ("n_boot", "n_perm", "n_sim", "max_power"):
            if getattr(self, name) < 1:
                raise InvalidParameter(f"{name} must be positive")

    def measures(self) -> List[str]:
        return ["distance", "volume"] if self.measure == "both" else [self.measure]

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(seed: int, label: str) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def describe(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return {"n": int(v.size), "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if v.size > 1 else None,
            "min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(v.max())}


def _row(label: str, res: st.TestResult) -> dict:
    out = {"comparison": label}
    out.update(res.as_dict())
    out["significant"] = bool(res.p_two_sided <= SIGNIFICANCE)
    return out


def _cells(rec, measure: str) -> Dict[str, float]:
    return rec.measure(measure)


def _by_group(table: MorphTable, fn: Callable) -> Dict[str, np.ndarray]:
    return {g: np.array([fn(r) for r in table.by_group(g)], dtype=float) for g in GROUPS}


# --- analyses ------------------------------------------------------------------------

def analysis_summary(table: MorphTable, req: AnalysisRequest):
    variables: Dict[str, Callable] = {
        "age_years": lambda r: r.age_years,
        "education_years": lambda r: r.education_years,
        "scan_interval_years": lambda r: r.scan_interval_years,
        "bv_base": lambda r: r.brain_volume[0], "bv_follow": lambda r: r.brain_volume[1],
        "icv_base": lambda r: r.icv[0], "icv_follow": lambda r: r.icv[1],
    }
    for m in req.measures():
        prefix = "d_" if m == "distance" else "hv_"
        for c in CELL_LABELS:
            variables[prefix + c.lower()] = (lambda cell, mm: lambda r: r.measure(mm)[cell])(c, m)
    out = {"group_counts": table.group_counts(), "variables": {}}
    for name, fn in variables.items():
        vals = _by_group(table, fn)
        block = {g: describe(v) for g, v in vals.items() if v.size}
        a, b = vals["CDR0"], vals["CDR0.5"]
        if a.size >= 2 and b.size >= 2:
            block["p_t"] = st.t_test(a, b, "welch").p_two_sided
            block["p_W"] = st.wilcoxon_rank_sum(a, b).p_two_sided
        out["variables"][name] = block
    return out, {}


def _fit_block(rows, spec, kind):
    fit = mixed.fit(rows, spec, kind)
    return {"terms": list(spec.terms), "cov": kind, "beta": fit.beta,
            "cov_params": fit.cov.as_dict(), "logLik": fit.logLik, "AIC": fit.aic, "BIC": fit.bic,
            "f_tests": [asdict(t) for t in mixed.f_tests(fit)]}


def analysis_repeated(table: MorphTable, req: AnalysisRequest):
    out, csvs = {}, {}
    for m in req.measures():
        rows = to_long(table, m)
        fits = mixed.fit_all(rows, mixed.ModelSpec.full("SDT", m))
        comp = mixed.model_comparison(fits)
        kind = comp["selected_by_aic"]
        out[m] = {
            "model_selection": comp,
            "models": {
                "diagnosis_time": _fit_block(rows, mixed.ModelSpec(("D", "T", "DT"), m), kind),
                "side_time": _fit_block(rows, mixed.ModelSpec(("S", "T", "ST"), m), kind),
                "full": _fit_block(rows, mixed.ModelSpec.full("SDT", m), kind),
            },
        }
        series = []
        for side in ("L", "R", "pooled"):
            for g in GROUPS:
                for t in ("B", "F"):
                    v = np.array([r.value for r in rows if r.group == g and r.timepoint == t
                                  and (side == "pooled" or r.side == side)])
                    if v.size:
                        series.append((g, side, t, float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else "", v.size))
        csvs[f"repeated_{m}_means.csv"] = csv_text(["group", "side", "timepoint", "mean", "sd", "n"], series)
    return out, csvs


def analysis_posthoc(table: MorphTable, req: AnalysisRequest):
    out = {}
    for m in req.measures():
        rows = []
        for c in CELL_LABELS:
            vals = _by_group(table, lambda r: r.measure(m)[c])
            a, b = vals["CDR0"], vals["CDR0.5"]
            rows.append(_row(f"{c}: CDR0 vs CDR0.5", st.t_test(a, b, "welch")))
            rows.append(_row(f"{c}: CDR0 vs CDR0.5", st.wilcoxon_rank_sum(a, b)))
            rows.append(_row(f"{c}: CDR0 vs CDR0.5", st.brown_forsythe(a, b)))
            for g, v in vals.items():
                label = f"{m}/{c}/{g}/normality"
                rows.append(_row(f"{c} {g}: normality",
                                 st.lilliefors(v, req.n_sim, derive_seed(req.seed, label))))
        for g in GROUPS:
            recs = table.by_group(g)
            for side in "LR":
                base = np.array([r.measure(m)[side + "B"] for r in recs])
                foll = np.array([r.measure(m)[side + "F"] for r in recs])
                rows.append(_row(f"{g} {side}: follow-up vs baseline", st.t_test(foll, base, "paired")))
                rows.append(_row(f"{g} {side}: follow-up vs baseline", st.wilcoxon_signed_rank(foll - base)))
            for t in "BF":
                left = np.array([r.measure(m)["L" + t] for r in recs])
                right = np.array([r.measure(m)["R" + t] for r in recs])
                rows.append(_row(f"{g} {t}: right vs left", st.t_test(right, left, "paired")))
                rows.append(_row(f"{g} {t}: right vs left", st.wilcoxon_signed_rank(right - left)))
        out[m] = rows
    return out, {}


def analysis_correlations(table: MorphTable, req: AnalysisRequest):
    rows = []
    for scope in ("pooled",) + GROUPS:
        recs = list(table) if scope == "pooled" else table.by_group(scope)
        for c in CELL_LABELS:
            d = [r.metric_distance[c] for r in recs]
            v = [r.hippo_volume[c] for r in recs]
            for method in ("pearson", "spearman", "kendall"):
                rows.append(_row(f"{scope} {c}: distance vs volume", st.correlation(d, v, method)))
    return {"distance_vs_volume": rows}, {}


def analysis_cdf(table: MorphTable, req: AnalysisRequest):
    out, csvs = {}, {}
    for m in req.measures():
        rows, series = [], []
        for c in CELL_LABELS:
            vals = _by_group(table, lambda r: r.measure(m)[c])
            a, b = vals["CDR0"], vals["CDR0.5"]
            label = f"{c}: CDR0 vs CDR0.5"
            rows.append(_row(label, st.ks_two_sample(a, b)))
            rows.append(_row(label, st.cramer_test(a, b, req.n_boot, derive_seed(req.seed, f"{m}/{c}/cramer"))))
            rows.append(_row(label, st.cvm_two_sample(a, b, req.n_perm, derive_seed(req.seed, f"{m}/{c}/cvm"))))
            for g, v in vals.items():
                xs = np.unique(v)
                for x, f in zip(xs, st.ecdf_at(v, xs)):
                    series.append((c, g, float(x), float(f)))
        out[m] = rows
        csvs[f"cdf_{m}.csv"] = csv_text(["cell", "group", "value", "ecdf"], series)
    return out, csvs


def analysis_pca(table: MorphTable, req: AnalysisRequest):
    out = {}
    for side, names in (("L", ["HLV", "HLM", "BV", "ICV"]), ("R", ["HRV", "HRM", "BV", "ICV"])):
        for scope in ("pooled",) + GROUPS:
            recs = list(table) if scope == "pooled" else table.by_group(scope)
            if len(recs) < 5:
                continue
            X = [[r.hippo_volume[side + "B"], r.metric_distance[side + "B"], r.brain_volume[0], r.icv[0]]
                 for r in recs]
            out[f"{side}/{scope}"] = {mode: pca(X, mode, names).as_dict()
                                      for mode in ("covariance", "correlation")}
    return out, {}


def _logistic_block(table: MorphTable, measure: str, req: AnalysisRequest) -> dict:
    rows = to_long(table, measure)
    sym = "d" if measure == "distance" else "v"
    data = {sym: [r.value for r in rows],
            "S": [1.0 if r.side == "R" else 0.0 for r in rows],
            "T": [1.0 if r.timepoint == "F" else 0.0 for r in rows]}
    y = np.array([1 if r.group == "CDR0.5" else 0 for r in rows])
    subjects = [r.subject_id for r in rows]
    sel = disc.stepwise_select(data, y, disc.candidate_terms([sym], ["S", "T"], req.max_power))
    model = sel.model
    probs = model.predict_data(data)
    _, truth_subj = disc.aggregate_by_subject(y, subjects)
    counts = table.group_counts()
    prior = counts["CDR0.5"] / len(table)
    rates = {}
    for name, p_o in (("p_0.5", 0.5), ("p_prior", prior)):
        lab = disc.classify(probs, p_o)
        _, lab_subj = disc.aggregate_by_subject(lab, subjects)
        rates[name] = {"p_o": p_o, "per_hippocampus": disc.confusion(lab, y).as_dict(),
                       "per_subject": disc.confusion(lab_subj, truth_subj).as_dict()}
    optimized = {}
    for cost in (disc.CostSpec("C1", 1, 1), disc.CostSpec("C1", 1, 3),
                 disc.CostSpec("C2", 0.5, 0.5), disc.CostSpec("C2", 0.3, 0.7)):
        res = disc.optimize_threshold(probs, y, cost)
        key = "{}({:g},{:g})".format(cost.kind, cost.a, cost.b)
        optimized[key] = {**cost.as_dict(), **res.as_dict()}
    cv = disc.loocv(model.terms, data, y, subjects, p_o=0.5)
    cv_subj = disc.loocv(model.terms, data, y, subjects, p_o=0.5, aggregate=True)
    return {"selected": model.as_dict(), "selection_path": sel.path, "notes": sel.warnings,
            "rates": rates, "optimized": optimized,
            "loocv": {"per_hippocampus": cv.as_dict(), "per_subject": cv_subj.as_dict()}}


def analysis_logistic(table: MorphTable, req: AnalysisRequest):
    return {m: _logistic_block(table, m, req) for m in req.measures()}, {}


def analysis_apc(table: MorphTable, req: AnalysisRequest):
    recs = apc_records(table)
    out = {"records": [{"subject_id": a.subject_id, "group": a.group, "side": a.side,
                        "v_apc": a.v_apc, "d_apc": a.d_apc} for a in recs]}
    stats_block = {}
    for m in req.measures():
        key = "v_apc" if m == "volume" else "d_apc"
        block = {}
        for side in "LR":
            vals = {g: np.array([getattr(a, key) for a in recs if a.group == g and a.side == side])
                    for g in GROUPS}
            block[side] = {g: describe(v) for g, v in vals.items() if v.size}
            if all(v.size >= 2 for v in vals.values()):
                block[side]["tests"] = [
                    _row(f"{side}: CDR0 vs CDR0.5", st.t_test(vals["CDR0"], vals["CDR0.5"], "welch")),
                    _row(f"{side}: CDR0 vs CDR0.5", st.wilcoxon_rank_sum(vals["CDR0"], vals["CDR0.5"])),
                ]
        counts = table.group_counts()
        if min(counts.values()) >= 2:
            rows = apc_long(table, m)
            fits = mixed.fit_all(rows, mixed.ModelSpec(("D", "S", "SD"), "apc"))
            comp = mixed.model_comparison(fits)
            block["model_selection"] = comp
            block["model"] = _fit_block(rows, mixed.ModelSpec(("D", "S", "SD"), "apc"),
                                        comp["selected_by_aic"])
        else:
            block["model"] = {"skipped": "each group needs at least two subjects"}
        stats_block[key] = block
    out["statistics"] = stats_block
    return out, {}


_RUNNERS = {
    "summary": analysis_summary, "repeated": analysis_repeated, "posthoc": analysis_posthoc,
    "correlations": analysis_correlations, "cdf": analysis_cdf, "pca": analysis_pca,
    "logistic": analysis_logistic, "apc": analysis_apc,
}


def run_analysis(table: MorphTable, req: AnalysisRequest,
                 table_text: Optional[str] = None) -> Tuple[dict, Dict[str, str]]:
    """Run the requested analysis (``full`` runs all, in a fixed order).

    Returns the report and a mapping of CSV file names to contents.  Any
    failure propagates, so no partial report is ever produced.
    """
    names = [a for a in ANALYSES if a != "full"] if req.analysis == "full" else [req.analysis]
    results, csvs = {}, {}
    for name in names:
        res, files = _RUNNERS[name](table, req)
        results[name] = res
        csvs.update(files)
    config = req.to_dict()
    config["bic_n"] = "observations"
    if table_text is not None:
        config["input_sha256"] = hashlib.sha256(table_text.encode()).hexdigest()
    report = {"report_version": REPORT_VERSION, "config": config,
              "n_subjects": len(table), "group_counts": table.group_counts(), "results": results}
    return report, csvs
