"""Subject table, long-format expansion and annual percentage change."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from .errors import DegenerateBaseline, EmptyTable, SchemaError

COLUMNS = (
    "subject_id", "group", "gender", "age_years", "education_years", "scan_interval_years",
    "bv_base", "bv_follow", "icv_base", "icv_follow",
    "hv_lb", "hv_lf", "hv_rb", "hv_rf",
    "d_lb", "d_lf", "d_rb", "d_rf",
)
GROUPS = ("CDR0", "CDR0.5")
GENDERS = ("M", "F")
# Fixed within-subject order; AR(1) lags are defined over it.
CELLS = (("L", "B"), ("L", "F"), ("R", "B"), ("R", "F"))
CELL_LABELS = tuple(s + t for s, t in CELLS)


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    group: str
    gender: str
    age_years: float
    education_years: float
    scan_interval_years: float
    brain_volume: Tuple[float, float]
    icv: Tuple[float, float]
    hippo_volume: Dict[str, float]
    metric_distance: Dict[str, float]

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ValueError(f"subject {self.subject_id}: unknown group {self.group!r}")
        if self.gender not in GENDERS:
            raise ValueError(f"subject {self.subject_id}: unknown gender {self.gender!r}")
        if not self.scan_interval_years > 0:
            raise ValueError(f"subject {self.subject_id}: scan interval must be positive")
        for name, vals in (("brain volume", self.brain_volume), ("icv", self.icv),
                           ("hippocampal volume", self.hippo_volume.values())):
            if not all(math.isfinite(v) and v > 0 for v in vals):
                raise ValueError(f"subject {self.subject_id}: {name} must be positive")
        if set(self.hippo_volume) != set(CELL_LABELS) or set(self.metric_distance) != set(CELL_LABELS):
            raise ValueError(f"subject {self.subject_id}: all four LB/LF/RB/RF cells are required")
        if not all(math.isfinite(d) and d >= 0 for d in self.metric_distance.values()):
            raise ValueError(f"subject {self.subject_id}: metric distances must be non-negative")

    def measure(self, measure: str) -> Dict[str, float]:
        if measure == "distance":
            return self.metric_distance
        if measure == "volume":
            return self.hippo_volume
        raise ValueError(f"unknown measure {measure!r}")

    def as_row(self) -> Dict[str, object]:
        row = {
            "subject_id": self.subject_id, "group": self.group, "gender": self.gender,
            "age_years": self.age_years, "education_years": self.education_years,
            "scan_interval_years": self.scan_interval_years,
            "bv_base": self.brain_volume[0], "bv_follow": self.brain_volume[1],
            "icv_base": self.icv[0], "icv_follow": self.icv[1],
        }
        for cell in CELL_LABELS:
            row["hv_" + cell.lower()] = self.hippo_volume[cell]
        for cell in CELL_LABELS:
            row["d_" + cell.lower()] = self.metric_distance[cell]
        return row


@dataclass(frozen=True)
class LongRow:
    subject_id: str
    group: str
    side: str
    timepoint: str
    value: float


@dataclass(frozen=True)
class ApcRecord:
    subject_id: str
    group: str
    side: str
    v_apc: float
    d_apc: float


class MorphTable(list):
    """List of SubjectRecord with group bookkeeping."""

    def group_counts(self) -> Dict[str, int]:
        return {g: sum(r.group == g for r in self) for g in GROUPS}

    def by_group(self, group: str) -> List[SubjectRecord]:
        return [r for r in self if r.group == group]


def _record_from_row(row: Dict[str, str], lineno: int) -> SubjectRecord:
    def num(col):
        try:
            return float(row[col])
        except (TypeError, ValueError):
            raise ValueError(f"row {lineno}: column {col} is not a number: {row[col]!r}") from None

    values = {c: num(c) for c in COLUMNS[3:]}
    for col in COLUMNS[5:14]:
        if not values[col] > 0:
            raise ValueError(f"row {lineno}: {col} must be positive, got {values[col]}")
    try:
        return SubjectRecord(
            subject_id=row["subject_id"].strip(),
            group=row["group"].strip(),
            gender=row["gender"].strip(),
            age_years=values["age_years"],
            education_years=values["education_years"],
            scan_interval_years=values["scan_interval_years"],
            brain_volume=(values["bv_base"], values["bv_follow"]),
            icv=(values["icv_base"], values["icv_follow"]),
            hippo_volume={c: values["hv_" + c.lower()] for c in CELL_LABELS},
            metric_distance={c: values["d_" + c.lower()] for c in CELL_LABELS},
        )
    except ValueError as exc:
        raise ValueError(f"row {lineno}: {exc}") from None


def parse_table(text: str) -> MorphTable:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in COLUMNS:
        if col not in header:
            raise SchemaError(col)
    table = MorphTable()
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not any((v or "").strip() for v in row.values()):
            continue
        if any(row.get(c) in (None, "") for c in COLUMNS):
            missing = [c for c in COLUMNS if row.get(c) in (None, "")]
            raise ValueError(f"row {lineno}: missing value for {', '.join(missing)}")
        rec = _record_from_row(row, lineno)
        if rec.subject_id in seen:
            raise ValueError(f"row {lineno}: duplicate subject_id {rec.subject_id!r}")
        seen.add(rec.subject_id)
        table.append(rec)
    if not table:
        raise EmptyTable("table has a header but no data rows")
    return table


def load_table(path: Union[str, Path]) -> MorphTable:
    return parse_table(Path(path).read_text())


def dump_table(table: Iterable[SubjectRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rec in table:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.as_row().items()})
    return buf.getvalue()


def to_long(table: Sequence[SubjectRecord], measure: str = "distance") -> List[LongRow]:
    """Four rows per subject in LB, LF, RB, RF order."""
    rows = []
    for rec in table:
        vals = rec.measure(measure)
        for side, time in CELLS:
            rows.append(LongRow(rec.subject_id, rec.group, side, time, vals[side + time]))
    return rows


def from_long(rows: Sequence[LongRow]) -> Dict[str, Dict[str, float]]:
    """Regroup long rows into {subject_id: {cell: value}}."""
    out: Dict[str, Dict[str, float]] = {}
    for r in rows:
        out.setdefault(r.subject_id, {})[r.side + r.timepoint] = r.value
    return out


def volume_apc(baseline: float, followup: float, interval: float) -> float:
    """Annual percentage volume loss; positive when the volume shrinks."""
    if not baseline > 0:
        raise DegenerateBaseline("baseline volume must be positive")
    if not interval > 0:
        raise ValueError("scan interval must be positive")
    return (baseline - followup) / (baseline * interval) * 100.0


def distance_apc(baseline: float, followup: float, interval: float) -> float:
    """Annual percentage change in metric distance, positive when it grows."""
    if baseline == 0:
        raise DegenerateBaseline("baseline metric distance is zero")
    if not interval > 0:
        raise ValueError("scan interval must be positive")
    return (followup - baseline) / (baseline * interval) * 100.0


def apc_volume(rec: SubjectRecord) -> Tuple[float, float]:
    hv, T = rec.hippo_volume, rec.scan_interval_years
    return volume_apc(hv["LB"], hv["LF"], T), volume_apc(hv["RB"], hv["RF"], T)


def apc_distance(rec: SubjectRecord) -> Tuple[float, float]:
    d, T = rec.metric_distance, rec.scan_interval_years
    return distance_apc(d["LB"], d["LF"], T), distance_apc(d["RB"], d["RF"], T)


def apc_records(table: Sequence[SubjectRecord]) -> List[ApcRecord]:
    out = []
    for rec in table:
        va = apc_volume(rec)
        da = apc_distance(rec)
        for i, side in enumerate("LR"):
            out.append(ApcRecord(rec.subject_id, rec.group, side, va[i], da[i]))
    return out


def apc_long(table: Sequence[SubjectRecord], measure: str) -> List[LongRow]:
    """Two rows per subject (L, R) holding the APC of ``measure``; the
    timepoint field is empty since APC already spans both scans."""
    rows = []
    for a in apc_records(table):
        val = a.v_apc if measure == "volume" else a.d_apc
        rows.append(LongRow(a.subject_id, a.group, a.side, "", val))
    return rows
