"""Seeded synthetic subject tables with realistic magnitudes.

Used by the tests and handy for trying the CLI without clinical data.
"""
from __future__ import annotations

import numpy as np

from .longitudinal import CELL_LABELS, MorphTable, SubjectRecord


def synthetic_table(n_cdr0: int = 26, n_cdr05: int = 18, seed: int = 0,
                    effect: float = 1.0) -> MorphTable:
    """CDR0.5 subjects get smaller hippocampi, larger distances and faster
    change; ``effect`` scales the group differences (0 gives none)."""
    rng = np.random.default_rng(seed)
    table = MorphTable()
    for i in range(n_cdr0 + n_cdr05):
        group = "CDR0" if i < n_cdr0 else "CDR0.5"
        sick = effect * (group == "CDR0.5")
        interval = float(np.round(rng.uniform(1.5, 2.5), 2))
        icv = rng.normal(1450e3, 120e3)
        bv = icv * rng.normal(0.72, 0.03)
        subject = rng.normal(0, 1)
        vol, dist = {}, {}
        for cell in CELL_LABELS:
            side_shift = 250.0 if cell[0] == "R" else 0.0
            base = 2300.0 + side_shift - 300.0 * sick + 250.0 * subject + rng.normal(0, 120)
            d_base = 3.4 + 0.5 * sick - 0.2 * subject + rng.normal(0, 0.3)
            if cell[1] == "B":
                vol[cell], dist[cell] = base, d_base
            else:
                rate = 0.015 + 0.015 * sick
                vol[cell] = vol[cell[0] + "B"] * (1 - rate * interval) + rng.normal(0, 40)
                dist[cell] = dist[cell[0] + "B"] * (1 + 0.02 * interval * (1 + sick)) + rng.normal(0, 0.1)
        table.append(SubjectRecord(
            subject_id=f"S{i + 1:03d}", group=group, gender="F" if rng.random() < 0.6 else "M",
            age_years=float(np.round(rng.normal(74 + 2 * sick, 6), 1)),
            education_years=float(rng.integers(8, 20)),
            scan_interval_years=interval,
            brain_volume=(float(bv), float(bv * (1 - 0.005 * interval))),
            icv=(float(icv), float(icv)),
            hippo_volume={k: float(max(v, 500.0)) for k, v in vol.items()},
            metric_distance={k: float(max(v, 0.1)) for k, v in dist.items()},
        ))
    return table
