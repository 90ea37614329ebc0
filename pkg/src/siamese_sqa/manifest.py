"""Reading corpus/evaluation manifests.

Columns: ``ref_path``, ``deg_path``, ``pseudo_mos`` or ``mos``, and
optionally ``ci95``, ``votes`` (semicolon-separated ratings), ``group``,
``spec`` and ``mos_predicted`` (precomputed model output).  Relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats


@dataclass
class ManifestRow:
    ref_path: Path | None
    deg_path: Path
    mos: float
    ci95: float | None = None
    group: str = "all"
    spec: str | None = None
    predicted: float | None = None


def ci95_from_votes(votes) -> float:
    """Half-width of the 95% t-interval of the mean rating."""
    votes = np.asarray(votes, dtype=float)
    if votes.size < 2:
        return 0.0
    return float(stats.t.ppf(0.975, votes.size - 1) * votes.std(ddof=1) / np.sqrt(votes.size))


def read_manifest(path) -> list:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            mos = rec.get("mos") or rec.get("pseudo_mos")
            if mos in (None, ""):
                raise ValueError(f"{path}: row without mos/pseudo_mos column")
            ci = rec.get("ci95")
            if rec.get("votes"):
                ci = ci95_from_votes([float(v) for v in rec["votes"].split(";")])
            ref = rec.get("ref_path") or rec.get("ref")
            deg = rec.get("deg_path") or rec.get("deg")
            rows.append(ManifestRow(
                ref_path=base / ref if ref else None,
                deg_path=base / deg,
                mos=float(mos),
                ci95=float(ci) if ci not in (None, "") else None,
                group=rec.get("group") or "all",
                spec=rec.get("spec"),
                predicted=float(rec["mos_predicted"]) if rec.get("mos_predicted") else None,
            ))
    return rows
