"""Challenge segmentation metrics, lesion-wise matching and the overall score.

Empty-set conventions:
  * pred and gt both empty -> dsc = ppv = tpr = ltpr = 1, lfpr = vd = 0
  * pred empty, gt nonempty -> ppv = 1, lfpr = 0, dsc = tpr = ltpr = 0
  * gt empty, pred nonempty -> tpr = ltpr = 1 (nothing to miss), vd = NaN
A NaN volume difference marks an undefined value and is left out of means.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DegenerateError, ShapeError

METRIC_NAMES = ("dsc", "ppv", "tpr", "lfpr", "ltpr", "vd", "corr", "sc")
SC_WEIGHTS = {"dsc": 1 / 8, "ppv": 1 / 8, "lfpr": 1 / 4, "ltpr": 1 / 4, "corr": 1 / 4}


def _binary(mask) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool:
        arr = arr > 0.5
    return arr


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} and ground truth shape {g.shape} differ")
    return p, g


def voxel_metrics(pred, gt) -> tuple[float, float, float, float]:
    """(dsc, ppv, tpr, vd) from voxel counts."""
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    n_pred, n_gt = tp + fp, tp + fn
    dsc = 1.0 if n_pred + n_gt == 0 else 2.0 * tp / (2 * tp + fp + fn)
    ppv = 1.0 if n_pred == 0 else tp / n_pred
    tpr = 1.0 if n_gt == 0 else tp / n_gt
    if n_gt == 0:
        vd = 0.0 if n_pred == 0 else math.nan
    else:
        vd = abs(n_pred - n_gt) / n_gt
    return dsc, ppv, tpr, vd


def connected_components(mask, connectivity: str | None = None) -> tuple[np.ndarray, int]:
    """Label foreground components; ``2d_8`` for 2-D masks, ``3d_26`` for 3-D."""
    m = _binary(mask)
    if connectivity is None:
        connectivity = {2: "2d_8", 3: "3d_26"}.get(m.ndim)
    expected = {"2d_8": 2, "3d_26": 3}
    if connectivity not in expected:
        raise ConfigError(f"unknown connectivity {connectivity!r}")
    if m.ndim != expected[connectivity]:
        raise ConfigError(f"connectivity {connectivity} does not match a {m.ndim}-D mask")
    structure = np.ones((3,) * m.ndim, dtype=bool)
    labels, n = ndimage.label(m, structure=structure)
    return labels, int(n)


def lesion_metrics(pred, gt, connectivity: str | None = None, min_overlap: int = 1) -> tuple[float, float]:
    """(ltpr, lfpr) from connected-component overlap of at least ``min_overlap`` voxels."""
    p, g = _pair(pred, gt)
    gt_labels, n_gt = connected_components(g, connectivity)
    pred_labels, n_pred = connected_components(p, connectivity)

    if n_gt == 0:
        ltpr = 1.0
    else:
        hits = np.bincount(gt_labels[p], minlength=n_gt + 1)[1:]
        ltpr = float(np.count_nonzero(hits >= min_overlap)) / n_gt
    if n_pred == 0:
        lfpr = 0.0
    else:
        hits = np.bincount(pred_labels[g], minlength=n_pred + 1)[1:]
        lfpr = float(np.count_nonzero(hits < min_overlap)) / n_pred
    return ltpr, lfpr


def volume_correlation(pred_volumes: Sequence[float], gt_volumes: Sequence[float]) -> float:
    """Pearson correlation of predicted vs true lesion volumes across subjects."""
    a = np.asarray(pred_volumes, dtype=np.float64)
    b = np.asarray(gt_volumes, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"volume sequences must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise DegenerateError("volume correlation needs at least two subjects")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise DegenerateError("volume correlation undefined for zero-variance volumes")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


@dataclass
class SubjectMetrics:
    subject_id: str
    dsc: float
    ppv: float
    tpr: float
    lfpr: float
    ltpr: float
    vd: float
    pred_volume: int
    gt_volume: int


@dataclass
class MetricsReport:
    dsc: float
    ppv: float
    tpr: float
    lfpr: float
    ltpr: float
    vd: float
    corr: float
    sc: float = math.nan
    subjects: list[SubjectMetrics] = field(default_factory=list, repr=False)

    def row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def overall_score(r) -> float:
    """SC = DSC/8 + PPV/8 + (1 - LFPR)/4 + LTPR/4 + Corr/4."""
    values = r if isinstance(r, dict) else {k: getattr(r, k, None) for k in SC_WEIGHTS}
    missing = [k for k in SC_WEIGHTS if values.get(k) is None or math.isnan(values[k])]
    if missing:
        raise ConfigError(f"overall score needs {missing}")
    return (values["dsc"] / 8 + values["ppv"] / 8 + (1.0 - values["lfpr"]) / 4
            + values["ltpr"] / 4 + values["corr"] / 4)


def subject_metrics(subject_id: str, pred, gt, connectivity: str | None = None,
                    min_overlap: int = 1) -> SubjectMetrics:
    p, g = _pair(pred, gt)
    dsc, ppv, tpr, vd = voxel_metrics(p, g)
    ltpr, lfpr = lesion_metrics(p, g, connectivity, min_overlap)
    return SubjectMetrics(subject_id, dsc, ppv, tpr, lfpr, ltpr, vd,
                          int(np.count_nonzero(p)), int(np.count_nonzero(g)))


def aggregate(subjects: list[SubjectMetrics]) -> MetricsReport:
    """Subject means of the rate metrics, cross-subject volume correlation and SC.

    A degenerate correlation is reported as NaN and SC is then computed with
    corr = 0, with a warning.
    """
    if not subjects:
        raise DegenerateError("no subjects to aggregate")

    def mean(name):
        vals = [getattr(s, name) for s in subjects if not math.isnan(getattr(s, name))]
        if len(vals) < len(subjects):
            warnings.warn(f"{len(subjects) - len(vals)} subject(s) with undefined {name} left out of the mean",
                          RuntimeWarning, stacklevel=3)
        return float(np.mean(vals)) if vals else math.nan

    try:
        corr = volume_correlation([s.pred_volume for s in subjects], [s.gt_volume for s in subjects])
    except DegenerateError as exc:
        warnings.warn(f"volume correlation: {exc}; scored as 0 in SC", RuntimeWarning, stacklevel=2)
        corr = math.nan
    report = MetricsReport(mean("dsc"), mean("ppv"), mean("tpr"), mean("lfpr"), mean("ltpr"),
                           mean("vd"), corr, subjects=subjects)
    values = report.row()
    if math.isnan(corr):
        values["corr"] = 0.0
    report.sc = overall_score(values)
    return report


# ---------------------------------------------------------------- report files

CSV_HEADER = ["code", *METRIC_NAMES]


def write_report_csv(path, rows: dict[str, MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for code, rep in rows.items():
            w.writerow([code] + [repr(float(getattr(rep, k))) for k in METRIC_NAMES])


def read_report_csv(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected report header {reader.fieldnames}")
        return {row["code"]: {k: float(row[k]) for k in METRIC_NAMES} for row in reader}


def format_table(rows: dict[str, dict[str, float]] | dict[str, MetricsReport]) -> str:
    lines = ["code  " + "".join(f"{k:>9}" for k in METRIC_NAMES)]
    for code, rep in rows.items():
        vals = rep if isinstance(rep, dict) else rep.row()
        lines.append(f"{code:<6}" + "".join(f"{vals[k]:>9.4f}" for k in METRIC_NAMES))
    return "\n".join(lines)
