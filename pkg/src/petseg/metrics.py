"""Segmentation overlap, regional uptake fidelity, SUVR, ROC/AUC and classification."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .regions import NUM_REGIONS, RegionTable

log = logging.getLogger(__name__)

# Dice for a region absent from both maps.
UNDEFINED = float("nan")


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x))


def _same_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def is_undefined(value: float) -> bool:
    return isinstance(value, float) and math.isnan(value)


def dice(pred, truth, region_id: int) -> float:
    """2|P & T| / (|P| + |T|); :data:`UNDEFINED` when the region is in neither map."""
    p, t = _arr(pred), _arr(truth)
    _same_dims(p, t, "dice")
    pm, tm = p == region_id, t == region_id
    denom = int(pm.sum()) + int(tm.sum())
    if denom == 0:
        return UNDEFINED
    return 2.0 * int(np.logical_and(pm, tm).sum()) / denom


@dataclass
class DiceReport:
    per_region: dict[int, float]

    @property
    def macro(self) -> float:
        """Mean over regions with a defined score."""
        vals = [v for v in self.per_region.values() if not is_undefined(v)]
        return float(np.mean(vals)) if vals else UNDEFINED

    def mean_over(self, ids: Iterable[int]) -> float:
        vals = [self.per_region[i] for i in ids if not is_undefined(self.per_region[i])]
        return float(np.mean(vals)) if vals else UNDEFINED


def dice_report(pred, truth, n_regions: int = NUM_REGIONS) -> DiceReport:
    """Dice for every region id 1..n_regions in one pass over the voxels."""
    p, t = _arr(pred).ravel(), _arr(truth).ravel()
    _same_dims(p, t, "dice_report")
    n = n_regions + 1
    cp = np.bincount(p, minlength=n)[:n]
    ct = np.bincount(t, minlength=n)[:n]
    inter = np.bincount(p[p == t], minlength=n)[:n]
    out = {}
    for rid in range(1, n):
        denom = int(cp[rid] + ct[rid])
        out[rid] = UNDEFINED if denom == 0 else 2.0 * int(inter[rid]) / denom
    return DiceReport(out)


def mean_dice_reports(reports: Sequence[DiceReport]) -> DiceReport:
    """Per-region mean across subjects, skipping subjects where a region is undefined."""
    ids = reports[0].per_region.keys()
    merged = {}
    for rid in ids:
        vals = [r.per_region[rid] for r in reports if not is_undefined(r.per_region[rid])]
        merged[rid] = float(np.mean(vals)) if vals else UNDEFINED
    return DiceReport(merged)


def region_mean_suv(pet, labels, region_ids: Iterable[int]) -> float:
    v, lab = _arr(pet), _arr(labels)
    _same_dims(v, lab, "region_mean_suv")
    mask = np.isin(lab, list(region_ids))
    if not mask.any():
        raise ValueError(f"no voxels carry any of the region ids {sorted(region_ids)}")
    return float(v[mask].astype(np.float64).mean())


@dataclass
class NrmseResult:
    value: float
    warnings: list[str] = field(default_factory=list)


def nrmse_region(cohort: Sequence[tuple], region_ids: Iterable[int]) -> NrmseResult:
    """Cohort NRMSE of regional mean SUV.

    ``cohort`` holds ``(pet, pred_labels, true_labels)`` per subject. With
    ``m_pred`` and ``m_true`` the regional means under each map, the result
    is ``sqrt(mean((m_pred - m_true)^2)) / mean(m_true)``. A subject whose
    predicted region is empty contributes ``m_pred = 0`` and a warning.
    """
    ids = list(region_ids)
    if len(cohort) < 2:
        raise ValueError(f"nrmse_region needs at least 2 subjects, got {len(cohort)}")
    m_pred, m_true, notes = [], [], []
    for i, (pet, pred, truth) in enumerate(cohort):
        m_true.append(region_mean_suv(pet, truth, ids))
        try:
            m_pred.append(region_mean_suv(pet, pred, ids))
        except ValueError:
            m_pred.append(0.0)
            notes.append(f"subject {i}: predicted region {ids} is empty; using mean 0")
    for note in notes:
        log.warning(note)
    mp, mt = np.asarray(m_pred), np.asarray(m_true)
    rmse = math.sqrt(float(np.mean((mp - mt) ** 2)))
    return NrmseResult(rmse / float(np.mean(mt)), notes)


def suvr(pet, labels, region_table: RegionTable) -> float:
    """Target cortical mean SUV over the reference (cerebellar grey) mean."""
    try:
        ref = region_mean_suv(pet, labels, region_table.reference)
    except ValueError:
        raise ValueError("SUVR undefined: reference region is empty") from None
    return region_mean_suv(pet, labels, region_table.target_cortical) / ref


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def points(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def _check_binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-D sequences, got {s.shape}, {y.shape}")
    if y.all() or not y.any():
        raise ValueError("ROC needs both positive and negative cases")
    return s, y


def roc(scores: Sequence[float], labels: Sequence[bool]) -> RocCurve:
    """ROC over every distinct score (positive when ``score >= threshold``).

    Thresholds run from +inf down to -inf; equal scores form a single step,
    so the trapezoid area counts ties as one half.
    """
    s, y = _check_binary(scores, labels)
    distinct = np.unique(s)[::-1]
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    # counts of scores >= each threshold via sorted search
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, thresholds, side="left")
    fp = n_neg - np.searchsorted(neg_sorted, thresholds, side="left")
    tpr = tp / n_pos
    fpr = fp / n_neg
    return RocCurve(thresholds, fpr, tpr, trapezoid_auc(fpr, tpr))


@dataclass(frozen=True)
class Classification:
    accuracy: float
    sensitivity: float
    specificity: float


def classify(scores: Sequence[float], labels: Sequence[bool], threshold: float) -> Classification:
    s, y = _check_binary(scores, labels)
    pred = s >= threshold
    tp = int((pred & y).sum())
    tn = int((~pred & ~y).sum())
    return Classification((tp + tn) / len(y), tp / int(y.sum()), tn / int((~y).sum()))
