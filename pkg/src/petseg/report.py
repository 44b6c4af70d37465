"""CSV and SVG emission for evaluation reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .metrics import RocCurve
from .regions import TARGET_COMPOSITES, RegionTable
from .training import EvaluationReport


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x))


def dice_csv(report: EvaluationReport, table: RegionTable) -> str:
    rows = [("region_id", "region", "dice")]
    rows += [(rid, table[rid], _num(v)) for rid, v in sorted(report.dice.per_region.items())]
    return _csv(rows)


def nrmse_csv(report: EvaluationReport) -> str:
    return _csv([("composite", "nrmse")] + [(n, _num(report.nrmse[n])) for n in TARGET_COMPOSITES])


def roc_csv(curve: RocCurve) -> str:
    return _csv([("threshold", "fpr", "tpr")] + [tuple(_num(v) for v in p) for p in curve.points()])


def summary_csv(report: EvaluationReport) -> str:
    c = report.classification
    rows = [
        ("metric", "value"),
        ("auc", _num(report.roc_pred.auc)),
        ("accuracy", _num(c.accuracy)),
        ("sensitivity", _num(c.sensitivity)),
        ("specificity", _num(c.specificity)),
        ("threshold", _num(report.threshold)),
        ("auc_true_labels", _num(report.roc_true.auc)),
        ("macro_dice", _num(report.dice.macro)),
        ("n_subjects", len(report.subject_ids)),
    ]
    rows += [(f"nrmse_{n}", _num(report.nrmse[n])) for n in TARGET_COMPOSITES]
    return _csv(rows)


def subjects_csv(report: EvaluationReport) -> str:
    rows = [("id", "amyloid_positive", "suvr_pred", "suvr_true")]
    rows += [
        (i, int(flag), _num(p), _num(t))
        for i, flag, p, t in zip(report.subject_ids, report.amyloid_positive, report.suvr_pred, report.suvr_true)
    ]
    return _csv(rows)


def roc_svg(curve: RocCurve, size: int = 400, margin: int = 40) -> str:
    """Static ROC plot: unit square axes, chance diagonal, curve polyline."""
    span = size - 2 * margin

    def xy(fpr: float, tpr: float) -> str:
        return f"{margin + fpr * span:.2f},{size - margin - tpr * span:.2f}"

    pts = " ".join(xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
    lo, hi = margin, size - margin
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'<rect width="{size}" height="{size}" fill="white"/>\n'
        f'<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{hi}" stroke="black"/>\n'
        f'<line x1="{lo}" y1="{hi}" x2="{lo}" y2="{lo}" stroke="black"/>\n'
        f'<line x1="{lo}" y1="{hi}" x2="{hi}" y2="{lo}" stroke="gray" stroke-dasharray="4 4"/>\n'
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>\n'
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">True positive rate</text>\n'
        f'<text x="{lo}" y="{hi + 14}" font-size="10">0</text>\n'
        f'<text x="{hi}" y="{hi + 14}" font-size="10">1</text>\n'
        f'<text x="{lo - 12}" y="{lo + 4}" font-size="10">1</text>\n'
        f'<polyline points="{pts}" fill="none" stroke="crimson" stroke-width="2"/>\n'
        f'<text x="{hi - 4}" y="{hi - 8}" text-anchor="end" font-size="12">AUC = {curve.auc:.3f}</text>\n'
        "</svg>\n"
    )


def write_report(report: EvaluationReport, table: RegionTable, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "dice.csv": dice_csv(report, table),
        "nrmse.csv": nrmse_csv(report),
        "roc.csv": roc_csv(report.roc_pred),
        "summary.csv": summary_csv(report),
        "subjects.csv": subjects_csv(report),
        "roc.svg": roc_svg(report.roc_pred),
    }
    paths = {}
    for name, text in files.items():
        paths[name] = out / name
        paths[name].write_text(text)
    return paths

