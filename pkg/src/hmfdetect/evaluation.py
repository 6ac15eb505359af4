"""ROC curves, AUC, confusion matrices and the block-family comparison."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UndefinedCurveError


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # descending; the first is +inf

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedCurveError("ROC needs at least one positive and one negative label")
    return s, y


def roc_curve(scores, labels):
    """Staircase ROC; each group of tied scores is a single step."""
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, s.size - 1)
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    p, n = tps[-1], fps[-1]
    return RocCurve(
        fpr=np.concatenate([[0.0], fps / n]),
        tpr=np.concatenate([[0.0], tps / p]),
        thresholds=np.concatenate([[np.inf], s[ends]]),
    )


def auc(curve):
    """Trapezoidal area under a ROC curve."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def auc_score(scores, labels):
    return auc(roc_curve(scores, labels))


def auc_pairwise(scores, labels):
    """P(score_pos > score_neg) + P(tie)/2 by brute force over all pairs."""
    s, y = _validate(scores, labels)
    pos = s[y == 1][:, None]
    neg = s[y == 0][None, :]
    wins = np.count_nonzero(pos > neg)
    ties = np.count_nonzero(pos == neg)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def confusion(scores, labels, threshold=0.5):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    pred = s >= threshold
    return ConfusionMatrix(
        tp=int(np.count_nonzero(pred & y)),
        fp=int(np.count_nonzero(pred & ~y)),
        fn=int(np.count_nonzero(~pred & y)),
        tn=int(np.count_nonzero(~pred & ~y)),
        threshold=float(threshold),
    )


# ---------------------------------------------------------------------------
# comparison


@dataclass(frozen=True)
class ReportRow:
    family: str
    auc: float
    confusion: ConfusionMatrix
    curve: RocCurve
    curve_path: str = ""


@dataclass(frozen=True)
class ComparisonReport:
    rows: tuple
    threshold: float


def compare_models(x_test, y_test, models, threshold=0.5, out_dir=None):
    """Score every model on the same test inputs.

    ``models`` maps a family/name to a trained model.  With ``out_dir`` the
    per-model ROC CSVs and ``comparison.csv`` are written there.  No ordering
    between models is implied.
    """
    from .model import score_array

    rows = []
    for name, model in models.items():
        scores = score_array(model, x_test)
        curve = roc_curve(scores, y_test)
        path = ""
        if out_dir is not None:
            path = f"roc-{name}.csv"
            write_roc_csv(Path(out_dir) / path, curve)
        rows.append(ReportRow(name, auc(curve), confusion(scores, y_test, threshold), curve, path))
    report = ComparisonReport(tuple(rows), float(threshold))
    if out_dir is not None:
        (Path(out_dir) / "comparison.csv").write_text(format_report_csv(report), encoding="utf-8")
    return report


def format_roc_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fpr", "tpr", "threshold"])
    for f, t, th in curve.points:
        w.writerow([repr(f), repr(t), repr(th)])
    return buf.getvalue()


def write_roc_csv(path, curve):
    Path(path).write_text(format_roc_csv(curve), encoding="utf-8")


def read_roc_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return RocCurve(
        np.array([float(r["fpr"]) for r in rows]),
        np.array([float(r["tpr"]) for r in rows]),
        np.array([float(r["threshold"]) for r in rows]),
    )


def format_report_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["family", "auc", "tp", "fp", "fn", "tn", "threshold"])
    for r in report.rows:
        c = r.confusion
        w.writerow([r.family, repr(r.auc), c.tp, c.fp, c.fn, c.tn, repr(c.threshold)])
    return buf.getvalue()
