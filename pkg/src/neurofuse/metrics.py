"""Confusion-matrix accounting and per-class precision/recall/F1.

Multiclass accuracy is trace/total; per-class metrics come from the
one-vs-rest reduction with the standard definitions (precision uses fp,
recall uses fn). Any 0/0 ratio is rendered as 0 and flagged undefined so
the report schema never changes shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import LABELS, stable_json

CONDITIONS = ("T1w", "FA", "MD", "T1w+DTI")


class MetricsError(Exception):
    pass


class EmptyMatrix(MetricsError):
    pass


@dataclass
class ConfusionMatrix:
    """3x3 counts; rows = true label, columns = predicted, order NC/MCI/AD."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (3, 3):
            raise ValueError(f"counts must be 3x3, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(c == np.round(c)):
                raise ValueError("counts must be integers")
            c = c.astype(np.int64)
        if (c < 0).any():
            raise ValueError("counts must be nonnegative")
        self.counts = c.astype(np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(pairs) -> ConfusionMatrix:
    """Count (true, predicted) label pairs into a ConfusionMatrix."""
    counts = np.zeros((3, 3), dtype=np.int64)
    for true, pred in pairs:
        if true not in LABELS or pred not in LABELS:
            raise ValueError(f"labels must be in {LABELS}, got ({true!r}, {pred!r})")
        counts[LABELS.index(true), LABELS.index(pred)] += 1
    return ConfusionMatrix(counts)


def one_vs_rest(cm: ConfusionMatrix, label: str):
    """(tp, fp, fn, tn) for one class against the rest."""
    c = LABELS.index(label)
    tp = int(cm.counts[c, c])
    fp = int(cm.counts[:, c].sum()) - tp
    fn = int(cm.counts[c, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return tp, fp, fn, tn


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    undefined: tuple = ()  # names of metrics whose ratio was 0/0

    def __post_init__(self):
        self.undefined = tuple(sorted(self.undefined))


@dataclass
class MetricsReport:
    accuracy: float
    per_class: dict  # label -> ClassMetrics
    fold_id: int | None = None
    condition: str | None = None

    def __post_init__(self):
        if self.condition is not None and self.condition not in CONDITIONS:
            raise ValueError(f"condition {self.condition!r} not in {CONDITIONS}")

    def to_json(self) -> str:
        d = {
            "accuracy": self.accuracy,
            "per_class": {
                lab: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "undefined": sorted(m.undefined),
                }
                for lab, m in self.per_class.items()
            },
            "fold_id": self.fold_id,
            "condition": self.condition,
        }
        return stable_json(d)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        per_class = {
            lab: ClassMetrics(
                m["precision"], m["recall"], m["f1"], tuple(sorted(m.get("undefined", [])))
            )
            for lab, m in d["per_class"].items()
        }
        return cls(d["accuracy"], per_class, d.get("fold_id"), d.get("condition"))


def _ratio(num: int, den: int, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def compute_report(cm: ConfusionMatrix, fold_id=None, condition=None) -> MetricsReport:
    """Accuracy plus per-class precision/recall/f1 with 0/0 flagging.

    f1 is the harmonic mean of the rendered precision and recall values;
    it is flagged undefined exactly when precision + recall == 0.
    """
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    accuracy = float(np.trace(cm.counts)) / cm.total
    per_class = {}
    for lab in LABELS:
        tp, fp, fn, _ = one_vs_rest(cm, lab)
        undefined = []
        precision = _ratio(tp, tp + fp, "precision", undefined)
        recall = _ratio(tp, tp + fn, "recall", undefined)
        if precision + recall == 0.0:
            undefined.append("f1")
            f1 = 0.0
        else:
            f1 = 2.0 * precision * recall / (precision + recall)
        per_class[lab] = ClassMetrics(precision, recall, f1, tuple(undefined))
    return MetricsReport(accuracy, per_class, fold_id, condition)


def average_reports(reports) -> MetricsReport:
    """Mean over folds of every rendered value.

    A metric is flagged undefined in the average when any contributing fold
    flagged it (its 0 stands in for a 0/0 there). fold_id becomes None; the
    condition must agree across folds.
    """
    reports = list(reports)
    if not reports:
        raise EmptyMatrix("no reports to average")
    conditions = {r.condition for r in reports}
    if len(conditions) != 1:
        raise ValueError(f"cannot average across conditions {sorted(map(str, conditions))}")
    accuracy = sum(r.accuracy for r in reports) / len(reports)
    per_class = {}
    for lab in LABELS:
        ms = [r.per_class[lab] for r in reports]
        undefined = sorted({name for m in ms for name in m.undefined})
        per_class[lab] = ClassMetrics(
            sum(m.precision for m in ms) / len(ms),
            sum(m.recall for m in ms) / len(ms),
            sum(m.f1 for m in ms) / len(ms),
            tuple(undefined),
        )
    return MetricsReport(accuracy, per_class, None, reports[0].condition)


#### text rendering ####


def _cell(report, row_fn) -> str:
    if report is None:
        return "-"
    value, flagged = row_fn(report)
    return f"{value:.3f}*" if flagged else f"{value:.3f}"


def render_table(reports_by_condition: dict) -> str:
    """Aligned text table: metric rows by modality-condition columns.

    Rows are Accuracy then Precision/Recall/F1 per class; columns follow
    CONDITIONS order. Missing conditions render as '-'; starred values mark
    0/0 ratios rendered as 0.
    """
    rows = [("Accuracy", lambda r: (r.accuracy, False))]
    for lab in LABELS:
        for metric in ("precision", "recall", "f1"):
            title = {"precision": "Precision", "recall": "Recall", "f1": "F1"}[metric]

            def row_fn(r, lab=lab, metric=metric):
                m = r.per_class[lab]
                return getattr(m, metric), metric in m.undefined

            rows.append((f"{title} ({lab})", row_fn))
    header = ["Metric"] + list(CONDITIONS)
    lines = [[name] + [_cell(reports_by_condition.get(c), fn) for c in CONDITIONS] for name, fn in rows]
    widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [fmt(header), fmt(["-" * w for w in widths])]
    out.extend(fmt(line) for line in lines)
    if any("*" in cell for line in lines for cell in line):
        out.append("")
        out.append("* ratio was 0/0; rendered as 0")
    return "\n".join(out) + "\n"
