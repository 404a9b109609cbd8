"""Per-class and pooled classification metrics, reported as percentages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ClassificationMetrics", "confusion_matrix", "classification_metrics", "format_table"]


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.intp)
    y_pred = np.asarray(y_pred, dtype=np.intp)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class ClassificationMetrics:
    per_class_f1: list[float]
    per_class_accuracy: list[float]
    micro_f1: float
    macro_f1: float
    accuracy: float
    support: list[int] = field(default_factory=list)

    def to_dict(self, class_names: list[str] | None = None) -> dict:
        names = class_names or [str(i) for i in range(len(self.per_class_f1))]
        r = lambda x: round(x, 1)  # noqa: E731
        return {
            "per_class": {
                n: {"f1": r(f), "accuracy": r(a), "support": s}
                for n, f, a, s in zip(names, self.per_class_f1, self.per_class_accuracy, self.support)
            },
            "micro_f1": r(self.micro_f1),
            "macro_f1": r(self.macro_f1),
            "accuracy": r(self.accuracy),
        }


def classification_metrics(y_true, y_pred, n_classes: int) -> ClassificationMetrics:
    """One-vs-rest F1 per class, per-class accuracy (share of the class predicted
    correctly), pooled micro-F1, macro-F1 and total accuracy, all in percent."""
    cm = confusion_matrix(y_true, y_pred, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    f1 = [100.0 * _ratio(2 * t, 2 * t + p + n) for t, p, n in zip(tp, fp, fn)]
    acc_c = [100.0 * _ratio(t, t + n) for t, n in zip(tp, fn)]
    TP, FP, FN = tp.sum(), fp.sum(), fn.sum()
    micro = 100.0 * _ratio(2 * TP, 2 * TP + FP + FN)
    total = cm.sum()
    return ClassificationMetrics(
        per_class_f1=f1,
        per_class_accuracy=acc_c,
        micro_f1=micro,
        macro_f1=float(np.mean(f1)) if f1 else 0.0,
        accuracy=100.0 * _ratio(TP, total),
        support=[int(x) for x in cm.sum(axis=1)],
    )


def format_table(metrics: ClassificationMetrics, class_names: list[str]) -> str:
    header = ["", *class_names, "Total"]
    f1_row = ["F1", *(f"{x:.1f}" for x in metrics.per_class_f1), f"{metrics.micro_f1:.1f}"]
    acc_row = ["Acc", *(f"{x:.1f}" for x in metrics.per_class_accuracy), f"{metrics.accuracy:.1f}"]
    widths = [max(len(r[i]) for r in (header, f1_row, acc_row)) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in (header, f1_row, acc_row))
