"""Confusion matrices, macro F1, per-class scores and misclassification reports."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import RESOURCES, TaskLabelSet
from .errors import DataFormatError, ShapeError

logger = logging.getLogger(__name__)

REPORT_TEMPLATE = (RESOURCES / "report_template.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[actual][predicted]``; rows and columns follow ``labels``."""

    counts: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got shape {counts.shape}")
        if len(self.labels) != counts.shape[0]:
            raise ShapeError(f"{len(self.labels)} labels for a {counts.shape[0]}-class matrix")
        if (counts < 0).any():
            raise ShapeError("confusion matrix counts must be non-negative")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @classmethod
    def from_counts(cls, counts, labels: Sequence[str] | None = None) -> ConfusionMatrix:
        counts = np.asarray(counts)
        if labels is None:
            labels = tuple(str(i) for i in range(counts.shape[0] if counts.ndim else 0))
        return cls(counts, tuple(labels))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.labels == other.labels
            and np.array_equal(self.counts, other.counts)
        )


def _index_of(value, labels: Sequence[str], label_set: TaskLabelSet | None) -> int:
    if isinstance(value, (int, np.integer)):
        if not 0 <= value < len(labels):
            raise ShapeError(f"class index {value} out of range for {len(labels)} classes")
        return int(value)
    if label_set is not None:
        return label_set.index(value)
    try:
        return labels.index(value)
    except ValueError:
        raise ShapeError(f"unknown label {value!r}") from None


def confusion(
    golds: Sequence, preds: Sequence, label_set: TaskLabelSet | Sequence[str]
) -> ConfusionMatrix:
    """Count (gold, predicted) pairs; labels may be names or class indices."""
    if len(golds) != len(preds):
        raise ShapeError(f"{len(golds)} gold labels but {len(preds)} predictions")
    if isinstance(label_set, TaskLabelSet):
        labels, lookup = tuple(label_set.labels), label_set
    else:
        labels, lookup = tuple(label_set), None
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for gold, pred in zip(golds, preds):
        counts[_index_of(gold, labels, lookup), _index_of(pred, labels, lookup)] += 1
    return ConfusionMatrix(counts, labels)


@dataclass(frozen=True)
class ClassScore:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def per_class_report(cm: ConfusionMatrix) -> list[ClassScore]:
    """Precision, recall and F1 per class; 0/0 counts as 0."""
    if cm.num_classes < 2:
        raise ShapeError("per-class scores need at least two classes")
    rows, cols = cm.row_sums, cm.col_sums
    scores = []
    for c, label in enumerate(cm.labels):
        tp = cm.counts[c, c]
        p = _ratio(tp, cols[c])
        r = _ratio(tp, rows[c])
        scores.append(ClassScore(label, p, r, _ratio(2 * p * r, p + r), int(rows[c])))
    return scores


def macro_f1(cm: ConfusionMatrix, exclude_zero_support: bool = False) -> float:
    """Unweighted mean of per-class F1; zero-support classes count unless excluded."""
    scores = per_class_report(cm)
    if exclude_zero_support:
        scores = [s for s in scores if s.support > 0]
        if not scores:
            return 0.0
    return float(np.mean([s.f1 for s in scores]))


def macro_f1_score(
    golds: Sequence, preds: Sequence, label_set: TaskLabelSet | Sequence[str]
) -> float:
    return macro_f1(confusion(golds, preds, label_set))


@dataclass(frozen=True)
class ErrorRate:
    actual: str
    predicted: str
    count: int
    support: int

    @property
    def rate(self) -> float:
        return self.count / self.support


@dataclass
class ErrorReport:
    """Off-diagonal rates sorted by decreasing rate; ``omitted`` lists zero-support rows."""

    rates: list[ErrorRate] = field(default_factory=list)
    omitted: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator[ErrorRate]:
        return iter(self.rates)

    def __len__(self) -> int:
        return len(self.rates)

    def rate(self, actual: str, predicted: str) -> float:
        for entry in self.rates:
            if entry.actual == actual and entry.predicted == predicted:
                return entry.rate
        raise KeyError((actual, predicted))


def error_report(cm: ConfusionMatrix) -> ErrorReport:
    report = ErrorReport()
    rows = cm.row_sums
    entries = []
    for g, actual in enumerate(cm.labels):
        if rows[g] == 0:
            report.omitted.append(actual)
            continue
        for p, predicted in enumerate(cm.labels):
            if p != g:
                entries.append((g, p, ErrorRate(actual, predicted, int(cm.counts[g, p]), int(rows[g]))))
    entries.sort(key=lambda e: (-e[2].rate, e[0], e[1]))
    report.rates = [e[2] for e in entries]
    if report.omitted:
        logger.warning("Error report omits classes without support: %s", ", ".join(report.omitted))
    return report


def read_matrix_csv(path: str | Path) -> ConfusionMatrix:
    """Square integer CSV; an optional first row of class names is used as labels."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = [row for row in csv.reader(f) if any(cell.strip() for cell in row)]
    except FileNotFoundError:
        raise DataFormatError(f"matrix file not found: {path}") from None
    if not rows:
        raise DataFormatError(f"{path}: empty matrix file")
    labels = None
    try:
        [int(cell) for cell in rows[0]]
    except ValueError:
        labels = [cell.strip() for cell in rows[0]]
        rows = rows[1:]
    try:
        counts = np.array([[int(cell) for cell in row] for row in rows], dtype=np.int64)
    except ValueError as e:
        raise DataFormatError(f"{path}: non-integer entry ({e})") from None
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
        raise DataFormatError(f"{path}: matrix must be square with at least two classes")
    if (counts < 0).any():
        raise DataFormatError(f"{path}: matrix entries must be non-negative")
    if labels is not None and len(labels) != counts.shape[0]:
        raise DataFormatError(f"{path}: {len(labels)} header labels for {counts.shape[0]} classes")
    return ConfusionMatrix.from_counts(counts, labels)


def write_matrix_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(cm.labels)
        writer.writerows(cm.counts.tolist())


def _format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(lines)


def format_errors(report: ErrorReport) -> str:
    rows = [
        (e.actual, e.predicted, f"{e.count}/{e.support}", f"{e.rate:.4f}") for e in report
    ]
    text = _format_table(("actual", "predicted", "count", "rate"), rows)
    if report.omitted:
        text += "\n(no support, omitted: " + ", ".join(report.omitted) + ")"
    return text


@dataclass
class EvalReport:
    task: str
    matrix: ConfusionMatrix
    exclude_zero_support: bool = False

    @property
    def macro_f1(self) -> float:
        return macro_f1(self.matrix, self.exclude_zero_support)

    @property
    def per_class(self) -> list[ClassScore]:
        return per_class_report(self.matrix)

    @property
    def errors(self) -> ErrorReport:
        return error_report(self.matrix)

    def render(self) -> str:
        per_class = _format_table(
            ("class", "precision", "recall", "f1", "support"),
            [
                (s.label, f"{s.precision:.4f}", f"{s.recall:.4f}", f"{s.f1:.4f}", str(s.support))
                for s in self.per_class
            ],
        )
        short = [str(i) for i in range(self.matrix.num_classes)]
        matrix = _format_table(
            ("", *short),
            [(f"{i} {label}", *map(str, row)) for i, (label, row) in
             enumerate(zip(self.matrix.labels, self.matrix.counts.tolist()))],
        )
        return REPORT_TEMPLATE.format(
            task=self.task,
            total=self.matrix.total,
            macro_f1=self.macro_f1,
            per_class=per_class,
            matrix=matrix,
            errors=format_errors(self.errors),
        )

    def write_csv(self, path: str | Path) -> None:
        """``class,precision,recall,f1,support`` rows plus a final ``macro`` row."""
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(("class", "precision", "recall", "f1", "support"))
            for s in self.per_class:
                writer.writerow((s.label, f"{s.precision:.6f}", f"{s.recall:.6f}", f"{s.f1:.6f}", s.support))
            writer.writerow(("macro", "", "", f"{self.macro_f1:.6f}", self.matrix.total))

    def save(self, path: str | Path) -> list[Path]:
        """Text report at ``path``, CSV scores and the matrix next to it."""
        path = Path(path)
        path.write_text(self.render(), encoding="utf-8")
        scores = path.with_suffix(".csv")
        matrix = path.with_suffix(".matrix.csv")
        self.write_csv(scores)
        write_matrix_csv(self.matrix, matrix)
        return [path, scores, matrix]
