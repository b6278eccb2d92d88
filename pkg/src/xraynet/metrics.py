"""Confusion matrices, COVID-vs-rest metrics, fold aggregation and reports.

Matrices are indexed ``[predicted][actual]`` in canonical class order, the
positive class of the binary collapse is class 0 (Covid19).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional, Sequence

import numpy as np

from .data import CLASS_NAMES, DISPLAY_NAMES, ClassLabel
from .errors import EmptyInput, EmptyMatrix, ParseError
from .weights import atomic_write_bytes

SCHEMA_VERSION = 1
# values at or above this are reported but flagged as saturated
NEAR_SATURATION = 0.99
METRIC_NAMES = ("accuracy_7", "accuracy_2", "sensitivity", "specificity")


class ConfusionMatrix:
    """Square count matrix, rows = predicted class, columns = actual class."""

    def __init__(self, counts):
        arr = np.asarray(counts)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise ValueError(f"confusion matrix must be square with >= 2 classes, got {arr.shape}")
        if not np.all(arr == np.round(arr)) or np.any(arr < 0):
            raise ValueError("confusion matrix entries must be non-negative integers")
        self.counts = arr.astype(np.int64)

    @classmethod
    def zeros(cls, num_classes: int = 7) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @classmethod
    def from_predictions(cls, predicted, actual, num_classes: int = 7) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(predicted, dtype=np.int64), np.asarray(actual, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def actual_counts(self) -> np.ndarray:
        """Samples per actual class (column sums)."""
        return self.counts.sum(axis=0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(total={self.total}, correct={self.correct})"

    def to_list(self) -> list:
        return self.counts.tolist()

    def to_text(self) -> str:
        names = DISPLAY_NAMES if self.num_classes == len(ClassLabel) else [str(i) for i in range(self.num_classes)]
        width = max(9, max(len(n) for n in names) + 1, len(str(int(self.counts.max()))) + 1)
        lines = [" " * 10 + "".join(f"{n:>{width}}" for n in names)]
        for name, row in zip(names, self.counts):
            lines.append(f"{name:<10}" + "".join(f"{v:>{width}}" for v in row))
        return "\n".join(lines)

    @classmethod
    def from_csv(cls, text: str, path=None) -> "ConfusionMatrix":
        """Parse a header-labelled 7x7 CSV (columns actual, rows predicted).

        An optional leading row-label column is allowed; labels may use the
        canonical names or the "Emphys." table alias.
        """
        rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
        if not rows:
            raise ParseError("empty matrix file", path, 1)
        aliases = {n: i for i, n in enumerate(CLASS_NAMES)}
        aliases.update({n: i for i, n in enumerate(DISPLAY_NAMES)})
        header = [c.strip() for c in rows[0]]
        offset = 1 if len(header) == len(ClassLabel) + 1 else 0
        cols = header[offset:]
        if [aliases.get(c) for c in cols] != list(range(len(ClassLabel))):
            raise ParseError(f"header must list the classes in canonical order, got {','.join(cols)}", path, 1)
        if len(rows) != len(ClassLabel) + 1:
            raise ParseError(f"expected {len(ClassLabel)} data rows, got {len(rows) - 1}", path, len(rows))
        counts = []
        for line, row in enumerate(rows[1:], start=2):
            cells = [c.strip() for c in row]
            if offset and aliases.get(cells[0]) != line - 2:
                raise ParseError(f"row label {cells[0]!r} out of canonical order", path, line)
            values = cells[offset:]
            if len(values) != len(ClassLabel):
                raise ParseError(f"expected {len(ClassLabel)} counts, got {len(values)}", path, line)
            try:
                ints = [int(v) for v in values]
            except ValueError:
                raise ParseError("counts must be integers", path, line) from None
            if min(ints) < 0:
                raise ParseError("counts must be non-negative", path, line)
            counts.append(ints)
        return cls(counts)


@dataclass(frozen=True)
class BinaryConfusion:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def collapse_binary(cm: ConfusionMatrix, positive: int = int(ClassLabel.Covid19)) -> BinaryConfusion:
    c = cm.counts
    tp = int(c[positive, positive])
    fp = int(c[positive, :].sum()) - tp
    fn = int(c[:, positive].sum()) - tp
    return BinaryConfusion(tp, fp, fn, cm.total - tp - fp - fn)


def accuracy_7(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyMatrix("accuracy of an empty confusion matrix")
    return cm.correct / cm.total


def accuracy_2(b: BinaryConfusion) -> float:
    if b.total == 0:
        raise EmptyMatrix("accuracy of an empty confusion matrix")
    return (b.tp + b.tn) / b.total


def sensitivity(b: BinaryConfusion) -> Optional[float]:
    d = b.tp + b.fn
    return b.tp / d if d else None


def specificity(b: BinaryConfusion) -> Optional[float]:
    d = b.tn + b.fp
    return b.tn / d if d else None


def format_percent(value: Optional[float]) -> str:
    """Percentage with two decimals, half-up, zero-padded to two integer digits ("04.62")."""
    if value is None:
        return "-"
    d = (Decimal(repr(float(value))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{d:05.2f}"


@dataclass
class MetricsBundle:
    accuracy_7: float
    accuracy_2: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    # for fold means: how many folds contributed to each metric
    defined_counts: Optional[dict] = None

    @classmethod
    def from_matrix(cls, cm: ConfusionMatrix) -> "MetricsBundle":
        b = collapse_binary(cm)
        return cls(accuracy_7(cm), accuracy_2(b), sensitivity(b), specificity(b))

    def values(self) -> dict:
        return {n: getattr(self, n) for n in METRIC_NAMES}

    def near_saturated(self) -> list[str]:
        return [n for n, v in self.values().items() if n in ("sensitivity", "specificity") and v is not None and v >= NEAR_SATURATION]

    def percentages(self) -> dict:
        return {n: format_percent(v) for n, v in self.values().items()}

    def to_dict(self) -> dict:
        d = self.values()
        if self.defined_counts is not None:
            d["defined_counts"] = dict(self.defined_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsBundle":
        return cls(*(d[n] for n in METRIC_NAMES), defined_counts=d.get("defined_counts"))


def metrics_bundle(cm: ConfusionMatrix) -> MetricsBundle:
    return MetricsBundle.from_matrix(cm)


def aggregate(bundles: Sequence[MetricsBundle]) -> MetricsBundle:
    """Unweighted mean per metric across folds; undefined entries are skipped and counted."""
    bundles = list(bundles)
    if not bundles:
        raise EmptyInput("no fold metrics to aggregate")
    means, counts = {}, {}
    for name in METRIC_NAMES:
        vals = [getattr(b, name) for b in bundles if getattr(b, name) is not None]
        counts[name] = len(vals)
        means[name] = sum(vals) / len(vals) if vals else None
    return MetricsBundle(**means, defined_counts=counts)


# reports


@dataclass
class FoldResult:
    fold: int
    confusion_matrix: ConfusionMatrix
    metrics: MetricsBundle
    wall_time: Optional[float] = field(default=None, compare=False)

    @property
    def test_size(self) -> int:
        return self.confusion_matrix.total


@dataclass
class CVReport:
    folds: list
    config: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.folds[0].confusion_matrix.num_classes if self.folds else len(ClassLabel)

    @property
    def pooled(self) -> Optional[ConfusionMatrix]:
        if not self.folds:
            return None
        total = ConfusionMatrix.zeros(self.num_classes)
        for f in self.folds:
            total = total + f.confusion_matrix
        return total

    @property
    def mean(self) -> Optional[MetricsBundle]:
        return aggregate([f.metrics for f in self.folds]) if self.folds else None

    @property
    def strategy(self) -> str:
        return str(self.config.get("strategy", "unknown"))

    def to_dict(self, include_timing: bool = False) -> dict:
        folds = []
        for f in self.folds:
            entry = {
                "fold": f.fold,
                "test_size": f.test_size,
                "confusion_matrix": f.confusion_matrix.to_list(),
                "metrics": f.metrics.to_dict(),
            }
            if include_timing:
                entry["wall_time"] = f.wall_time
            folds.append(entry)
        pooled = self.pooled
        mean = self.mean
        return {
            "schema": SCHEMA_VERSION,
            "config": self.config,
            "num_folds": len(self.folds),
            "empty": not self.folds,
            "folds": folds,
            "pooled": None
            if pooled is None
            else {"confusion_matrix": pooled.to_list(), "metrics": MetricsBundle.from_matrix(pooled).to_dict()},
            "mean": None if mean is None else mean.to_dict(),
            "near_saturated": [] if mean is None else mean.near_saturated(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CVReport":
        if d.get("schema") != SCHEMA_VERSION:
            raise ParseError(f"unsupported report schema {d.get('schema')!r}")
        folds = [
            FoldResult(
                f["fold"],
                ConfusionMatrix(f["confusion_matrix"]),
                MetricsBundle.from_dict(f["metrics"]),
                f.get("wall_time"),
            )
            for f in d["folds"]
        ]
        return cls(folds, d.get("config", {}))


def report_to_json(report: CVReport, include_timing: bool = False) -> str:
    return json.dumps(report.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> CVReport:
    try:
        return CVReport.from_dict(json.loads(text))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"not a valid report: {exc}") from None


CSV_COLUMNS = ("strategy", "accuracy2", "accuracy7", "sensitivity", "specificity")


def report_to_csv(reports) -> str:
    if isinstance(reports, CVReport):
        reports = [reports]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        m = r.mean
        if m is None:
            w.writerow([r.strategy, "-", "-", "-", "-"])
        else:
            p = m.percentages()
            w.writerow([r.strategy, p["accuracy_2"], p["accuracy_7"], p["sensitivity"], p["specificity"]])
    return buf.getvalue()


def report_to_table(report: CVReport) -> str:
    if not report.folds:
        return f"strategy: {report.strategy}\nno folds (empty report)\n"
    pooled = report.pooled
    lines = [f"strategy: {report.strategy}   folds: {len(report.folds)}", "", pooled.to_text(), ""]
    b = collapse_binary(pooled)
    lines.append(f"binary (Covid19 vs rest): tp={b.tp} fp={b.fp} fn={b.fn} tn={b.tn}")
    flagged = set(report.mean.near_saturated())
    for name, text in report.mean.percentages().items():
        mark = "  (near saturation)" if name in flagged else ""
        lines.append(f"{name:<12} {text}{mark}")
    return "\n".join(lines) + "\n"


def render_report(report: CVReport, fmt: str) -> str:
    if fmt == "json":
        return report_to_json(report)
    if fmt == "csv":
        return report_to_csv(report)
    if fmt in ("table", "text-table", "text"):
        return report_to_table(report)
    raise ValueError(f"unknown report format {fmt!r}")


def emit_report(report: CVReport, fmt: str = "json", path=None) -> str:
    """Render ``report``; when ``path`` is given, write it atomically too."""
    text = render_report(report, fmt)
    if path is not None:
        atomic_write_bytes(path, text.encode("utf-8"))
    return text


def metrics_line(cm: ConfusionMatrix) -> str:
    p = MetricsBundle.from_matrix(cm).percentages()
    return (
        f"accuracy7={p['accuracy_7']} accuracy2={p['accuracy_2']} "
        f"sensitivity={p['sensitivity']} specificity={p['specificity']}"
    )
