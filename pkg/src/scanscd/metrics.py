"""SCD accuracy metrics and from-to change analysis.

The confusion matrix is indexed ``q[i, j]`` = number of pixels predicted as
class ``i`` whose ground-truth class is ``j``; index 0 is no-change.  Both
epochs of a pair are pooled into one matrix, so every pixel counts twice.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError


@dataclass(frozen=True)
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(num_classes, np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @classmethod
    def from_counts(cls, counts) -> "ConfusionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ValueError(f"confusion counts must be square (N+1)x(N+1), got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        return cls(counts.shape[0] - 1, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError(f"cannot merge matrices for N={self.num_classes} and N={other.num_classes}")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def confusion_counts(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    k = num_classes + 1
    pred = pred.astype(np.int64).ravel()
    gt = gt.astype(np.int64).ravel()
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() > num_classes):
            raise DataError(f"{name} holds class indices outside [0, {num_classes}]")
    return np.bincount(pred * k + gt, minlength=k * k).reshape(k, k)


def accumulate_confusion(pred1, pred2, gt1, gt2, running: ConfusionMatrix) -> ConfusionMatrix:
    """Add both epochs of one prediction pair to ``running``."""
    shapes = {np.shape(a) for a in (pred1, pred2, gt1, gt2)}
    if len(shapes) != 1:
        raise DataError(f"map shapes differ: {sorted(shapes)}")
    n = running.num_classes
    counts = confusion_counts(pred1, gt1, n) + confusion_counts(pred2, gt2, n)
    return ConfusionMatrix(n, running.counts + counts)


def _ratio(num: float, den: float, name: str, flags: list[str] | None) -> float:
    if den == 0:
        if flags is not None:
            flags.append(f"{name}: 0/0 defined as 0")
        return 0.0
    return num / den


def _counts(q) -> np.ndarray:
    return q.counts if isinstance(q, ConfusionMatrix) else np.asarray(q, dtype=np.int64)


def _require_pixels(c: np.ndarray) -> None:
    if c.sum() == 0:
        raise NumericError("no pixels evaluated")


def overall_accuracy(q) -> float:
    c = _counts(q)
    _require_pixels(c)
    return float(np.trace(c)) / float(c.sum())


def miou(q, flags: list[str] | None = None) -> tuple[float, float, float]:
    """Return ``(iou_nc, iou_c, miou)`` of the change/no-change split."""
    c = _counts(q)
    _require_pixels(c)
    total = float(c.sum())
    q00 = float(c[0, 0])
    iou_nc = _ratio(q00, float(c[:, 0].sum() + c[0, :].sum()) - q00, "iou_nc", flags)
    iou_c = _ratio(float(c[1:, 1:].sum()), total - q00, "iou_c", flags)
    return iou_nc, iou_c, (iou_nc + iou_c) / 2


def _agreement_terms(c: np.ndarray) -> tuple[float, float] | None:
    """``(rho, eta)`` of the matrix with ``q00`` zeroed, or None when it is empty."""
    hat = c.astype(np.float64)
    hat[0, 0] = 0.0
    total = float(hat.sum())
    if total == 0:
        return None
    rho = float(np.trace(hat)) / total
    eta = float(np.dot(hat.sum(axis=1), hat.sum(axis=0))) / (total * total)
    return rho, eta


def sek(q) -> tuple[float, float, float]:
    """Return ``(rho, eta, sek)`` computed with the no-change/no-change cell zeroed."""
    c = _counts(q)
    _require_pixels(c)
    terms = _agreement_terms(c)
    if terms is None:
        raise NumericError("SeK undefined: no change pixels anywhere")
    rho, eta = terms
    if eta == 1.0:
        raise NumericError("SeK undefined: degenerate marginals")
    _, iou_c, _ = miou(c)
    kappa = (rho - eta) / (1.0 - eta)
    return rho, eta, math.exp(iou_c - 1.0) * kappa


def f_scd(q, flags: list[str] | None = None) -> tuple[float, float, float]:
    """Return ``(precision, recall, f1)`` over change-labelled pixels."""
    c = _counts(q)
    _require_pixels(c)
    hits = float(np.trace(c[1:, 1:]))
    p = _ratio(hits, float(c[1:, :].sum()), "p_scd", flags)
    r = _ratio(hits, float(c[:, 1:].sum()), "r_scd", flags)
    f = _ratio(2 * p * r, p + r, "f_scd", flags)
    return p, r, f


@dataclass(frozen=True)
class MetricsReport:
    oa: float
    miou: float
    iou_nc: float
    iou_c: float
    sek: float
    rho: float
    eta: float
    p_scd: float
    r_scd: float
    f_scd: float
    flags: tuple[str, ...] = field(default=())

    def values(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "flags"}

    def to_flat_text(self) -> str:
        lines = [f"{k}={v!r}" for k, v in self.values().items()]
        lines += [f"flag={flag}" for flag in self.flags]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        labels = {
            "oa": "OA", "miou": "mIoU", "iou_nc": "IoU (no-change)", "iou_c": "IoU (change)",
            "sek": "SeK", "rho": "rho", "eta": "eta", "p_scd": "P_scd", "r_scd": "R_scd",
            "f_scd": "F_scd",
        }
        width = max(map(len, labels.values()))
        out = [f"{labels[k]:<{width}}  {100 * v:8.3f} %" for k, v in self.values().items()]
        out += [f"note: {flag}" for flag in self.flags]
        return "\n".join(out) + "\n"


def metrics_report(q) -> MetricsReport:
    c = _counts(q)
    flags: list[str] = []
    oa = overall_accuracy(c)
    iou_nc, iou_c, m = miou(c, flags)
    try:
        rho, eta, s = sek(c)
    except NumericError as exc:
        flags.append(f"sek: {exc}; reported as 0")
        rho, eta = _agreement_terms(c) or (0.0, 0.0)
        s = 0.0
    p, r, f = f_scd(c, flags)
    return MetricsReport(oa, m, iou_nc, iou_c, s, rho, eta, p, r, f, tuple(flags))


def average_reports(reports: list[MetricsReport]) -> MetricsReport:
    """Field-wise mean, used when epochs are scored separately."""
    if not reports:
        raise NumericError("no reports to average")
    vals = {k: float(np.mean([r.values()[k] for r in reports])) for k in reports[0].values()}
    flags = tuple(dict.fromkeys(f for r in reports for f in r.flags))
    return MetricsReport(**vals, flags=flags)


@dataclass(frozen=True)
class TransitionMatrix:
    """From-to counts over pixels labelled (or predicted) as changed in both maps.

    ``counts[a-1, b-1]`` is the number of pixels of class ``a`` in epoch 1 and
    ``b`` in epoch 2.  Diagonal entries are self-contradictory "false changes".
    """

    num_classes: int
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def false_changes(self) -> int:
        return int(np.trace(self.counts))

    @property
    def false_change_fraction(self) -> float:
        return self.false_changes / self.total if self.total else 0.0

    def rows(self) -> list[tuple[int, int, int, float]]:
        """``(from, to, count, proportion)`` sorted by descending count."""
        total = self.total
        out = [
            (a + 1, b + 1, int(n), n / total)
            for (a, b), n in np.ndenumerate(self.counts)
            if n > 0
        ]
        out.sort(key=lambda row: (-row[2], row[0], row[1]))
        return out

    def proportions(self) -> dict[tuple[int, int], float]:
        return {(a, b): p for a, b, _, p in self.rows()}

    def __add__(self, other: "TransitionMatrix") -> "TransitionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge transition matrices with different class counts")
        return TransitionMatrix(self.num_classes, self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["from_class", "to_class", "count", "proportion"])
        for a, b, n, p in self.rows():
            writer.writerow([a, b, n, f"{p:.6f}"])
        return buf.getvalue()

    def matrix_csv(self, class_names: list[str] | None = None) -> str:
        names = class_names or [str(k) for k in range(1, self.num_classes + 1)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["from\\to", *names])
        for name, row in zip(names, self.counts):
            writer.writerow([name, *map(int, row)])
        return buf.getvalue()

    def summary(self, class_names: list[str] | None = None, top: int = 6) -> str:
        def name(k):
            return class_names[k - 1] if class_names else str(k)

        lines = [f"{'rank':>4}  {'from -> to':<32} {'count':>9} {'share':>8}"]
        for rank, (a, b, n, p) in enumerate(self.rows()[:top], 1):
            lines.append(f"{rank:>4}  {name(a) + ' -> ' + name(b):<32} {n:>9} {100 * p:7.2f}%")
        lines.append(f"false changes: {self.false_changes} pixels "
                     f"({100 * self.false_change_fraction:.2f}%)")
        return "\n".join(lines) + "\n"


def transition_analysis(map1, map2, num_classes: int) -> TransitionMatrix:
    map1 = np.asarray(map1).astype(np.int64)
    map2 = np.asarray(map2).astype(np.int64)
    if map1.shape != map2.shape:
        raise DataError(f"map shapes differ: {map1.shape} vs {map2.shape}")
    both = (map1 != 0) & (map2 != 0)
    a = map1[both] - 1
    b = map2[both] - 1
    if a.size and (max(a.max(), b.max()) >= num_classes):
        raise DataError(f"class index above {num_classes}")
    counts = np.bincount(a * num_classes + b, minlength=num_classes ** 2)
    return TransitionMatrix(num_classes, counts.reshape(num_classes, num_classes))


def empty_transitions(num_classes: int) -> TransitionMatrix:
    return TransitionMatrix(num_classes, np.zeros((num_classes, num_classes), dtype=np.int64))


def write_report(report: MetricsReport, out_dir: str | Path, stem: str = "metrics") -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.txt").write_text(report.to_flat_text())
    (out_dir / f"{stem}_table.txt").write_text(report.to_table())


def write_transitions(tm: TransitionMatrix, out_dir: str | Path,
                      class_names: list[str] | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "transitions.csv").write_text(tm.to_csv())
    (out_dir / "transition_matrix.csv").write_text(tm.matrix_csv(class_names))
    (out_dir / "transitions.txt").write_text(tm.summary(class_names))
