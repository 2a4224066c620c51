"""Threshold-based segmentation scores for reconstruction images.

A pixel is predicted positive when its value is at least the threshold. Curves are traced over
all distinct image values (descending) after a leading ``+inf`` sentinel at which nothing is
positive; the sentinel anchors the ROC at (0, 0) and the PRC at (recall 0, precision 1).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import GroundTruthMask, RasterGrid
from .tfm import ImageGrid


class SingleClassError(ValueError):
    """Ground truth without positives or without negatives in the evaluated region."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def tpr(self) -> float:
        p = self.tp + self.fn
        return self.tp / p if p else 0.0

    recall = tpr

    @property
    def fpr(self) -> float:
        n = self.fp + self.tn
        return self.fp / n if n else 0.0

    @property
    def precision(self) -> float:
        """``tp / (tp + fp)``; 1 when nothing is predicted positive."""
        d = self.tp + self.fp
        return self.tp / d if d else 1.0


def f1(counts: ConfusionCounts) -> float:
    """``tp / (tp + (fp + fn) / 2)``; defined as 0 when tp = fp = fn = 0."""
    d = counts.tp + 0.5 * (counts.fp + counts.fn)
    return counts.tp / d if d else 0.0


@dataclass(frozen=True)
class ExclusionRegion:
    """Drops the deepest ``bottom_fraction`` of image rows (the back-wall zone).

    The number of excluded rows is ``round(bottom_fraction * ny)``.
    """

    bottom_fraction: float = 0.1

    def __post_init__(self):
        if not 0 <= self.bottom_fraction < 1:
            raise ValueError("bottom_fraction must lie in [0, 1)")

    def n_rows(self, grid: RasterGrid) -> int:
        return int(round(self.bottom_fraction * grid.ny))

    def evaluated(self, grid: RasterGrid) -> np.ndarray:
        keep = np.ones(grid.shape, bool)
        k = self.n_rows(grid)
        if k:
            keep[grid.ny - k:, :] = False  # rows are ordered by increasing depth
        return keep


NO_EXCLUSION = ExclusionRegion(0.0)


def _flatten(image: ImageGrid, truth: GroundTruthMask, exclusion: ExclusionRegion | None):
    if image.grid != truth.grid:
        raise ValueError("image and ground truth live on different grids")
    keep = (exclusion or NO_EXCLUSION).evaluated(image.grid)
    return image.values[keep], truth.mask[keep].astype(bool)


def confusion(image: ImageGrid, truth: GroundTruthMask, tau: float,
              exclusion: ExclusionRegion | None = None) -> ConfusionCounts:
    scores, labels = _flatten(image, truth, exclusion)
    pred = scores >= tau
    tp = int(np.count_nonzero(pred & labels))
    fp = int(np.count_nonzero(pred & ~labels))
    fn = int(np.count_nonzero(~pred & labels))
    return ConfusionCounts(tp, fp, fn, labels.size - tp - fp - fn)


@dataclass(eq=False)
class ThresholdSweep:
    """Cumulative counts at each candidate threshold; index 0 is the ``+inf`` sentinel."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def fn(self) -> np.ndarray:
        return self.n_pos - self.tp

    @property
    def tn(self) -> np.ndarray:
        return self.n_neg - self.fp

    def counts(self, k: int) -> ConfusionCounts:
        return ConfusionCounts(int(self.tp[k]), int(self.fp[k]), int(self.fn[k]), int(self.tn[k]))


def threshold_sweep(scores, labels, require_both: bool = True) -> ThresholdSweep:
    """Single sort, then cumulative positives/negatives at the end of every tie group."""
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in size")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if require_both and (n_pos == 0 or n_neg == 0):
        raise SingleClassError(f"ground truth needs both classes (positives={n_pos}, negatives={n_neg})")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    last = np.nonzero(np.r_[s[1:] != s[:-1], True])[0]
    tp = np.cumsum(lab)[last]
    fp = (last + 1) - tp
    return ThresholdSweep(np.r_[np.inf, s[last]], np.r_[0, tp], np.r_[0, fp], n_pos, n_neg)


@dataclass(eq=False)
class Curve:
    """``x``/``y`` are (FPR, TPR) for a ROC and (recall, precision) for a PRC."""

    kind: str
    thresholds: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return self.thresholds.size

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.x.tolist(), self.y.tolist()))

    def to_csv(self, path: str | Path) -> None:
        xn, yn = ("fpr", "tpr") if self.kind == "roc" else ("recall", "precision")
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", xn, yn])
            for t, x, y in self.points():
                w.writerow([repr(t), repr(x), repr(y)])


def _roc_from(sw: ThresholdSweep) -> Curve:
    return Curve("roc", sw.thresholds, sw.fp / sw.n_neg, sw.tp / sw.n_pos)


def _prc_from(sw: ThresholdSweep) -> Curve:
    pred = sw.tp + sw.fp
    precision = np.where(pred > 0, sw.tp / np.maximum(pred, 1), 1.0)
    return Curve("prc", sw.thresholds, sw.tp / sw.n_pos, precision)


def roc_curve(image: ImageGrid, truth: GroundTruthMask, exclusion: ExclusionRegion | None = None) -> Curve:
    return _roc_from(threshold_sweep(*_flatten(image, truth, exclusion)))


def prc_curve(image: ImageGrid, truth: GroundTruthMask, exclusion: ExclusionRegion | None = None) -> Curve:
    return _prc_from(threshold_sweep(*_flatten(image, truth, exclusion)))


def _area(curve: Curve) -> float:
    if len(curve) < 2:
        raise ValueError("need at least two curve points")
    return float(np.sum(np.diff(curve.x) * 0.5 * (curve.y[1:] + curve.y[:-1])))


def auroc(curve: Curve) -> float:
    """Trapezoidal area under TPR over FPR."""
    return _area(curve)


def auprc(curve: Curve) -> float:
    """Trapezoidal area under precision over recall."""
    return _area(curve)


def _pick_min(values: np.ndarray) -> int:
    # candidates exclude the sentinel; argmin returns the first, i.e. largest, threshold on ties
    return 1 + int(np.argmin(values[1:]))


def tau_roc(curve: Curve) -> float:
    """Threshold closest to the ideal corner (FPR, TPR) = (0, 1)."""
    return float(curve.thresholds[_pick_min(curve.x ** 2 + (1.0 - curve.y) ** 2)])


def tau_prc(curve: Curve) -> float:
    """Threshold closest to the ideal corner (precision, recall) = (1, 1)."""
    return float(curve.thresholds[_pick_min((1.0 - curve.y) ** 2 + (1.0 - curve.x) ** 2)])


def _f1_values(sw: ThresholdSweep) -> np.ndarray:
    d = sw.tp + 0.5 * (sw.fp + sw.fn)
    return np.where(d > 0, sw.tp / np.where(d > 0, d, 1), 0.0)


def tau_f1(image: ImageGrid, truth: GroundTruthMask, exclusion: ExclusionRegion | None = None) -> float:
    """Threshold with the highest F1 score (largest threshold on ties)."""
    sw = threshold_sweep(*_flatten(image, truth, exclusion))
    return float(sw.thresholds[_pick_min(-_f1_values(sw))])


@dataclass(eq=False)
class EvalReport:
    auroc: float
    auprc: float
    f1_max: float
    tau_roc: float
    tau_prc: float
    tau_f1: float
    roc: Curve
    prc: Curve
    exclusion: ExclusionRegion
    n_evaluated: int
    scenario: str = ""
    method: str = ""
    extra: dict = field(default_factory=dict)

    SCALARS = ("auroc", "auprc", "f1_max", "tau_roc", "tau_prc", "tau_f1")

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["scenario", self.scenario])
            w.writerow(["method", self.method])
            for k, v in self.metrics().items():
                w.writerow([k, repr(float(v))])
            w.writerow(["exclude_bottom", repr(self.exclusion.bottom_fraction)])
            w.writerow(["n_evaluated", self.n_evaluated])

    def save(self, prefix: str | Path) -> list[Path]:
        """``<prefix>_metrics.csv``, ``<prefix>_roc.csv`` and ``<prefix>_prc.csv``."""
        prefix = str(prefix)
        paths = [Path(prefix + "_metrics.csv"), Path(prefix + "_roc.csv"), Path(prefix + "_prc.csv")]
        self.to_csv(paths[0])
        self.roc.to_csv(paths[1])
        self.prc.to_csv(paths[2])
        return paths


def evaluate(image: ImageGrid, truth: GroundTruthMask, exclusion: ExclusionRegion | None = None,
             normalize: bool = True, scenario: str = "", method: str = "") -> EvalReport:
    """All scores for one image. Values are min-max normalized first unless ``normalize=False``."""
    exclusion = exclusion or ExclusionRegion()
    img = image.normalized() if normalize else image
    scores, labels = _flatten(img, truth, exclusion)
    sw = threshold_sweep(scores, labels)
    roc, prc = _roc_from(sw), _prc_from(sw)
    f1s = _f1_values(sw)
    k_f1 = _pick_min(-f1s)
    return EvalReport(auroc(roc), auprc(prc), float(f1s[k_f1]), tau_roc(roc), tau_prc(prc),
                      float(sw.thresholds[k_f1]), roc, prc, exclusion, int(labels.size),
                      scenario, method)


def thresholded(image: ImageGrid, tau: float, normalize: bool = True) -> np.ndarray:
    img = image.normalized() if normalize else image
    return img.values >= tau


def load_metrics(path: str | Path) -> dict:
    """Read a metrics CSV written by :meth:`EvalReport.to_csv`."""
    out: dict = {}
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value"]:
        raise ValueError(f"{path}: not a metrics CSV")
    for key, val in rows[1:]:
        if key in ("scenario", "method"):
            out[key] = val
        else:
            out[key] = float(val)
    return out


# higher is better for all compared metrics
COMPARED = ("f1_max", "auroc", "auprc")


def comparison_table(reports: Iterable[dict], metrics: Sequence[str] = COMPARED) -> list[list[str]]:
    """Rows ``metric x method``, one value and one best-flag column per scenario.

    Missing (scenario, method) combinations stay blank. Ties share the flag.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to compare")
    scenarios = list(dict.fromkeys(r["scenario"] for r in reports))
    methods = list(dict.fromkeys(r["method"] for r in reports))
    table = {(r["scenario"], r["method"]): r for r in reports}
    header = ["metric", "method"]
    for s in scenarios:
        header += [s, f"{s}_best"]
    rows = [header]
    for m in metrics:
        best = {}
        for s in scenarios:
            vals = [table[(s, meth)][m] for meth in methods if (s, meth) in table]
            best[s] = max(vals) if vals else None
        for meth in methods:
            row = [m, meth]
            for s in scenarios:
                r = table.get((s, meth))
                if r is None:
                    row += ["", ""]
                else:
                    v = r[m]
                    row += [f"{v:.4f}", "*" if math.isclose(v, best[s], rel_tol=0, abs_tol=1e-12) else ""]
            rows.append(row)
    return rows


def write_comparison(rows: list[list[str]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
