"""Evaluation metrics: Dice, IoU, ROC-AUC, and spectral high-frequency ratio."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

DEFAULT_THRESHOLD = 0.5


def _binarize(mask: np.ndarray, thresh: float) -> np.ndarray:
    return np.asarray(mask, dtype=np.float64) > thresh


def dice(a: np.ndarray, b: np.ndarray, thresh: float = DEFAULT_THRESHOLD) -> float:
    """2|A∩B| / (|A|+|B|) after thresholding; 1.0 when both masks are empty."""
    if np.shape(a) != np.shape(b):
        raise DataError(f"dice: shape mismatch {np.shape(a)} vs {np.shape(b)}")
    am, bm = _binarize(a, thresh), _binarize(b, thresh)
    denom = am.sum() + bm.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(am, bm).sum() / denom)


def iou(a: np.ndarray, b: np.ndarray, thresh: float = DEFAULT_THRESHOLD) -> float:
    """|A∩B| / |A∪B| after thresholding; 1.0 when both masks are empty."""
    if np.shape(a) != np.shape(b):
        raise DataError(f"iou: shape mismatch {np.shape(a)} vs {np.shape(b)}")
    am, bm = _binarize(a, thresh), _binarize(b, thresh)
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def auc(scores, labels) -> float:
    """ROC-AUC as the Mann-Whitney rank statistic; ties credit 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError(f"auc: need matching 1-D scores/labels, got {s.shape} vs {y.shape}")
    pos = y == 1
    neg = y == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc: both classes must be present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def hf_energy_ratio(map2d: np.ndarray, cutoff_radius: float | None = None) -> float:
    """Fraction of non-DC spectral power above a radial frequency cutoff.

    Frequencies are in cycles per image; the default cutoff is min(h, w)/8.
    Returns 0.0 for maps with no non-DC power (e.g. constants).
    """
    m = np.asarray(map2d, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 4 or m.shape[1] < 4:
        raise DataError(f"hf_energy_ratio: need a 2-D map at least 4x4, got {m.shape}")
    h, w = m.shape
    if cutoff_radius is None:
        cutoff_radius = min(h, w) / 8.0
    power = np.abs(np.fft.fft2(m)) ** 2
    fu = np.fft.fftfreq(h) * h
    fv = np.fft.fftfreq(w) * w
    radial = np.sqrt(fu[:, None] ** 2 + fv[None, :] ** 2)
    total = power.sum() - power[0, 0]
    if total <= 0.0:
        return 0.0
    high = power[radial > cutoff_radius].sum()
    return float(high / total)


@dataclass
class MetricReport:
    """Per-sample metric rows plus their aggregate."""

    metric: str
    threshold: float | None
    rows: list[tuple[str, float]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([v for _, v in self.rows])) if self.rows else float("nan")

    @property
    def std(self) -> float:
        return float(np.std([v for _, v in self.rows])) if self.rows else float("nan")


def write_reports_csv(path, reports: list[MetricReport]) -> None:
    """CSV rows `sample_id,metric,value` with aggregate footer rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "metric", "value"])
        for rep in reports:
            for sid, value in rep.rows:
                writer.writerow([sid, rep.metric, f"{value:.10g}"])
        for rep in reports:
            writer.writerow(["aggregate_mean", rep.metric, f"{rep.mean:.10g}"])
            writer.writerow(["aggregate_std", rep.metric, f"{rep.std:.10g}"])
