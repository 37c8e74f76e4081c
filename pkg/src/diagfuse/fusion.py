"""Fusing multi-rater masks under per-pixel expertness weights.

The weighted fusion is a per-pixel convex combination: raw expertness
values are softmaxed across raters, then each output channel is the
weighted sum of the raters' binary masks.  Majority vote is the uniform
special case; the random baseline picks one rater per sample.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, NonFiniteError, ShapeMismatchError
from .fileio import load_tns, save_pgm, save_tns


@dataclass
class ExpertnessMap:
    raw: np.ndarray         # (h, w, n), unbounded
    normalized: np.ndarray  # (h, w, n), per-pixel softmax over raters


def normalize_expertness(raw: np.ndarray) -> ExpertnessMap:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3:
        raise ShapeMismatchError("normalize_expertness", raw.shape)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("normalize_expertness: raw map has non-finite values")
    shifted = raw - raw.max(axis=2, keepdims=True)
    ex = np.exp(shifted)
    return ExpertnessMap(raw=raw, normalized=ex / ex.sum(axis=2, keepdims=True))


def fuse(annotations: np.ndarray, m: ExpertnessMap | np.ndarray) -> np.ndarray:
    """Soft ground-truth (h, w, 2) from (n, 2, h, w) masks and normalized weights."""
    ann = np.asarray(annotations, dtype=np.float64)
    weights = m.normalized if isinstance(m, ExpertnessMap) else np.asarray(m, dtype=np.float64)
    if ann.ndim != 4 or ann.shape[1] != 2:
        raise ShapeMismatchError("fuse", ann.shape)
    if weights.shape != (ann.shape[2], ann.shape[3], ann.shape[0]):
        raise ShapeMismatchError("fuse", ann.shape, weights.shape)
    return np.einsum("hwn,nchw->hwc", weights, ann)


def fuse_on_tape(tape: ad.Tape, annotations: np.ndarray, raw_m: ad.Tensor) -> ad.Tensor:
    """Differentiable fusion: softmax the raw map, weight, and sum over raters."""
    ann = np.asarray(annotations, dtype=np.float64)
    h, w, n = raw_m.dims
    if ann.shape != (n, 2, h, w):
        raise ShapeMismatchError("fuse_on_tape", ann.shape, raw_m.dims)
    weights = ad.softmax(raw_m, axis=2)
    ones = tape.const(np.ones((n, 1)))
    channels = []
    for ch in range(2):
        votes = tape.const(np.moveaxis(ann[:, ch], 0, -1))  # (h, w, n)
        weighted = ad.mul(weights, votes)
        summed = ad.matmul(ad.reshape(weighted, (h * w, n)), ones)
        channels.append(ad.reshape(summed, (h, w, 1)))
    return ad.concat_channels(channels[0], channels[1])


def majority_vote(annotations: np.ndarray) -> np.ndarray:
    """Per-pixel mean of the rater masks, shaped (h, w, 2)."""
    ann = np.asarray(annotations, dtype=np.float64)
    if ann.ndim != 4 or ann.shape[0] < 1:
        raise ShapeMismatchError("majority_vote", ann.shape)
    return np.moveaxis(ann.mean(axis=0), 0, -1)


def random_fuse(annotations: np.ndarray, seed: int) -> np.ndarray:
    """One rater drawn per sample; that rater's masks become the ground-truth."""
    ann = np.asarray(annotations, dtype=np.float64)
    if ann.ndim != 4 or ann.shape[0] < 1:
        raise ShapeMismatchError("random_fuse", ann.shape)
    rng = np.random.default_rng(seed)
    pick = int(rng.integers(ann.shape[0]))
    return np.moveaxis(ann[pick], 0, -1)


# ---------------------------------------------------------------------------
# fused ground-truth directories


def write_fused(out_dir: str | os.PathLike, sample_id: str, gt: np.ndarray) -> None:
    """PGM pair (8-bit) plus one full-precision TNS1 copy per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.ndim != 3 or gt.shape[2] != 2:
        raise ShapeMismatchError("write_fused", gt.shape)
    save_pgm(out / f"{sample_id}_disc.pgm", gt[..., 0])
    save_pgm(out / f"{sample_id}_cup.pgm", gt[..., 1])
    save_tns(out / f"{sample_id}.tns", gt)


def load_fused(gt_dir: str | os.PathLike, sample_id: str) -> np.ndarray:
    path = Path(gt_dir) / f"{sample_id}.tns"
    if not path.exists():
        raise DataError(f"missing fused ground-truth for {sample_id} in {gt_dir}")
    gt = load_tns(path)
    if gt.ndim != 3 or gt.shape[2] != 2:
        raise DataError(f"{path}: fused ground-truth must be (h, w, 2), got {gt.shape}")
    return gt
