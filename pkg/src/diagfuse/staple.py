"""EM consensus baseline with per-rater sensitivity/specificity.

Applied to one binary channel at a time (disc and cup are fused
independently).  The E-step computes the per-pixel foreground posterior
from the current rater parameters; the M-step re-estimates each rater's
sensitivity p_i and specificity q_i from the posterior:

    E:  W ∝ prior * Π_i a_i   vs  (1 - prior) * Π_i b_i
        a_i = p_i if rater i voted foreground else 1 - p_i
        b_i = 1 - q_i if voted foreground else q_i
    M:  p_i = Σ W s_i / Σ W
        q_i = Σ (1-W)(1-s_i) / Σ (1-W)

Iteration stops when the largest parameter change drops below tol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

PARAM_CLAMP = 1e-6
INIT_PARAM = 0.99999


@dataclass
class StapleResult:
    posterior: np.ndarray       # (h, w) in [0, 1]
    sensitivities: np.ndarray   # (n,)
    specificities: np.ndarray   # (n,)
    iterations: int
    converged: bool


def staple_fuse(
    annotations: np.ndarray,
    prior: float | np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> StapleResult:
    """Consensus posterior for (n, h, w) binary annotations.

    prior defaults to the mean foreground fraction across raters; a scalar
    or an (h, w) per-pixel prior is accepted.  Unanimous all-foreground or
    all-background inputs short-circuit to that consensus.
    """
    votes = np.asarray(annotations) > 0
    if votes.ndim != 3 or votes.shape[0] < 1:
        raise DataError(f"staple_fuse: need (n, h, w) annotations, got {votes.shape}")
    if tol <= 0:
        raise DataError("staple_fuse: tol must be positive")
    n, h, w = votes.shape

    if votes.all() or not votes.any():
        consensus = votes[0].astype(np.float64)
        return StapleResult(
            posterior=consensus,
            sensitivities=np.full(n, INIT_PARAM),
            specificities=np.full(n, INIT_PARAM),
            iterations=0,
            converged=True,
        )

    if prior is None:
        prior = float(votes.mean())
    prior_arr = np.asarray(prior, dtype=np.float64)
    if prior_arr.ndim not in (0, 2) or (prior_arr.ndim == 2 and prior_arr.shape != (h, w)):
        raise DataError(f"staple_fuse: prior must be scalar or (h, w), got {prior_arr.shape}")
    if np.any(prior_arr <= 0.0) or np.any(prior_arr >= 1.0):
        raise DataError("staple_fuse: prior must lie strictly inside (0, 1)")

    flat = votes.reshape(n, h * w)
    prior_flat = np.broadcast_to(prior_arr, (h, w)).reshape(-1)
    p = np.full(n, INIT_PARAM)
    q = np.full(n, INIT_PARAM)
    posterior = np.empty(h * w)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        a = np.where(flat, p[:, None], 1.0 - p[:, None]).prod(axis=0)
        b = np.where(flat, 1.0 - q[:, None], q[:, None]).prod(axis=0)
        num = prior_flat * a
        den = num + (1.0 - prior_flat) * b
        posterior = np.where(den > 0.0, num / np.maximum(den, 1e-300), prior_flat)

        w_sum = posterior.sum()
        v_sum = (1.0 - posterior).sum()
        p_new = (posterior[None, :] * flat).sum(axis=1) / max(w_sum, 1e-300)
        q_new = ((1.0 - posterior[None, :]) * (~flat)).sum(axis=1) / max(v_sum, 1e-300)
        p_new = np.clip(p_new, PARAM_CLAMP, 1.0 - PARAM_CLAMP)
        q_new = np.clip(q_new, PARAM_CLAMP, 1.0 - PARAM_CLAMP)

        delta = max(np.abs(p_new - p).max(), np.abs(q_new - q).max())
        p, q = p_new, q_new
        if delta < tol:
            converged = True
            break

    return StapleResult(
        posterior=posterior.reshape(h, w),
        sensitivities=p,
        specificities=q,
        iterations=iterations,
        converged=converged,
    )


def staple_fuse_pair(annotations: np.ndarray, **kwargs) -> np.ndarray:
    """Disc and cup channels of (n, 2, h, w) annotations fused independently."""
    ann = np.asarray(annotations)
    if ann.ndim != 4 or ann.shape[1] != 2:
        raise DataError(f"staple_fuse_pair: need (n, 2, h, w), got {ann.shape}")
    disc = staple_fuse(ann[:, 0], **kwargs).posterior
    cup = staple_fuse(ann[:, 1], **kwargs).posterior
    return np.stack([disc, cup], axis=-1)
