"""Detection and segmentation metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auroc(id_scores, ood_scores) -> float:
    """Area under the ROC curve for OOD scores (higher = more OOD).

    Equals P(ood > id) + 0.5 * P(ood == id) over all (id, ood) pairs, i.e.
    the Mann-Whitney U statistic of the OOD scores divided by the number of
    pairs. Computed from average ranks in O(n log n); the rank sums are
    half-integers, so the result is the same float as exact pair counting.
    """
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("auroc needs non-empty ID and OOD score lists")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("auroc scores must be finite")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(np.sum(ranks[a.size:])) - b.size * (b.size + 1) / 2.0
    return u / (a.size * b.size)


def dice_score(pred: np.ndarray, gt: np.ndarray, c: int = 1) -> float:
    """Dice overlap of the class-``c`` voxel sets; 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"extent mismatch: {pred.shape} vs {gt.shape}")
    a = pred == c
    b = gt == c
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
