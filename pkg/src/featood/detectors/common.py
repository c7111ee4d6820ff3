"""Shared pieces of the feature-based detectors: layer selection, per-layer
aggregation and the two feature reductions (channel means, pooling)."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

FeatureStack = Mapping[str, np.ndarray]

SELECTIONS = ("penultimate", "encoder_end", "all")
POOL_THRESHOLD = 10_000


def resolve_layers(selection: str, net) -> list[str]:
    """Map a selection name to conv layer ids of ``net`` (anything exposing
    ``conv_layer_ids``, ``penultimate_id`` and ``encoder_end_id``)."""
    if selection == "all":
        return list(net.conv_layer_ids)
    if selection == "penultimate":
        return [net.penultimate_id]
    if selection == "encoder_end":
        return [net.encoder_end_id]
    raise ValueError(f"unknown layer selection {selection!r}; expected one of {SELECTIONS}")


def aggregate_multi(layer_scores: Sequence[float]) -> float:
    """Average of per-layer scores (a single layer passes through unchanged)."""
    scores = [float(s) for s in layer_scores]
    if not scores:
        raise ValueError("aggregate_multi needs at least one layer score")
    if len(scores) == 1:
        return scores[0]
    return math.fsum(scores) / len(scores)


def layer(stack: FeatureStack, layer_id: str) -> np.ndarray:
    try:
        feat = stack[layer_id]
    except KeyError:
        raise KeyError(f"feature stack has no layer {layer_id!r} (has {sorted(stack)})") from None
    if feat.ndim != 4:
        raise ValueError(f"layer {layer_id!r}: expected a rank-4 feature map, got {feat.shape}")
    return feat


def channel_means(feat: np.ndarray) -> np.ndarray:
    """Per-channel mean over the spatial extents of an (N, H, W, D) map."""
    return np.asarray(feat, dtype=np.float64).reshape(feat.shape[0], -1).mean(axis=1)


def _avg_pool2(x: np.ndarray) -> np.ndarray:
    # 2x2x2 average pooling, stride 2, floor extents; extent-1 axes pass through
    for axis in (1, 2, 3):
        n = x.shape[axis]
        if n < 2:
            continue
        m = n // 2
        x = np.take(x, np.arange(2 * m), axis=axis)
        shape = x.shape[:axis] + (m, 2) + x.shape[axis + 1:]
        x = x.reshape(shape).mean(axis=axis + 1)
    return x


def pool_until(feat: np.ndarray, threshold: int = POOL_THRESHOLD) -> tuple[np.ndarray, int]:
    """Average-pool until the map holds at most ``threshold`` elements, then
    flatten. Returns the vector and the number of pooling steps applied."""
    x = np.asarray(feat, dtype=np.float64)
    steps = 0
    while x.size > threshold and max(x.shape[1:]) > 1:
        x = _avg_pool2(x)
        steps += 1
    return x.ravel(), steps
