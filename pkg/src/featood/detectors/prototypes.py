"""Class-prototype detector.

A prototype is, per class, the channel-wise mean of a layer's features over
the voxels the network predicted as that class. The score is the cosine
dissimilarity to the mean calibration prototype.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..numerics import cosine_dissimilarity
from .common import FeatureStack, aggregate_multi, layer

NO_COMMON_CLASS = 2.0


def resample_nearest(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    idx = [np.minimum(((np.arange(o) + 0.5) * i / o).astype(int), i - 1)
           for i, o in zip(mask.shape, shape)]
    return mask[np.ix_(*idx)]


def compute_prototype(feat: np.ndarray, mask: np.ndarray, classes: int):
    """Return ``(P, present)``: ``P`` is channels x classes, ``present`` flags
    classes that occupy at least one voxel at this layer's resolution."""
    m = resample_nearest(np.asarray(mask), feat.shape[1:]).ravel()
    if m.size and m.max() >= classes:
        raise ValueError(f"mask label {int(m.max())} out of range for {classes} classes")
    flat = np.asarray(feat, dtype=np.float64).reshape(feat.shape[0], -1)
    counts = np.bincount(m, minlength=classes)
    sums = np.zeros((feat.shape[0], classes))
    for c in range(classes):
        if counts[c]:
            sums[:, c] = flat[:, m == c].sum(axis=1)
    present = counts > 0
    proto = np.where(present, sums / np.maximum(counts, 1), 0.0)
    return proto, present


def _dissimilarity(u: np.ndarray, v: np.ndarray) -> float:
    # zero-norm columns (dead ReLU features): identical zeros match, else
    # treated as orthogonal
    zu, zv = not np.any(u), not np.any(v)
    if zu and zv:
        return 0.0
    if zu or zv:
        return 1.0
    return cosine_dissimilarity(u, v)


@dataclass
class PrototypeModel:
    layers: list[str]
    classes: int
    prototypes: dict[str, np.ndarray]  # layer -> channels x classes
    counts: dict[str, np.ndarray]      # layer -> per-class presence counts


def fit_prototypes(stacks: Sequence[FeatureStack], masks: Sequence[np.ndarray],
                   layers: Sequence[str], classes: int = 2) -> PrototypeModel:
    if not stacks:
        raise ValueError("empty calibration set")
    if len(stacks) != len(masks):
        raise ValueError("need one predicted mask per calibration stack")
    protos, counts = {}, {}
    for l in layers:
        acc = None
        cnt = np.zeros(classes, dtype=np.int64)
        for s, m in zip(stacks, masks):
            p, present = compute_prototype(layer(s, l), m, classes)
            acc = np.zeros_like(p) if acc is None else acc
            acc[:, present] += p[:, present]
            cnt += present
        protos[l] = np.where(cnt > 0, acc / np.maximum(cnt, 1), 0.0)
        counts[l] = cnt
    return PrototypeModel(list(layers), classes, protos, counts)


def prototype_layer_scores(model: PrototypeModel, stack: FeatureStack, mask: np.ndarray) -> list[float]:
    out = []
    for l in model.layers:
        ref = model.prototypes[l]
        p, present = compute_prototype(layer(stack, l), mask, model.classes)
        if p.shape != ref.shape:
            raise ValueError(f"layer {l!r}: prototype shape {p.shape} != calibration {ref.shape}")
        common = np.flatnonzero(present & (model.counts[l] > 0))
        if common.size == 0:
            out.append(NO_COMMON_CLASS)
            continue
        out.append(float(np.mean([_dissimilarity(p[:, c], ref[:, c]) for c in common])))
    return out


def score_prototypes(model: PrototypeModel, stack: FeatureStack, mask: np.ndarray) -> float:
    return aggregate_multi(prototype_layer_scores(model, stack, mask))
