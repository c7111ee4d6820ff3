"""Mahalanobis detectors: MD-Pool (pooled, flattened maps) and FRODO
(channel means of every conv layer)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..numerics import DEFAULT_SHRINKAGE, GaussianModel, fit_gaussian, mahalanobis
from .common import POOL_THRESHOLD, FeatureStack, aggregate_multi, channel_means, layer, pool_until


@dataclass
class MdPoolModel:
    layers: list[str]
    gaussians: dict[str, GaussianModel]
    pool_steps: dict[str, int]
    threshold: int = POOL_THRESHOLD


def fit_mdpool(stacks: Sequence[FeatureStack], layers: Sequence[str],
               shrinkage: float = DEFAULT_SHRINKAGE, threshold: int = POOL_THRESHOLD) -> MdPoolModel:
    if len(stacks) < 2:
        raise ValueError(f"MD-Pool needs at least 2 calibration samples, got {len(stacks)}")
    gaussians, steps = {}, {}
    for l in layers:
        pooled = [pool_until(layer(s, l), threshold) for s in stacks]
        steps[l] = pooled[0][1]
        gaussians[l] = fit_gaussian(np.stack([v for v, _ in pooled]), shrinkage)
    return MdPoolModel(list(layers), gaussians, steps, threshold)


def mdpool_layer_scores(model: MdPoolModel, stack: FeatureStack) -> list[float]:
    return [mahalanobis(model.gaussians[l], pool_until(layer(stack, l), model.threshold)[0])
            for l in model.layers]


def score_mdpool(model: MdPoolModel, stack: FeatureStack) -> float:
    return aggregate_multi(mdpool_layer_scores(model, stack))


@dataclass
class FrodoModel:
    layers: list[str]
    gaussians: dict[str, GaussianModel]


def fit_frodo(stacks: Sequence[FeatureStack], layers: Sequence[str],
              shrinkage: float = DEFAULT_SHRINKAGE) -> FrodoModel:
    if len(stacks) < 2:
        raise ValueError(f"FRODO needs at least 2 calibration samples, got {len(stacks)}")
    return FrodoModel(list(layers), {
        l: fit_gaussian(np.stack([channel_means(layer(s, l)) for s in stacks]), shrinkage)
        for l in layers})


def frodo_layer_scores(model: FrodoModel, stack: FeatureStack) -> list[float]:
    return [mahalanobis(model.gaussians[l], channel_means(layer(stack, l))) for l in model.layers]


def score_frodo(model: FrodoModel, stack: FeatureStack) -> float:
    return aggregate_multi(frodo_layer_scores(model, stack))
