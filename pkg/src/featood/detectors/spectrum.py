"""Spectral-signature detector.

A layer's feature map is flattened to channels x voxels; its log singular
values, L2-normalised, form the signature. The OOD score of a test image at
a layer is the distance to the nearest calibration signature.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import NumericalError
from ..numerics import svd_singular_values
from .common import FeatureStack, aggregate_multi, layer

SV_FLOOR = 1e-12


def spectral_signature(feat: np.ndarray) -> np.ndarray:
    if feat.ndim != 4 or feat.shape[0] < 2:
        raise NumericalError(f"need a rank-4 map with >= 2 channels, got {feat.shape}")
    flat = np.asarray(feat, dtype=np.float64).reshape(feat.shape[0], -1)
    if flat.shape[0] > flat.shape[1]:
        flat = flat.T
    s = svd_singular_values(flat)
    if np.all(s <= SV_FLOOR):
        raise NumericalError("degenerate features: every singular value is at the floor")
    logs = np.log(np.maximum(s, SV_FLOOR))
    norm = np.linalg.norm(logs)
    if norm == 0.0:
        raise NumericalError("log singular values are all zero; signature undefined")
    return logs / norm


@dataclass
class SpectrumModel:
    layers: list[str]
    signatures: dict[str, np.ndarray]  # layer -> (n_calib, k) unit rows


def fit_spectrum(stacks: Sequence[FeatureStack], layers: Sequence[str]) -> SpectrumModel:
    if not stacks:
        raise ValueError("empty calibration set")
    sigs = {l: np.stack([spectral_signature(layer(s, l)) for s in stacks]) for l in layers}
    return SpectrumModel(list(layers), sigs)


def spectrum_layer_scores(model: SpectrumModel, stack: FeatureStack) -> list[float]:
    out = []
    for l in model.layers:
        phi = spectral_signature(layer(stack, l))
        ref = model.signatures[l]
        if phi.shape[0] != ref.shape[1]:
            raise ValueError(f"layer {l!r}: signature length {phi.shape[0]} != calibration {ref.shape[1]}")
        out.append(float(np.min(np.linalg.norm(ref - phi, axis=1))))
    return out


def score_spectrum(model: SpectrumModel, stack: FeatureStack) -> float:
    return aggregate_multi(spectrum_layer_scores(model, stack))
