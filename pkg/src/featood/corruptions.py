"""Transformation-shift corruptions of 3D volumes.

Every kind takes a scalar ``strength`` with a documented identity value and
is deterministic given ``(kind, strength, seed)``. Geometric kinds also map
label masks (nearest neighbour) so Dice stays measurable.

==============  ========  ===================================================
kind            identity  effect
==============  ========  ===================================================
Bias            0         multiply by exp(random quadratic polynomial)
Noise           0         additive i.i.d. Gaussian noise, sigma = strength
Gamma           1         min-max normalise, raise to ``strength``, restore
Truncation      --        zero every voxel with x >= H/2 (strength ignored)
Downsample      1         keep every floor(s)-th plane on one axis, repeat
Scaling         1         trilinear zoom about the centre
Registration    0         random rigid transform, sigma = strength
Ghost           0         attenuate every 4th k-space plane by (1 - s)
Spikes          0         add floor(s) k-space spikes
Motion          0         average k-space of the original with floor(s)
                          rigidly perturbed copies
==============  ========  ===================================================
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation

from .numerics import derive_seed, fft3, ifft3, make_rng
from .volumes import Sample, write_dataset

log = logging.getLogger(__name__)

KINDS = ("Bias", "Motion", "Ghost", "Spikes", "Downsample", "Noise", "Scaling",
         "Registration", "Gamma", "Truncation")
GEOMETRIC = frozenset({"Scaling", "Registration", "Truncation", "Downsample"})
IDENTITY = {"Bias": 0.0, "Noise": 0.0, "Gamma": 1.0, "Downsample": 1.0, "Scaling": 1.0,
            "Registration": 0.0, "Ghost": 0.0, "Spikes": 0.0, "Motion": 0.0}
RANGES = {"Bias": (0.0, 5.0), "Noise": (0.0, 10.0), "Gamma": (0.05, 20.0),
          "Truncation": (0.0, math.inf), "Downsample": (1.0, 16.0), "Scaling": (0.25, 4.0),
          "Registration": (0.0, 5.0), "Ghost": (0.0, 1.0), "Spikes": (0.0, 64.0),
          "Motion": (0.0, 16.0)}

GHOST_PERIOD = 4
SPIKE_AMPLITUDE = 0.5
MOTION_SIGMA = 0.5  # registration-style sigma of each motion copy


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    strength: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        lo, hi = RANGES[self.kind]
        if math.isnan(self.strength) or not lo <= self.strength <= hi:
            raise ValueError(f"{self.kind} strength {self.strength} outside [{lo}, {hi}]")


# --------------------------------------------------------------------------
# resampling helpers


def _centered_coords(shape):
    axes = [np.arange(n, dtype=np.float64) - (n - 1) / 2.0 for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij")).reshape(3, -1)


def _resample(vol, matrix, offset, order):
    """Sample ``vol`` at ``matrix @ p + offset`` for every centered output
    coordinate p; order 1 = trilinear, 0 = nearest neighbour."""
    shape = vol.shape
    p = _centered_coords(shape)
    center = np.array([(n - 1) / 2.0 for n in shape])[:, None]
    src = matrix @ p + offset[:, None] + center
    out = map_coordinates(vol.astype(np.float64), src, order=order, mode="nearest")
    return out.reshape(shape)


def _rigid(rng, sigma):
    angles = rng.normal(0.0, sigma, 3)
    shift = rng.normal(0.0, sigma, 3)
    return Rotation.from_rotvec(angles).as_matrix(), shift


def _apply_geometric(img, mask, matrix, offset):
    out = _resample(img, matrix, offset, 1)
    m = None if mask is None else _resample(mask, matrix, offset, 0).round().astype(mask.dtype)
    return out, m


# --------------------------------------------------------------------------
# kinds


def _bias(img, s, rng, mask):
    shape = img.shape
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = [np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
    coef = rng.normal(0.0, s, len(terms)) if s > 0 else np.zeros(len(terms))
    field = sum(c * t for c, t in zip(coef, terms))
    return img * np.exp(field), mask


def _noise(img, s, rng, mask):
    return img + rng.normal(0.0, s, img.shape), mask


def _gamma(img, s, rng, mask):
    lo, hi = img.min(), img.max()
    if s == 1.0 or hi == lo:
        return img.copy(), mask
    u = (img - lo) / (hi - lo)
    return u ** s * (hi - lo) + lo, mask


def _truncation(img, s, rng, mask):
    out = img.copy()
    half = img.shape[0] // 2
    out[half:] = 0.0
    if mask is not None:
        mask = mask.copy()
        mask[half:] = 0
    return out, mask


def _downsample(img, s, rng, mask):
    f = int(math.floor(s))
    axis = int(rng.integers(3))
    if f <= 1:
        return img.copy(), mask

    def squash(v):
        n = v.shape[axis]
        idx = (np.arange(n) // f) * f
        return np.take(v, idx, axis=axis)

    return squash(img), None if mask is None else squash(mask)


def _scaling(img, s, rng, mask):
    if s == 1.0:
        return img.copy(), mask
    return _apply_geometric(img, mask, np.eye(3) / s, np.zeros(3))


def _registration(img, s, rng, mask):
    if s == 0.0:
        return img.copy(), mask
    rot, shift = _rigid(rng, s)
    return _apply_geometric(img, mask, rot, shift)


def _ghost(img, s, rng, mask):
    axis = int(rng.integers(3))
    k = fft3(img)
    planes = [slice(None)] * 3
    planes[axis] = slice(0, None, GHOST_PERIOD)
    k[tuple(planes)] *= 1.0 - s
    return ifft3(k).real, mask


def _spikes(img, s, rng, mask):
    count = int(math.floor(s))
    k = fft3(img)
    amp = SPIKE_AMPLITUDE * np.abs(k).max()
    for _ in range(count):
        idx = tuple(int(rng.integers(n)) for n in img.shape)
        k[idx] += amp * np.exp(1j * rng.uniform(0.0, 2 * math.pi))
    return ifft3(k).real, mask


def _motion(img, s, rng, mask):
    copies = int(math.floor(s))
    acc = fft3(img)
    for _ in range(copies):
        rot, shift = _rigid(rng, MOTION_SIGMA)
        acc += fft3(_resample(img, rot, shift, 1))
    return ifft3(acc / (copies + 1)).real, mask


_OPS = {"Bias": _bias, "Noise": _noise, "Gamma": _gamma, "Truncation": _truncation,
        "Downsample": _downsample, "Scaling": _scaling, "Registration": _registration,
        "Ghost": _ghost, "Spikes": _spikes, "Motion": _motion}


def apply_corruption(spec: CorruptionSpec, image: np.ndarray,
                     mask: np.ndarray | None = None):
    """Corrupt ``image`` according to ``spec``.

    Returns the corrupted image (same dtype and extents). When ``mask`` is
    given, returns ``(image, mask)`` with the mask carried along: mapped
    for geometric kinds, unchanged otherwise.
    """
    if not np.all(np.isfinite(image)):
        raise ValueError("input volume contains non-finite values")
    rng = make_rng(spec.seed)
    out, m = _OPS[spec.kind](np.asarray(image, dtype=np.float64), float(spec.strength), rng, mask)
    out = out.astype(image.dtype, copy=False)
    if mask is None:
        return out
    return out, m


def corrupt_sample(spec: CorruptionSpec, sample: Sample) -> Sample:
    img, mask = (apply_corruption(spec, sample.image, sample.mask) if sample.mask is not None
                 else (apply_corruption(spec, sample.image), None))
    return Sample(f"{sample.id}-{spec.kind.lower()}", img, mask, f"Transform:{spec.kind}")


def corruption_suite(test_samples: Sequence[Sample], strengths: Mapping[str, float], seed: int,
                     out_dir: str | Path | None = None) -> dict[str, list[Sample]]:
    """One corrupted copy of every test sample per requested kind.

    Per-sample seeds derive from ``(seed, kind, sample index)``. When
    ``out_dir`` is given each kind is also written as ``out_dir/<kind>/``
    (VTF volumes plus ``manifest.json``).
    """
    if not strengths:
        log.warning("corruption_suite called with an empty strength table; nothing to do")
        return {}
    unknown = set(strengths) - set(KINDS)
    if unknown:
        raise ValueError(f"unknown corruption kinds {sorted(unknown)}")
    out: dict[str, list[Sample]] = {}
    for kind in KINDS:
        if kind not in strengths:
            continue
        made = []
        for i, s in enumerate(test_samples):
            spec = CorruptionSpec(kind, float(strengths[kind]), derive_seed(seed, kind, i))
            try:
                made.append(corrupt_sample(spec, s))
            except Exception as exc:
                raise RuntimeError(f"{kind} corruption failed on sample {s.id}: {exc}") from exc
        out[kind] = made
        if out_dir is not None:
            write_dataset(made, Path(out_dir) / kind, f"transform-{kind.lower()}", seed,
                          {"kind": kind, "strength": float(strengths[kind])})
    return out
