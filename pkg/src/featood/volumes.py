"""Samples, synthetic phantoms, dataset splits and on-disk formats.

Volumes are float arrays of shape (H, W, D). A phantom is an ellipsoidal
"brain" on a dark background carrying one spherical lesion; the lesion is
the foreground class of the ground-truth mask.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (BadMagicError, ExtentOverflowError, FormatError, ManifestError,
                     RankError, TruncatedError)
from .numerics import derive_seed, make_rng

BACKGROUND = 0.05
BRAIN = 0.6
CONTROL_SHIFT = 0.02

FAMILY_GROUPS = {
    "TestID": None,
    "Control": None,
    "Train": None,
    "Calibration": None,
    "Validation": None,
    "Transform": ("Bias", "Motion", "Ghost", "Spikes", "Downsample", "Noise", "Scaling",
                  "Registration", "Gamma", "Truncation", "Adversarial"),
    "Diagnosis": ("DiagnosisRing", "DiagnosisHealthy"),
    "Modality": ("ModalityInverted",),
    "FarOOD": ("FarNoise", "FarGeometry"),
}
OOD_FAMILIES = {kind: fam for fam in ("Diagnosis", "Modality", "FarOOD")
                for kind in FAMILY_GROUPS[fam]}


def valid_groups() -> list[str]:
    out = []
    for fam, kinds in FAMILY_GROUPS.items():
        out.extend([fam] if kinds is None else [f"{fam}:{k}" for k in kinds])
    return out


def parse_group(text: str) -> str:
    """Validate a group string such as ``TestID`` or ``Transform:Gamma``."""
    if text not in valid_groups():
        raise ManifestError(f"unknown group {text!r}; valid groups: {', '.join(valid_groups())}")
    return text


def group_family(group: str) -> str:
    return group.split(":", 1)[0]


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray | None = None
    group: str = "TestID"

    def __post_init__(self):
        if self.image.ndim != 3 or min(self.image.shape) < 4:
            raise ValueError(f"sample {self.id}: image must be rank 3 with extents >= 4, "
                             f"got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise ValueError(f"sample {self.id}: mask extents {self.mask.shape} != "
                             f"image extents {self.image.shape}")
        parse_group(self.group)


@dataclass
class PhantomConfig:
    size: int = 32
    brain_axes: tuple[float, float, float] = (0.40, 0.34, 0.37)
    lesion_radius_range: tuple[float, float] = (0.09, 0.17)
    lesion_contrast: float = 1.0
    background_noise_sigma: float = 0.03
    class_count: int = 2
    shape_jitter: float = 0.08
    far_noise_sigma: float = 0.25

    def __post_init__(self):
        self.brain_axes = tuple(float(a) for a in self.brain_axes)
        self.lesion_radius_range = tuple(float(r) for r in self.lesion_radius_range)
        if self.size < 4 or self.size & (self.size - 1):
            raise ValueError(f"phantom size must be a power of two >= 4, got {self.size}")
        if len(self.brain_axes) != 3 or not all(0 < a <= 0.5 for a in self.brain_axes):
            raise ValueError(f"brain semi-axes must lie in (0, 0.5], got {self.brain_axes}")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid lesion radius range {self.lesion_radius_range}")
        if hi >= min(self.brain_axes) * (1 - self.shape_jitter):
            raise ValueError("largest lesion does not fit inside the brain ellipsoid")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.background_noise_sigma < 0 or not 0 <= self.shape_jitter < 1:
            raise ValueError("noise sigma and shape jitter must be non-negative (jitter < 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)


# --------------------------------------------------------------------------
# phantom generation


def _grid(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(c, c, c, indexing="ij")


def _brain(cfg: PhantomConfig, rng: np.random.Generator, box: bool = False):
    n = cfg.size
    axes = np.array(cfg.brain_axes) * n * (1 + rng.uniform(-cfg.shape_jitter, cfg.shape_jitter, 3))
    center = np.full(3, n / 2.0) + rng.uniform(-1.0, 1.0, 3)
    x, y, z = _grid(n)
    rel = [(x - center[0]) / axes[0], (y - center[1]) / axes[1], (z - center[2]) / axes[2]]
    if box:
        inside = (np.abs(rel[0]) <= 1) & (np.abs(rel[1]) <= 1) & (np.abs(rel[2]) <= 1)
    else:
        inside = rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2 <= 1.0
    return inside, axes, center


def _place_lesion(cfg, rng, brain_mask, axes, center, shell: bool = False):
    n = cfg.size
    x, y, z = _grid(n)
    lo, hi = cfg.lesion_radius_range
    for _ in range(100):
        r = rng.uniform(lo, hi) * n
        inner = axes - r
        if np.any(inner <= 0):
            continue
        # rejection-sample a center inside the shrunken ellipsoid
        u = rng.uniform(-1.0, 1.0, 3)
        if np.sum(u * u) > 1.0:
            continue
        c = center + u * inner
        dist = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
        lesion = dist <= r
        if shell:
            lesion &= dist >= 0.6 * r
        if lesion.any() and np.all(brain_mask[lesion]):
            return lesion
    raise ValueError("could not place a lesion inside the brain after 100 attempts")


def _render(cfg, rng, brain, lesion, baseline: float = 0.0) -> np.ndarray:
    img = np.full((cfg.size,) * 3, BACKGROUND, dtype=np.float64)
    img[brain] = BRAIN
    if lesion is not None:
        img[lesion] = BRAIN + cfg.lesion_contrast
    img += baseline
    if cfg.background_noise_sigma > 0:
        img += rng.normal(0.0, cfg.background_noise_sigma, img.shape)
    return img.astype(np.float32)


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator, sample_id: str = "phantom",
                     group: str = "TestID", baseline: float = 0.0) -> Sample:
    brain, axes, center = _brain(cfg, rng)
    lesion = _place_lesion(cfg, rng, brain, axes, center)
    img = _render(cfg, rng, brain, lesion, baseline)
    return Sample(sample_id, img, lesion.astype(np.uint8), group)


def generate_control(cfg: PhantomConfig, rng: np.random.Generator,
                     sample_id: str = "control") -> Sample:
    """ID-configured phantom with a slightly raised intensity baseline."""
    return generate_phantom(cfg, rng, sample_id, "Control", baseline=CONTROL_SHIFT)


def generate_ood_family(kind: str, cfg: PhantomConfig, rng: np.random.Generator,
                        sample_id: str | None = None) -> Sample:
    if kind not in OOD_FAMILIES:
        raise ValueError(f"unknown OOD family {kind!r}; expected one of {sorted(OOD_FAMILIES)}")
    sid = sample_id or kind
    group = f"{OOD_FAMILIES[kind]}:{kind}"
    if kind == "FarNoise":
        img = rng.normal(0.0, cfg.far_noise_sigma, (cfg.size,) * 3).astype(np.float32)
        return Sample(sid, img, None, group)
    if kind == "ModalityInverted":
        s = generate_phantom(cfg, rng, sid, group)
        img = s.image.astype(np.float64)
        return Sample(sid, (img.max() - img).astype(np.float32), s.mask, group)
    brain, axes, center = _brain(cfg, rng, box=kind == "FarGeometry")
    if kind == "DiagnosisHealthy":
        lesion = None
    else:
        lesion = _place_lesion(cfg, rng, brain, axes, center, shell=kind == "DiagnosisRing")
    img = _render(cfg, rng, brain, lesion)
    mask = np.zeros(img.shape, np.uint8) if lesion is None else lesion.astype(np.uint8)
    return Sample(sid, img, None if kind == "FarGeometry" else mask, group)


# --------------------------------------------------------------------------
# splits


def split_dataset(items: Sequence, fractions: tuple[float, float, float],
                  rng: np.random.Generator) -> tuple[list, list, list]:
    """Shuffle ``items`` and cut them into train / calibration / test folds.

    Fold sizes use the largest-remainder rule so they always sum to the
    input length.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive values summing to 1, got {fractions}")
    n = len(items)
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    if np.any(counts == 0):
        raise ValueError(f"split of {n} items by {tuple(fractions)} leaves an empty fold")
    order = rng.permutation(n)
    folds, start = [], 0
    for c in counts:
        folds.append([items[i] for i in order[start:start + c]])
        start += c
    return folds[0], folds[1], folds[2]


# --------------------------------------------------------------------------
# VTF tensor files

VTF_MAGIC = b"VTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_BYTES = 1 << 40


def write_vtf(t: np.ndarray, path: str | os.PathLike) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODES:
        if not np.issubdtype(t.dtype, np.number):
            raise TypeError(f"cannot store dtype {t.dtype}")
        t = t.astype(np.float64)
    if t.ndim > 8:
        raise RankError(f"rank {t.ndim} exceeds the VTF maximum of 8")
    header = VTF_MAGIC + struct.pack("<BBH", _CODES[t.dtype], t.ndim, 0)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def read_vtf(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise TruncatedError(f"{path}: file shorter than the VTF header")
    if data[:4] != VTF_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    code, rank, reserved = struct.unpack_from("<BBH", data, 4)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved field must be zero")
    if rank > 8:
        raise RankError(f"{path}: rank {rank} exceeds 8")
    if len(data) < 8 + 8 * rank:
        raise TruncatedError(f"{path}: truncated extent table")
    shape = struct.unpack_from(f"<{rank}Q", data, 8)
    count = 1
    for e in shape:
        count *= e
    dtype = _DTYPES[code]
    nbytes = count * dtype.itemsize
    if nbytes > _MAX_BYTES:
        raise ExtentOverflowError(f"{path}: extents {shape} overflow the payload limit")
    start = 8 + 8 * rank
    if len(data) - start < nbytes:
        raise TruncatedError(f"{path}: payload has {len(data) - start} bytes, expected {nbytes}")
    if len(data) - start > nbytes:
        raise FormatError(f"{path}: {len(data) - start - nbytes} trailing bytes after payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


# --------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str | None
    group: str


@dataclass
class DatasetManifest:
    name: str
    seed: int
    generator_config: dict = field(default_factory=dict)
    samples: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        seen = set()
        for e in self.samples:
            if e.id in seen:
                raise ManifestError(f"duplicate sample id {e.id!r} in manifest {self.name!r}")
            seen.add(e.id)
            parse_group(e.group)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_samples(self) -> Iterable[Sample]:
        for e in self.samples:
            mask = read_vtf(self.resolve(e.mask)).astype(np.uint8) if e.mask else None
            yield Sample(e.id, read_vtf(self.resolve(e.image)), mask, e.group)

    def __len__(self) -> int:
        return len(self.samples)


_REQUIRED = ("name", "seed", "generator_config", "samples")
_ENTRY_REQUIRED = ("id", "image", "group")


def save_manifest(m: DatasetManifest, path: str | os.PathLike) -> None:
    doc = {"name": m.name, "seed": int(m.seed), "generator_config": m.generator_config,
           "samples": [asdict(e) for e in m.samples]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_manifest(path: str | os.PathLike, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a JSON object")
    for key in _REQUIRED:
        if key not in doc:
            raise ManifestError(f"{path}: missing field {key!r}")
    entries = []
    for i, s in enumerate(doc["samples"]):
        for key in _ENTRY_REQUIRED:
            if key not in s:
                raise ManifestError(f"{path}: sample #{i} missing field {key!r}")
        entries.append(ManifestEntry(str(s["id"]), s["image"], s.get("mask"), s["group"]))
    m = DatasetManifest(doc["name"], int(doc["seed"]), doc["generator_config"], entries, root=path.parent)
    if check_paths:
        for e in m.samples:
            for rel in (e.image, e.mask):
                if rel and not m.resolve(rel).is_file():
                    raise ManifestError(f"{path}: sample {e.id!r} references missing file {rel}")
    return m


def write_dataset(samples: Sequence[Sample], out_dir: str | os.PathLike, name: str, seed: int,
                  generator_config: dict | None = None) -> DatasetManifest:
    """Write samples as VTF files under ``out_dir`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        write_vtf(s.image, out / f"{s.id}.vtf")
        mask_rel = None
        if s.mask is not None:
            mask_rel = f"{s.id}.mask.vtf"
            write_vtf(s.mask.astype(np.float32), out / mask_rel)
        entries.append(ManifestEntry(s.id, f"{s.id}.vtf", mask_rel, s.group))
    m = DatasetManifest(name, seed, generator_config or {}, entries, root=out)
    save_manifest(m, out / "manifest.json")
    return m


def generate_samples(kind: str, count: int, cfg: PhantomConfig, seed: int,
                     prefix: str | None = None, group: str = "TestID") -> list[Sample]:
    """``count`` samples of one kind (``ID``, ``Control`` or an OOD family)."""
    out = []
    prefix = prefix or kind.lower()
    for i in range(count):
        rng = make_rng(derive_seed(seed, kind, i))
        sid = f"{prefix}-{i:04d}"
        if kind == "ID":
            out.append(generate_phantom(cfg, rng, sid, group))
        elif kind == "Control":
            out.append(generate_control(cfg, rng, sid))
        else:
            out.append(generate_ood_family(kind, cfg, rng, sid))
    return out
