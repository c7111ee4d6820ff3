"""Calibrated detectors: construction, scoring and on-disk persistence.

A saved detector is a directory holding ``detector.json`` (kind, layer
selection, checkpoint fingerprint, hyperparameters, array index) and one
VTF file per array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..errors import FingerprintMismatchError, FormatError
from ..numerics import DEFAULT_SHRINKAGE, GaussianModel
from ..volumes import read_vtf, write_vtf
from .common import FeatureStack, resolve_layers
from .gaussian import (FrodoModel, MdPoolModel, fit_frodo, fit_mdpool, frodo_layer_scores,
                       mdpool_layer_scores)
from .ocsvm import OcsvmLayer, OcsvmModel, fit_ocsvm, ocsvm_layer_scores
from .prototypes import PrototypeModel, fit_prototypes, prototype_layer_scores
from .spectrum import SpectrumModel, fit_spectrum, spectrum_layer_scores
from .common import aggregate_multi

FORMAT_VERSION = 1
KINDS = ("spectrum", "prototypes", "mdpool", "frodo", "ocsvm")


@dataclass(frozen=True)
class DetectorSpec:
    """A benchmark column: detector family plus layer selection."""

    name: str
    kind: str
    selection: str


# the Table-2 column set
STANDARD_DETECTORS = (
    DetectorSpec("Spectrum-S", "spectrum", "penultimate"),
    DetectorSpec("Spectrum-M", "spectrum", "all"),
    DetectorSpec("Prototypes-S", "prototypes", "penultimate"),
    DetectorSpec("Prototypes-M", "prototypes", "all"),
    DetectorSpec("MDPool-S", "mdpool", "encoder_end"),
    DetectorSpec("MDPool-M", "mdpool", "all"),
    DetectorSpec("FRODO", "frodo", "all"),
    DetectorSpec("OCSVM", "ocsvm", "all"),
)


@dataclass
class FittedDetector:
    name: str
    kind: str
    selection: str
    layers: list[str]
    model: Any
    fingerprint: str
    hyper: dict = field(default_factory=dict)

    @property
    def needs_mask(self) -> bool:
        return self.kind == "prototypes"

    def check_fingerprint(self, fingerprint: str | None) -> None:
        if fingerprint is not None and fingerprint != self.fingerprint:
            raise FingerprintMismatchError(self.fingerprint, fingerprint, f"detector {self.name!r} checkpoint")

    def layer_scores(self, stack: FeatureStack, mask: np.ndarray | None = None) -> list[float]:
        if self.kind == "spectrum":
            return spectrum_layer_scores(self.model, stack)
        if self.kind == "prototypes":
            if mask is None:
                raise ValueError("prototype scoring needs the predicted mask")
            return prototype_layer_scores(self.model, stack, mask)
        if self.kind == "mdpool":
            return mdpool_layer_scores(self.model, stack)
        if self.kind == "frodo":
            return frodo_layer_scores(self.model, stack)
        return ocsvm_layer_scores(self.model, stack)

    def score(self, stack: FeatureStack, mask: np.ndarray | None = None,
              fingerprint: str | None = None) -> float:
        self.check_fingerprint(fingerprint)
        per_layer = self.layer_scores(stack, mask)
        # OCSVM keeps its own max rule; every other family averages layers
        return max(per_layer) if self.kind == "ocsvm" else aggregate_multi(per_layer)


def fit_detector(spec: DetectorSpec, net, stacks: Sequence[FeatureStack],
                 masks: Sequence[np.ndarray] | None = None, fingerprint: str = "",
                 shrinkage: float = DEFAULT_SHRINKAGE, nu: float = 0.1,
                 gamma: float | None = None) -> FittedDetector:
    """Fit one detector on calibration feature stacks.

    FRODO and OCSVM always use every conv layer; the other families follow
    ``spec.selection``.
    """
    if spec.kind not in KINDS:
        raise ValueError(f"unknown detector kind {spec.kind!r}; expected one of {KINDS}")
    selection = "all" if spec.kind in ("frodo", "ocsvm") else spec.selection
    layers = resolve_layers(selection, net)
    hyper: dict = {}
    if spec.kind == "spectrum":
        model = fit_spectrum(stacks, layers)
    elif spec.kind == "prototypes":
        if masks is None:
            raise ValueError("prototype fitting needs predicted calibration masks")
        classes = net.cfg.classes if hasattr(net, "cfg") else 2
        model = fit_prototypes(stacks, masks, layers, classes)
        hyper["classes"] = classes
    elif spec.kind == "mdpool":
        model = fit_mdpool(stacks, layers, shrinkage)
        hyper["shrinkage"] = shrinkage
    elif spec.kind == "frodo":
        model = fit_frodo(stacks, layers, shrinkage)
        hyper["shrinkage"] = shrinkage
    else:
        model = fit_ocsvm(stacks, layers, nu, gamma)
        hyper.update(nu=nu, gamma=gamma)
    return FittedDetector(spec.name, spec.kind, selection, layers, model, fingerprint, hyper)


# --------------------------------------------------------------------------
# persistence


def _gaussian_arrays(prefix: str, g: GaussianModel, arrays: dict) -> dict:
    arrays[f"{prefix}.mean"] = g.mean
    arrays[f"{prefix}.chol"] = g.chol
    if g.basis is not None:
        arrays[f"{prefix}.basis"] = g.basis
    else:
        arrays[f"{prefix}.cov"] = g.cov
    return {"ridge": g.ridge, "lowrank": g.basis is not None}


def _gaussian_from(prefix: str, meta: dict, arrays: dict) -> GaussianModel:
    if meta["lowrank"]:
        return GaussianModel(arrays[f"{prefix}.mean"], meta["ridge"], arrays[f"{prefix}.chol"],
                             basis=arrays[f"{prefix}.basis"])
    return GaussianModel(arrays[f"{prefix}.mean"], meta["ridge"], arrays[f"{prefix}.chol"],
                         cov=arrays[f"{prefix}.cov"])


def _to_state(det: FittedDetector) -> tuple[dict, dict[str, np.ndarray]]:
    arrays: dict[str, np.ndarray] = {}
    per_layer: dict[str, dict] = {}
    m = det.model
    for i, l in enumerate(det.layers):
        key = f"L{i}"
        meta: dict = {}
        if det.kind == "spectrum":
            arrays[f"{key}.signatures"] = m.signatures[l]
        elif det.kind == "prototypes":
            arrays[f"{key}.prototype"] = m.prototypes[l]
            arrays[f"{key}.counts"] = m.counts[l].astype(np.float64)
        elif det.kind == "mdpool":
            meta = _gaussian_arrays(key, m.gaussians[l], arrays)
            meta["pool_steps"] = m.pool_steps[l]
        elif det.kind == "frodo":
            meta = _gaussian_arrays(key, m.gaussians[l], arrays)
        else:
            svm: OcsvmLayer = m.machines[l]
            for attr in ("alpha", "support", "mean", "std"):
                arrays[f"{key}.{attr}"] = getattr(svm, attr)
            arrays[f"{key}.active"] = svm.active.astype(np.float64)
            meta = {"rho": svm.rho, "gamma": svm.gamma, "nu": svm.nu, "iterations": svm.iterations}
        per_layer[l] = {"key": key, **meta}
    header = {"version": FORMAT_VERSION, "name": det.name, "kind": det.kind,
              "selection": det.selection, "layers": det.layers, "fingerprint": det.fingerprint,
              "hyper": det.hyper, "per_layer": per_layer,
              "threshold": getattr(m, "threshold", None), "classes": getattr(m, "classes", None)}
    return header, arrays


def save_detector(det: FittedDetector, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header, arrays = _to_state(det)
    header["arrays"] = {}
    for name, arr in arrays.items():
        fname = f"{name}.vtf"
        write_vtf(np.asarray(arr, dtype=np.float64), path / fname)
        header["arrays"][name] = fname
    (path / "detector.json").write_text(json.dumps(header, indent=2, sort_keys=True))


def load_detector(path: str | Path) -> FittedDetector:
    path = Path(path)
    try:
        header = json.loads((path / "detector.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable detector header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported detector format version {header.get('version')}")
    arrays = {name: read_vtf(path / fname) for name, fname in header["arrays"].items()}
    kind, layers = header["kind"], header["layers"]
    per = header["per_layer"]
    if kind == "spectrum":
        model = SpectrumModel(layers, {l: arrays[f"{per[l]['key']}.signatures"] for l in layers})
    elif kind == "prototypes":
        model = PrototypeModel(layers, header["classes"],
                               {l: arrays[f"{per[l]['key']}.prototype"] for l in layers},
                               {l: arrays[f"{per[l]['key']}.counts"].astype(np.int64) for l in layers})
    elif kind == "mdpool":
        model = MdPoolModel(layers, {l: _gaussian_from(per[l]["key"], per[l], arrays) for l in layers},
                            {l: per[l]["pool_steps"] for l in layers}, header["threshold"])
    elif kind == "frodo":
        model = FrodoModel(layers, {l: _gaussian_from(per[l]["key"], per[l], arrays) for l in layers})
    elif kind == "ocsvm":
        machines = {}
        for l in layers:
            k, meta = per[l]["key"], per[l]
            machines[l] = OcsvmLayer(arrays[f"{k}.alpha"], arrays[f"{k}.support"], meta["rho"],
                                     meta["gamma"], meta["nu"], arrays[f"{k}.mean"],
                                     arrays[f"{k}.std"], arrays[f"{k}.active"] > 0.5,
                                     meta["iterations"])
        model = OcsvmModel(layers, machines)
    else:
        raise FormatError(f"{path}: unknown detector kind {kind!r}")
    return FittedDetector(header["name"], kind, header["selection"], layers, model,
                          header["fingerprint"], header["hyper"])
