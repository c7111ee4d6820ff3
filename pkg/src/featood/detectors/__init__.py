"""Feature-based OOD detectors in single-layer and multi-layer variants."""

from .common import (SELECTIONS, aggregate_multi, channel_means, pool_until, resolve_layers)
from .fitted import (STANDARD_DETECTORS, DetectorSpec, FittedDetector, fit_detector,
                     load_detector, save_detector)
from .gaussian import FrodoModel, MdPoolModel, fit_frodo, fit_mdpool, score_frodo, score_mdpool
from .ocsvm import OcsvmModel, fit_ocsvm, ocsvm_train, score_ocsvm
from .prototypes import PrototypeModel, compute_prototype, fit_prototypes, score_prototypes
from .spectrum import SpectrumModel, fit_spectrum, score_spectrum, spectral_signature

__all__ = [
    "SELECTIONS", "STANDARD_DETECTORS", "DetectorSpec", "FittedDetector", "FrodoModel",
    "MdPoolModel", "OcsvmModel", "PrototypeModel", "SpectrumModel", "aggregate_multi",
    "channel_means", "compute_prototype", "fit_detector", "fit_frodo", "fit_mdpool",
    "fit_ocsvm", "fit_prototypes", "fit_spectrum", "load_detector", "ocsvm_train",
    "pool_until", "resolve_layers", "save_detector", "score_frodo", "score_mdpool",
    "score_ocsvm", "score_prototypes", "score_spectrum", "spectral_signature",
]
