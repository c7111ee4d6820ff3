"""Benchmark configuration: an INI file with sections ``[data]``, ``[net]``,
``[train]``, ``[corruptions]``, ``[detectors]`` and ``[eval]``.

Every key has a default (see ``default.cfg`` next to this module), so a
config file only needs the keys it changes. Unknown sections or keys are
rejected to catch typos.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

from ..corruptions import KINDS as CORRUPTION_KINDS
from ..detectors import STANDARD_DETECTORS
from ..segnet import NetConfig, TrainConfig
from ..volumes import OOD_FAMILIES, PhantomConfig

MC_NAME = "MC"
ADVERSARIAL = "Adversarial"
DETECTOR_NAMES = tuple(d.name for d in STANDARD_DETECTORS) + (MC_NAME,)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 7
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    n_train: int = 200
    n_calibration: int = 50
    n_test: int = 100
    n_validation: int = 20
    n_control: int = 40
    n_per_family: int = 40
    families: tuple[str, ...] = tuple(OOD_FAMILIES)


@dataclass
class CorruptionConfig:
    seed: int = 7
    strengths: dict[str, float] = field(default_factory=dict)
    adversarial_epsilon: float | None = 0.05


@dataclass
class DetectorConfig:
    enabled: tuple[str, ...] = DETECTOR_NAMES
    shrinkage: float = 1e-3
    nu: float = 0.1


@dataclass
class EvalConfig:
    seed: int = 7
    mc_samples: int = 20


@dataclass
class BenchConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    checkpoint: str | None = None
    corruptions: CorruptionConfig = field(default_factory=CorruptionConfig)
    detectors: DetectorConfig = field(default_factory=DetectorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "BenchConfig":
        """Copy with every seed replaced by ``seed``."""
        return replace(self, data=replace(self.data, seed=seed),
                       train=replace(self.train, seed=seed),
                       corruptions=replace(self.corruptions, seed=seed),
                       eval=replace(self.eval, seed=seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["phantom"] = asdict(self.data.phantom)
        return d


# --------------------------------------------------------------------------
# parsing


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.replace("\n", ",").split(",") if v.strip())


_DATA_KEYS = {
    "seed": int, "train": int, "calibration": int, "test": int, "validation": int,
    "control": int, "per_family": int, "families": _names,
    "size": int, "brain_axes": _floats, "lesion_radius_range": _floats,
    "lesion_contrast": float, "noise_sigma": float, "shape_jitter": float,
    "far_noise_sigma": float,
}
_NET_KEYS = {"channels": _ints, "levels": int, "kernel": int, "dropout_rate": float,
             "norm_eps": float, "classes": int, "variant": str}
_TRAIN_KEYS = {"learning_rate": float, "epochs": int, "seed": int, "checkpoint": str}
_DETECTOR_KEYS = {"enabled": _names, "shrinkage": float, "nu": float}
_EVAL_KEYS = {"seed": int, "mc_samples": int}
_SECTIONS = {"data": _DATA_KEYS, "net": _NET_KEYS, "train": _TRAIN_KEYS,
             "corruptions": None, "detectors": _DETECTOR_KEYS, "eval": _EVAL_KEYS}


def _read_section(parser, name, keys) -> dict:
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"[{name}] unknown key {key!r}; expected one of {sorted(keys)}")
        try:
            out[key] = keys[key](raw)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from exc
    return out


def parse_config(text: str, base: BenchConfig | None = None) -> BenchConfig:
    """Overlay the INI ``text`` on ``base`` (built-in defaults if omitted)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str.lower
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]; expected one of {sorted(_SECTIONS)}")
    cfg = base or BenchConfig()
    try:
        d = _read_section(parser, "data", _DATA_KEYS)
        ph = {k: d.pop(k) for k in ("size", "brain_axes", "lesion_radius_range", "lesion_contrast",
                                    "shape_jitter", "far_noise_sigma") if k in d}
        if "noise_sigma" in d:
            ph["background_noise_sigma"] = d.pop("noise_sigma")
        renames = {"train": "n_train", "calibration": "n_calibration", "test": "n_test",
                   "validation": "n_validation", "control": "n_control", "per_family": "n_per_family"}
        data = replace(cfg.data, phantom=replace(cfg.data.phantom, **ph),
                       **{renames.get(k, k): v for k, v in d.items()})
        bad = set(data.families) - set(OOD_FAMILIES)
        if bad:
            raise ConfigError(f"[data] unknown families {sorted(bad)}; expected {sorted(OOD_FAMILIES)}")

        net_kw = _read_section(parser, "net", _NET_KEYS)
        if "channels" in net_kw and "levels" not in net_kw:
            net_kw["levels"] = len(net_kw["channels"])
        net = replace(cfg.net, **net_kw)

        t = _read_section(parser, "train", _TRAIN_KEYS)
        checkpoint = t.pop("checkpoint", cfg.checkpoint) or None
        train = replace(cfg.train, **t)

        corr = cfg.corruptions
        if parser.has_section("corruptions"):
            strengths = dict(corr.strengths)
            seed, eps = corr.seed, corr.adversarial_epsilon
            for key, raw in parser.items("corruptions"):
                if key == "seed":
                    seed = int(raw)
                    continue
                kind = next((k for k in CORRUPTION_KINDS + (ADVERSARIAL,) if k.lower() == key), None)
                if kind is None:
                    raise ConfigError(f"[corruptions] unknown kind {key!r}; expected one of "
                                      f"{list(CORRUPTION_KINDS) + [ADVERSARIAL]} or 'seed'")
                value = None if raw.strip().lower() in ("off", "none", "") else float(raw)
                if kind == ADVERSARIAL:
                    eps = value
                elif value is None:
                    strengths.pop(kind, None)
                else:
                    strengths[kind] = value
            corr = CorruptionConfig(seed, strengths, eps)

        det = replace(cfg.detectors, **_read_section(parser, "detectors", _DETECTOR_KEYS))
        bad = set(det.enabled) - set(DETECTOR_NAMES)
        if bad:
            raise ConfigError(f"[detectors] unknown detectors {sorted(bad)}; "
                              f"expected names from {list(DETECTOR_NAMES)}")
        ev = replace(cfg.eval, **_read_section(parser, "eval", _EVAL_KEYS))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return BenchConfig(data, net, train, checkpoint, corr, det, ev)


def default_config_text() -> str:
    return resources.files("featood.bench").joinpath("default.cfg").read_text()


def default_config() -> BenchConfig:
    return parse_config(default_config_text())


def load_config(path: str | Path | None = None) -> BenchConfig:
    """The shipped defaults overlaid with the file at ``path`` (if any).

    A relative ``checkpoint`` path resolves against the config file's
    directory.
    """
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, cfg)
    if cfg.checkpoint and not Path(cfg.checkpoint).is_absolute():
        cfg.checkpoint = str(path.parent / cfg.checkpoint)
    return cfg
