"""End-to-end benchmark: data, network, detector calibration, scoring and
the per-dataset / per-group AUROC report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from ..corruptions import KINDS as CORRUPTION_KINDS
from ..corruptions import corruption_suite
from ..detectors import STANDARD_DETECTORS, FittedDetector, fit_detector
from ..errors import FeatoodError, StageError
from ..metrics import auroc, dice_score
from ..numerics import derive_seed, make_rng
from ..segnet import (fgsm_attack, fingerprint, load_checkpoint, mc_dropout_score, mean_dice,
                      predict, save_checkpoint, train)
from ..volumes import Sample, generate_samples, group_family, split_dataset
from .config import ADVERSARIAL, MC_NAME, BenchConfig

log = logging.getLogger(__name__)

REFERENCE = "TestID"
GROUP_ORDER = ("Transform", "Diagnosis", "Modality", "FarOOD")
OVERALL = "Overall"


# --------------------------------------------------------------------------
# score table


@dataclass
class SampleScores:
    sample_id: str
    group: str
    scores: dict[str, float]
    dice: float | None = None


@dataclass
class ScoreTable:
    """Per-sample detector scores plus provenance.

    Stored as JSON lines: a provenance header followed by one line per
    sample, appended as scoring proceeds so an interrupted run can resume.
    """

    provenance: dict = field(default_factory=dict)
    samples: list[SampleScores] = field(default_factory=list)

    def __post_init__(self):
        self._index = {}
        for s in self.samples:
            self._check_new(s)
            self._index[s.sample_id] = s

    def _check_new(self, s: SampleScores) -> None:
        if s.sample_id in getattr(self, "_index", {}):
            raise ValueError(f"duplicate sample id {s.sample_id!r} in score table")
        bad = [k for k, v in s.scores.items() if not math.isfinite(v)]
        if bad:
            raise ValueError(f"sample {s.sample_id!r}: non-finite scores for {bad}")

    def add(self, s: SampleScores) -> None:
        self._check_new(s)
        self.samples.append(s)
        self._index[s.sample_id] = s

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._index

    def rows(self) -> Iterator[tuple[str, str, str, float]]:
        """Flat ``(sample_id, group, detector, score)`` rows."""
        for s in self.samples:
            for det, v in s.scores.items():
                yield s.sample_id, s.group, det, v

    def groups(self) -> list[str]:
        return list(dict.fromkeys(s.group for s in self.samples))

    def select(self, groups: Iterable[str]) -> list[SampleScores]:
        wanted = set(groups)
        return [s for s in self.samples if s.group in wanted]

    def scores(self, groups: Iterable[str], detector: str) -> np.ndarray:
        return np.array([s.scores[detector] for s in self.select(groups)], dtype=np.float64)

    # -- persistence --------------------------------------------------------
    @staticmethod
    def _line(obj) -> str:
        return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write(self._line({"provenance": self.provenance}))
            for s in self.samples:
                fh.write(self._line(asdict(s)))

    def append_to(self, path: str | Path, s: SampleScores) -> None:
        with open(path, "a") as fh:
            fh.write(self._line(asdict(s)))

    @classmethod
    def load(cls, path: str | Path) -> "ScoreTable":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"{path}: empty score table")
        try:
            head = json.loads(lines[0])["provenance"]
            samples = []
            for i, line in enumerate(lines[1:], 2):
                try:
                    samples.append(SampleScores(**json.loads(line)))
                except json.JSONDecodeError:
                    # a torn final line from an interrupted run is dropped
                    if i != len(lines):
                        raise
                    log.warning("%s: dropping incomplete final line", path)
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: malformed score table: {exc}") from exc
        return cls(head, samples)


# --------------------------------------------------------------------------
# report


@dataclass
class ReportRow:
    name: str
    kind: str  # reference, dataset, group, overall
    n: int
    dice: float | None
    auroc: dict[str, float]


@dataclass
class EvalReport:
    detectors: list[str]
    rows: list[ReportRow]
    metadata: dict = field(default_factory=dict)

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"detectors": list(self.detectors), "rows": [asdict(r) for r in self.rows],
                "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(list(d["detectors"]), [ReportRow(**r) for r in d["rows"]], d.get("metadata", {}))


def _mean_dice(samples: Sequence[SampleScores]) -> float | None:
    vals = [s.dice for s in samples if s.dice is not None]
    return float(np.mean(vals)) if vals else None


def _ordered_groups(groups: Iterable[str]) -> list[str]:
    def key(g):
        fam = group_family(g)
        return GROUP_ORDER.index(fam) if fam in GROUP_ORDER else -1
    return sorted([g for g in groups if group_family(g) in GROUP_ORDER], key=key)


def build_report(table: ScoreTable, detectors: Sequence[str], metadata: dict | None = None) -> EvalReport:
    """Compute every AUROC row from a score table.

    Each OOD dataset is scored against the Test-ID set; group rows and the
    Overall row pool all their samples against the same Test-ID scores.
    Control is reported as its own dataset and kept out of the pools.
    """
    ref = table.select([REFERENCE])
    if not ref:
        raise ValueError("score table has no Test-ID samples to compare against")
    ref_scores = {d: table.scores([REFERENCE], d) for d in detectors}

    def row(name, kind, groups):
        members = table.select(groups)
        aur = {d: auroc(ref_scores[d], table.scores(groups, d)) for d in detectors} if kind != "reference" else {}
        return ReportRow(name, kind, len(members), _mean_dice(members), aur)

    rows = [row(REFERENCE, "reference", [REFERENCE])]
    present = table.groups()
    if "Control" in present:
        rows.append(row("Control", "dataset", ["Control"]))
    ood = _ordered_groups(present)
    for fam in GROUP_ORDER:
        members = [g for g in ood if group_family(g) == fam]
        if not members:
            continue
        rows.append(row(fam, "group", members))
        rows.extend(row(g.split(":", 1)[1], "dataset", [g]) for g in members)
    if ood:
        rows.append(row(OVERALL, "overall", ood))
    return EvalReport(list(detectors), rows, dict(metadata or {}))


# --------------------------------------------------------------------------
# pipeline


@dataclass
class Datasets:
    train: list[Sample]
    calibration: list[Sample]
    test: list[Sample]
    validation: list[Sample]
    control: list[Sample]
    families: dict[str, list[Sample]]


def build_datasets(cfg: BenchConfig) -> Datasets:
    d = cfg.data
    pool = generate_samples("ID", d.n_train + d.n_calibration + d.n_test, d.phantom, d.seed, "id")
    total = len(pool)
    fr = (d.n_train / total, d.n_calibration / total, d.n_test / total)
    tr, cal, te = split_dataset(pool, fr, make_rng(derive_seed(d.seed, "split")))
    relabel = lambda xs, g: [Sample(s.id, s.image, s.mask, g) for s in xs]
    val = generate_samples("ID", d.n_validation, d.phantom, derive_seed(d.seed, "validation"), "val",
                           group="Validation")
    control = generate_samples("Control", d.n_control, d.phantom, d.seed, "control")
    fams = {k: generate_samples(k, d.n_per_family, d.phantom, d.seed) for k in d.families}
    return Datasets(relabel(tr, "Train"), relabel(cal, "Calibration"), relabel(te, REFERENCE),
                    val, control, fams)


def _stage(name: str, sample_id: str | None = None):
    class _Guard:
        def __enter__(self):
            return self

        def __exit__(self, et, ev, tb):
            if ev is not None and not isinstance(ev, (StageError, KeyboardInterrupt)):
                raise StageError(name, sample_id, ev) from ev
            return False
    return _Guard()


def _evaluation_sets(cfg: BenchConfig, data: Datasets, net) -> Iterator[tuple[str, Callable[[], list[Sample]]]]:
    """Dataset name plus a lazy builder, in report order."""
    yield REFERENCE, lambda: data.test
    if data.control:
        yield "Control", lambda: data.control
    strengths = cfg.corruptions.strengths
    for kind in CORRUPTION_KINDS:
        if kind in strengths:
            yield f"Transform:{kind}", (lambda k=kind: corruption_suite(
                data.test, {k: strengths[k]}, cfg.corruptions.seed)[k])
    eps = cfg.corruptions.adversarial_epsilon
    if eps is not None:
        def adversarial():
            return [Sample(f"{s.id}-adversarial", fgsm_attack(net, s.image, eps), s.mask,
                           f"Transform:{ADVERSARIAL}") for s in data.test]
        yield f"Transform:{ADVERSARIAL}", adversarial
    for kind, samples in data.families.items():
        yield samples[0].group if samples else kind, (lambda xs=samples: xs)


def mc_seed(cfg: BenchConfig) -> int:
    """Dropout seed shared by every sample.

    With a few channels per layer, which channels a pass drops moves the MC
    variance more than the input does; fixing the masks across samples
    (common random numbers) leaves only the input-driven differences.
    """
    return derive_seed(cfg.eval.seed, "mc")


def score_sample(sample: Sample, net, detectors: Sequence[FittedDetector], mc_samples: int | None,
                 mc_seed: int) -> SampleScores:
    mask, feats = predict(net, sample.image)
    scores = {det.name: det.score(feats, mask) for det in detectors}
    if mc_samples:
        scores[MC_NAME] = mc_dropout_score(net, sample.image, mc_samples, mc_seed)
    dice = dice_score(mask, sample.mask) if sample.mask is not None else None
    return SampleScores(sample.id, sample.group, scores, dice)


def fit_all(cfg: BenchConfig, net, calibration: Sequence[Sample]) -> list[FittedDetector]:
    specs = [s for s in STANDARD_DETECTORS if s.name in cfg.detectors.enabled]
    stacks, masks = [], []
    for s in calibration:
        with _stage("calibration features", s.id):
            m, f = predict(net, s.image)
        stacks.append(f)
        masks.append(m)
    fp = fingerprint(net)
    out = []
    for spec in specs:
        with _stage(f"fit {spec.name}"):
            out.append(fit_detector(spec, net, stacks, masks, fp, cfg.detectors.shrinkage,
                                    cfg.detectors.nu))
    return out


def obtain_net(cfg: BenchConfig, data: Datasets, checkpoint_out: Path | None = None,
               progress=None):
    """Load ``cfg.checkpoint`` or train a fresh net. Returns ``(net, train_log)``."""
    if cfg.checkpoint:
        with _stage("load checkpoint"):
            return load_checkpoint(cfg.checkpoint), None
    with _stage("train"):
        net, tlog = train(data.train, data.validation, cfg.net, cfg.train, progress)
    if checkpoint_out is not None:
        save_checkpoint(net, checkpoint_out, cfg.train.seed)
    return net, tlog


def run_benchmark(cfg: BenchConfig, out_dir: str | Path | None = None, net=None,
                  progress: Callable[[str], None] | None = None) -> EvalReport:
    """Run the whole pipeline and return the report.

    With ``out_dir`` the score table is persisted as ``scores.jsonl`` after
    every sample (and reused on a rerun with the same provenance) and a
    freshly trained checkpoint is saved under ``checkpoint/``. ``net``
    short-circuits loading/training.
    """
    if not cfg.detectors.enabled:
        raise ValueError("no detectors enabled; enable at least one in [detectors]")
    say = progress or (lambda msg: log.info("%s", msg))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    with _stage("data"):
        data = build_datasets(cfg)
    say(f"data: {len(data.train)} train, {len(data.calibration)} calibration, {len(data.test)} test")
    if net is None:
        net, _ = obtain_net(cfg, data, None if out is None else out / "checkpoint",
                            lambda e: say(f"epoch {e.epoch}: loss {e.train_loss:.4f}, "
                                          f"val dice {e.val_dice:.4f}"))
    fp = fingerprint(net)
    with _stage("validation dice"):
        val_dice = mean_dice(net, data.validation)
    detectors = fit_all(cfg, net, data.calibration)
    names = [d.name for d in detectors]
    mc = cfg.eval.mc_samples if MC_NAME in cfg.detectors.enabled else None
    if mc:
        names.append(MC_NAME)

    # the net is identified by its fingerprint, not by where it came from
    run_cfg = cfg.to_dict()
    run_cfg.pop("checkpoint")
    run_cfg.pop("train")
    provenance = {"fingerprint": fp, "config": run_cfg, "detectors": names, "mc_seed": mc_seed(cfg)}
    table = ScoreTable(provenance)
    table_path = None if out is None else out / "scores.jsonl"
    if table_path is not None:
        if table_path.exists():
            try:
                old = ScoreTable.load(table_path)
            except ValueError:
                old = None
            if old is not None and json.dumps(old.provenance, sort_keys=True) == json.dumps(provenance, sort_keys=True):
                table = old
                say(f"resuming: {len(table.samples)} samples already scored")
        table.save(table_path)

    for name, build in _evaluation_sets(cfg, data, net):
        with _stage(f"build {name}"):
            samples = build()
        todo = [s for s in samples if s.id not in table]
        say(f"scoring {name}: {len(todo)} of {len(samples)} samples")
        for s in todo:
            with _stage(f"score {name}", s.id):
                row = score_sample(s, net, detectors, mc, mc_seed(cfg))
            table.add(row)
            if table_path is not None:
                table.append_to(table_path, row)

    metadata = {
        "fingerprint": fp,
        "validation_dice": val_dice,
        "seeds": {"data": cfg.data.seed, "train": cfg.train.seed,
                  "corruptions": cfg.corruptions.seed, "eval": cfg.eval.seed},
        "net": cfg.to_dict()["net"],
        "corruption_strengths": dict(sorted(cfg.corruptions.strengths.items())),
        "adversarial_epsilon": cfg.corruptions.adversarial_epsilon,
        "checkpoint": "loaded" if cfg.checkpoint else "trained",
    }
    with _stage("report"):
        return build_report(table, names, metadata)
