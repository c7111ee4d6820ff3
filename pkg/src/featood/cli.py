"""Command-line interface.

Subcommands mirror the pipeline stages; ``bench`` runs them all. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .bench import benchmark as bm
from .bench.config import MC_NAME, BenchConfig, ConfigError, load_config
from .bench.report import FORMATS, emit_report, load_report, render, to_json
from .corruptions import corruption_suite
from .detectors import STANDARD_DETECTORS, fit_detector, load_detector, save_detector
from .errors import FeatoodError
from .segnet import (fingerprint, load_checkpoint, mc_dropout_score, predict, save_checkpoint, train)
from .volumes import load_manifest, write_dataset

log = logging.getLogger("featood")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="override every seed in the config")
    p.add_argument("--config", default=d, help="INI config overlaid on the shipped defaults")
    p.add_argument("--out", default=d, help="output directory (default: current directory)")
    p.add_argument("--threads", type=int, default=d, help="torch intra-op threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featood", description="Feature-based OOD detection benchmark for 3D segmentation.")
    _common(parser, False)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        _common(p, True)
        return p

    add("gen-data", "generate phantom datasets (ID folds, control, OOD families)")
    p = add("corrupt", "apply the corruption suite to a manifest")
    p.add_argument("--manifest", required=True)
    p = add("train", "train the segmentation network")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p = add("fit", "fit detectors on a calibration manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="calibration manifest")
    p.add_argument("--expect-fingerprint", help="refuse to fit unless the checkpoint has this fingerprint")
    p = add("score", "score a manifest with fitted detectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--detectors", required=True, help="directory written by fit")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mc", action="store_true", help="also compute the MC-dropout score")
    add("bench", "run the full benchmark and write report.{json,csv,md}")
    p = add("report", "re-render a stored report")
    p.add_argument("report", help="report.json from bench")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    return parser


# --------------------------------------------------------------------------
# subcommands


def _config(args) -> BenchConfig:
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    data = bm.build_datasets(cfg)
    out = _out(args)
    gcfg = asdict(cfg.data.phantom)
    for name, samples in [("train", data.train), ("calibration", data.calibration),
                          ("test", data.test), ("validation", data.validation),
                          ("control", data.control)] + sorted(data.families.items()):
        write_dataset(samples, out / name, name, cfg.data.seed, gcfg)
        print(f"{name}: {len(samples)} samples -> {out / name}")


def cmd_corrupt(args) -> None:
    cfg = _config(args)
    samples = list(load_manifest(args.manifest).load_samples())
    made = corruption_suite(samples, cfg.corruptions.strengths, cfg.corruptions.seed, _out(args))
    for kind, xs in made.items():
        print(f"{kind}: {len(xs)} samples")


def cmd_train(args) -> None:
    cfg = _config(args)
    data = Path(args.data)
    tr = list(load_manifest(data / "train" / "manifest.json").load_samples())
    va = list(load_manifest(data / "validation" / "manifest.json").load_samples())
    net, tlog = train(tr, va, cfg.net, cfg.train,
                      lambda e: print(f"epoch {e.epoch}: loss {e.train_loss:.4f} "
                                      f"val dice {e.val_dice:.4f} ({e.seconds:.1f}s)", flush=True))
    out = _out(args) / "checkpoint"
    fp = save_checkpoint(net, out, cfg.train.seed,
                         {"val_dice": tlog.final_val_dice, "initial_loss": tlog.initial_loss})
    print(f"checkpoint {out} fingerprint {fp}")


def cmd_fit(args) -> None:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    fp = fingerprint(net)
    if args.expect_fingerprint and args.expect_fingerprint != fp:
        from .errors import FingerprintMismatchError
        raise FingerprintMismatchError(args.expect_fingerprint, fp)
    samples = list(load_manifest(args.manifest).load_samples())
    dets = bm.fit_all(cfg, net, samples)
    out = _out(args) / "detectors"
    for d in dets:
        save_detector(d, out / d.name)
        print(f"{d.name}: layers {', '.join(d.layers)}")


def cmd_score(args) -> None:
    cfg = _config(args)
    net = load_checkpoint(args.checkpoint)
    fp = fingerprint(net)
    root = Path(args.detectors)
    dets = [load_detector(p) for p in sorted(root.iterdir()) if (p / "detector.json").is_file()]
    if not dets:
        raise FileNotFoundError(f"no fitted detectors under {root}")
    for d in dets:
        d.check_fingerprint(fp)
    names = [d.name for d in dets] + ([MC_NAME] if args.mc else [])
    out = _out(args) / "scores.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "group", "detector", "score"])
        for s in load_manifest(args.manifest).load_samples():
            row = bm.score_sample(s, net, dets, cfg.eval.mc_samples if args.mc else None,
                                  bm.mc_seed(cfg))
            for det in names:
                w.writerow([row.sample_id, row.group, det, repr(row.scores[det])])
    print(f"scores -> {out}")


def cmd_bench(args) -> None:
    cfg = _config(args)
    out = _out(args)
    report = bm.run_benchmark(cfg, out, progress=lambda m: print(m, flush=True))
    emit_report(report, "json", out / "report.json")
    emit_report(report, "csv", out / "report.csv")
    md = emit_report(report, "markdown", out / "report.md")
    print(md, end="")


def cmd_report(args) -> None:
    report = load_report(args.report)
    text = render(report, args.format)
    if args.out:
        suffix = {"json": "json", "csv": "csv", "markdown": "md"}[args.format]
        emit_report(report, args.format, _out(args) / f"report.{suffix}")
    print(text, end="")


COMMANDS = {"gen-data": cmd_gen_data, "corrupt": cmd_corrupt, "train": cmd_train, "fit": cmd_fit,
            "score": cmd_score, "bench": cmd_bench, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("featood: error: --threads must be >= 1", file=sys.stderr)
            return 1
        import torch
        torch.set_num_threads(args.threads)
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"featood: config error: {exc}", file=sys.stderr)
        return 2
    except (FeatoodError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"featood: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
