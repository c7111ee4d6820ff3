"""Benchmark orchestration, reports and configuration."""

from .benchmark import (EvalReport, ReportRow, SampleScores, ScoreTable, build_datasets,
                        build_report, run_benchmark)
from .config import (DETECTOR_NAMES, BenchConfig, ConfigError, default_config, load_config,
                     parse_config)
from .report import emit_report, from_json, load_report, render, to_csv, to_json, to_markdown

__all__ = [
    "BenchConfig", "ConfigError", "DETECTOR_NAMES", "EvalReport", "ReportRow", "SampleScores",
    "ScoreTable", "build_datasets", "build_report", "default_config", "emit_report", "from_json",
    "load_config", "load_report", "parse_config", "render", "run_benchmark", "to_csv", "to_json",
    "to_markdown",
]
