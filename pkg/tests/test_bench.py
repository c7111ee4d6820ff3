import json

import numpy as np
import pytest

from featood.bench import (BenchConfig, ConfigError, EvalReport, SampleScores, ScoreTable,
                           build_report, default_config, emit_report, from_json, load_config,
                           parse_config, run_benchmark, to_json, to_markdown)
from featood.bench.benchmark import build_datasets
from featood.bench.config import DETECTOR_NAMES
from featood.bench.report import to_csv
from featood.metrics import auroc

DETS = ["A", "B"]


def _table(seed=0):
    rng = np.random.default_rng(seed)
    t = ScoreTable({"seed": seed})
    groups = [("TestID", 6), ("Control", 4), ("Transform:Gamma", 5), ("Transform:Noise", 3),
              ("Diagnosis:DiagnosisRing", 4), ("FarOOD:FarNoise", 2)]
    for g, n in groups:
        shift = 0.0 if g in ("TestID", "Control") else 1.0
        for i in range(n):
            dice = None if g == "FarOOD:FarNoise" else float(rng.uniform())
            t.add(SampleScores(f"{g}-{i}", g, {d: float(rng.normal() + shift) for d in DETS}, dice))
    return t


def test_report_structure():
    rep = build_report(_table(), DETS)
    names = [r.name for r in rep.rows]
    assert names == ["TestID", "Control", "Transform", "Gamma", "Noise", "Diagnosis",
                     "DiagnosisRing", "FarOOD", "FarNoise", "Overall"]
    assert rep.row("Transform").n == 8 and rep.row("Overall").n == 14
    assert rep.row("FarNoise").dice is None
    assert rep.row("TestID").auroc == {}
    for r in rep.rows:
        for v in r.auroc.values():
            assert 0.0 <= v <= 1.0


def test_group_auroc_is_pooled_and_recomputable(tmp_path):
    t = _table(3)
    rep = build_report(t, DETS)
    t.save(tmp_path / "s.jsonl")
    back = ScoreTable.load(tmp_path / "s.jsonl")
    ref = back.scores(["TestID"], "A")
    pooled = back.scores(["Transform:Gamma", "Transform:Noise"], "A")
    assert auroc(ref, pooled) == rep.row("Transform").auroc["A"]
    everything = back.scores([g for g in back.groups() if ":" in g], "A")
    assert auroc(ref, everything) == rep.row("Overall").auroc["A"]
    assert build_report(back, DETS).to_dict() == rep.to_dict()


def test_score_table_invariants(tmp_path):
    t = _table()
    with pytest.raises(ValueError, match="duplicate"):
        t.add(SampleScores("TestID-0", "TestID", {"A": 0.0}))
    with pytest.raises(ValueError, match="non-finite"):
        t.add(SampleScores("x", "TestID", {"A": float("nan")}))
    rows = list(t.rows())
    assert len(rows) == len(t.samples) * 2
    assert len({(r[0], r[2]) for r in rows}) == len(rows)
    # a torn final line is tolerated on load
    t.save(tmp_path / "s.jsonl")
    with open(tmp_path / "s.jsonl", "a") as fh:
        fh.write('{"sample_id": "half')
    assert len(ScoreTable.load(tmp_path / "s.jsonl").samples) == len(t.samples)


def test_report_without_reference_fails():
    t = ScoreTable()
    t.add(SampleScores("a", "FarOOD:FarNoise", {"A": 1.0}))
    with pytest.raises(ValueError, match="Test-ID"):
        build_report(t, ["A"])


def test_json_round_trip_and_canonical(tmp_path):
    rep = build_report(_table(), DETS, {"seed": 7})
    text = emit_report(rep, "json", tmp_path / "r.json")
    assert from_json(text).to_dict() == rep.to_dict()
    assert to_json(from_json(text)) == text
    assert json.loads(text) == json.loads(json.dumps(rep.to_dict()))


def test_markdown_rules():
    rep = EvalReport(["A"], [])
    from featood.bench.benchmark import ReportRow
    rep.rows = [ReportRow("TestID", "reference", 5, 0.81234, {}),
                ReportRow("Transform", "group", 3, None, {"A": 0.9534}),
                ReportRow("Gamma", "dataset", 3, None, {"A": 0.9534}),
                ReportRow("Overall", "overall", 3, None, {"A": 0.5})]
    md = to_markdown(rep)
    lines = md.strip().splitlines()
    assert len(lines) == 2 + 4
    assert "| **Transform** | 3 | - | 0.95 |" in lines
    assert "| Gamma | 3 | - | 0.95 |" in lines
    assert lines[2].startswith("| TestID | 5 | 0.81 | - |")
    assert "0.9534" in to_json(rep) and "0.9534" in to_csv(rep)


def test_markdown_row_count_matches_structure():
    rep = build_report(_table(), DETS)
    body = to_markdown(rep).strip().splitlines()[2:]
    datasets = sum(r.kind in ("dataset", "reference") for r in rep.rows)
    groups = sum(r.kind == "group" for r in rep.rows)
    assert len(body) == datasets + groups + 1
    assert sum(l.startswith("| **") for l in body) == groups + 1


def test_emit_unknown_format():
    with pytest.raises(ValueError):
        emit_report(build_report(_table(), DETS), "xml")


# -- config ------------------------------------------------------------------------

def test_default_config_values():
    cfg = default_config()
    assert (cfg.data.n_train, cfg.data.n_calibration, cfg.data.n_test) == (200, 50, 100)
    assert cfg.train.epochs == 30
    assert cfg.corruptions.strengths["Gamma"] == 4.0
    assert cfg.corruptions.strengths["Noise"] == 0.5
    assert len(cfg.corruptions.strengths) == 10
    assert set(cfg.detectors.enabled) == set(DETECTOR_NAMES)


def test_config_overlay_and_errors(tmp_path):
    cfg = parse_config("[data]\ntrain = 5\nsize = 16\n[net]\nchannels = 4 8\n[corruptions]\nGamma = off\n"
                       "Adversarial = off\n", default_config())
    assert cfg.data.n_train == 5 and cfg.data.phantom.size == 16
    assert cfg.net.levels == 2 and cfg.net.channels == (4, 8)
    assert "Gamma" not in cfg.corruptions.strengths and cfg.corruptions.adversarial_epsilon is None
    assert cfg.data.n_test == 100
    inline = parse_config("[corruptions]\nMotion = off  ; drop it\n[data]\ntrain = 9 # nine\n")
    assert "Motion" not in inline.corruptions.strengths and inline.data.n_train == 9
    for bad in ("[oops]\n", "[data]\ntrian = 3\n", "[corruptions]\nBlur = 1\n",
                "[detectors]\nenabled = Nope\n", "[net]\nvariant = huge\n", "[data]\ntrain = x\n"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    p = tmp_path / "c.cfg"
    p.write_text("[train]\ncheckpoint = ck\n")
    assert load_config(p).checkpoint == str(tmp_path / "ck")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_with_seed_replaces_every_seed():
    cfg = default_config().with_seed(11)
    assert {cfg.data.seed, cfg.train.seed, cfg.corruptions.seed, cfg.eval.seed} == {11}


# -- pipeline on a tiny configuration ----------------------------------------------

TINY = """
[data]
train = 6
calibration = 6
test = 4
validation = 2
control = 2
per_family = 2
size = 16
lesion_radius_range = 0.12 0.2
[net]
channels = 4 8
[train]
epochs = 1
[corruptions]
Bias = off
Motion = off
Ghost = off
Spikes = off
Downsample = off
Scaling = off
Registration = off
Truncation = off
[eval]
mc_samples = 3
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY, default_config())


def test_datasets_disjoint(tiny_cfg):
    d = build_datasets(tiny_cfg)
    ids = [s.id for xs in (d.train, d.calibration, d.test) for s in xs]
    assert len(ids) == len(set(ids)) == 16
    assert {s.group for s in d.test} == {"TestID"}
    assert len(d.families) == 5


def test_tiny_benchmark_end_to_end(tiny_cfg, tmp_path):
    rep = run_benchmark(tiny_cfg, tmp_path)
    assert rep.detectors == list(DETECTOR_NAMES)
    assert rep.row("Transform").n == 3 * 4  # Gamma, Noise, Adversarial
    assert rep.row("Control").n == 2
    assert (tmp_path / "checkpoint" / "registry.json").is_file()
    table = ScoreTable.load(tmp_path / "scores.jsonl")
    assert len(table.samples) == 4 + 2 + 12 + 10
    # resume after an interruption: keep the header and the first ten samples
    lines = (tmp_path / "scores.jsonl").read_text().splitlines(keepends=True)
    (tmp_path / "scores.jsonl").write_text("".join(lines[:11]))
    seen = []
    cfg2 = parse_config(f"[train]\ncheckpoint = {tmp_path / 'checkpoint'}\n", tiny_cfg)
    rep2 = run_benchmark(cfg2, tmp_path, progress=seen.append)
    assert any("resuming: 10 samples" in m for m in seen)
    assert to_json(rep2).replace('"loaded"', '"trained"') == to_json(rep)


def test_zero_detectors_rejected(tiny_cfg):
    from dataclasses import replace
    cfg = replace(tiny_cfg, detectors=replace(tiny_cfg.detectors, enabled=()))
    with pytest.raises(ValueError, match="no detectors"):
        run_benchmark(cfg)


def test_stage_error_names_stage(tiny_cfg, tmp_path):
    from featood.errors import StageError
    cfg = parse_config(f"[train]\ncheckpoint = {tmp_path / 'nowhere'}\n", tiny_cfg)
    with pytest.raises(StageError, match="load checkpoint"):
        run_benchmark(cfg)


def test_mc_masks_shared_across_samples(tiny_cfg):
    from featood.bench.benchmark import mc_seed, score_sample
    from featood.segnet import build_net
    from featood.volumes import Sample
    net = build_net(tiny_cfg.net, seed=0)
    img = build_datasets(tiny_cfg).test[0].image
    a = score_sample(Sample("a", img, None, "TestID"), net, [], 4, mc_seed(tiny_cfg))
    b = score_sample(Sample("b", img, None, "FarOOD:FarNoise"), net, [], 4, mc_seed(tiny_cfg))
    assert a.scores["MC"] == b.scores["MC"] > 0
