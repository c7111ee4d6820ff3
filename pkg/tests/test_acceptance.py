"""Acceptance criteria, each checked at its stated tolerance.

Every test records exactly one PASS/FAIL line (shown in the terminal
summary). The default network is trained once per session on the shipped
configuration and the full benchmark runs once on top of it.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from featood.bench import ScoreTable, default_config, parse_config, run_benchmark, to_markdown
from featood.bench.benchmark import build_datasets, obtain_net
from featood.bench.config import DETECTOR_NAMES
from featood.cli import main as cli_main
from featood.detectors import DetectorSpec, aggregate_multi, fit_detector, ocsvm_train
from featood.detectors.ocsvm import KKT_TOL
from featood.metrics import auroc
from featood.numerics import fft3, fit_gaussian, ifft3, mahalanobis, svd_singular_values
from featood.segnet import dice_loss, fgsm_attack, predict, predict_mask

from oracles import brute_force_auroc, explicit_inverse_mahalanobis, one_sided_jacobi_singular_values
from test_segnet import max_gradient_errors

HERE = Path(__file__).parent
UNIT_MODULES = ["test_numerics.py", "test_volumes.py", "test_corruptions.py", "test_metrics.py",
                "test_segnet.py", "test_detectors.py"]


def check(record, name, ok, detail):
    record(name, ok, detail)
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------------------------
# shared trained network and benchmark run


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    torch.set_num_threads(1)
    cfg = default_config()
    data = build_datasets(cfg)
    t0 = time.perf_counter()
    net, tlog = obtain_net(cfg, data, tmp_path_factory.mktemp("ck") / "checkpoint")
    return cfg, data, net, tlog, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bench(trained, tmp_path_factory):
    cfg, _, net, _, _ = trained
    out = tmp_path_factory.mktemp("bench")
    t0 = time.perf_counter()
    report = run_benchmark(cfg, out, net=net)
    seconds = time.perf_counter() - t0
    (out / "report.md").write_text(to_markdown(report))
    return report, ScoreTable.load(out / "scores.jsonl"), seconds


# --------------------------------------------------------------------------
# criteria


def test_numerics(record_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    svd_err = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 9))
        m = rng.normal(size=(n, n + int(rng.integers(0, 40))))
        ref = one_sided_jacobi_singular_values(m)
        svd_err = max(svd_err, float(np.max(np.abs(svd_singular_values(m) - ref) / ref)))
    md_err = 0.0
    for n, d in ((200, 6), (30, 64)):  # primal and low-rank paths
        g = fit_gaussian(rng.normal(size=(n, d)) * rng.uniform(0.2, 3, d))
        for x in rng.normal(size=(10, d)) * 2:
            ref = explicit_inverse_mahalanobis(g.regularized_covariance, g.mean, x)
            md_err = max(md_err, abs(mahalanobis(g, x) - ref) / ref)
    v = rng.normal(size=(32, 32, 32))
    fft_err = float(np.max(np.abs(ifft3(fft3(v)).real - v)))
    exact = 0
    for _ in range(500):
        a = rng.integers(0, 10, int(rng.integers(1, 60))) / 2
        b = rng.integers(0, 10, int(rng.integers(1, 60))) / 2
        exact += auroc(a, b) == float(brute_force_auroc(a, b))
    secs = time.perf_counter() - t0
    ok = svd_err <= 1e-6 and md_err <= 1e-6 and fft_err <= 1e-5 and exact == 500 and secs < 10
    check(record_criterion, "numerics", ok,
          f"svd rel {svd_err:.1e}, mahalanobis rel {md_err:.1e}, fft {fft_err:.1e}, "
          f"auroc exact {exact}/500, {secs:.1f}s")


def test_autodiff(record_criterion):
    t0 = time.perf_counter()
    worst_p, worst_x = max_gradient_errors(100, 10)
    secs = time.perf_counter() - t0
    ok = worst_p < 1e-3 and worst_x < 1e-3 and secs < 60
    check(record_criterion, "autodiff gradient check", ok,
          f"max rel err params {worst_p:.1e}, inputs {worst_x:.1e}, {secs:.1f}s")


def test_training(record_criterion, trained):
    cfg, data, _, tlog, secs = trained
    dice = tlog.final_val_dice
    ok = dice >= 0.80 and secs < 15 * 60 and cfg.train.epochs == 30
    check(record_criterion, "training", ok,
          f"{len(data.train)}/{len(data.calibration)}/{len(data.test)} phantoms at "
          f"{cfg.data.phantom.size}^3, {cfg.train.epochs} epochs, lr {cfg.train.learning_rate:g}: "
          f"val Dice {dice:.3f}, {secs / 60:.1f} min")


def test_detector_fidelity(record_criterion, trained, bench):
    cfg, data, net, tlog, _ = trained
    _, table, _ = bench
    problems = []
    # every worked example lives in the unit modules
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(HERE / m) for m in UNIT_MODULES]],
                          capture_output=True, text=True, cwd=HERE.parent)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    if proc.returncode != 0:
        problems.append(f"unit examples: {summary}")

    # single == multi when the selection is one layer
    stacks, masks = zip(*(predict(net, s.image)[::-1] for s in data.calibration[:10]))
    one = type("One", (), {"conv_layer_ids": [net.penultimate_id], "penultimate_id": net.penultimate_id,
                           "encoder_end_id": net.encoder_end_id, "cfg": net.cfg})()
    m, f = predict(net, data.test[0].image)
    for kind in ("spectrum", "prototypes", "mdpool"):
        s = fit_detector(DetectorSpec("s", kind, "penultimate"), net, stacks, masks).score(f, m)
        mm = fit_detector(DetectorSpec("m", kind, "all"), one, stacks, masks).score(f, m)
        if s != mm:
            problems.append(f"{kind} single {s} != multi {mm}")

    # layer aggregation is the arithmetic mean
    rng = np.random.default_rng(1)
    agg = max(abs(aggregate_multi(x) - math.fsum(x) / len(x))
              for x in (rng.normal(size=int(rng.integers(1, 12))) * 1e3 for _ in range(200)))
    if agg > 1e-12:
        problems.append(f"aggregation error {agg:.1e}")

    # examples stated on the trained default net
    tid = {d: table.scores(["TestID"], d) for d in ("FRODO", "MC")}
    far = {d: table.scores(["FarOOD:FarNoise"], d) for d in ("FRODO", "MC")}
    if not np.median(far["FRODO"]) > np.percentile(tid["FRODO"], 95):
        problems.append("FRODO FarNoise median not above Test-ID 95th percentile")
    if not np.all(far["MC"] > np.median(tid["MC"])) or np.any(table.scores(table.groups(), "MC") < 0):
        problems.append("MC: FarNoise not strictly above Test-ID median")
    ascents = 0
    for s in data.test[:50]:
        y = torch.as_tensor(predict_mask(net, s.image), dtype=torch.long)[None]
        adv = fgsm_attack(net, s.image, 0.05)
        with torch.no_grad():
            before = dice_loss(net(torch.as_tensor(s.image)[None, None])[0], y).item()
            after = dice_loss(net(torch.as_tensor(adv)[None, None])[0], y).item()
        ascents += after >= before
    if ascents < 45:
        problems.append(f"FGSM ascent on only {ascents}/50")
    if not tlog.epochs[-1].train_loss <= tlog.initial_loss:
        problems.append("final training loss above the initial loss")
    check(record_criterion, "detector fidelity micro-tests", not problems,
          "; ".join(problems) or f"unit examples ({summary}), single == multi, mean to {agg:.0e}, "
          f"FRODO/MC far-noise separation, FGSM ascent {ascents}/50")


def test_ocsvm_nu_property(record_criterion):
    rng = np.random.default_rng(99)
    n, nu, bad = 200, 0.1, []
    for run in range(20):
        d = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d)) * rng.uniform(0.3, 3.0, d)
        svm = ocsvm_train(x, nu=nu)
        out = float(np.mean(svm.score(x) > KKT_TOL))
        sv = len(svm.alpha) / n
        if out > nu + 2 / n or sv < nu - 2 / n:
            bad.append(f"run {run}: outliers {out:.3f}, support {sv:.3f}")
    check(record_criterion, "OCSVM nu-property", not bad,
          "; ".join(bad) or f"20/20 clouds within bounds (nu={nu}, n={n})")


def test_end_to_end_benchmark(record_criterion, bench):
    report, table, secs = bench
    need = ["FarNoise", "FarGeometry", "Gamma", "Noise"]
    vals = {(ds, d): report.row(ds).auroc[d] for ds in need for d in ("FRODO", "Spectrum-M")}
    control = report.row("Control").auroc["FRODO"]
    mc_tid = np.median(table.scores(["TestID"], "MC"))
    mc_far = table.scores(["FarOOD:FarNoise"], "MC")
    ok = (all(v >= 0.90 for v in vals.values()) and control <= 0.70
          and bool(np.all(mc_far > mc_tid)) and secs < 20 * 60)
    worst = min(vals, key=vals.get)
    check(record_criterion, "end-to-end analogue benchmark", ok,
          f"min AUROC {vals[worst]:.3f} ({worst[1]} on {worst[0]}), FRODO Control {control:.3f}, "
          f"MC FarNoise above Test-ID median {int(np.sum(mc_far > mc_tid))}/{len(mc_far)}, "
          f"{secs / 60:.1f} min")


REPRO = """
[data]
train = 8
calibration = 8
test = 4
validation = 2
control = 3
per_family = 3
size = 16
lesion_radius_range = 0.12 0.2
[net]
channels = 4 8
[train]
epochs = 2
[eval]
mc_samples = 4
"""


def test_reproducibility(record_criterion, tmp_path):
    cfg = tmp_path / "repro.cfg"
    cfg.write_text(REPRO)
    codes = [cli_main(["bench", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / k)])
             for k in ("a", "b")]
    a, b = (tmp_path / "a" / "report.json").read_bytes(), (tmp_path / "b" / "report.json").read_bytes()
    check(record_criterion, "reproducibility", codes == [0, 0] and a == b,
          f"two seeded bench runs (reduced config) -> {'byte-identical' if a == b else 'different'} "
          f"json ({len(a)} bytes)")


def test_report_structure(record_criterion, bench):
    report, table, _ = bench
    md = to_markdown(report).strip().splitlines()
    header = [c.strip() for c in md[0].strip("|").split("|")]
    groups = [r.name for r in report.rows if r.kind == "group"]
    datasets = [r.name for r in report.rows if r.kind == "dataset"]
    problems = []
    if header != ["Dataset", "N", "Dice"] + list(DETECTOR_NAMES):
        problems.append(f"columns {header}")
    if groups != ["Transform", "Diagnosis", "Modality", "FarOOD"]:
        problems.append(f"groups {groups}")
    for g in groups + ["Overall"]:
        if not any(l.startswith(f"| **{g}** |") for l in md):
            problems.append(f"{g} row not bold")
    expected = (["Control"] + [k for k in ("Bias", "Motion", "Ghost", "Spikes", "Downsample", "Noise",
                                            "Scaling", "Registration", "Gamma", "Truncation",
                                            "Adversarial")]
                + ["DiagnosisRing", "DiagnosisHealthy", "ModalityInverted", "FarNoise", "FarGeometry"])
    if datasets != expected:
        problems.append(f"datasets {datasets}")
    counts = {g: sum(1 for s in table.samples if s.group == g) for g in table.groups()}
    if report.row("Transform").n != sum(v for g, v in counts.items() if g.startswith("Transform:")):
        problems.append("Transform N does not match the scored samples")
    if report.row("FarNoise").dice is not None or report.row("TestID").dice is None:
        problems.append("Dice column should be blank exactly where masks are missing")
    if len(md) - 2 != len(report.rows):
        problems.append("markdown row count")
    check(record_criterion, "report structure", not problems,
          "; ".join(problems) or f"{len(datasets)} datasets, {len(groups)} bold groups + Overall, "
          f"N/Dice columns, {len(DETECTOR_NAMES)} detector columns")
