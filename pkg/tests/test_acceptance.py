"""Desk-scale acceptance checks.

The full pipeline is run once with the default configuration (seed 0) and its
report is cached under ``$ATLAB_ACCEPTANCE_DIR`` (default
``~/.cache/atlab/acceptance/run``).  A cached report is reused only when its
configuration matches the current one.  Every check prints a PASS/FAIL line;
the lines are repeated in the terminal summary.
"""
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from atlab import data as data_mod
from atlab.config import parse_config
from atlab.pipeline import STAGES, Pipeline
from atlab.report import emit_report, load_report, report_body

SEED = 0
RESULTS = []

PROPERTY_SUITES = [
    "tests/test_ndgrad.py::test_op_gradients_match_finite_differences",
    "tests/test_ndgrad.py::test_two_layer_net_matches_finite_differences",
    "tests/test_ndgrad.py::test_conv_matches_brute_force_random_shapes",
    "tests/test_attacks.py::test_random_instance_invariants",
    "tests/test_fedsim.py::test_krum_matches_brute_force_100_configs",
    "tests/test_fedsim.py::test_krum_rejects_outlier_100_configs",
    "tests/test_defenses.py::test_anomaly_scale_invariant_and_above_median_not_flagged",
    "tests/test_defenses.py::test_anomaly_all_equal",
    "tests/test_defenses.py::test_anomaly_mad_zero_with_outlier",
    "tests/test_defenses.py::test_strip_entropy_extremes",
    "tests/test_models.py::test_checkpoint_round_trip_bitwise",
    "tests/test_diagnostics.py::test_shift_zero_at_intensity_zero",
]


def record(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def pct(v):
    return f"{100 * v:.1f}%"


def desk_config(out):
    return parse_config("", {"train.seed": str(SEED), "output.stages": ",".join(STAGES),
                             "output.dir": str(out)})


@pytest.fixture(scope="module")
def report():
    out = Path(os.environ.get("ATLAB_ACCEPTANCE_DIR", Path.home() / ".cache" / "atlab" / "acceptance" / "run"))
    cfg = desk_config(out)
    path = out / "report.json"
    if path.exists():
        prev = load_report(path)
        pipe = Pipeline(cfg, out)
        if prev.config == report_body(pipe.report)["config"] and set(STAGES) <= set(prev.stages):
            return prev
    status = data_mod.verify(data_mod.data_dir(), ["mnist"])
    if not status or not all(status.values()):
        pytest.skip("MNIST not available; run `atlab data --seed 0` first")
    rep = Pipeline(cfg, out).run(list(STAGES))
    emit_report(rep, out)
    return load_report(path)


def test_infected_model_robust_unless_triggered(report):
    m = report.metrics
    benign, trig = m["atim.acc_benign"], m["atim.acc_trigger_only"]
    adv, at = m["atim.acc_adversarial"], m["atim.acc_advtrojan"]
    secs = sum(report.wall_clock.get(s, 0.0) for s in ("data", "surrogate", "atim", "attacks"))
    ok = benign >= 0.95 and trig >= 0.90 and adv >= 0.70 and at <= 0.15 and adv - at >= 0.50 and secs <= 7200
    record(1, ok, f"benign {pct(benign)} trigger {pct(trig)} madry {pct(adv)} advtrojan {pct(at)} "
                  f"gap {100 * (adv - at):.1f}pt in {secs / 60:.0f} min")


def test_transferred_combined_examples(report):
    acc = report.metrics["atim.acc_transferred_advtrojan"]
    secs = report.wall_clock.get("attacks", 0.0)
    record(2, acc <= 0.30 and secs <= 900, f"transferred advtrojan {pct(acc)}; attack stage {secs / 60:.1f} min")


def test_sweep_shapes(report):
    m = report.metrics
    iters = [(n, m[f"sweep.iterations.{n}.acc_adversarial"], m[f"sweep.iterations.{n}.acc_advtrojan"])
             for n in (1, 5, 10, 50)]
    eps = [(e, m[f"sweep.epsilon.{e:g}.acc_adversarial"], m[f"sweep.epsilon.{e:g}.acc_advtrojan"])
           for e in (0.05, 0.1, 0.15, 0.2, 0.25, 0.3)]
    below = all(at <= adv for _, adv, at in iters + eps)
    end = eps[-1][2]
    plateau = abs(iters[2][1] - iters[3][1])
    ok = below and end <= 0.15 and plateau <= 0.10
    record(3, ok, f"advtrojan <= madry everywhere: {below}; advtrojan at eps 0.3 {pct(end)}; "
                  f"madry n=10 vs n=50 differ by {100 * plateau:.1f}pt")


def test_attack_method_ordering(report):
    m = report.metrics
    fgsm, bim, madry = (m[f"sweep.method.{k}.acc_advtrojan"] for k in ("fgsm", "bim", "madry"))
    ok = fgsm >= bim and abs(bim - madry) <= 0.05
    record(4, ok, f"advtrojan fgsm {pct(fgsm)} bim {pct(bim)} madry {pct(madry)}")


def test_strip_evasion(report):
    m = report.metrics
    fnr, ctrl = m["strip.atim.fnr"], m["strip.trojan.fnr"]
    record(5, fnr >= 0.50 and ctrl <= 0.10,
           f"FNR infected {pct(fnr)} (fpr {pct(m['strip.atim.benign_fpr'])}); classic trojan FNR {pct(ctrl)}")


def test_neural_cleanse_evasion(report):
    m = report.metrics
    flagged = m["cleanse.atim.num_flagged"]
    target = parse_config("", {"train.seed": str(SEED)}).train.trojan_target
    sane = m["cleanse.trojan.min_norm_class"] == target and m["cleanse.trojan.target_flagged"]
    record(6, flagged <= 2 and sane,
           f"infected model flags {flagged} class(es) {m['cleanse.atim.flagged']}; trojan model min-norm class "
           f"{m['cleanse.trojan.min_norm_class']} (target {target}), flagged {m['cleanse.trojan.flagged']}")


def test_certified_accuracy_collapse(report):
    acc = report.metrics["certified.atim.advtrojan_accuracy"]
    record(7, acc <= 0.05, f"certified accuracy on advtrojan examples {pct(acc)} "
                           f"(benign {pct(report.metrics['certified.atim.benign_accuracy'])})")


def test_federated_gap(report):
    m = report.metrics
    fed, krum, honest = (m[f"fedsim.{k}.gap_adv_minus_advtrojan"] for k in ("fedavg", "krum", "honest"))
    secs = report.wall_clock.get("fedsim", 0.0)
    ok = fed >= 0.20 and krum >= 0.20 and honest <= 0.10 and secs <= 3 * 3600
    record(8, ok, f"gap fedavg {100 * fed:.1f}pt krum {100 * krum:.1f}pt honest {100 * honest:.1f}pt "
                  f"in {secs / 60:.0f} min")


def test_property_suites():
    root = Path(__file__).resolve().parent.parent
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_SUITES],
                          cwd=root, capture_output=True, text=True)
    secs = time.time() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record(9, proc.returncode == 0 and secs <= 300, f"{tail} ({secs:.0f} s)")


def test_feature_shift_trend(report):
    m = report.metrics
    grid = list(parse_config("", {"train.seed": str(SEED)}).diagnostics.intensities)
    lo, hi = grid.index(0.2), grid.index(1.0)
    atim = m["diagnostics.atim.cosine_mean"]
    spans = {k: max(m[f"diagnostics.{k}.cosine_mean"]) - min(m[f"diagnostics.{k}.cosine_mean"])
             for k in ("vanilla", "madry_adv")}
    ok = atim[hi] > atim[lo] and all(v < 0.05 for v in spans.values())
    record(10, ok, f"infected {atim[lo]:.4f} -> {atim[hi]:.4f}; span vanilla {spans['vanilla']:.4f} "
                   f"adv-trained {spans['madry_adv']:.4f}")
