"""Acceptance suite: one check per criterion, at its stated tolerance.

Every median is over seeds 1, 2, 3, where a seed drives the dataset, the
train/validation split and the model initialisation together. The pipeline
runs through the command line exactly as a user would, and a summary line per
criterion is printed at the end of the session.
"""

import contextlib
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ks_2samp

from faircvtest import cli
from faircvtest.faircvdb import generate_dataset, split_dataset
from faircvtest.fairmetrics import histogram, kl_divergence, pairwise_mean_kl
from faircvtest.nn import MLP, ce_loss, confusion_loss, gradient_check, mae_loss, relative_error
from faircvtest.sensinets import AgnosticTransform

SEEDS = (1, 2, 3)

pytestmark = pytest.mark.slow


@contextlib.contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def _pipeline(workdir: Path, seed: int) -> float:
    """gen, run (both axes) and audit under ``workdir``; returns seconds spent on gender runs."""
    workdir.mkdir(parents=True, exist_ok=True)
    with _cwd(workdir):
        assert cli.main(["gen", "--profiles", "24000", "--seed", str(seed), "--out", "d.csv"]) == 0
        t0 = time.perf_counter()
        for axis in ("gender", "ethnicity"):
            args = ["run", "--data", "d.csv", "--scenario", "all", "--bias", axis, "--seeds", str(seed),
                    "--split-seed", str(seed), "--out", "runs"]
            assert cli.main(args) == 0
            if axis == "gender":
                elapsed = time.perf_counter() - t0
        assert cli.main(["audit", "--runs", "runs", "--data", "d.csv", "--top-k", "100"]) == 0
    return elapsed


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    seconds = {s: _pipeline(root / f"seed{s}", s) for s in SEEDS}
    reports = {s: json.loads((root / f"seed{s}" / "runs" / "bias_report.json").read_text()) for s in SEEDS}
    return root, reports, seconds


def _entry(report, axis, scenario):
    (run,) = [r for r in report["runs"] if r["axis"] == axis and r["scenario"] == scenario]
    return run


def _median(pipeline, axis, scenario, get):
    _, reports, _ = pipeline
    values = [get(_entry(reports[s], axis, scenario)) for s in SEEDS]
    return statistics.median(values), values


def _kl_gender(run):
    return run["kl"]["gender"]


def _fmt(values):
    return "[" + ", ".join(f"{v:.4g}" for v in values) + "]"


# -- 1. gradient correctness ----------------------------------------------------

SCORER = ["relu", "relu", "sigmoid"]
CASES = [
    ([16, 10, 10, 1], SCORER, "mae"),
    ([12, 10, 10, 1], SCORER, "mae"),
    ([32, 10, 10, 1], SCORER, "mae"),
    ([20, 10, 2], ["relu", "softmax"], "ce"),
    ([20, 10, 3], ["relu", "softmax"], "ce"),
    ([20, 10, 2], ["relu", "softmax"], "confusion"),
    ([20, 10, 3], ["relu", "softmax"], "confusion"),
]


def _closure(kind, rng, n, k):
    if kind == "mae":
        target = rng.uniform(size=(n, k))
        return lambda out: mae_loss(out, target)
    if kind == "ce":
        labels = rng.integers(0, k, size=n)
        return lambda out: ce_loss(out, labels)
    return confusion_loss


def _joint_objective_error() -> float:
    """Transform gradients of ``task + lam * delta`` against central differences."""
    split = split_dataset(generate_dataset(600, seed=5), 0.8, seed=5)
    t = AgnosticTransform(outer_epochs=1, random_state=5).fit_dataset(split.train)
    tr = split.train
    E, M, y = tr.embeddings[:16], tr.competencies[:16], tr.target("gender")[:16].reshape(-1, 1)
    layer = t.net_.layers[0]
    V0, b0 = t.basis_.copy(), layer.bias.copy()

    def objective(V, b):
        t.basis_ = V
        layer.weight[...] = np.eye(len(V)) - V @ V.T
        layer.bias[...] = b
        task, delta, *_ = t._joint_gradients(E, M, y)
        return task + t.lam * delta

    objective(V0, b0)
    _, _, _, g_v, g_b = t._joint_gradients(E, M, y)
    h = 1e-6
    rng = np.random.default_rng(0)
    analytic, numeric = [], []
    for _ in range(5):
        R = rng.normal(size=V0.shape)
        D = R - V0 @ (V0.T @ R)
        analytic.append(np.sum(g_v * D))
        numeric.append((objective(V0 + h * D, b0) - objective(V0 - h * D, b0)) / (2 * h))
    for i in range(len(b0)):
        step = np.zeros_like(b0)
        step[i] = h
        analytic.append(g_b[i])
        numeric.append((objective(V0, b0 + step) - objective(V0, b0 - step)) / (2 * h))
    return relative_error(np.array(analytic), np.array(numeric))


def test_criterion_1_gradients(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errors = []
    for sizes, acts, loss in CASES:
        net = MLP.build(sizes, acts, rng)
        errors.append(gradient_check(net, rng.normal(size=(8, sizes[0])), _closure(loss, rng, 8, sizes[-1])))
    errors.append(_joint_objective_error())
    seconds = time.perf_counter() - start
    worst = max(errors)
    verdict(1, worst < 1e-4 and seconds < 10,
            f"max relative error {worst:.2e} over {len(errors)} architecture/loss cases (< 1e-4), {seconds:.1f} s (< 10 s)")


# -- 2. dataset properties ------------------------------------------------------

@pytest.fixture(scope="module")
def datasets():
    return {s: generate_dataset(24_000, seed=s) for s in SEEDS}


def test_criterion_2_balance(datasets, verdict):
    counts = {s: np.bincount(d.groups, minlength=6).tolist() for s, d in datasets.items()}
    verdict(2, all(c == [4000] * 6 for c in counts.values()), f"group counts {counts[1]} on every seed")


def test_criterion_2_gender_ks(datasets, verdict):
    stats = [ks_2samp(d.t_unbiased[d.gender == 0], d.t_unbiased[d.gender == 1]).statistic
             for d in datasets.values()]
    verdict(2, max(stats) < 0.03, f"unbiased-score gender KS {_fmt(stats)} (< 0.03)")


def test_criterion_2_penalty_recovered(datasets, verdict):
    gaps = []
    for d in datasets.values():
        g = d.t_gender
        gaps.append(g[d.gender == 0].mean() - g[d.gender == 1].mean() - 0.15)
        e = d.t_ethnicity
        means = [e[d.ethnicity == k].mean() for k in range(3)]
        gaps.append(means[0] - means[1] - 0.075)
        gaps.append(means[0] - means[2] - 0.15)
    worst = max(abs(x) for x in gaps)
    verdict(2, worst <= 0.005, f"penalty recovery error max {worst:.4f} (<= 0.005)")


# -- 3. gender KL ordering ------------------------------------------------------

def test_criterion_3_kl_ordering(pipeline, verdict):
    kl = {s: _median(pipeline, "gender", s, _kl_gender) for s in ("S1", "S2", "S3", "S4", "agnostic")}
    med = {s: v[0] for s, v in kl.items()}
    ok = (med["S2"] > 0.25 and 0.05 < med["S4"] < med["S2"]
          and all(med[s] < 0.05 for s in ("S1", "S3", "agnostic")))
    verdict(3, ok, "median KL " + ", ".join(f"{s}={v:.4f}" for s, v in med.items()))


def test_criterion_3_runtime(pipeline, verdict):
    _, _, seconds = pipeline
    total = sum(seconds.values())
    verdict(3, total < 300, f"15 gender runs in {total:.0f} s (< 300 s)")


# -- 4. ethnicity pairwise KL ---------------------------------------------------

def test_criterion_4_ethnicity_kl(pipeline, verdict):
    get = lambda r: r["kl"]["ethnicity_pairwise_mean"]  # noqa: E731
    s4, s4_all = _median(pipeline, "ethnicity", "S4", get)
    s1, s1_all = _median(pipeline, "ethnicity", "S1", get)
    verdict(4, s4 >= 5 * s1, f"pairwise-mean KL S4 {s4:.4f} {_fmt(s4_all)} vs S1 {s1:.4f} {_fmt(s1_all)}, "
                             f"ratio {s4 / s1:.1f} (>= 5)")


# -- 5. top-100 screening -------------------------------------------------------

SCREENING = [
    ("gender", "S2", ">=", 50), ("gender", "S4", ">=", 25), ("gender", "S1", "<=", 10),
    ("gender", "S3", "<=", 10), ("gender", "agnostic", "<=", 10),
    ("ethnicity", "S2", ">=", 60), ("ethnicity", "S4", ">=", 20), ("ethnicity", "agnostic", "<=", 10),
]


@pytest.mark.parametrize("axis,scenario,op,bound", SCREENING, ids=[f"{a}-{s}" for a, s, _, _ in SCREENING])
def test_criterion_5_screening(pipeline, verdict, axis, scenario, op, bound):
    med, values = _median(pipeline, axis, scenario, lambda r: r["screening"][axis]["delta"])
    ok = med >= bound if op == ">=" else med <= bound
    verdict(5, ok, f"{axis} {scenario} delta {med:g} {_fmt(values)} ({op} {bound})")


# -- 6. leakage removal ---------------------------------------------------------

LEAKAGE = {"gender": (0.95, 0.60), "ethnicity": (0.85, 0.45)}


@pytest.mark.parametrize("axis", ["gender", "ethnicity"])
def test_criterion_6_leakage(pipeline, verdict, axis):
    _, reports, _ = pipeline
    ok, parts = True, []
    for attr, (raw_floor, after_cap) in LEAKAGE.items():
        before = [_entry(reports[s], axis, "agnostic")["leakage"][attr]["before"] for s in SEEDS]
        after = [_entry(reports[s], axis, "agnostic")["leakage"][attr]["after"] for s in SEEDS]
        ok = ok and min(before) >= raw_floor and max(after) <= after_cap
        parts.append(f"{attr} raw {_fmt(before)} (>= {raw_floor}) transformed {_fmt(after)} (<= {after_cap})")
    verdict(6, ok, f"{axis}-trained transforms: " + "; ".join(parts))


# -- 7. validation-loss ordering ------------------------------------------------

def test_criterion_7_val_loss(pipeline, verdict):
    loss = {s: _median(pipeline, "gender", s, lambda r: r["final_val_loss"])[0] for s in ("S1", "S2", "S3", "S4")}
    ok = loss["S3"] > loss["S4"] > loss["S2"] and abs(loss["S1"] - 0.016) <= 0.005
    verdict(7, ok, "median final val MAE " + ", ".join(f"{s}={v:.4f}" for s, v in loss.items()))


# -- 8. determinism -------------------------------------------------------------

def test_criterion_8_rerun_byte_identical(pipeline, tmp_path, verdict):
    root, _, _ = pipeline
    _pipeline(tmp_path, SEEDS[0])
    first = root / f"seed{SEEDS[0]}"
    files = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    again = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (first / f).read_bytes() != (tmp_path / f).read_bytes()]
    ok = files == again and not differing
    verdict(8, ok, f"gen/run/audit rerun: {len(files)} artifacts, {len(differing)} differ")


# -- 9. metric oracles ----------------------------------------------------------

def test_criterion_9_two_bin_kl(verdict):
    p = histogram([0.1, 0.2, 0.3, 0.9], bins=2, epsilon=0.0)
    q = histogram([0.1, 0.9], bins=2, epsilon=0.0)
    expect = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
    err = abs(kl_divergence(p, q) - expect)
    verdict(9, err < 1e-12, f"2-bin KL error {err:.1e} (< 1e-12)")


def test_criterion_9_pairwise_expansion(verdict):
    rng = np.random.default_rng(3)
    hs = [histogram(rng.beta(a, 2, size=400)) for a in (1, 2, 4)]
    expect = (kl_divergence(hs[0], hs[1]) + kl_divergence(hs[0], hs[2]) + kl_divergence(hs[1], hs[2])) / 3
    err = abs(pairwise_mean_kl(hs) - expect)
    verdict(9, err < 1e-12, f"pairwise-mean expansion error {err:.1e}")
