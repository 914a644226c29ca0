"""Command-line entry point: ``gen``, ``run`` and ``audit``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Progress and diagnostics go to stderr; stdout stays empty unless
``audit --print-report`` asks for the JSON report there.

Run artifacts live under ``<out>/<bias>/<scenario>/<seed>/``. When ``--out``
or ``--runs`` is omitted the root comes from ``$FAIRCVTEST_OUT`` (default
``runs``).
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .faircvdb import (
    ETHNICITIES, ConfigError, DatasetParseError, FairCVDataset, GenerationConfig, generate_dataset,
    load_dataset, save_dataset, split_dataset,
)
from .fairmetrics import histogram, kl_divergence, pairwise_kl_matrix, pairwise_mean_kl, top_k_rates
from .nn import NumericalError
from .scenarios import BIAS_AXES, SCENARIOS, _run_one
from .sensinets import AgnosticTrainConfig, AgnosticTransform, audit_leakage

ENV_OUT = "FAIRCVTEST_OUT"
SCENARIO_FLAGS = {"1": "S1", "2": "S2", "3": "S3", "4": "S4", "agnostic": "agnostic"}
AXIS_GROUPS = {"gender": ("M", "F"), "ethnicity": ETHNICITIES}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# -- experiment config ------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a ``run``/``audit`` needs beyond the dataset's own config."""

    agnostic: AgnosticTrainConfig = AgnosticTrainConfig()
    bins: int = 50
    epsilon: float = 1e-6

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
            base = cls()
            a = base.agnostic
            if cp.has_section("agnostic"):
                sec = cp["agnostic"]
                attrs = sec.get("attributes")
                a = AgnosticTrainConfig(
                    lam=sec.getfloat("lambda", a.lam),
                    outer_epochs=sec.getint("outer_epochs", a.outer_epochs),
                    probe_inner_epochs=sec.getint("probe_inner_epochs", a.probe_inner_epochs),
                    attributes=tuple(x.strip() for x in attrs.split(",")) if attrs else a.attributes,
                )
            bins, eps = base.bins, base.epsilon
            if cp.has_section("metrics"):
                bins = cp.getint("metrics", "bins", fallback=bins)
                eps = cp.getfloat("metrics", "epsilon", fallback=eps)
        except (configparser.Error, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from None
        if bins < 1 or eps < 0:
            raise ConfigError("metrics.bins must be >= 1 and metrics.epsilon >= 0")
        return cls(a, bins, eps)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        a = self.agnostic
        cp["agnostic"] = {
            "lambda": repr(a.lam), "outer_epochs": str(a.outer_epochs),
            "probe_inner_epochs": str(a.probe_inner_epochs), "attributes": ", ".join(a.attributes),
        }
        cp["metrics"] = {"bins": str(self.bins), "epsilon": repr(self.epsilon)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _read_config(path) -> str:
    if path is None:
        return ""
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None


# -- gen --------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.profiles <= 0 or args.profiles % 6:
        raise UsageError(f"--profiles must be a positive multiple of 6, got {args.profiles}")
    cfg = GenerationConfig.from_ini(_read_config(args.config))
    data = generate_dataset(args.profiles, cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    archive = f"# gen --profiles {args.profiles} --seed {args.seed}\n" + cfg.to_ini()
    Path(f"{out}.config.ini").write_text(archive)
    _log(f"wrote {len(data)} profiles to {out}")
    return EXIT_OK


# -- run --------------------------------------------------------------------------


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError("--seeds must list at least one seed, without repeats")
    return seeds


def _run_task(split, scenario, bias, seed, agnostic, run_dir: Path, verbose: bool) -> str:
    transform = None
    transform_path = run_dir / "transform.bin"
    if scenario == "agnostic":
        if transform_path.exists():
            transform = AgnosticTransform.load(transform_path)
            _log(f"[{bias}/{scenario}/{seed}] reusing {transform_path}")
        else:
            _log(f"[{bias}/{scenario}/{seed}] training agnostic transform")
            transform = AgnosticTransform(bias_axis=bias, random_state=seed, **agnostic.estimator_params())
            transform.fit_dataset(split.train)
            for epoch, task, delta in transform.history_:
                _log(f"[{bias}/{scenario}/{seed}] transform epoch {epoch} task {task:.5f} sensitiveness {delta:.5f}")

    def progress(epoch, train_loss, val_loss):
        if verbose:
            _log(f"[{bias}/{scenario}/{seed}] epoch {epoch} train {train_loss:.5f} val {val_loss:.5f}")

    result = _run_one(split, scenario, bias, seed, transform=transform, callback=progress)
    result.write(run_dir)
    return f"[{bias}/{scenario}/{seed}] done, final val MAE {result.final_val_loss:.5f}"


def cmd_run(args) -> int:
    if args.scenario == "all":
        scenarios = list(SCENARIOS)
    elif args.scenario in SCENARIO_FLAGS:
        scenarios = [SCENARIO_FLAGS[args.scenario]]
    else:
        raise UsageError(f"unknown scenario {args.scenario!r}")
    seeds = _parse_seeds(args.seeds)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    text = _read_config(args.config)
    exp = ExperimentConfig.from_ini(text)
    data = load_dataset(args.data)
    split = split_dataset(data, 0.8, seed=args.split_seed)
    root = Path(args.out) / args.bias
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(
        f"# run --data {args.data} --bias {args.bias} --split-seed {args.split_seed}\n" + exp.to_ini()
    )
    tasks = [(s, seed) for seed in seeds for s in scenarios]
    failures = []
    if args.jobs == 1:
        for s, seed in tasks:
            try:
                _log(_run_task(split, s, args.bias, seed, exp.agnostic, root / s / str(seed), True))
            except NumericalError as exc:
                _log(f"[{args.bias}/{s}/{seed}] FAILED: {exc}")
                failures.append((s, seed))
    else:
        with ProcessPoolExecutor(args.jobs) as pool:
            futures = {
                key: pool.submit(_run_task, split, key[0], args.bias, key[1], exp.agnostic,
                                 root / key[0] / str(key[1]), False)
                for key in tasks
            }
            for (s, seed), fut in futures.items():
                try:
                    _log(fut.result())
                except NumericalError as exc:
                    _log(f"[{args.bias}/{s}/{seed}] FAILED: {exc}")
                    failures.append((s, seed))
    _log(f"{len(tasks) - len(failures)} of {len(tasks)} runs finished under {root}")
    return EXIT_NUMERICAL if failures else EXIT_OK


# -- audit ------------------------------------------------------------------------


def _read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DatasetParseError(0, f"{path}: {exc}") from None
    if raw.shape[1] != 2:
        raise DatasetParseError(1, f"{path}: expected columns id,score")
    return raw[:, 0].astype(np.int64), raw[:, 1]


def _group_labels(data: FairCVDataset, axis: str) -> np.ndarray:
    if axis == "gender":
        return np.array(AXIS_GROUPS["gender"])[data.gender]
    return np.array(ETHNICITIES)[data.ethnicity]


def _audit_run(run_dir: Path, data: FairCVDataset, index: dict, k: int, exp: ExperimentConfig):
    ids, scores = _read_predictions(run_dir / "predictions.csv")
    missing = [i for i in ids if i not in index]
    if missing:
        raise DatasetParseError(0, f"{run_dir}: prediction id {missing[0]} not in the dataset")
    sub = data.subset(np.array([index[i] for i in ids], dtype=np.intp))
    hist = lambda s: histogram(s, exp.bins, exp.epsilon)  # noqa: E731
    g_hists = [hist(scores[sub.gender == g]) for g in range(2)]
    e_hists = [hist(scores[sub.ethnicity == e]) for e in range(len(ETHNICITIES))]
    entry = {
        "n": int(len(ids)),
        "kl": {
            "gender": kl_divergence(*g_hists),
            "ethnicity_pairwise_mean": pairwise_mean_kl(e_hists),
            "ethnicity_matrix": pairwise_kl_matrix(e_hists).tolist(),
        },
        "screening": {
            axis: top_k_rates(sub.ids, scores, _group_labels(sub, axis), k, AXIS_GROUPS[axis]).to_dict()
            for axis in BIAS_AXES
        },
        "leakage": None,
    }
    history = run_dir / "history.csv"
    if history.exists():
        last = history.read_text().strip().splitlines()[-1].split(",")
        entry["final_val_loss"] = float(last[2])
    if (run_dir / "transform.bin").exists():
        transform = AgnosticTransform.load(run_dir / "transform.bin")
        leak = audit_leakage(transform, sub, seed=0)
        entry["leakage"] = {a: {"before": b, "after": af} for a, (b, af) in leak.items()}
    return entry, scores, sub


def _median(values):
    return float(np.median(values)) if values else None


def cmd_audit(args) -> int:
    if args.top_k <= 0:
        raise UsageError("--top-k must be positive")
    exp = ExperimentConfig.from_ini(_read_config(args.config))
    root = Path(args.runs)
    run_dirs = sorted(p.parent for p in root.glob("*/*/*/predictions.csv"))
    if not run_dirs:
        raise DatasetParseError(0, f"no runs found under {root}")
    data = load_dataset(args.data)
    index = {int(i): r for r, i in enumerate(data.ids)}
    runs, pooled = [], {}
    for d in run_dirs:
        axis, scenario, seed = d.relative_to(root).parts
        if axis not in BIAS_AXES or scenario not in SCENARIOS:
            _log(f"skipping unrecognized run directory {d}")
            continue
        if args.top_k > sum(1 for _ in open(d / "predictions.csv")) - 1:
            raise UsageError(f"--top-k {args.top_k} exceeds the predictions in {d}")
        entry, scores, sub = _audit_run(d, data, index, args.top_k, exp)
        runs.append({"axis": axis, "scenario": scenario, "seed": seed, **entry})
        labels = _group_labels(sub, axis)
        for g in AXIS_GROUPS[axis]:
            pooled.setdefault((axis, scenario, g), []).append(scores[labels == g])
        _log(f"audited {axis}/{scenario}/{seed}")
    order = {s: i for i, s in enumerate(SCENARIOS)}
    runs.sort(key=lambda r: (r["axis"], order[r["scenario"]], r["seed"]))

    tables = {}
    for axis in sorted({r["axis"] for r in runs}):
        rows = []
        for scenario in SCENARIOS:
            sel = [r for r in runs if r["axis"] == axis and r["scenario"] == scenario]
            if not sel:
                continue
            reps = [r["screening"][axis] for r in sel]
            row = {"scenario": scenario, "seeds": [r["seed"] for r in sel]}
            for g in AXIS_GROUPS[axis]:
                row[g] = _median([rep["percentages"][g] for rep in reps])
            row["delta"] = _median([rep["delta"] for rep in reps])
            kl_key = "gender" if axis == "gender" else "ethnicity_pairwise_mean"
            row["kl"] = _median([r["kl"][kl_key] for r in sel])
            rows.append(row)
        tables[axis] = {"columns": [*AXIS_GROUPS[axis], "delta"], "rows": rows,
                        "note": "per-scenario medians over seeds; delta is the median of per-seed deltas"}

    for (axis, scenario, g), parts in pooled.items():
        text = histogram(np.concatenate(parts), exp.bins, exp.epsilon).to_csv()
        (root / axis / f"hist_{scenario}_{g}.csv").write_text(text)

    report = {"top_k": args.top_k, "bins": exp.bins, "epsilon": exp.epsilon,
              "screening_tables": tables, "runs": runs}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    (root / "bias_report.json").write_text(text)
    _log(f"wrote {root / 'bias_report.json'} covering {len(runs)} runs")
    if args.print_report:
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    default_root = os.environ.get(ENV_OUT, "runs")
    p = _Parser(prog="faircvtest", description="Synthetic multimodal hiring-bias testbed.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic profile dataset")
    g.add_argument("--profiles", type=int, default=24_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="INI file with generation settings")
    g.add_argument("--out", required=True, help="dataset CSV to write")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="train scorers for one or more scenarios")
    r.add_argument("--data", required=True)
    r.add_argument("--scenario", default="all", choices=[*SCENARIO_FLAGS, "all"])
    r.add_argument("--bias", default="gender", choices=BIAS_AXES)
    r.add_argument("--seeds", default="1,2,3")
    r.add_argument("--out", default=default_root)
    r.add_argument("--split-seed", type=int, default=0)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--config", help="INI file with [agnostic] and [metrics] sections")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("audit", help="measure bias over finished runs")
    a.add_argument("--runs", default=default_root)
    a.add_argument("--data", required=True)
    a.add_argument("--top-k", type=int, default=100)
    a.add_argument("--config", help="INI file with a [metrics] section")
    a.add_argument("--print-report", action="store_true", help="also write the JSON report to stdout")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except (ConfigError, DatasetParseError, FileNotFoundError, IsADirectoryError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
