"""Scenario input assembly, the MLP scorer estimator, and run orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .faircvdb import ETHNICITIES, N_FEATURES, DatasetSplit, FairCVDataset, Profile
from .nn import MLP, Adam, NumericalError, TrainHistory, train

log = logging.getLogger(__name__)

SCENARIOS = ("S1", "S2", "S3", "S4", "agnostic")
BIAS_AXES = ("gender", "ethnicity")

_LAYOUT = {
    # id: (biased target, demographics, embedding)
    "S1": (False, True, "none"),
    "S2": (True, True, "none"),
    "S3": (True, False, "none"),
    "S4": (True, False, "raw"),
    "agnostic": (True, False, "agnostic"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    bias_axis: str = "gender"

    def __post_init__(self):
        if self.id not in _LAYOUT:
            raise ValueError(f"unknown scenario {self.id!r}; choose from {SCENARIOS}")
        if self.bias_axis not in BIAS_AXES:
            raise ValueError(f"unknown bias axis {self.bias_axis!r}")

    @property
    def biased(self) -> bool:
        return _LAYOUT[self.id][0]

    @property
    def demographics(self) -> bool:
        return _LAYOUT[self.id][1]

    @property
    def embedding(self) -> str:
        return _LAYOUT[self.id][2]

    @property
    def target(self) -> str:
        return self.bias_axis if self.biased else "unbiased"

    @property
    def input_dim(self) -> int:
        return N_FEATURES + 4 * self.demographics + 20 * (self.embedding != "none")


def _demographic_block(gender: np.ndarray, ethnicity: np.ndarray) -> np.ndarray:
    is_male = (np.asarray(gender) == 0).astype(np.float64)
    return np.column_stack([is_male, np.eye(len(ETHNICITIES))[np.asarray(ethnicity)]])


def assemble_inputs(data: FairCVDataset, cfg: ScenarioConfig, transform=None) -> np.ndarray:
    """Input matrix: merits, then [is_male, one-hot ethnicity], then the embedding."""
    parts = [data.competencies]
    if cfg.demographics:
        parts.append(_demographic_block(data.gender, data.ethnicity))
    if cfg.embedding == "raw":
        parts.append(data.embeddings)
    elif cfg.embedding == "agnostic":
        if transform is None:
            raise ValueError("the agnostic scenario needs a fitted agnostic transform")
        parts.append(transform.transform(data.embeddings))
    return np.column_stack(parts)


def assemble_input(p: Profile, cfg: ScenarioConfig, transform=None) -> np.ndarray:
    parts = [np.asarray(p.competencies, dtype=np.float64)]
    if cfg.demographics:
        gender = 0 if p.gender == "M" else 1
        parts.append(_demographic_block([gender], [ETHNICITIES.index(p.ethnicity)])[0])
    if cfg.embedding == "raw":
        parts.append(np.asarray(p.embedding, dtype=np.float64))
    elif cfg.embedding == "agnostic":
        if transform is None:
            raise ValueError("the agnostic scenario needs a fitted agnostic transform")
        parts.append(transform.transform(np.asarray(p.embedding)[None, :])[0])
    return np.concatenate(parts)


class MLPScorer(RegressorMixin, BaseEstimator):
    """``d -> 10 -> 10 -> 1`` ReLU/ReLU/sigmoid regressor trained on MAE with Adam."""

    def __init__(self, hidden=(10, 10), epochs=10, batch_size=128, lr=1e-3, random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None, callback=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        sizes = [X.shape[1], *self.hidden, 1]
        self.net_ = MLP.build(sizes, ["relu"] * len(self.hidden) + ["sigmoid"], rng)
        self.n_features_in_ = X.shape[1]
        _, self.history_ = train(
            self.net_, X, y, X_val, y_val, loss="mae", epochs=self.epochs,
            batch_size=self.batch_size, seed=rng, optimizer=Adam(lr=self.lr), callback=callback,
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return self.net_.predict(X).ravel()


@dataclass
class RunResult:
    scenario: ScenarioConfig
    seed: int
    history: TrainHistory
    ids: np.ndarray
    predictions: np.ndarray
    model: MLP
    transform: Optional[object] = None
    extras: dict = field(default_factory=dict)

    @property
    def final_val_loss(self) -> float:
        return self.history.val_loss[-1]

    def write(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.history.to_csv(d / "history.csv")
        lines = ["id,score"] + [f"{int(i)},{float(s)!r}" for i, s in zip(self.ids, self.predictions)]
        (d / "predictions.csv").write_text("\n".join(lines) + "\n")
        self.model.save(d / "model.bin")
        if self.transform is not None:
            self.transform.save(d / "transform.bin")
            trace = getattr(self.transform, "leakage_trace_", None)
            if trace:
                rows = ["epoch,attr,probe_accuracy"]
                rows += [f"{e},{a},{float(acc)!r}" for e, a, acc in trace]
                (d / "leakage.csv").write_text("\n".join(rows) + "\n")
        return d


def run_scenario(
    split: DatasetSplit,
    cfg: ScenarioConfig,
    seed: int = 0,
    transform=None,
    callback: Callable[[int, float, float], None] | None = None,
    **scorer_params,
) -> RunResult:
    """Train a fresh scorer for one scenario and predict the validation set."""
    X_tr = assemble_inputs(split.train, cfg, transform)
    X_va = assemble_inputs(split.validation, cfg, transform)
    y_tr = split.train.target(cfg.target)
    y_va = split.validation.target(cfg.target)
    scorer = MLPScorer(random_state=seed, **scorer_params)
    scorer.fit(X_tr, y_tr, X_va, y_va, callback=callback)
    return RunResult(cfg, seed, scorer.history_, split.validation.ids.copy(),
                     scorer.predict(X_va), scorer.net_, transform)


def run_all(
    split: DatasetSplit,
    bias_axis: str,
    seeds,
    scenarios=SCENARIOS,
    agnostic_config=None,
    jobs: int = 1,
) -> dict[tuple[str, int], RunResult | Exception]:
    """Run every scenario for every seed; a failed run is stored as its exception."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    tasks = [(s, seed) for seed in seeds for s in scenarios]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            futures = {
                key: pool.submit(_run_one, split, key[0], bias_axis, key[1], agnostic_config)
                for key in tasks
            }
            results = {}
            for key, fut in futures.items():
                try:
                    results[key] = fut.result()
                except Exception as exc:  # reported per key, others continue
                    results[key] = exc
            return results
    results = {}
    for key in tasks:
        try:
            results[key] = _run_one(split, key[0], bias_axis, key[1], agnostic_config)
        except (NumericalError, ValueError) as exc:
            log.error("run %s seed %s failed: %s", key[0], key[1], exc)
            results[key] = exc
    return results


def _run_one(split, scenario, bias_axis, seed, agnostic_config=None, transform=None, callback=None):
    cfg = ScenarioConfig(scenario, bias_axis)
    if cfg.embedding == "agnostic" and transform is None:
        from .sensinets import AgnosticTrainConfig, AgnosticTransform

        params = (agnostic_config or AgnosticTrainConfig()).estimator_params()
        transform = AgnosticTransform(bias_axis=bias_axis, random_state=seed, **params)
        transform.fit_dataset(split.train)
    return run_scenario(split, cfg, seed, transform=transform, callback=callback)
