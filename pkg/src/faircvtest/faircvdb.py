"""Synthetic resume profiles: competencies, demographics, embeddings, scores.

Columnar storage (:class:`FairCVDataset`) holds the data; :class:`Profile`
is the per-row view. Gender codes are 0 = male, 1 = female; ethnicity codes
0..2 correspond to G1..G3.
"""

from __future__ import annotations

import configparser
import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .synthembed import EMBED_DIM, EmbeddingGenConfig, generate_embedding

N_FEATURES = 12
FEATURES = (
    "education", "experience", "availability", "recommendation",
    *(f"lang{i}" for i in range(1, 9)),
)
GENDERS = ("M", "F")
ETHNICITIES = ("G1", "G2", "G3")
N_GROUPS = len(GENDERS) * len(ETHNICITIES)

CSV_HEADER = (
    ["id", "gender", "ethnicity"]
    + [f"c{i:02d}" for i in range(1, N_FEATURES + 1)]
    + [f"e{i:02d}" for i in range(1, EMBED_DIM + 1)]
    + ["t_u", "t_g", "t_e"]
)


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class BlockDistribution:
    levels: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(x) for x in self.levels))
        object.__setattr__(self, "probs", tuple(float(x) for x in self.probs))
        if len(self.levels) != len(self.probs) or not self.levels:
            raise ConfigError("levels and probs must be non-empty and of equal length")
        if any(not 0.0 <= x <= 1.0 for x in self.levels):
            raise ConfigError(f"levels must lie in [0, 1]: {self.levels}")
        if any(p < 0 for p in self.probs) or abs(sum(self.probs) - 1.0) > 1e-9:
            raise ConfigError(f"probabilities must be non-negative and sum to 1: {self.probs}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(len(self.levels), size=size, p=np.asarray(self.probs))
        return np.asarray(self.levels)[idx]

    def at_least(self, minimum: float) -> "BlockDistribution":
        """This distribution conditioned on ``level >= minimum``."""
        keep = [(l, p) for l, p in zip(self.levels, self.probs) if l >= minimum - 1e-12]
        total = sum(p for _, p in keep)
        if total <= 0:
            raise ConfigError(f"no probability mass at or above {minimum}")
        return BlockDistribution(tuple(l for l, _ in keep), tuple(p / total for _, p in keep))


def _geometric(ratio: float, n: int) -> tuple[float, ...]:
    w = ratio ** np.arange(n)
    return tuple(w / w.sum())


@dataclass(frozen=True)
class CompetencyDistributions:
    education: BlockDistribution = BlockDistribution(
        (0.0, 0.2, 0.4, 0.6, 0.8, 1.0), (0.10, 0.28, 0.22, 0.10, 0.25, 0.05)
    )
    experience: BlockDistribution = BlockDistribution(
        tuple(k / 10 for k in range(11)), _geometric(0.8, 11)
    )
    availability: BlockDistribution = BlockDistribution((0.0, 0.5, 1.0), (1 / 3, 1 / 3, 1 / 3))
    recommendation: BlockDistribution = BlockDistribution((0.0, 1.0), (0.7, 0.3))
    language: BlockDistribution = BlockDistribution(
        (0.0, 1 / 3, 2 / 3, 1.0), (0.55, 0.20, 0.15, 0.10)
    )
    first_language_min: float = 1 / 3

    def blocks(self) -> list[BlockDistribution]:
        """Per-feature distributions in :data:`FEATURES` order."""
        first = self.language.at_least(self.first_language_min)
        return [self.education, self.experience, self.availability, self.recommendation,
                first] + [self.language] * 7


DEFAULT_ALPHA = (0.25, 0.15, 0.10, 0.10) + (0.05,) * 8


@dataclass(frozen=True)
class ScoringWeights:
    alpha: tuple[float, ...] = DEFAULT_ALPHA
    noise_sigma: float = 0.02
    gender_penalty: float = 0.15
    ethnicity_penalty: tuple[float, float, float] = (0.0, 0.075, 0.15)

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "ethnicity_penalty", tuple(float(p) for p in self.ethnicity_penalty))
        if len(self.alpha) != N_FEATURES:
            raise ConfigError(f"need {N_FEATURES} weights, got {len(self.alpha)}")
        if min(self.alpha) < 0 or abs(sum(self.alpha) - 1.0) > 1e-12:
            raise ConfigError("weights must be non-negative and sum to 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if not 0 <= self.gender_penalty <= 1:
            raise ConfigError("gender penalty must lie in [0, 1]")
        if len(self.ethnicity_penalty) != 3 or any(not 0 <= p <= 1 for p in self.ethnicity_penalty):
            raise ConfigError("need three ethnicity penalties in [0, 1]")
        if self.ethnicity_penalty[0] != 0:
            raise ConfigError("G1 is the reference group; its penalty must be 0")


@dataclass(frozen=True)
class GenerationConfig:
    weights: ScoringWeights = field(default_factory=ScoringWeights)
    distributions: CompetencyDistributions = field(default_factory=CompetencyDistributions)
    embedding: EmbeddingGenConfig = field(default_factory=EmbeddingGenConfig)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        w, d, e = self.weights, self.distributions, self.embedding
        cp["weights"] = {name: repr(a) for name, a in zip(FEATURES, w.alpha)}
        dist = {}
        for name in ("education", "experience", "availability", "recommendation", "language"):
            block = getattr(d, name)
            dist[f"{name}.levels"] = ", ".join(repr(x) for x in block.levels)
            dist[f"{name}.probs"] = ", ".join(repr(x) for x in block.probs)
        dist["language.first_min"] = repr(d.first_language_min)
        cp["distributions"] = dist
        cp["penalties"] = {
            "gender": repr(w.gender_penalty),
            "ethnicity": ", ".join(repr(x) for x in w.ethnicity_penalty),
        }
        cp["noise"] = {"sigma": repr(w.noise_sigma)}
        cp["embedding"] = {
            "gender_strength": repr(e.gender_strength),
            "ethnicity_strength": repr(e.ethnicity_strength),
            "noise_sigma": repr(e.noise_sigma),
            "direction_seed": str(e.direction_seed),
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "GenerationConfig":
        """Parse a config; missing sections or keys keep their defaults."""
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        base = cls()

        def floats(value: str) -> tuple[float, ...]:
            return tuple(float(x) for x in value.split(","))

        try:
            w = base.weights
            if cp.has_section("weights"):
                alpha = tuple(cp.getfloat("weights", n, fallback=a) for n, a in zip(FEATURES, w.alpha))
                w = replace(w, alpha=alpha)
            if cp.has_section("penalties"):
                w = replace(
                    w,
                    gender_penalty=cp.getfloat("penalties", "gender", fallback=w.gender_penalty),
                    ethnicity_penalty=floats(cp["penalties"]["ethnicity"])
                    if cp.has_option("penalties", "ethnicity") else w.ethnicity_penalty,
                )
            if cp.has_section("noise"):
                w = replace(w, noise_sigma=cp.getfloat("noise", "sigma", fallback=w.noise_sigma))
            d = base.distributions
            if cp.has_section("distributions"):
                sec = cp["distributions"]
                blocks = {}
                for name in ("education", "experience", "availability", "recommendation", "language"):
                    cur = getattr(d, name)
                    levels = floats(sec[f"{name}.levels"]) if f"{name}.levels" in sec else cur.levels
                    probs = floats(sec[f"{name}.probs"]) if f"{name}.probs" in sec else cur.probs
                    blocks[name] = BlockDistribution(levels, probs)
                first = float(sec.get("language.first_min", d.first_language_min))
                d = CompetencyDistributions(**blocks, first_language_min=first)
            e = base.embedding
            if cp.has_section("embedding"):
                sec = cp["embedding"]
                e = EmbeddingGenConfig(
                    gender_strength=float(sec.get("gender_strength", e.gender_strength)),
                    ethnicity_strength=float(sec.get("ethnicity_strength", e.ethnicity_strength)),
                    noise_sigma=float(sec.get("noise_sigma", e.noise_sigma)),
                    direction_seed=int(sec.get("direction_seed", e.direction_seed)),
                )
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid generation config: {exc}") from None
        return cls(w, d, e)

    @classmethod
    def load(cls, path: str | Path) -> "GenerationConfig":
        return cls.from_ini(Path(path).read_text())


# -- scoring --------------------------------------------------------------------


def sample_competencies(
    rng: np.random.Generator,
    dists: CompetencyDistributions = CompetencyDistributions(),
    size: int | None = None,
) -> np.ndarray:
    """One ``(12,)`` competency vector, or ``(size, 12)`` when ``size`` is given."""
    n = 1 if size is None else size
    out = np.column_stack([block.sample(rng, n) for block in dists.blocks()])
    return out[0] if size is None else out


def compute_unbiased_score(competencies, weights: ScoringWeights, noise=0.0):
    raw = np.asarray(competencies, dtype=np.float64) @ np.asarray(weights.alpha) + noise
    return np.clip(raw, 0.0, 1.0)


def apply_bias_penalty(score, gender, ethnicity, weights: ScoringWeights, axis: str):
    """Subtract the group penalty along ``axis`` ('gender' or 'ethnicity'), clamped to [0, 1]."""
    axis = axis.lower()
    if axis == "gender":
        penalty = np.where(np.asarray(gender) == 1, weights.gender_penalty, 0.0)
    elif axis == "ethnicity":
        penalty = np.asarray(weights.ethnicity_penalty)[np.asarray(ethnicity, dtype=np.intp)]
    else:
        raise ValueError(f"unknown bias axis {axis!r}")
    return np.clip(np.asarray(score, dtype=np.float64) - penalty, 0.0, 1.0)


# -- dataset --------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    id: int
    gender: str
    ethnicity: str
    competencies: np.ndarray
    embedding: np.ndarray
    score_unbiased: float
    score_gender_biased: float
    score_ethnicity_biased: float


@dataclass
class FairCVDataset:
    ids: np.ndarray
    gender: np.ndarray
    ethnicity: np.ndarray
    competencies: np.ndarray
    embeddings: np.ndarray
    t_unbiased: np.ndarray
    t_gender: np.ndarray
    t_ethnicity: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Profile:
        return Profile(
            int(self.ids[i]), GENDERS[self.gender[i]], ETHNICITIES[self.ethnicity[i]],
            self.competencies[i].copy(), self.embeddings[i].copy(),
            float(self.t_unbiased[i]), float(self.t_gender[i]), float(self.t_ethnicity[i]),
        )

    def __iter__(self) -> Iterator[Profile]:
        return (self[i] for i in range(len(self)))

    @property
    def groups(self) -> np.ndarray:
        """Joint group code ``3 * gender + ethnicity`` in 0..5."""
        return self.gender * len(ETHNICITIES) + self.ethnicity

    def subset(self, idx) -> "FairCVDataset":
        return FairCVDataset(*(getattr(self, f)[idx] for f in _FIELDS))

    def target(self, kind: str) -> np.ndarray:
        return {"unbiased": self.t_unbiased, "gender": self.t_gender,
                "ethnicity": self.t_ethnicity}[kind]

    def equals(self, other: "FairCVDataset") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


_FIELDS = ("ids", "gender", "ethnicity", "competencies", "embeddings",
           "t_unbiased", "t_gender", "t_ethnicity")


def generate_dataset(n: int, config: GenerationConfig = GenerationConfig(), seed: int = 0) -> FairCVDataset:
    if n <= 0 or n % N_GROUPS:
        raise ValueError(f"profile count must be a positive multiple of {N_GROUPS}, got {n}")
    rng = np.random.default_rng(seed)
    groups = rng.permutation(np.repeat(np.arange(N_GROUPS), n // N_GROUPS))
    gender, ethnicity = np.divmod(groups, len(ETHNICITIES))
    comp = sample_competencies(rng, config.distributions, size=n)
    noise = rng.normal(0.0, config.weights.noise_sigma, size=n)
    emb = generate_embedding(rng, gender, ethnicity, config.embedding)
    t_u = compute_unbiased_score(comp, config.weights, noise)
    return FairCVDataset(
        ids=np.arange(n),
        gender=gender,
        ethnicity=ethnicity,
        competencies=comp,
        embeddings=emb,
        t_unbiased=t_u,
        t_gender=apply_bias_penalty(t_u, gender, ethnicity, config.weights, "gender"),
        t_ethnicity=apply_bias_penalty(t_u, gender, ethnicity, config.weights, "ethnicity"),
    )


@dataclass
class DatasetSplit:
    train: FairCVDataset
    validation: FairCVDataset


def split_dataset(data: FairCVDataset, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Stratified split keeping every demographic group's share exact."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for g in range(N_GROUPS):
        members = np.flatnonzero(data.groups == g)
        n_train = ratio * len(members)
        if len(members) == 0 or abs(n_train - round(n_train)) > 1e-9:
            raise ValueError(
                f"cannot split group of {len(members)} profiles at ratio {ratio} into whole profiles"
            )
        members = rng.permutation(members)
        train_idx.append(members[:round(n_train)])
        val_idx.append(members[round(n_train):])
    if len(set(len(t) for t in train_idx)) != 1:
        raise ValueError("dataset is not balanced across demographic groups")
    return DatasetSplit(
        data.subset(np.sort(np.concatenate(train_idx))),
        data.subset(np.sort(np.concatenate(val_idx))),
    )


# -- CSV io -----------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_dataset(data: FairCVDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i in range(len(data)):
            w.writerow(
                [int(data.ids[i]), GENDERS[data.gender[i]], ETHNICITIES[data.ethnicity[i]]]
                + [_fmt(x) for x in data.competencies[i]]
                + [_fmt(x) for x in data.embeddings[i]]
                + [_fmt(data.t_unbiased[i]), _fmt(data.t_gender[i]), _fmt(data.t_ethnicity[i])]
            )


def load_dataset(path: str | Path) -> FairCVDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DatasetParseError(1, "unexpected header")
        rows = list(reader)
    n = len(rows)
    ids = np.empty(n, dtype=np.int64)
    gender = np.empty(n, dtype=np.int64)
    eth = np.empty(n, dtype=np.int64)
    reals = np.empty((n, N_FEATURES + EMBED_DIM + 3))
    for r, row in enumerate(rows):
        line = r + 2  # 1-based, after the header
        if len(row) != len(CSV_HEADER):
            raise DatasetParseError(line, f"expected {len(CSV_HEADER)} columns, found {len(row)}")
        try:
            ids[r] = int(row[0])
            gender[r] = GENDERS.index(row[1])
            eth[r] = ETHNICITIES.index(row[2])
            reals[r] = [float(x) for x in row[3:]]
        except ValueError as exc:
            raise DatasetParseError(line, str(exc)) from None
        if not np.all(np.isfinite(reals[r])):
            raise DatasetParseError(line, "non-finite value")
        bounded = np.concatenate([reals[r, :N_FEATURES], reals[r, -3:]])
        if bounded.min() < 0 or bounded.max() > 1:
            raise DatasetParseError(line, "competency or score outside [0, 1]")
    return FairCVDataset(
        ids=ids,
        gender=gender,
        ethnicity=eth,
        competencies=reals[:, :N_FEATURES].copy(),
        embeddings=reals[:, N_FEATURES:N_FEATURES + EMBED_DIM].copy(),
        t_unbiased=reals[:, -3].copy(),
        t_gender=reals[:, -2].copy(),
        t_ethnicity=reals[:, -1].copy(),
    )
