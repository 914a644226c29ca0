"""Bias measurements on predicted scores: histogram KL and top-K screening."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScoreHistogram:
    """Normalized masses over ``bin_count`` equal-width bins on [0, 1]."""

    probabilities: np.ndarray
    epsilon: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or len(p) == 0:
            raise ValueError("probabilities must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probabilities", p)

    @property
    def bin_count(self) -> int:
        return len(self.probabilities)

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.bin_count) + 0.5) / self.bin_count

    def to_csv(self) -> str:
        rows = ["bin_center,mass"]
        rows += [f"{c:.6g},{float(m)!r}" for c, m in zip(self.bin_centers, self.probabilities)]
        return "\n".join(rows) + "\n"


def histogram(scores, bins: int = 50, epsilon: float = 1e-6) -> ScoreHistogram:
    """Equal-width histogram on [0, 1] with additive smoothing ``epsilon`` per bin.

    A score of exactly 1.0 lands in the last bin.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("cannot histogram an empty score set")
    if np.any(s < 0) or np.any(s > 1) or not np.all(np.isfinite(s)):
        raise ValueError("scores must lie in [0, 1]")
    idx = np.minimum((s * bins).astype(np.intp), bins - 1)
    mass = np.bincount(idx, minlength=bins) / s.size
    mass = (mass + epsilon) / (1.0 + bins * epsilon)
    return ScoreHistogram(mass, epsilon)


def kl_divergence(p: ScoreHistogram, q: ScoreHistogram) -> float:
    """``sum p log(p / q)`` in nats; ``p = 0`` terms contribute nothing."""
    if p.bin_count != q.bin_count:
        raise ValueError(f"histograms use different binning ({p.bin_count} vs {q.bin_count})")
    pp, qq = p.probabilities, q.probabilities
    nz = pp > 0
    if np.any(qq[nz] == 0):
        return float("inf")
    return float(max(np.sum(pp[nz] * np.log(pp[nz] / qq[nz])), 0.0))


def pairwise_kl_matrix(groups: Sequence[ScoreHistogram]) -> np.ndarray:
    """``M[i, j] = KL(groups[i] || groups[j])``."""
    n = len(groups)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                out[i, j] = kl_divergence(groups[i], groups[j])
    return out


def pairwise_mean_kl(groups: Sequence[ScoreHistogram]) -> float:
    """Average KL over unordered pairs, the earlier-listed group taken as P."""
    if len(groups) < 2:
        raise ValueError("need at least two groups")
    pairs = list(combinations(range(len(groups)), 2))
    return float(np.mean([kl_divergence(groups[i], groups[j]) for i, j in pairs]))


@dataclass(frozen=True)
class ScreeningReport:
    k: int
    groups: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def percentages(self) -> dict[str, float]:
        return {g: 100.0 * c / self.k for g, c in zip(self.groups, self.counts)}

    @property
    def delta(self) -> float:
        pct = list(self.percentages.values())
        return max(pct) - min(pct)

    def to_dict(self) -> dict:
        return {"k": self.k, "percentages": self.percentages, "counts": dict(zip(self.groups, self.counts)),
                "delta": self.delta}


def top_k_rates(ids, scores, labels, k: int = 100, groups: Sequence[str] | None = None) -> ScreeningReport:
    """Select the ``k`` highest scores (ties to the lower id) and tally group shares.

    ``labels[i]`` is the group of candidate ``ids[i]``; ``groups`` fixes the
    report's group order and may include groups with no candidates.
    """
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if k > len(scores):
        raise ValueError(f"k={k} exceeds the {len(scores)} candidates")
    if not (len(ids) == len(scores) == len(labels)):
        raise ValueError("ids, scores and labels must align")
    order = np.lexsort((ids, -scores))[:k]
    chosen = labels[order]
    if groups is None:
        groups = [str(g) for g in np.unique(labels)]
    counts = tuple(int(np.sum(chosen == g)) for g in groups)
    if sum(counts) != k:
        raise ValueError("some selected candidates belong to none of the listed groups")
    return ScreeningReport(k, tuple(str(g) for g in groups), counts)
