"""Synthetic 20-d face embeddings with planted demographic signal, plus probes.

An embedding is ``z + s_g * sign(gender) * u_g + s_e * m[ethnicity]`` with
``z ~ N(0, sigma^2 I)``. The four directions are orthonormal and derived from
``direction_seed`` only, so every dataset built with the same config shares
them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .nn import MLP, Adam, Dense, ce_loss, train

EMBED_DIM = 20


@dataclass(frozen=True)
class EmbeddingGenConfig:
    gender_strength: float = 2.0
    ethnicity_strength: float = 2.5
    noise_sigma: float = 1.0
    direction_seed: int = 0

    def __post_init__(self):
        if self.gender_strength < 0 or self.ethnicity_strength < 0:
            raise ValueError("signal strengths must be non-negative")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")

    def directions(self) -> tuple[np.ndarray, np.ndarray]:
        """``(u_gender, m_ethnicity)`` with shapes ``(20,)`` and ``(3, 20)``."""
        basis = _orthonormal_directions(self.direction_seed)
        return basis[0].copy(), basis[1:].copy()


def gram_schmidt(vectors: np.ndarray) -> np.ndarray:
    """Orthonormalize the rows of ``vectors`` in order (modified Gram-Schmidt)."""
    out = []
    for v in np.asarray(vectors, dtype=np.float64):
        w = v.copy()
        for q in out:
            w -= (q @ w) * q
        norm = np.linalg.norm(w)
        if norm < 1e-12:
            raise ValueError("vectors are linearly dependent")
        out.append(w / norm)
    return np.array(out)


@lru_cache(maxsize=16)
def _orthonormal_directions(seed: int) -> np.ndarray:
    draws = np.random.default_rng(seed).standard_normal((4, EMBED_DIM))
    basis = gram_schmidt(draws)
    basis.setflags(write=False)
    return basis


def generate_embedding(
    rng: np.random.Generator,
    gender: np.ndarray | int,
    ethnicity: np.ndarray | int,
    cfg: EmbeddingGenConfig = EmbeddingGenConfig(),
) -> np.ndarray:
    """Embeddings for gender codes (0 male, 1 female) and ethnicity codes 0..2.

    Scalars give one ``(20,)`` vector; arrays give ``(n, 20)``.
    """
    scalar = np.ndim(gender) == 0
    gender = np.atleast_1d(np.asarray(gender, dtype=np.intp))
    ethnicity = np.atleast_1d(np.asarray(ethnicity, dtype=np.intp))
    u_g, m = cfg.directions()
    sign = np.where(gender == 0, 1.0, -1.0)
    z = rng.normal(0.0, cfg.noise_sigma, size=(len(gender), EMBED_DIM))
    e = z + cfg.gender_strength * sign[:, None] * u_g + cfg.ethnicity_strength * m[ethnicity]
    return e[0] if scalar else e


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression trained with Adam on cross-entropy.

    Inputs are standardized per column with training statistics. With
    ``preprocess="whiten"`` they are ZCA-whitened instead, which sees through
    any invertible linear map, however badly conditioned.
    """

    def __init__(self, epochs=30, batch_size=128, lr=0.01, preprocess="standardize", random_state=0):
        self.epochs = epochs
        self.preprocess = preprocess
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("probe needs at least two classes")
        if np.bincount(codes).min() < 2:
            raise ValueError("probe needs at least two examples per class")
        self.n_features_in_ = X.shape[1]
        if self.preprocess == "whiten":
            self.mean_, self.whitener_ = whitening(X)
        elif self.preprocess == "standardize":
            self.mean_ = X.mean(axis=0)
            self.whitener_ = np.diag(1.0 / np.maximum(X.std(axis=0), 1e-12))
        else:
            raise ValueError(f"unknown preprocess {self.preprocess!r}")
        rng = np.random.default_rng(self.random_state)
        self.net_ = MLP.build([X.shape[1], len(self.classes_)], ["softmax"], rng)
        train(
            self.net_, self._standardize(X), codes, loss="ce", epochs=self.epochs,
            batch_size=self.batch_size, seed=rng, optimizer=Adam(lr=self.lr),
        )
        return self

    @classmethod
    def from_weights(cls, weights, bias, classes=None) -> "LinearProbe":
        """A probe with fixed raw-space weights ``(d, K)`` and bias ``(K,)``."""
        weights = np.asarray(weights, dtype=np.float64)
        probe = cls()
        probe.classes_ = np.arange(weights.shape[1]) if classes is None else np.asarray(classes)
        probe.n_features_in_ = weights.shape[0]
        probe.mean_ = np.zeros(weights.shape[0])
        probe.whitener_ = np.eye(weights.shape[0])
        probe.net_ = MLP([Dense(weights.copy(), np.asarray(bias, dtype=np.float64), "softmax")])
        return probe

    def _standardize(self, X):
        return (X - self.mean_) @ self.whitener_

    @property
    def weights(self) -> np.ndarray:
        """Weights in raw input space, shape ``(d, K)``."""
        check_is_fitted(self, "net_")
        return self.whitener_ @ self.net_.layers[0].weight

    @property
    def bias(self) -> np.ndarray:
        check_is_fitted(self, "net_")
        layer = self.net_.layers[0]
        return layer.bias - self.mean_ @ self.whitener_ @ layer.weight

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"probe expects {self.n_features_in_} features, got {X.shape[1]}")
        return self.net_.predict(self._standardize(X))

    def predict(self, X):
        # np.argmax resolves ties toward the lowest class index.
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


def whitening(X: np.ndarray, ridge: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """``(mean, P)`` such that ``(X - mean) @ P`` has identity covariance (ZCA).

    ``ridge`` is relative to the largest eigenvalue and only guards exact
    degeneracy; constant directions stay at zero.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    top = max(vals.max(), 0.0)
    keep = vals > ridge * top if top > 0 else np.zeros_like(vals, dtype=bool)
    inv_sqrt = np.where(keep, 1.0 / np.sqrt(np.where(keep, vals, 1.0)), 0.0)
    return mu, (vecs * inv_sqrt) @ vecs.T


def fit_probe(embeddings, labels, random_state=0, holdout=0.2, **probe_params) -> LinearProbe:
    """Fit a :class:`LinearProbe` on a stratified split; ``holdout_accuracy_`` is set."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("cannot fit a probe on single-class labels")
    if counts.min() < 2:
        raise ValueError("need at least two examples per class")
    X_tr, X_te, y_tr, y_te = train_test_split(
        X, y, test_size=holdout, stratify=y, random_state=random_state
    )
    probe = LinearProbe(random_state=random_state, **probe_params).fit(X_tr, y_tr)
    probe.holdout_accuracy_ = probe_accuracy(probe, X_te, y_te)
    return probe


def probe_accuracy(probe: LinearProbe, embeddings, labels) -> float:
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("probe_accuracy needs a non-empty 2-D batch")
    return float(np.mean(probe.predict(X) == np.asarray(labels)))
