"""Demographic-agnostic embedding transform learned against adversarial probes.

The transform is a linear 20 -> 20 projection trained jointly with a scorer
on ``MAE + lam * mean(sensitiveness)``, where sensitiveness is
``log K - H(p)`` of each attribute probe's softmax output. Each outer epoch
the probes first fit the frozen transform's output, then the transform and
scorer take one epoch with the probes frozen but differentiated through.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .faircvdb import FairCVDataset
from .nn import MLP, Adam, Dense, NumericalError, batches, ce_loss, check_finite, confusion_loss, mae_loss
from .synthembed import EMBED_DIM, fit_probe

N_CLASSES = {"gender": 2, "ethnicity": 3}


@dataclass(frozen=True)
class AgnosticTrainConfig:
    lam: float = 1.0
    outer_epochs: int = 10
    probe_inner_epochs: int = 3
    attributes: tuple[str, ...] = ("gender", "ethnicity")

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lam must be finite and non-negative")
        if self.outer_epochs < 1:
            raise ValueError("outer_epochs must be >= 1")
        if self.probe_inner_epochs < 0:
            raise ValueError("probe_inner_epochs must be >= 0")
        unknown = set(self.attributes) - set(N_CLASSES)
        if unknown:
            raise ValueError(f"unknown attributes {sorted(unknown)}")

    def estimator_params(self) -> dict:
        d = asdict(self)
        d["attributes"] = tuple(d["attributes"])
        return d


def sensitiveness(probes: Mapping[str, MLP], e: np.ndarray) -> np.ndarray:
    """Per-row ``sum_a (log K_a - H(probe_a(e)))``; zero iff every probe is uniform.

    ``e`` is passed to the probes as given; :class:`AgnosticTransform` centers
    its output first.
    """
    e = np.asarray(e, dtype=np.float64)
    total = np.zeros(len(e))
    for probe in probes.values():
        p = probe.predict(e)
        plogp = np.where(p > 0, p * np.log(np.maximum(p, 1e-300)), 0.0)
        total += np.log(p.shape[1]) + plogp.sum(axis=1)
    return total


def _orthonormalize(A: np.ndarray) -> np.ndarray:
    # QR with a sign convention that keeps columns continuous across steps.
    if A.shape[1] == 0:
        return A.copy()
    q, r = np.linalg.qr(A)
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def projector_gradient(V: np.ndarray, grad_w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. orthonormal ``V`` of a loss through ``W = I - V V^T``.

    ``grad_w`` is the loss gradient w.r.t. ``W``; the result lies in the
    tangent space of the orthonormal frames (``V^T G`` is zero on exit).
    """
    S = -(grad_w + grad_w.T)
    return S @ V - V @ (V.T @ S @ V)


def _center(T: np.ndarray) -> np.ndarray:
    # Probes read batch-centered outputs, so the transform bias cannot shift
    # them into a regime where they saturate.
    return T - T.mean(axis=0)


def _probe_accuracy(probe: MLP, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(probe.predict(X), axis=1) == y))


class AgnosticTransform(TransformerMixin, BaseEstimator):
    """Learned projection that strips demographic signal from embeddings.

    The map is ``e -> e @ (I - V V^T) + b`` with ``V`` a ``(d, rank)``
    orthonormal basis of the removed subspace. A projector can only discard
    directions, so the one way to confuse a frozen probe is to drop what it
    reads; an unconstrained linear map could instead rotate the signal into
    the probe's blind spots and lose nothing.

    ``fit`` needs the task target, the merit features fed to the joint scorer,
    and the sensitive labels per attribute. After fitting: ``net_`` (the
    20 -> 20 map as a dense layer), ``scorer_``, ``probes_``, ``history_``
    (epoch, task loss, mean sensitiveness) and ``leakage_trace_``, a list of
    ``(epoch, attribute, probe accuracy)`` measured after each probe phase.
    """

    def __init__(self, lam=1.0, outer_epochs=10, probe_inner_epochs=3,
                 attributes=("gender", "ethnicity"), bias_axis="gender", rank=4,
                 lr=1e-3, transform_lr=3e-3, probe_lr=1e-3, batch_size=128, random_state=0):
        self.lam = lam
        self.outer_epochs = outer_epochs
        self.probe_inner_epochs = probe_inner_epochs
        self.attributes = attributes
        self.bias_axis = bias_axis
        self.rank = rank
        self.lr = lr
        self.transform_lr = transform_lr
        self.probe_lr = probe_lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y, merits=None, sensitive: Mapping[str, np.ndarray] | None = None):
        AgnosticTrainConfig(self.lam, self.outer_epochs, self.probe_inner_epochs, tuple(self.attributes))
        E = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        if len(y) != len(E):
            raise ValueError("X and y have different lengths")
        merits = np.zeros((len(E), 0)) if merits is None else check_array(merits, dtype=np.float64)
        sensitive = dict(sensitive or {})
        missing = [a for a in self.attributes if a not in sensitive]
        if missing:
            raise ValueError(f"sensitive labels missing for {missing}")
        labels = {a: np.asarray(sensitive[a], dtype=np.intp) for a in self.attributes}
        n, d = E.shape
        if not 0 <= self.rank < d:
            raise ValueError(f"rank must be in [0, {d})")
        self.n_features_in_ = d

        rng = np.random.default_rng(self.random_state)
        self.basis_ = _orthonormalize(rng.standard_normal((d, self.rank)))
        self.net_ = MLP([Dense(self._projector(), np.zeros(d), "identity")])
        self.scorer_ = MLP.build([merits.shape[1] + d, 10, 10, 1], ["relu", "relu", "sigmoid"], rng)
        self.probes_ = {a: MLP.build([d, 10, N_CLASSES[a]], ["relu", "softmax"], rng) for a in self.attributes}
        probe_opt = {a: Adam(lr=self.probe_lr) for a in self.attributes}
        scorer_opt = Adam(lr=self.lr)
        transform_opt = Adam(lr=self.transform_lr)
        layer = self.net_.layers[0]
        self.leakage_trace_ = []
        self.history_ = []

        for epoch in range(1, self.outer_epochs + 1):
            # (a) probes fit the frozen transform's output
            for _ in range(self.probe_inner_epochs):
                for b, idx in enumerate(batches(n, self.batch_size, rng)):
                    self._probe_step(_center(self.net_.predict(E[idx])), labels, idx, probe_opt,
                                     f"probe phase, epoch {epoch}, batch {b}")
            T = self.net_.predict(E)
            for a, probe in self.probes_.items():
                self.leakage_trace_.append((epoch, a, _probe_accuracy(probe, _center(T), labels[a])))

            # (b) transform + scorer against the frozen probes
            task_sum = delta_sum = 0.0
            for b, idx in enumerate(batches(n, self.batch_size, rng)):
                where = f"transform phase, epoch {epoch}, batch {b}"
                task, delta, g_scorer, g_v, g_b = self._joint_gradients(E[idx], merits[idx], y[idx])
                if not np.isfinite(task + delta):
                    raise NumericalError(f"{where}: loss is not finite")
                try:
                    transform_opt.step([self.basis_, layer.bias], [g_v, g_b])
                    scorer_opt.step(self.scorer_.params(), g_scorer)
                except NumericalError as exc:
                    raise NumericalError(f"{where}: {exc}") from None
                self.basis_[...] = _orthonormalize(self.basis_)
                layer.weight[...] = self._projector()
                task_sum += task
                delta_sum += delta
            check_finite(self.net_.params() + self.scorer_.params(), f"parameters after epoch {epoch}")
            self.history_.append((epoch, task_sum / (b + 1), delta_sum / (b + 1)))
        return self

    def _joint_gradients(self, E, merits, y):
        """Transform-phase objective on one batch and its gradients.

        Returns ``(task, delta, scorer grads, dL/dV, dL/db)``; the objective is
        ``task + lam * delta`` and ``dL/dV`` is tangent to the frame manifold.
        """
        acts_t = self.net_.forward(E)
        t_out = acts_t[-1]
        acts_s = self.scorer_.forward(np.hstack([merits, t_out]))
        task, g_out = mae_loss(acts_s[-1], y)
        g_scorer, g_in = self.scorer_.backward(acts_s, g_out)
        g_t = g_in[:, merits.shape[1]:].copy()
        delta = 0.0
        if self.lam > 0:
            g_z = np.zeros_like(t_out)
            for probe in self.probes_.values():
                acts_p = probe.forward(_center(t_out))
                term, g_conf = confusion_loss(acts_p[-1])
                _, g_p = probe.backward(acts_p, self.lam * g_conf)
                g_z += g_p
                delta += term
            g_t += g_z - g_z.mean(axis=0)
        (g_w, g_b), _ = self.net_.backward(acts_t, g_t)
        return task, delta, g_scorer, projector_gradient(self.basis_, g_w), g_b

    def _projector(self):
        return np.eye(len(self.basis_)) - self.basis_ @ self.basis_.T

    def _probe_step(self, T, labels, idx, optimizers, where):
        for a, probe in self.probes_.items():
            acts = probe.forward(T)
            _, g = ce_loss(acts[-1], labels[a][idx])
            grads, _ = probe.backward(acts, g)
            try:
                optimizers[a].step(probe.params(), grads)
            except NumericalError as exc:
                raise NumericalError(f"{where}, {a}: {exc}") from None

    def fit_dataset(self, data: FairCVDataset) -> "AgnosticTransform":
        """Fit on a training partition with its ``bias_axis``-biased target."""
        return self.fit(
            data.embeddings, data.target(self.bias_axis), merits=data.competencies,
            sensitive={"gender": data.gender, "ethnicity": data.ethnicity},
        )

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} embedding columns, got {X.shape[1]}")
        return self.net_.predict(X)

    def sensitiveness(self, X) -> np.ndarray:
        check_is_fitted(self, "probes_")
        return sensitiveness(self.probes_, _center(self.transform(X)))

    @classmethod
    def from_linear(cls, weight, bias=None) -> "AgnosticTransform":
        """Wrap a fixed linear map ``e -> e @ weight + bias``."""
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.zeros(weight.shape[1]) if bias is None else bias
        return cls._from_net(MLP([Dense(weight, bias, "identity")]))

    @classmethod
    def _from_net(cls, net: MLP) -> "AgnosticTransform":
        t = cls()
        t.net_ = net
        t.n_features_in_ = net.input_dim
        return t

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "net_")
        self.net_.save(path)

    @classmethod
    def load(cls, path: str | Path) -> "AgnosticTransform":
        return cls._from_net(MLP.load(path))


def train_agnostic(
    train: FairCVDataset,
    cfg: AgnosticTrainConfig = AgnosticTrainConfig(),
    bias_axis: str = "gender",
    seed: int = 0,
):
    """Returns ``(transform, joint scorer, leakage trace)``."""
    t = AgnosticTransform(bias_axis=bias_axis, random_state=seed, **cfg.estimator_params())
    t.fit_dataset(train)
    return t, t.scorer_, t.leakage_trace_


def audit_leakage(
    transform: AgnosticTransform,
    data: FairCVDataset,
    seed: int = 0,
    attributes: Sequence[str] = ("gender", "ethnicity"),
    preprocess: str = "standardize",
) -> dict[str, tuple[float, float]]:
    """Held-out accuracy of fresh linear probes on raw vs transformed embeddings.

    ``preprocess="whiten"`` gives the stricter audit (see :class:`LinearProbe`).
    """
    raw = data.embeddings
    transformed = transform.transform(raw)
    out = {}
    for a in attributes:
        labels = data.gender if a == "gender" else data.ethnicity
        before = fit_probe(raw, labels, random_state=seed, preprocess=preprocess).holdout_accuracy_
        after = fit_probe(transformed, labels, random_state=seed, preprocess=preprocess).holdout_accuracy_
        out[a] = (before, after)
    return out


__all__ = [
    "AgnosticTrainConfig", "AgnosticTransform", "EMBED_DIM", "audit_leakage",
    "sensitiveness", "train_agnostic",
]
