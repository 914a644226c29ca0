"""Small feedforward network engine: dense layers, losses, Adam, backprop.

Everything operates on float64 numpy arrays with samples along axis 0.
Loss functions return ``(loss, gradient)`` where the gradient is taken with
respect to the network output and already carries the ``1/N`` batch factor,
so :meth:`MLP.backward` simply sums over the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "softmax", "identity", "tanh")

_MAGIC = b"FCVMLP\x00\x01"


class NumericalError(RuntimeError):
    """Raised when a NaN or infinity shows up in parameters, gradients or losses."""


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "softmax":
        shifted = z - z.max(axis=1, keepdims=True)
        ez = np.exp(shifted)
        return ez / ez.sum(axis=1, keepdims=True)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation {kind!r}")


def _activation_backward(a: np.ndarray, grad: np.ndarray, kind: str) -> np.ndarray:
    # Derivatives expressed through the activation output ``a``.
    if kind == "relu":
        return grad * (a > 0)
    if kind == "sigmoid":
        return grad * a * (1.0 - a)
    if kind == "softmax":
        return a * (grad - np.sum(grad * a, axis=1, keepdims=True))
    if kind == "tanh":
        return grad * (1.0 - a * a)
    if kind == "identity":
        return grad
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


def init_dense(n_in: int, n_out: int, activation: str, rng: np.random.Generator) -> Dense:
    """He-uniform for ReLU layers, Xavier-uniform otherwise; zero biases."""
    if activation == "relu":
        limit = np.sqrt(6.0 / n_in)
    else:
        limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_in, n_out))
    return Dense(w, np.zeros(n_out), activation)


class MLP:
    """Chain of dense layers with explicit gradients."""

    def __init__(self, layers: Sequence[Dense]):
        if not layers:
            raise ValueError("an MLP needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise ValueError(
                    f"layer {i} expects {layers[i].n_in} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].n_out}"
                )
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator | int | None = None,
    ) -> "MLP":
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer (len(sizes) - 1)")
        rng = np.random.default_rng(rng)
        return cls(
            [init_dense(a, b, act, rng) for a, b, act in zip(sizes[:-1], sizes[1:], activations)]
        )

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.n_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "MLP":
        return MLP([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, X: np.ndarray) -> list[np.ndarray]:
        """Return ``[X, a_1, ..., a_L]``; the last entry is the network output."""
        a = np.asarray(X, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D batch, got shape {a.shape}")
        acts = [a]
        for i, layer in enumerate(self.layers):
            if a.shape[1] != layer.n_in:
                raise ValueError(
                    f"layer {i} expects {layer.n_in} input columns, got {a.shape[1]}"
                )
            a = _activate(a @ layer.weight + layer.bias, layer.activation)
            acts.append(a)
        return acts

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[-1]

    def backward(
        self, activations: list[np.ndarray], loss_gradient: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``dLoss/dOutput``.

        Returns the parameter gradients (same order as :meth:`params`) and the
        gradient with respect to the network input.
        """
        if len(activations) != len(self.layers) + 1:
            raise ValueError("activations do not come from this network's forward pass")
        for i, layer in enumerate(self.layers):
            if activations[i].shape[1] != layer.n_in or activations[i + 1].shape[1] != layer.n_out:
                raise ValueError(f"stale activations: shape mismatch at layer {i}")
        grad = np.asarray(loss_gradient, dtype=np.float64).reshape(activations[-1].shape)
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))  # type: ignore[list-item]
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dz = _activation_backward(activations[i + 1], grad, layer.activation)
            grads[2 * i] = activations[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            grad = dz @ layer.weight.T
        return grads, grad

    # -- checkpoints --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Binary checkpoint: magic, JSON header line, little-endian float64 params."""
        header = {"sizes": self.sizes, "activations": self.activations}
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for p in self.params():
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "MLP":
        data = Path(path).read_bytes()
        if not data.startswith(_MAGIC):
            raise ValueError(f"{path}: not a faircvtest model checkpoint")
        end = data.index(b"\n", len(_MAGIC))
        header = json.loads(data[len(_MAGIC):end])
        sizes, acts = header["sizes"], header["activations"]
        body = memoryview(data)[end + 1:]
        expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) * 8
        if len(body) != expected:
            raise ValueError(f"{path}: expected {expected} parameter bytes, found {len(body)}")
        flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
        layers, pos = [], 0
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], acts):
            w = flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = flat[pos:pos + n_out]
            pos += n_out
            layers.append(Dense(w.copy(), b.copy(), act))
        return cls(layers)


def check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for i, a in enumerate(arrays):
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {what} (tensor {i})")


# -- losses -------------------------------------------------------------------


def mae_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    n = pred.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax outputs; gradient w.r.t. the probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = probs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    rows = np.arange(n)
    p_true = np.maximum(probs[rows, labels], 1e-300)
    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (n * p_true)
    return float(-np.log(p_true).mean()), grad


def confusion_loss(probs: np.ndarray, n_classes: int | None = None) -> tuple[float, np.ndarray]:
    """Mean of ``log K - H(p)`` over the batch; zero iff every row is uniform."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    k = probs.shape[1] if n_classes is None else n_classes
    safe = np.maximum(probs, 1e-300)
    plogp = np.where(probs > 0, probs * np.log(safe), 0.0)
    per_row = np.log(k) + plogp.sum(axis=1)
    grad = (np.log(np.maximum(probs, 1e-12)) + 1.0) / n
    return float(per_row.mean()), grad


LOSSES: dict[str, Callable] = {"mae": mae_loss, "ce": ce_loss}


# -- optimizer ----------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        """In-place bias-corrected Adam update of ``params``."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        check_finite(grads, "gradients")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


# -- training -----------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,val_loss"]
        for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss), start=1):
            lines.append(f"{i},{float(a)!r},{float(b)!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled minibatch index arrays; the last partial batch is kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def evaluate(net: MLP, X: np.ndarray, y: np.ndarray, loss: str = "mae") -> float:
    return LOSSES[loss](net.predict(X), y)[0]


def train(
    net: MLP,
    X: np.ndarray,
    y: np.ndarray,
    X_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
    loss: str = "mae",
    epochs: int = 10,
    batch_size: int = 128,
    seed: int | np.random.Generator | None = 0,
    optimizer: Adam | None = None,
    callback: Callable[[int, float, float], None] | None = None,
) -> tuple[MLP, TrainHistory]:
    """Minibatch training with seeded shuffling. Mutates and returns ``net``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("empty training set")
    if X_val is not None and len(X_val) == 0:
        raise ValueError("empty validation set")
    loss_fn = LOSSES[loss]
    if loss == "mae":
        y = y.astype(np.float64).reshape(len(y), -1)
        if y_val is not None:
            y_val = np.asarray(y_val, dtype=np.float64).reshape(len(y_val), -1)
    rng = np.random.default_rng(seed)
    opt = optimizer or Adam()
    params = net.params()
    history = TrainHistory()
    for epoch in range(1, epochs + 1):
        for b, idx in enumerate(batches(len(X), batch_size, rng)):
            acts = net.forward(X[idx])
            value, grad = loss_fn(acts[-1], y[idx])
            if not np.isfinite(value):
                raise NumericalError(f"loss became {value} at epoch {epoch}, batch {b}")
            grads, _ = net.backward(acts, grad)
            try:
                opt.step(params, grads)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from None
        check_finite(params, f"parameters after epoch {epoch}")
        tr = evaluate(net, X, y, loss)
        va = evaluate(net, X_val, y_val, loss) if X_val is not None else float("nan")
        history.train_loss.append(tr)
        history.val_loss.append(va)
        if callback is not None:
            callback(epoch, tr, va)
    return net, history


# -- finite-difference verification -------------------------------------------


def numerical_gradients(
    net: MLP, X: np.ndarray, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], h: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of ``loss(net.predict(X))`` for every parameter."""
    out = []
    for p in net.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss(net.predict(X))[0]
            flat[i] = orig - h
            down = loss(net.predict(X))[0]
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def gradient_check(
    net: MLP, X: np.ndarray, loss: Callable[[np.ndarray], tuple[float, np.ndarray]], h: float = 1e-5
) -> float:
    """Max relative error between backprop and central differences."""
    acts = net.forward(X)
    _, g = loss(acts[-1])
    analytic, _ = net.backward(acts, g)
    numeric = numerical_gradients(net, X, loss, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))

