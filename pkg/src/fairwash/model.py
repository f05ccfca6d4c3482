"""Small numpy classifier: logistic regression or a ReLU perceptron with a
sigmoid output, plus the threshold rule that matches the ground-truth rate."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (16,)
    epochs: int = 60
    batch_size: int = 64
    lr: float = 0.1
    weight_decay: float = 0.0


@dataclass(eq=False)
class Classifier:
    """Feed-forward network ``f: R^d -> (0, 1)``.

    ``weights[k]`` has shape ``(in_k, out_k)``; the last layer has one output.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    threshold: float = 0.5
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.threshold <= 1:
            raise ValueError("threshold must lie in [0, 1]")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("last layer must have a single output")

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @classmethod
    def init(cls, d: int, hidden=(16,), rng: np.random.Generator | None = None,
             threshold: float = 0.5) -> "Classifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [d, *hidden, 1]
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, threshold)

    @classmethod
    def logistic(cls, w, b: float = 0.0, threshold: float = 0.5) -> "Classifier":
        w = np.asarray(w, dtype=float).reshape(-1, 1)
        return cls([w], [np.array([float(b)])], threshold)

    def with_threshold(self, threshold: float) -> "Classifier":
        return Classifier([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          threshold, dict(self.history))

    def _forward(self, X):
        acts = [X]
        h = X
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = np.maximum(z, 0.0) if k < len(self.weights) - 1 else z
            acts.append(h)
        return acts

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.shape[1] != self.d:
            raise ValueError(f"model expects {self.d} columns, got {X.shape[1]}")
        return X

    def predict_logits(self, X) -> np.ndarray:
        """Sigmoid scores in (0, 1); one per row."""
        X = self._check(X)
        return sigmoid(self._forward(X)[-1][:, 0])

    def predict(self, X) -> np.ndarray:
        return (self.predict_logits(X) > self.threshold).astype(np.int8)

    def grad_input(self, X) -> np.ndarray:
        """Gradient of the sigmoid output with respect to each input row.

        Accepts a single vector (returns a vector) or a matrix (returns a matrix).
        ReLU uses subgradient 0 at the kink.
        """
        single = np.ndim(X) == 1
        X = self._check(X)
        acts = self._forward(X)
        p = sigmoid(acts[-1][:, 0])
        g = (p * (1.0 - p))[:, None]
        for k in range(len(self.weights) - 1, -1, -1):
            g = g @ self.weights[k].T
            if k > 0:
                g = g * (acts[k] > 0)
        return g[0] if single else g

    def annotate(self, data: Dataset) -> Dataset:
        """Replace ``Yhat`` and ``logits`` of ``data`` by this model's outputs."""
        lg = self.predict_logits(data.X)
        return data.replace(logits=lg, Yhat=(lg > self.threshold).astype(np.int8))

    def save(self, path) -> None:
        header = {"format": "fairwash-classifier", "version": MODEL_FORMAT_VERSION,
                  "d": self.d, "hidden": list(self.hidden), "threshold": self.threshold,
                  "activation": "relu", "output": "sigmoid"}
        arrays = {f"W{k}": w for k, w in enumerate(self.weights)}
        arrays.update({f"b{k}": b for k, b in enumerate(self.biases)})
        with Path(path).open("wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> "Classifier":
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("format") != "fairwash-classifier":
                raise ValueError(f"{path}: not a classifier file")
            if header.get("version") != MODEL_FORMAT_VERSION:
                raise ValueError(f"{path}: unsupported version {header.get('version')}")
            L = len(header["hidden"]) + 1
            weights = [z[f"W{k}"] for k in range(L)]
            biases = [z[f"b{k}"] for k in range(L)]
        return cls(weights, biases, float(header["threshold"]))


def fit(train: Dataset, config: TrainConfig = TrainConfig(),
        rng: np.random.Generator | None = None) -> Classifier:
    """Minibatch SGD on binary cross-entropy against ``train.Y``."""
    if train.Y is None:
        raise ValueError("training data needs ground-truth labels Y")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = Classifier.init(train.d, config.hidden, rng)
    X, y = train.X, train.Y.astype(float)
    n = train.n
    L = len(model.weights)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            acts = model._forward(X[idx])
            p = sigmoid(acts[-1][:, 0])
            g = ((p - y[idx]) / len(idx))[:, None]
            for k in range(L - 1, -1, -1):
                gW = acts[k].T @ g + config.weight_decay * model.weights[k]
                gb = g.sum(axis=0)
                if k > 0:
                    g = (g @ model.weights[k].T) * (acts[k] > 0)
                model.weights[k] -= config.lr * gW
                model.biases[k] -= config.lr * gb
        if not all(np.all(np.isfinite(w)) for w in model.weights):
            raise TrainingError(f"non-finite weights at epoch {epoch}; lr={config.lr}")
    p = model.predict_logits(X)
    pc = np.clip(p, 1e-12, 1 - 1e-12)
    loss = float(-np.mean(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss; lr={config.lr}")
    acc = float(np.mean((p > 0.5) == (y > 0.5)))
    model.history = {"loss": loss, "accuracy": acc, "epochs": config.epochs}
    logger.debug("trained %s: loss=%.4f acc=%.4f", model.hidden, loss, acc)
    return model


def select_threshold(logits, Y) -> float:
    """Threshold whose positive rate best matches the mean of ``Y``.

    Candidates are 0, 1 and the midpoints between consecutive unique logits;
    ties go to the smaller threshold.
    """
    logits = np.asarray(logits, dtype=float)
    y_mean = float(np.mean(Y))
    u = np.unique(logits)
    cands = np.concatenate([[0.0], (u[:-1] + u[1:]) / 2, [1.0]])
    # fraction of logits strictly above each candidate
    above = 1.0 - np.searchsorted(np.sort(logits), cands, side="right") / logits.size
    gap = np.abs(above - y_mean)
    return float(cands[np.flatnonzero(gap == gap.min())[0]])
