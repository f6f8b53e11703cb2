"""Multinomial logistic regression with hand-written gradients, plus the
synthetic Gaussian-cluster data it trains on.

Parameters flatten as ``W`` (classes x features, row-major) followed by
``b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MODES = ("fedavg", "fedsgd")


@dataclass
class DenseSoftmaxModel:
    W: np.ndarray
    b: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def num_features(self) -> int:
        return self.W.shape[1]

    @property
    def size(self) -> int:
        return self.W.size + self.b.size

    @classmethod
    def zeros(cls, num_classes: int, num_features: int) -> "DenseSoftmaxModel":
        return cls(np.zeros((num_classes, num_features)), np.zeros(num_classes))

    @classmethod
    def random(cls, num_classes: int, num_features: int, seed: int, scale: float = 0.01) -> "DenseSoftmaxModel":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, scale, (num_classes, num_features)), rng.normal(0.0, scale, num_classes))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W.reshape(-1), self.b])

    @classmethod
    def unflatten(cls, theta, num_classes: int, num_features: int) -> "DenseSoftmaxModel":
        theta = np.asarray(theta, dtype=np.float64)
        expected = num_classes * num_features + num_classes
        if theta.shape != (expected,):
            raise ValueError(f"expected {expected} parameters, got {theta.shape}")
        split = num_classes * num_features
        return cls(theta[:split].reshape(num_classes, num_features).copy(), theta[split:].copy())

    def to_json(self) -> str:
        return json.dumps({"W": self.W.tolist(), "b": self.b.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "DenseSoftmaxModel":
        d = json.loads(text)
        return cls(np.asarray(d["W"], dtype=np.float64), np.asarray(d["b"], dtype=np.float64))


def num_parameters(num_classes: int, num_features: int) -> int:
    return num_classes * num_features + num_classes


def _check_batch(model: DenseSoftmaxModel, X, y):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != model.num_features:
        raise ValueError(f"expected {model.num_features} features, got {X.shape[1]}")
    if y.shape[0] != X.shape[0]:
        raise ValueError("one label per example is required")
    if y.min() < 0 or y.max() >= model.num_classes:
        raise ValueError("label out of range")
    return X, y


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_loss(model: DenseSoftmaxModel, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and the per-example class probabilities."""
    X, y = _check_batch(model, X, y)
    z = X @ model.W.T + model.b
    zs = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(zs).sum(axis=1))
    loss = float(np.mean(logsum - zs[np.arange(len(y)), y]))
    return loss, softmax(z)


def gradient(model: DenseSoftmaxModel, X, y) -> np.ndarray:
    """Flattened gradient of the mean cross-entropy: ``dz = (p - onehot) / B``."""
    X, y = _check_batch(model, X, y)
    _, p = forward_loss(model, X, y)
    dz = p.copy()
    dz[np.arange(len(y)), y] -= 1.0
    dz /= X.shape[0]
    dW = dz.T @ X
    db = dz.sum(axis=0)
    return np.concatenate([dW.reshape(-1), db])


def accuracy(model: DenseSoftmaxModel, X, y) -> float:
    X, y = _check_batch(model, X, y)
    return float(np.mean(np.argmax(X @ model.W.T + model.b, axis=1) == y))


def local_train(theta, X, y, num_classes: int, epochs: int, learning_rate: float, mode: str = "fedavg") -> np.ndarray:
    """Local update for one round.

    ``fedavg`` returns the parameters after ``epochs`` full-batch descent
    steps; ``fedsgd`` returns one full-batch gradient without stepping.
    """
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    if mode not in MODES:
        raise ValueError(f"unknown training mode {mode!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    model = DenseSoftmaxModel.unflatten(theta, num_classes, X.shape[1])
    if mode == "fedsgd":
        return gradient(model, X, y)
    for _ in range(epochs):
        theta = theta - learning_rate * gradient(model, X, y)
        model = DenseSoftmaxModel.unflatten(theta, num_classes, X.shape[1])
    return theta.copy()


# --- synthetic data ------------------------------------------------------

@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    seed: int

    def __len__(self) -> int:
        return int(self.y.shape[0])


def class_means(num_classes: int, num_features: int, separation: float, seed: int) -> np.ndarray:
    """Cluster centres on a scaled simplex (axis vertices when ``d >= c``)."""
    if num_features >= num_classes:
        means = np.zeros((num_classes, num_features))
        means[np.arange(num_classes), np.arange(num_classes)] = 1.0
    else:
        rng = np.random.default_rng(seed)
        means = rng.normal(size=(num_classes, num_features))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
    means -= means.mean(axis=0)
    return separation * means


def make_party_datasets(seed: int, num_parties: int, examples_per_party, num_classes: int,
                        num_features: int, skew: float | None = None,
                        separation: float = 6.0) -> list[SyntheticDataset]:
    """Disjoint per-party samples from shared Gaussian class clusters.

    With ``skew`` set, a fraction ``skew`` of each party's examples comes from
    its two dominant classes.
    """
    sizes = ([int(examples_per_party)] * num_parties if np.isscalar(examples_per_party)
             else [int(n) for n in examples_per_party])
    if len(sizes) != num_parties or min(sizes, default=1) < 1:
        raise ValueError("every party needs at least one example")
    rng = np.random.default_rng(seed)
    means = class_means(num_classes, num_features, separation, seed)
    out = []
    for p, n_examples in enumerate(sizes):
        if skew is None:
            y = rng.integers(0, num_classes, n_examples)
        else:
            dominant = np.array([(2 * p) % num_classes, (2 * p + 1) % num_classes])
            n_dom = int(round(skew * n_examples))
            y = np.concatenate([
                rng.choice(dominant, n_dom),
                rng.integers(0, num_classes, n_examples - n_dom),
            ])
            rng.shuffle(y)
        X = means[y] + rng.normal(size=(n_examples, num_features))
        out.append(SyntheticDataset(X, y.astype(np.int64), seed))
    return out


def pooled(datasets: list[SyntheticDataset]) -> tuple[np.ndarray, np.ndarray]:
    return np.vstack([d.X for d in datasets]), np.concatenate([d.y for d in datasets])
