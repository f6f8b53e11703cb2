"""Fusion algorithms run by each aggregator over its partition.

Accumulation always walks the parties in registration order so a fused
partition is bitwise-identical to the same coordinates of a whole-vector
fusion.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ALGORITHMS = ("weighted_average", "gradient_sum", "coordinate_median", "krum", "paillier")
COORDINATE_WISE = ("weighted_average", "gradient_sum", "coordinate_median")


@dataclass(frozen=True)
class FusionConfig:
    algorithm: str
    party_weights: tuple[int, ...]
    byzantine_f: int = 0
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown fusion algorithm {self.algorithm!r}")
        if not self.party_weights or any(int(w) <= 0 for w in self.party_weights):
            raise ValueError("party weights must be positive integers")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.byzantine_f < 0:
            raise ValueError("byzantine_f must be >= 0")
        if self.algorithm == "krum":
            krum_min_parties(len(self.party_weights), self.byzantine_f)


def _stack(updates: Sequence) -> list[np.ndarray]:
    if len(updates) == 0:
        raise ValueError("no updates to fuse")
    rows = [np.asarray(u, dtype=np.float64).reshape(-1) for u in updates]
    size = rows[0].shape[0]
    for i, r in enumerate(rows):
        if r.shape[0] != size:
            raise ValueError(f"update {i} has length {r.shape[0]}, expected {size}")
    return rows


def fuse_weighted_average(updates: Sequence, weights: Sequence[int]) -> np.ndarray:
    """``sum_i (n_i / n) * u_i``."""
    rows = _stack(updates)
    if len(weights) != len(rows):
        raise ValueError("one weight per update is required")
    if any(w <= 0 for w in weights):
        raise ValueError("weights must be positive")
    total = float(sum(weights))
    out = np.zeros_like(rows[0])
    for w, row in zip(weights, rows):
        out += (w / total) * row
    return out


def fuse_gradient_sum(gradients: Sequence) -> np.ndarray:
    rows = _stack(gradients)
    out = np.zeros_like(rows[0])
    for row in rows:
        out += row
    return out


def apply_gradient_step(theta, fused_gradient, learning_rate: float) -> np.ndarray:
    return np.asarray(theta, dtype=np.float64) - learning_rate * np.asarray(fused_gradient, dtype=np.float64)


def fuse_coordinate_median(updates: Sequence) -> np.ndarray:
    """Per-coordinate median; even counts average the two middle values."""
    rows = _stack(updates)
    s = np.sort(np.vstack(rows), axis=0)
    n = s.shape[0]
    if n % 2:
        return s[n // 2].copy()
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def krum_min_parties(n: int, f: int) -> None:
    # at least 2f + 2 updates and one scored neighbour per update
    need = max(2 * f + 2, f + 3)
    if n < need:
        raise ValueError(f"krum with f={f} needs at least {need} updates, got {n}")


def krum_scores(updates: Sequence, f: int) -> np.ndarray:
    rows = _stack(updates)
    n = len(rows)
    krum_min_parties(n, f)
    X = np.vstack(rows)
    d2 = np.empty((n, n))
    for i in range(n):
        diff = X - X[i]
        d2[i] = np.einsum("ij,ij->i", diff, diff)
    neighbours = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:neighbours].sum()
    return scores


def krum_select(updates: Sequence, f: int) -> tuple[int, np.ndarray]:
    """Index and value of the update with the smallest Krum score.

    Ties resolve to the lowest index.
    """
    scores = krum_scores(updates, f)
    idx = int(np.argmin(scores))
    return idx, np.asarray(updates[idx], dtype=np.float64).copy()


def fuse(algorithm: str, updates: Sequence, weights: Sequence[int] | None = None, byzantine_f: int = 0) -> np.ndarray:
    """Plaintext fusion dispatch by algorithm name."""
    if algorithm == "weighted_average":
        return fuse_weighted_average(updates, weights)
    if algorithm == "gradient_sum":
        return fuse_gradient_sum(updates)
    if algorithm == "coordinate_median":
        return fuse_coordinate_median(updates)
    if algorithm == "krum":
        return krum_select(updates, byzantine_f)[1]
    if algorithm == "paillier":
        raise ValueError("paillier fusion operates on ciphertexts; use shufflefl.paillier.fuse_encrypted")
    raise ValueError(f"unknown fusion algorithm {algorithm!r}")
