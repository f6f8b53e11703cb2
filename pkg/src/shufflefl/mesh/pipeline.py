"""Round arithmetic shared by the networked nodes and the centralized oracle.

``decentralized_round`` is the transport-free composition of what parties
and aggregators do in one round; the nodes call the same pieces one side at
a time.
"""
from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from shufflefl import fusion
from shufflefl.tensor import ModelMapper, PermutationSpec, derive_permutation, merge, partition, permute, unpermute


@lru_cache(maxsize=64)
def _cached_permutation(key: bytes, round_id: int, partition_index: int, m: int) -> PermutationSpec:
    return derive_permutation(key, round_id, partition_index, m)


def round_permutations(mapper: ModelMapper, key: bytes, round_id: int, enabled: bool = True) -> list[PermutationSpec]:
    if not enabled:
        return [PermutationSpec.identity(c, round_id, a) for a, c in enumerate(mapper.counts)]
    return [_cached_permutation(bytes(key), int(round_id), a, int(c)) for a, c in enumerate(mapper.counts)]


def split_update(update, mapper: ModelMapper, key: bytes, round_id: int, enabled: bool = True) -> list[np.ndarray]:
    """Party side: partition then permute each part for this round."""
    specs = round_permutations(mapper, key, round_id, enabled)
    return [permute(part, spec) for part, spec in zip(partition(update, mapper), specs)]


def join_fused(parts: Sequence[np.ndarray], mapper: ModelMapper, key: bytes, round_id: int,
               enabled: bool = True) -> np.ndarray:
    """Party side: unpermute each fused part and merge back to model order."""
    specs = round_permutations(mapper, key, round_id, enabled)
    if len(parts) != len(specs):
        raise ValueError(f"expected {len(specs)} fused parts, got {len(parts)}")
    return merge([unpermute(p, s) for p, s in zip(parts, specs)], mapper)


def fuse_partition(algorithm: str, parts: Sequence[np.ndarray], weights: Sequence[int], byzantine_f: int = 0) -> np.ndarray:
    """Aggregator side: fuse one partition across parties (registration order)."""
    return fusion.fuse(algorithm, parts, weights, byzantine_f)


def decentralized_round(updates: Sequence, weights: Sequence[int], algorithm: str, mapper: ModelMapper,
                        key: bytes, round_id: int, permute_enabled: bool = True, byzantine_f: int = 0) -> np.ndarray:
    uploads = [split_update(u, mapper, key, round_id, permute_enabled) for u in updates]
    fused = [
        fuse_partition(algorithm, [up[a] for up in uploads], weights, byzantine_f)
        for a in range(mapper.num_aggregators)
    ]
    return join_fused(fused, mapper, key, round_id, permute_enabled)


def centralized_round(updates: Sequence, weights: Sequence[int], algorithm: str, byzantine_f: int = 0) -> np.ndarray:
    """Single aggregator, whole vectors, no shuffling."""
    return fusion.fuse(algorithm, [np.asarray(u, dtype=np.float64) for u in updates], weights, byzantine_f)


def training_mode(algorithm: str) -> str:
    return "fedsgd" if algorithm == "gradient_sum" else "fedavg"


def apply_fused(theta, fused, algorithm: str, learning_rate: float) -> np.ndarray:
    """FedSGD steps along the fused gradient; every other rule replaces the model."""
    if algorithm == "gradient_sum":
        return fusion.apply_gradient_step(theta, fused, learning_rate)
    return np.asarray(fused, dtype=np.float64).copy()
