"""Flattened parameter vectors, the shared model-mapper, partition/merge and
per-round permutations.

Every function here is pure; two parties calling them with the same inputs
get bitwise-identical outputs.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from shufflefl.shuffle import MAPPER_PARTITION_SENTINEL, derive_seed, seeded_permutation

_PROPORTION_TOL = 1e-9


def as_parameter_vector(values, length: int | None = None) -> np.ndarray:
    """Validate and copy ``values`` into a contiguous float64 vector.

    Raises ``ValueError`` on non-finite entries or a length mismatch.
    """
    v = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if length is not None and v.shape[0] != length:
        raise ValueError(f"expected {length} parameters, got {v.shape[0]}")
    if not np.isfinite(v).all():
        raise ValueError("parameter vector contains NaN or Inf")
    return v


def encode_f64(v: np.ndarray) -> str:
    """Base64 of the little-endian IEEE-754 bytes of ``v``."""
    return base64.b64encode(np.ascontiguousarray(v, dtype="<f8").tobytes()).decode("ascii")


def decode_f64(payload: str) -> np.ndarray:
    raw = base64.b64decode(payload.encode("ascii"), validate=True)
    if len(raw) % 8:
        raise ValueError("payload length is not a multiple of 8 bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def exact_counts(model_size: int, proportions: Sequence[float]) -> list[int]:
    """Per-aggregator parameter counts.

    Floor of ``k * p`` each, then the remainder goes one apiece to the largest
    fractional parts (lower index wins ties). Proportions are read as the
    nearest rational with denominator <= 1e12, so float noise cannot break a
    tie that is exact in the intended ratios.
    """
    if model_size < 1:
        raise ValueError("model_size must be >= 1")
    props = [float(p) for p in proportions]
    if not props:
        raise ValueError("at least one aggregator is required")
    if any(p < 0 or not np.isfinite(p) for p in props):
        raise ValueError("proportions must be finite and non-negative")
    if abs(sum(props) - 1.0) > _PROPORTION_TOL:
        raise ValueError(f"proportions sum to {sum(props)!r}, not 1")
    raw = [Fraction(p).limit_denominator(10**12) * model_size for p in props]
    counts = [int(r) for r in raw]
    remainder = model_size - sum(counts)
    order = sorted(range(len(props)), key=lambda a: (-(raw[a] - counts[a]), a))
    for t in range(remainder):
        counts[order[t % len(order)]] += 1
    # sum(p) may exceed 1 by the tolerance; trim from the smallest fractions
    t = len(order) - 1
    while sum(counts) > model_size:
        a = order[t % len(order)]
        if counts[a] > 0:
            counts[a] -= 1
        t -= 1
    return counts


@dataclass(frozen=True)
class ModelMapper:
    model_size: int
    proportions: tuple[float, ...]
    seed: bytes
    assignment: np.ndarray = field(repr=False, compare=False)
    counts: tuple[int, ...]
    # indices[a] lists the original positions owned by aggregator a, ascending
    indices: tuple[np.ndarray, ...] = field(repr=False, compare=False)

    @property
    def num_aggregators(self) -> int:
        return len(self.proportions)

    def __eq__(self, other):
        if not isinstance(other, ModelMapper):
            return NotImplemented
        return (
            self.model_size == other.model_size
            and self.proportions == other.proportions
            and self.seed == other.seed
            and np.array_equal(self.assignment, other.assignment)
        )

    def __hash__(self):
        return hash((self.model_size, self.proportions, self.seed))


def build_mapper(model_size: int, proportions: Sequence[float], seed: bytes) -> ModelMapper:
    """Assign every parameter index to an aggregator, deterministically in ``seed``."""
    seed = bytes(seed)
    if len(seed) != 32:
        raise ValueError("mapper seed must be 32 bytes")
    counts = exact_counts(model_size, proportions)
    multiset = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    perm = seeded_permutation(derive_seed(seed, 0, MAPPER_PARTITION_SENTINEL), model_size)
    assignment = multiset[perm]
    assignment.setflags(write=False)
    indices = []
    for a in range(len(counts)):
        idx = np.flatnonzero(assignment == a)
        idx.setflags(write=False)
        indices.append(idx)
    return ModelMapper(
        model_size=model_size,
        proportions=tuple(float(p) for p in proportions),
        seed=seed,
        assignment=assignment,
        counts=tuple(counts),
        indices=tuple(indices),
    )


def mapper_from_assignment(assignment: Sequence[int], num_aggregators: int | None = None) -> ModelMapper:
    """Build a mapper around an explicit assignment (testing and analysis)."""
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.ndim != 1 or assignment.size == 0:
        raise ValueError("assignment must be a non-empty 1-D sequence")
    if assignment.min() < 0:
        raise ValueError("aggregator indices must be non-negative")
    A = int(assignment.max()) + 1 if num_aggregators is None else num_aggregators
    counts = np.bincount(assignment, minlength=A)
    assignment = assignment.copy()
    assignment.setflags(write=False)
    return ModelMapper(
        model_size=assignment.size,
        proportions=tuple(float(c) / assignment.size for c in counts),
        seed=bytes(32),
        assignment=assignment,
        counts=tuple(int(c) for c in counts),
        indices=tuple(np.flatnonzero(assignment == a) for a in range(A)),
    )


def partition(v, mapper: ModelMapper) -> list[np.ndarray]:
    """Split ``v`` into one sub-vector per aggregator, ascending original order."""
    v = as_parameter_vector(v, mapper.model_size)
    return [v[idx] for idx in mapper.indices]


def merge(parts: Sequence[np.ndarray], mapper: ModelMapper) -> np.ndarray:
    """Inverse of :func:`partition`."""
    if len(parts) != mapper.num_aggregators:
        raise ValueError(f"expected {mapper.num_aggregators} parts, got {len(parts)}")
    out = np.empty(mapper.model_size, dtype=np.float64)
    for a, (part, idx) in enumerate(zip(parts, mapper.indices)):
        part = np.asarray(part, dtype=np.float64)
        if part.shape != idx.shape:
            raise ValueError(f"part {a} has length {part.size}, mapper expects {idx.size}")
        out[idx] = part
    return out


@dataclass(frozen=True)
class PermutationSpec:
    round_id: int
    partition_index: int
    permutation: np.ndarray = field(repr=False, compare=False)

    @property
    def m(self) -> int:
        return int(self.permutation.size)

    @classmethod
    def identity(cls, m: int, round_id: int = 0, partition_index: int = 0) -> "PermutationSpec":
        return cls(round_id, partition_index, np.arange(m, dtype=np.int64))


def derive_permutation(permutation_key: bytes, round_id: int, partition_index: int, m: int) -> PermutationSpec:
    if m < 0:
        raise ValueError("m must be non-negative")
    seed = derive_seed(bytes(permutation_key), round_id, partition_index)
    perm = seeded_permutation(seed, m)
    perm.setflags(write=False)
    return PermutationSpec(round_id=round_id, partition_index=partition_index, permutation=perm)


def permute(part, spec: PermutationSpec) -> np.ndarray:
    """Element ``i`` of ``part`` lands at position ``spec.permutation[i]``."""
    part = np.asarray(part)
    if part.shape[0] != spec.m:
        raise ValueError(f"part length {part.shape[0]} does not match permutation size {spec.m}")
    out = np.empty_like(part)
    out[spec.permutation] = part
    return out


def unpermute(part, spec: PermutationSpec) -> np.ndarray:
    part = np.asarray(part)
    if part.shape[0] != spec.m:
        raise ValueError(f"part length {part.shape[0]} does not match permutation size {spec.m}")
    return part[spec.permutation]
