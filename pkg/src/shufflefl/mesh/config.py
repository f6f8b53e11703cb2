"""Session configuration shared by every node.

Parties read the whole file, including the mapper seed and permutation key.
Aggregators only ever see :meth:`SessionConfig.aggregator_view`, which is
also what their launch measurement covers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from shufflefl.fusion import ALGORITHMS, krum_min_parties
from shufflefl.tensor import ModelMapper, build_mapper, exact_counts
from shufflefl.trainer import num_parameters


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PartySpec:
    id: str
    weight: int


@dataclass(frozen=True)
class TrainerSpec:
    num_classes: int = 10
    num_features: int = 32
    examples_per_party: int = 50
    skew: float | None = None
    separation: float = 6.0
    data_seed: int = 0
    init_seed: int = 1


def _hex32(value, name: str) -> bytes:
    if not isinstance(value, str) or len(value) != 64:
        raise ConfigError(f"{name} must be exactly 64 hex characters")
    try:
        return bytes.fromhex(value)
    except ValueError as exc:
        raise ConfigError(f"{name} is not valid hex") from exc


@dataclass(frozen=True)
class SessionConfig:
    aggregators: tuple[str, ...]
    attestation_server: str
    parties: tuple[PartySpec, ...]
    model_size: int
    proportions: tuple[float, ...]
    mapper_seed: bytes = field(repr=False)
    permutation_key: bytes = field(repr=False)
    algorithm: str = "weighted_average"
    rounds: int = 1
    local_epochs: int = 1
    learning_rate: float = 0.1
    permute: bool = True
    initiator: int = 0
    byzantine_f: int = 0
    round_timeout: float = 300.0
    min_api_version: str = "1.0"
    root_seed: bytes = field(default=bytes(32), repr=False)
    paillier_key_file: str | None = None
    paillier_bits: int = 512
    paillier_n: int | None = None
    max_body: int = 256 * 1024 * 1024
    trainer: TrainerSpec | None = None
    scenarios: tuple[dict, ...] = ()
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_aggregators(self) -> int:
        return len(self.aggregators)

    @property
    def party_ids(self) -> list[str]:
        """Fusion accumulation order: lexicographic party id."""
        return sorted(p.id for p in self.parties)

    @property
    def weights(self) -> list[int]:
        by_id = {p.id: p.weight for p in self.parties}
        return [by_id[i] for i in self.party_ids]

    @property
    def total_weight(self) -> int:
        return sum(p.weight for p in self.parties)

    def party(self, party_id: str) -> PartySpec:
        for p in self.parties:
            if p.id == party_id:
                return p
        raise ConfigError(f"unknown party {party_id!r}")

    def partition_sizes(self) -> list[int]:
        return exact_counts(self.model_size, self.proportions)

    def mapper(self) -> ModelMapper:
        return build_mapper(self.model_size, self.proportions, self.mapper_seed)

    def aggregator_view(self, index: int) -> dict:
        """Secret-free launch configuration for aggregator ``index``."""
        view = {
            "agg_index": index,
            "aggregators": list(self.aggregators),
            "attestation_server": self.attestation_server,
            "initiator": self.initiator,
            "parties": [{"id": p.id, "weight": p.weight} for p in sorted(self.parties, key=lambda p: p.id)],
            "partition_size": self.partition_sizes()[index],
            "algorithm": self.algorithm,
            "byzantine_f": self.byzantine_f,
            "rounds": self.rounds,
            "round_timeout": self.round_timeout,
            "max_body": self.max_body,
        }
        if self.algorithm == "paillier":
            view["paillier_n"] = str(self.paillier_n) if self.paillier_n is not None else None
        return view

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        try:
            aggregators = tuple(str(a) for a in d["aggregators"])
            parties = tuple(PartySpec(str(p["id"]), int(p.get("weight", 0))) for p in d["parties"])
            trainer = TrainerSpec(**d["trainer"]) if d.get("trainer") is not None else None
            if trainer is not None:
                parties = tuple(PartySpec(p.id, p.weight or trainer.examples_per_party) for p in parties)
            model_size = int(d.get("model_size") or (num_parameters(trainer.num_classes, trainer.num_features)
                                                     if trainer else 0))
            proportions = tuple(float(x) for x in d.get("proportions") or [1.0 / len(aggregators)] * len(aggregators))
            cfg = cls(
                aggregators=aggregators,
                attestation_server=str(d.get("attestation_server", "")),
                parties=parties,
                model_size=model_size,
                proportions=proportions,
                mapper_seed=_hex32(d["mapper_seed_hex"], "mapper_seed_hex"),
                permutation_key=_hex32(d["permutation_key_hex"], "permutation_key_hex"),
                algorithm=str(d.get("algorithm", "weighted_average")),
                rounds=int(d.get("rounds", 1)),
                local_epochs=int(d.get("local_epochs", 1)),
                learning_rate=float(d.get("learning_rate", 0.1)),
                permute=bool(d.get("permute", True)),
                initiator=int(d.get("initiator", 0)),
                byzantine_f=int(d.get("byzantine_f", 0)),
                round_timeout=float(d.get("round_timeout", 300.0)),
                min_api_version=str(d.get("min_api_version", "1.0")),
                root_seed=_hex32(d["root_seed_hex"], "root_seed_hex") if "root_seed_hex" in d else bytes(32),
                paillier_key_file=d.get("paillier_key_file"),
                paillier_bits=int(d.get("paillier_bits", 512)),
                paillier_n=int(d["paillier_n"]) if d.get("paillier_n") is not None else None,
                max_body=int(d.get("max_body", 256 * 1024 * 1024)),
                trainer=trainer,
                scenarios=tuple(d.get("scenarios", ())),
                raw=dict(d),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config field {exc.args[0]!r}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "SessionConfig":
        path = Path(path)
        d = json.loads(path.read_text())
        key_file = d.get("paillier_key_file")
        if key_file and d.get("paillier_n") is None:
            key_path = (path.parent / key_file) if not Path(key_file).is_absolute() else Path(key_file)
            if key_path.exists():
                d["paillier_n"] = json.loads(key_path.read_text())["n"]
                d["paillier_key_file"] = str(key_path)
        return cls.from_dict(d)

    def validate(self) -> None:
        if not self.aggregators:
            raise ConfigError("at least one aggregator is required")
        if len(self.proportions) != len(self.aggregators):
            raise ConfigError("one proportion per aggregator is required")
        try:
            exact_counts(self.model_size, self.proportions)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not self.parties:
            raise ConfigError("at least one party is required")
        ids = [p.id for p in self.parties]
        if len(set(ids)) != len(ids):
            raise ConfigError("party ids must be unique")
        if any(p.weight <= 0 for p in self.parties):
            raise ConfigError("party weights must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.algorithm == "krum":
            try:
                krum_min_parties(len(self.parties), self.byzantine_f)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if not 0 <= self.initiator < len(self.aggregators):
            raise ConfigError("initiator index out of range")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ConfigError("rounds and local_epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.trainer is not None:
            t = self.trainer
            if self.model_size != num_parameters(t.num_classes, t.num_features):
                raise ConfigError("model_size does not match trainer dimensions")

    def with_overrides(self, **changes) -> "SessionConfig":
        d = dict(self.raw)
        d.update(changes)
        return SessionConfig.from_dict(d)
