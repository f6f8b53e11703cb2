"""In-process sessions: every node on one event loop over the in-memory
transport, plus the centralized single-aggregator twin used as an oracle.
"""
from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from shufflefl import paillier
from shufflefl.attestation import AttestationAuthority, SecurityProcessor, SimulatedRoot, measure
from shufflefl.mesh import pipeline
from shufflefl.mesh.config import SessionConfig
from shufflefl.mesh.nodes import AggregatorNode, AttestationServerNode, PartyNode, RoundAborted
from shufflefl.mesh.transport import MemoryNetwork, Network
from shufflefl.tensor import encode_f64
from shufflefl.trainer import DenseSoftmaxModel, SyntheticDataset, accuracy, forward_loss, local_train, make_party_datasets, pooled

log = logging.getLogger(__name__)

UpdateFn = Callable[[np.ndarray, int], np.ndarray]


def party_datasets(cfg: SessionConfig) -> dict[str, SyntheticDataset]:
    t = cfg.trainer
    if t is None:
        raise ValueError("config has no trainer section")
    ids = cfg.party_ids
    sets = make_party_datasets(t.data_seed, len(ids), cfg.weights, t.num_classes, t.num_features,
                               t.skew, t.separation)
    return dict(zip(ids, sets))


def initial_theta(cfg: SessionConfig) -> np.ndarray:
    t = cfg.trainer
    if t is None:
        return np.zeros(cfg.model_size)
    return DenseSoftmaxModel.random(t.num_classes, t.num_features, t.init_seed).flatten()


def trainer_update_fn(cfg: SessionConfig, data: SyntheticDataset) -> UpdateFn:
    mode = pipeline.training_mode(cfg.algorithm)
    c = cfg.trainer.num_classes

    def update(theta: np.ndarray, round_id: int) -> np.ndarray:
        return local_train(theta, data.X, data.y, c, cfg.local_epochs, cfg.learning_rate, mode)

    return update


def load_or_create_paillier(cfg: SessionConfig) -> tuple[SessionConfig, paillier.PaillierKeypair | None]:
    if cfg.algorithm != "paillier":
        return cfg, None
    if cfg.paillier_key_file and Path(cfg.paillier_key_file).exists():
        kp = paillier.keypair_from_json(Path(cfg.paillier_key_file).read_text())
    else:
        kp = paillier.keygen(cfg.paillier_bits)
    if cfg.paillier_n != kp.n:
        cfg = cfg.with_overrides(paillier_n=str(kp.n))
    return cfg, kp


def build_authority(cfg: SessionConfig) -> tuple[SimulatedRoot, AttestationAuthority]:
    root = SimulatedRoot.from_seed(cfg.root_seed)
    expected = {i: measure(cfg.aggregator_view(i)) for i in range(cfg.num_aggregators)}
    return root, AttestationAuthority(root.verification_key, expected, cfg.min_api_version)


def build_processor(root: SimulatedRoot, cfg: SessionConfig, index: int, **kwargs) -> SecurityProcessor:
    return SecurityProcessor.from_seed(root, cfg.root_seed, f"agg{index}", **kwargs)


# --- oracle --------------------------------------------------------------

def scaled_update(cfg: SessionConfig, party_id: str, raw: np.ndarray) -> np.ndarray:
    """Mirror of the party-side FedSGD scaling."""
    if pipeline.training_mode(cfg.algorithm) == "fedsgd":
        return (cfg.party(party_id).weight / cfg.total_weight) * np.asarray(raw, dtype=np.float64)
    return np.asarray(raw, dtype=np.float64)


def oracle_algorithm(algorithm: str) -> str:
    return "weighted_average" if algorithm == "paillier" else algorithm


def centralized_trajectory(cfg: SessionConfig, update_fns: dict[str, UpdateFn], theta0: np.ndarray) -> list[np.ndarray]:
    """Single aggregator, whole vectors, no shuffling, same party order."""
    theta = np.asarray(theta0, dtype=np.float64).copy()
    out = []
    for round_id in range(1, cfg.rounds + 1):
        updates = [scaled_update(cfg, p, update_fns[p](theta, round_id)) for p in cfg.party_ids]
        fused = pipeline.centralized_round(updates, cfg.weights, oracle_algorithm(cfg.algorithm), cfg.byzantine_f)
        theta = pipeline.apply_fused(theta, fused, cfg.algorithm, cfg.learning_rate)
        out.append(theta.copy())
    return out


# --- session -------------------------------------------------------------

@dataclass
class SessionResult:
    config: SessionConfig
    server: AttestationServerNode
    aggregators: list[AggregatorNode]
    parties: dict[str, PartyNode]
    network: Network
    uploads: list[dict] = field(default_factory=list)
    error: BaseException | None = None

    def party_trajectory(self, party_id: str | None = None) -> list[np.ndarray]:
        party = self.parties[party_id or self.config.party_ids[0]]
        return [rec.theta for rec in party.history]


async def run_session_async(cfg: SessionConfig, update_fns: dict[str, UpdateFn], theta0: np.ndarray,
                            network: Network | None = None,
                            paillier_keypair: paillier.PaillierKeypair | None = None,
                            views: dict[int, dict] | None = None,
                            processors: dict[int, SecurityProcessor] | None = None,
                            party_overrides: dict[str, dict] | None = None,
                            record_uploads: bool = False) -> SessionResult:
    network = network or MemoryNetwork(cfg.max_body)
    root, authority = build_authority(cfg)
    server = AttestationServerNode(authority, cfg.attestation_server, network)
    uploads: list[dict] = []

    def tap(agg_index, round_id, party_id, msg):
        uploads.append(dict(msg))

    aggs = []
    for i in range(cfg.num_aggregators):
        view = (views or {}).get(i, cfg.aggregator_view(i))
        proc = (processors or {}).get(i) or build_processor(root, cfg, i)
        aggs.append(AggregatorNode(i, view, network, proc, tap if record_uploads else None))

    parties = {}
    for pid in cfg.party_ids:
        pcfg = cfg.with_overrides(**party_overrides[pid]) if party_overrides and pid in party_overrides else cfg
        parties[pid] = PartyNode(pid, pcfg, network, theta0, update_fns[pid], paillier_keypair)

    result = SessionResult(cfg, server, aggs, parties, network, uploads)
    await server.start()
    ordered = [aggs[cfg.initiator]] + [a for a in aggs if a.index != cfg.initiator]
    tasks = []
    try:
        for agg in ordered:
            await agg.attest()
            await agg.start()
        await asyncio.gather(*(p.connect() for p in parties.values()))
        tasks = [asyncio.ensure_future(a.run()) for a in aggs] + \
                [asyncio.ensure_future(p.run()) for p in parties.values()]
        done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
        errors = [t.exception() for t in done if t.exception() is not None]
        if errors:
            # give peers a moment to observe the abort broadcast, then stop
            if pending:
                await asyncio.wait(pending, timeout=1.0)
            for t in pending:
                t.cancel()
            await asyncio.gather(*pending, return_exceptions=True)
            aborted = [e for e in errors if isinstance(e, RoundAborted)]
            raise (aborted or errors)[0]
    except BaseException as exc:
        result.error = exc
        raise
    finally:
        for t in tasks:
            if not t.done():
                t.cancel()
        await network.shutdown()
    return result


def run_session(cfg: SessionConfig, update_fns: dict[str, UpdateFn], theta0: np.ndarray, **kwargs) -> SessionResult:
    return asyncio.run(run_session_async(cfg, update_fns, theta0, **kwargs))


# --- simulate ------------------------------------------------------------

@dataclass
class SimulationReport:
    metrics: list[dict]
    max_deviation: float
    result: SessionResult
    oracle: list[np.ndarray]


def _metrics_row(cfg, round_id, wall_ms, theta, X, y, deviation) -> dict:
    t = cfg.trainer
    model = DenseSoftmaxModel.unflatten(theta, t.num_classes, t.num_features)
    loss, _ = forward_loss(model, X, y)
    return {
        "round_id": round_id,
        "wall_ms": wall_ms,
        "loss": loss,
        "accuracy": accuracy(model, X, y),
        "algorithm": cfg.algorithm,
        "A": cfg.num_aggregators,
        "N": len(cfg.parties),
        "permute": cfg.permute,
        "oracle_deviation": deviation,
    }


def simulate(cfg: SessionConfig, metrics_path: str | Path | None = None, trace_path: str | Path | None = None,
             oracle: bool = True) -> SimulationReport:
    """Run a whole session in one process and compare it with the oracle twin."""
    cfg, kp = load_or_create_paillier(cfg)
    data = party_datasets(cfg)
    fns = {p: trainer_update_fn(cfg, data[p]) for p in cfg.party_ids}
    theta0 = initial_theta(cfg)
    result = run_session(cfg, fns, theta0, paillier_keypair=kp, record_uploads=trace_path is not None)

    oracle_traj = centralized_trajectory(cfg, fns, theta0) if oracle else []
    X, y = pooled([data[p] for p in cfg.party_ids])
    timings = {t.round_id: t.wall_ms for t in result.aggregators[cfg.initiator].timings}
    metrics = []
    max_dev = 0.0
    for r in range(cfg.rounds):
        thetas = [result.parties[p].history[r].theta for p in cfg.party_ids]
        dev = float(max(np.max(np.abs(th - oracle_traj[r])) for th in thetas)) if oracle else float("nan")
        max_dev = max(max_dev, dev) if oracle else max_dev
        metrics.append(_metrics_row(cfg, r + 1, timings.get(r + 1, float("nan")), thetas[0], X, y, dev))

    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"summary": True, "rounds": cfg.rounds, "max_oracle_deviation": max_dev,
                                 "final_accuracy": metrics[-1]["accuracy"] if metrics else None}) + "\n")
    if trace_path is not None:
        write_trace(trace_path, result, data)
    return SimulationReport(metrics, max_dev, result, oracle_traj)


# --- traces --------------------------------------------------------------

def trace_records(result: SessionResult, data: dict[str, SyntheticDataset] | None = None) -> list[dict]:
    cfg = result.config
    header = {
        "kind": "session",
        "algorithm": cfg.algorithm,
        "model_size": cfg.model_size,
        "num_aggregators": cfg.num_aggregators,
        "partition_sizes": cfg.partition_sizes(),
        "permute": cfg.permute,
        "rounds": cfg.rounds,
        "parties": cfg.party_ids,
    }
    if cfg.trainer is not None:
        header["num_classes"] = cfg.trainer.num_classes
        header["num_features"] = cfg.trainer.num_features
    records = [header]
    for msg in result.uploads:
        rec = {"kind": "upload", "round_id": msg["round_id"], "agg_index": msg["agg_index"],
               "party_id": msg["party_id"]}
        if "payload_b64" in msg:
            rec["payload_b64"] = msg["payload_b64"]
        else:
            rec["ciphertexts"] = msg["ciphertexts"]
        records.append(rec)
    for pid, party in result.parties.items():
        for rec in party.history:
            truth = {"kind": "truth", "round_id": rec.round_id, "party_id": pid, "update_b64": encode_f64(rec.update)}
            if data is not None and len(data[pid]) == 1:
                truth["x"] = data[pid].X[0].tolist()
                truth["y"] = int(data[pid].y[0])
            records.append(truth)
    return records


def write_trace(path, result: SessionResult, data=None) -> None:
    with open(path, "w") as fh:
        for rec in trace_records(result, data):
            fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
