"""Command-line entry points.

Exit codes: 0 success, 2 bad configuration, 3 attestation rejected,
4 protocol error or aborted round, 5 network failure.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

import numpy as np

from shufflefl import paillier
from shufflefl.attack import LeakScenario, format_table, run_attack_suite
from shufflefl.attestation import AttestationError
from shufflefl.mesh.config import ConfigError, SessionConfig
from shufflefl.mesh.nodes import AggregatorNode, AttestationServerNode, PartyNode, RoundAborted
from shufflefl.mesh.transport import TcpNetwork
from shufflefl.mesh.wire import ProtocolError
from shufflefl.simulate import (
    build_authority,
    build_processor,
    initial_theta,
    party_datasets,
    read_trace,
    simulate,
    trainer_update_fn,
)
from shufflefl.trainer import DenseSoftmaxModel, accuracy, forward_loss

log = logging.getLogger("shufflefl")

EXIT_OK, EXIT_CONFIG, EXIT_ATTESTATION, EXIT_PROTOCOL, EXIT_NETWORK = 0, 2, 3, 4, 5

DEFAULT_SCENARIOS = (
    {"name": "one-partition", "leaked_partitions": [0]},
    {"name": "all-partitions"},
    {"name": "all+mapper", "knows_mapper": True},
    {"name": "all+secrets", "knows_mapper": True, "knows_permutation": True},
)


def _load(args) -> SessionConfig:
    cfg = SessionConfig.load(args.config)
    if args.seed is not None and cfg.trainer is not None:
        trainer = dict(cfg.raw.get("trainer", {}))
        trainer["data_seed"] = args.seed
        cfg = cfg.with_overrides(trainer=trainer)
    return cfg


def _write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


# --- subcommands -----------------------------------------------------------

async def _serve_attestation(cfg: SessionConfig, serve_seconds: float | None) -> None:
    _, authority = build_authority(cfg)
    network = TcpNetwork(cfg.max_body)
    node = AttestationServerNode(authority, cfg.attestation_server, network)
    await node.start()
    log.info("attestation server listening on %s", cfg.attestation_server)
    try:
        if serve_seconds is None:
            await asyncio.Event().wait()
        else:
            await asyncio.sleep(serve_seconds)
    finally:
        await network.shutdown()


def cmd_attestation_server(args) -> int:
    asyncio.run(_serve_attestation(_load(args), args.serve_seconds))
    return EXIT_OK


async def _run_aggregator(cfg: SessionConfig, index: int, metrics: str | None) -> None:
    view = cfg.aggregator_view(index)
    root, _ = build_authority(cfg)
    processor = build_processor(root, cfg, index)
    # the aggregator keeps only its secret-free view from here on
    network = TcpNetwork(cfg.max_body)
    node = AggregatorNode(index, view, network, processor)
    try:
        await node.attest()
        log.info("aggregator %d attested", index)
        await node.start()
        await node.run()
    finally:
        await network.shutdown()
    if metrics:
        _write_jsonl(metrics, [{"round_id": t.round_id, "wall_ms": t.wall_ms, "agg_index": index,
                                "algorithm": cfg.algorithm, "A": cfg.num_aggregators, "N": len(cfg.parties),
                                "permute": cfg.permute} for t in node.timings])


def cmd_aggregator(args) -> int:
    cfg = _load(args)
    if not 0 <= args.index < cfg.num_aggregators:
        raise ConfigError(f"aggregator index {args.index} out of range")
    asyncio.run(_run_aggregator(cfg, args.index, args.metrics))
    return EXIT_OK


async def _run_party(cfg: SessionConfig, party_id: str, metrics: str | None, model_out: str | None) -> None:
    data = party_datasets(cfg)[party_id]
    kp = None
    if cfg.algorithm == "paillier":
        if not cfg.paillier_key_file:
            raise ConfigError("paillier fusion needs paillier_key_file")
        kp = paillier.keypair_from_json(Path(cfg.paillier_key_file).read_text())
    network = TcpNetwork(cfg.max_body)
    node = PartyNode(party_id, cfg, network, initial_theta(cfg), trainer_update_fn(cfg, data), kp)
    try:
        await node.connect()
        await node.run()
    finally:
        await network.shutdown()
    t = cfg.trainer
    rows = []
    for rec in node.history:
        model = DenseSoftmaxModel.unflatten(rec.theta, t.num_classes, t.num_features)
        rows.append({"round_id": rec.round_id, "party_id": party_id, "loss": forward_loss(model, data.X, data.y)[0],
                     "accuracy": accuracy(model, data.X, data.y), "algorithm": cfg.algorithm,
                     "A": cfg.num_aggregators, "N": len(cfg.parties), "permute": cfg.permute})
    if metrics:
        _write_jsonl(metrics, rows)
    if model_out:
        Path(model_out).write_text(json.dumps({"theta_hex": np.ascontiguousarray(node.theta, "<f8").tobytes().hex()}))


def cmd_party(args) -> int:
    cfg = _load(args)
    cfg.party(args.id)
    asyncio.run(_run_party(cfg, args.id, args.metrics, args.model_out))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load(args)
    report = simulate(cfg, metrics_path=args.metrics, trace_path=args.trace)
    last = report.metrics[-1] if report.metrics else {}
    print(json.dumps({"rounds": cfg.rounds, "algorithm": cfg.algorithm, "A": cfg.num_aggregators,
                      "N": len(cfg.parties), "final_loss": last.get("loss"),
                      "final_accuracy": last.get("accuracy"), "max_oracle_deviation": report.max_deviation}))
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _load(args)
    if not args.trace or not Path(args.trace).exists():
        raise ConfigError("attack needs --trace produced by simulate")
    scenarios = [LeakScenario.from_dict(d) for d in (cfg.scenarios or DEFAULT_SCENARIOS)]
    report = run_attack_suite(read_trace(args.trace), scenarios, cfg.mapper(), cfg.permutation_key)
    if args.report:
        _write_jsonl(args.report, report["records"])
    print(format_table(report["summary"], "mse_hist"))
    print()
    print(format_table(report["summary"], "cosine_hist"))
    print()
    for name, s in report["summary"].items():
        acc = s["label_accuracy"]
        print(f"{name}: leaked {100 * s['leaked_fraction']:.0f}%, label accuracy "
              f"{'n/a' if acc is None else f'{100 * acc:.1f}%'}, trials {s['trials']}")
    return EXIT_OK


def cmd_keygen(args) -> int:
    kp = paillier.keygen(args.bits)
    Path(args.out).write_text(paillier.keypair_to_json(kp))
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="session config JSON")
    common.add_argument("--metrics", help="write JSON-lines metrics here")
    common.add_argument("--trace", help="trace file (written by simulate, read by attack)")
    common.add_argument("--seed", type=int, help="override the synthetic data seed")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="shufflefl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("attestation-server", parents=[common], help="run the attestation server")
    p.add_argument("--serve-seconds", type=float, help="stop after this long (default: run until killed)")
    p.set_defaults(func=cmd_attestation_server)

    p = sub.add_parser("aggregator", parents=[common], help="run one aggregator node")
    p.add_argument("--index", type=int, required=True)
    p.set_defaults(func=cmd_aggregator)

    p = sub.add_parser("party", parents=[common], help="run one party")
    p.add_argument("--id", required=True)
    p.add_argument("--model-out", help="write the final model here")
    p.set_defaults(func=cmd_party)

    p = sub.add_parser("simulate", parents=[common], help="run a whole session in one process")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", parents=[common], help="attack a recorded trace")
    p.add_argument("--report", help="write per-trial JSON-lines records here")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("paillier-keygen", help="write a Paillier key file for the parties")
    p.add_argument("--bits", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.add_argument("--log-level", default="WARNING")
    p.set_defaults(func=cmd_keygen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except AttestationError as exc:
        log.error("attestation rejected: %s", exc)
        return EXIT_ATTESTATION
    except (ProtocolError, RoundAborted, asyncio.TimeoutError) as exc:
        log.error("protocol failure: %s", exc)
        return EXIT_PROTOCOL
    except (ConnectionError, OSError, EOFError) as exc:
        log.error("network failure: %s", exc)
        return EXIT_NETWORK
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
