"""End-to-end acceptance criteria.

Run with ``pytest tests/test_acceptance.py -s`` to see one PASS/FAIL line per
criterion as it finishes; the same lines are repeated in the terminal summary.
"""
import random

import numpy as np
import pytest

from shufflefl import paillier
from shufflefl.attack import LeakScenario, cosine_distance, infer_label, run_attack_suite
from shufflefl.attestation import (
    AttestationAuthority,
    ChallengeVerifier,
    SecurityProcessor,
    SimulatedRoot,
    inject_secret,
    measure,
    respond,
)
from shufflefl.fusion import fuse_weighted_average
from shufflefl.mesh import pipeline
from shufflefl.mesh.config import SessionConfig
from shufflefl.simulate import party_datasets, simulate
from shufflefl.tensor import build_mapper, derive_permutation, merge, partition, permute, unpermute
from shufflefl.trainer import DenseSoftmaxModel, gradient, pooled
from support import attack_config, criterion, mutate_report, record_trace

pytestmark = pytest.mark.acceptance

ALGORITHMS = ("weighted_average", "gradient_sum", "coordinate_median")


def _random_proportions(rng, A):
    p = rng.random(A)
    if A > 1 and rng.random() < 0.15:
        p[rng.integers(A)] = 0.0
    if p.sum() == 0:
        p[0] = 1.0
    return (p / p.sum()).tolist()


def test_criterion_1_decentralized_equals_centralized():
    rng = np.random.default_rng(1)
    with criterion(1, "decentralized == centralized bitwise, 200 random configs", 120) as c:
        mismatches = 0
        for trial in range(200):
            N, A = int(rng.integers(1, 9)), int(rng.integers(1, 5))
            k = int(round(10 ** rng.uniform(1, 5)))
            algorithm = ALGORITHMS[trial % 3]
            props = _random_proportions(rng, A)
            mapper = build_mapper(k, props, rng.bytes(32))
            key = rng.bytes(32)
            round_id = int(rng.integers(1, 1000))
            permute_on = bool(rng.integers(2))
            updates = [rng.normal(0, 10 ** rng.uniform(-3, 3), k) for _ in range(N)]
            weights = [int(w) for w in rng.integers(1, 1000, N)]
            got = pipeline.decentralized_round(updates, weights, algorithm, mapper, key, round_id, permute_on)
            want = pipeline.centralized_round(updates, weights, algorithm)
            if got.tobytes() != want.tobytes():
                mismatches += 1
        c.note(f"mismatches {mismatches}/200")
        assert mismatches == 0


@pytest.fixture(scope="module")
def attack_traces(tmp_path_factory):
    """Twenty single-example parties over five rounds: 100 trials per trace."""
    d = tmp_path_factory.mktemp("acceptance")
    layouts = {
        "plain": dict(),
        "split": dict(num_aggregators=2, proportions=[0.6, 0.4]),
        "perm": dict(permute=True),
        "split-perm": dict(num_aggregators=2, proportions=[0.6, 0.4], permute=True),
        "three-perm": dict(num_aggregators=3, permute=True),
    }
    out = {}
    for name, kw in layouts.items():
        cfg = attack_config(parties=20, rounds=5, seed=3, **kw)
        out[name] = (cfg, record_trace(cfg, d / f"{name}.jsonl"))
    return out


def _suite(cfg, records, scenario):
    return run_attack_suite(records, [scenario], cfg.mapper(), cfg.permutation_key)


def test_criterion_2_mse_buckets(attack_traces):
    with criterion(2, "inversion MSE buckets over 100 trials", 60) as c:
        cfg, recs = attack_traces["plain"]
        rep = _suite(cfg, recs, LeakScenario("full"))
        mses = [r["mse"] for r in rep["records"]]
        full = rep["summary"]["full"]["mse_hist"]["[0,1e-3)"]
        c.note(f"100% leak: {full:.0f}% in [0,1e-3), max mse {max(mses):.1e}")
        assert len(mses) == 100 and full == 100.0 and max(mses) < 1e-20

        cfg, recs = attack_traces["split"]
        sc = LeakScenario("60%", leaked_partitions=(0,))
        rep = _suite(cfg, recs, sc)
        frac = rep["summary"]["60%"]["leaked_fraction"]
        part = rep["summary"]["60%"]["mse_hist"]["[0,1e-3)"]
        c.note(f"{100 * frac:.0f}% leak: {part:.0f}%")
        assert abs(frac - 0.6) < 0.01 and part == 0.0

        for name, leaked in (("perm", None), ("split-perm", (0,)), ("split-perm", None), ("three-perm", (0,)),
                             ("three-perm", None)):
            cfg, recs = attack_traces[name]
            rep = _suite(cfg, recs, LeakScenario("p", leaked_partitions=leaked))
            s = rep["summary"]["p"]
            c.note(f"{name} {100 * s['leaked_fraction']:.0f}% leak: {s['mse_hist']['[0,1e-3)']:.0f}%")
            assert s["trials"] == 100 and s["mse_hist"]["[0,1e-3)"] == 0.0


def test_criterion_3_cosine(attack_traces):
    with criterion(3, "cosine distance of observed gradients", 60) as c:
        cfg, recs = attack_traces["plain"]
        rep = _suite(cfg, recs, LeakScenario("full"))
        aligned = [r["cosine_distance"] for r in rep["records"]]
        c.note(f"aligned max {max(aligned)!r}")
        assert all(v == 0.0 for v in aligned)

        rng = np.random.default_rng(3)
        num_classes, num_features = 10, 1000
        k = num_classes * num_features + num_classes
        far = 0
        for seed in range(100):
            model = DenseSoftmaxModel.random(num_classes, num_features, seed, scale=0.1)
            x = rng.normal(size=(1, num_features))
            g = gradient(model, x, [int(rng.integers(num_classes))])
            spec = derive_permutation(rng.bytes(32), int(rng.integers(1, 100)), 0, k)
            far += cosine_distance(g, permute(g, spec)) >= 0.8
        c.note(f"permuted dim {k}: {far}/100 seeds >= 0.8")
        assert far >= 99


def test_criterion_4_label_inference():
    rng = np.random.default_rng(4)
    with criterion(4, "label inference", 60) as c:
        correct = 0
        for _ in range(1000):
            num_classes, num_features = int(rng.integers(2, 33)), int(rng.integers(1, 65))
            model = DenseSoftmaxModel.random(num_classes, num_features, int(rng.integers(2**31)),
                                             scale=float(rng.uniform(0.01, 2)))
            x = rng.normal(size=(1, num_features))
            y = int(rng.integers(num_classes))
            db = gradient(model, x, [y])[num_classes * num_features:]
            correct += infer_label(db) == y
        c.note(f"unpermuted {correct}/1000")
        assert correct == 1000

        hits = 0
        trials = 1000
        for _ in range(trials):
            model = DenseSoftmaxModel.random(16, 8, int(rng.integers(2**31)), scale=0.5)
            y = int(rng.integers(16))
            db = gradient(model, rng.normal(size=(1, 8)), [y])[16 * 8:]
            spec = derive_permutation(rng.bytes(32), 1, 0, 16)
            hits += infer_label(permute(db, spec)) == y
        acc = hits / trials
        c.note(f"permuted c=16 accuracy {acc:.3f} (chance {1 / 16:.3f})")
        assert abs(acc - 1 / 16) <= 0.05


def _latency(algorithm_cfg):
    rep = simulate(SessionConfig.from_dict(algorithm_cfg), oracle=False)
    return rep.metrics[0]["wall_ms"]


def test_criterion_5_paillier():
    rng = np.random.default_rng(5)
    with criterion(5, "Paillier weighted average and homomorphism (512-bit)", 600) as c:
        kp = paillier.keygen(512)
        pk, sk = kp.public, kp.private
        codec = paillier.FixedPointCodec(pk.n)
        worst = 0.0
        for _ in range(100):
            N, A, k = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(5, 40))
            weights = [int(w) for w in rng.integers(1, 500, N)]
            updates = [rng.uniform(-1, 1, k) * 10 ** rng.uniform(-2, 1) for _ in range(N)]
            props = rng.random(A) + 0.1
            mapper = build_mapper(k, (props / props.sum()).tolist(), rng.bytes(32))
            key = rng.bytes(32)
            fused_parts = []
            for a, idx in enumerate(mapper.indices):
                spec = derive_permutation(key, 1, a, len(idx))
                cts = [paillier.encrypt_vector(pk, permute(partition(u, mapper)[a], spec), codec) for u in updates]
                summed = paillier.fuse_encrypted(pk, cts, weights) if len(idx) else []
                fused_parts.append(unpermute(paillier.decrypt_vector(sk, summed, sum(weights), codec), spec))
            got = merge(fused_parts, mapper)
            want = fuse_weighted_average(updates, weights)
            worst = max(worst, float(np.max(np.abs(got - want))))
        c.note(f"max error {worst:.2e} (bound {4 * 2.0**-40:.2e})")
        assert worst <= 4 * 2.0**-40

        bad = 0
        for _ in range(1000):
            m1, m2 = int(rng.integers(0, 2**62)), int(rng.integers(0, 2**62))
            a = int(rng.integers(0, 2**20))
            c1, c2 = paillier.encrypt(pk, m1), paillier.encrypt(pk, m2)
            bad += paillier.decrypt(sk, paillier.add_cipher(pk, c1, c2)) != (m1 + m2) % pk.n
            bad += paillier.decrypt(sk, paillier.scalar_mul(pk, c1, a)) != (a * m1) % pk.n
        c.note(f"homomorphism failures {bad}/2000")
        assert bad == 0

        base = {
            "attestation_server": "att:1",
            "parties": [{"id": f"p{i}", "weight": 1} for i in range(2)],
            "mapper_seed_hex": "11" * 32, "permutation_key_hex": "22" * 32,
            "algorithm": "paillier", "rounds": 1, "learning_rate": 0.1, "permute": True,
            "round_timeout": 300,
            "trainer": {"num_classes": 10, "num_features": 999, "examples_per_party": 4},
        }
        for A in (1, 3):
            ms = _latency({**base, "aggregators": [f"agg{a}:1" for a in range(A)]})
            c.note(f"latency A={A} k=10000: {ms:.0f} ms/round")


def test_criterion_6_attestation():
    with criterion(6, "attestation rejects mutations and replays, honest flow registers", 30) as c:
        view = {"agg_index": 0, "algorithm": "weighted_average", "partition_size": 100}
        root = SimulatedRoot.from_seed(bytes(range(32)))
        proc = SecurityProcessor(root)
        auth = AttestationAuthority(root.verification_key, {0: measure(view)}, "1.40")
        report = proc.attest(0, view)
        rng = random.Random(6)
        accepted = sum(auth.attest_platform(mutate_report(report, rng)[1]).accepted for _ in range(256))
        c.note(f"mutations accepted {accepted}/256")
        assert accepted == 0 and auth.registry == {}

        cred = inject_secret(auth.attest_platform(report).blob, proc.dh_key)
        verifier = ChallengeVerifier()
        nonce = verifier.issue_challenge(0)
        sig = respond(cred, nonce)
        first = verifier.verify_response(0, nonce, sig, auth.lookup(0))
        replay = verifier.verify_response(0, nonce, sig, auth.lookup(0))
        c.note(f"replay reason {replay.reason}")
        assert first.accepted and not replay.accepted

        cfg = attack_config(num_aggregators=3, parties=6, rounds=1, permute=True)
        res = simulate(cfg, oracle=False).result
        regs = [agg.registered_parties() for agg in res.aggregators]
        c.note(f"honest flow: {len(res.server.authority.registry)} aggregators, "
               f"{min(map(len, regs))} parties each")
        assert sorted(res.server.authority.registry) == [0, 1, 2]
        assert all(r == cfg.party_ids for r in regs)


def _training_cfg(algorithm, rounds, **extra):
    return SessionConfig.from_dict({
        "aggregators": [f"agg{a}:1" for a in range(3)],
        "attestation_server": "att:1",
        "parties": [{"id": f"p{i}"} for i in range(4)],
        "mapper_seed_hex": "33" * 32, "permutation_key_hex": "44" * 32,
        "algorithm": algorithm, "rounds": rounds, "learning_rate": 0.2, "local_epochs": 1,
        "permute": True,
        "trainer": {"num_classes": 10, "num_features": 20, "examples_per_party": 100, "data_seed": 7,
                    "separation": 3.5},
        **extra,
    })


def test_criterion_7_training():
    with criterion(7, "training quality and FedSGD equivalence", 120) as c:
        cfg = _training_cfg("weighted_average", 30)
        accs = [row["accuracy"] for row in simulate(cfg, oracle=False).metrics]
        first = next((i + 1 for i, a in enumerate(accs) if a >= 0.95), None)
        c.note(f"FedAvg accuracy {accs[-1]:.3f}, >=0.95 from round {first}")
        assert first is not None and first <= 30

        cfg = _training_cfg("gradient_sum", 30)
        rep = simulate(cfg, oracle=False)
        data = party_datasets(cfg)
        X, y = pooled([data[p] for p in cfg.party_ids])
        t = cfg.trainer
        theta = DenseSoftmaxModel.random(t.num_classes, t.num_features, t.init_seed).flatten()
        worst = 0.0
        for r in range(30):
            model = DenseSoftmaxModel.unflatten(theta, t.num_classes, t.num_features)
            theta = theta - cfg.learning_rate * gradient(model, X, y)
            worst = max(worst, float(np.max(np.abs(rep.result.parties["p0"].history[r].theta - theta))))
        c.note(f"FedSGD vs pooled GD max deviation {worst:.1e}")
        assert worst <= 1e-12


def test_criterion_8_graceful_degradation(attack_traces):
    with criterion(8, "all partitions plus both secrets recovers inputs", 10) as c:
        worst = 0.0
        for name in ("three-perm", "split-perm"):
            cfg, recs = attack_traces[name]
            sc = LeakScenario("all", knows_mapper=True, knows_permutation=True)
            rep = _suite(cfg, recs, sc)
            worst = max(worst, max(r["mse"] for r in rep["records"]))
        c.note(f"max mse {worst:.1e}")
        assert worst < 1e-20
