import asyncio
import base64

import numpy as np
import pytest

from shufflefl.attestation import SecurityProcessor, SimulatedRoot
from shufflefl.mesh import pipeline
from shufflefl.mesh.config import ConfigError, SessionConfig
from shufflefl.mesh.nodes import AggregatorNode, AttestationServerNode, PartyNode, RoundAborted
from shufflefl.mesh.transport import ConnectionClosed, MemoryNetwork
from shufflefl.signing import private_key_bytes
from shufflefl.simulate import build_authority, build_processor, run_session, run_session_async


def make_cfg(A=2, parties=("p0", "p1"), k=4, **extra) -> SessionConfig:
    d = {
        "aggregators": [f"agg{a}:1" for a in range(A)],
        "attestation_server": "att:1",
        "parties": [{"id": p, "weight": 1} for p in parties],
        "model_size": k,
        "mapper_seed_hex": "ab" * 32,
        "permutation_key_hex": "cd" * 32,
        "algorithm": "gradient_sum",
        "rounds": 1,
        "learning_rate": 1.0,
        "round_timeout": 10,
    }
    d.update(extra)
    return SessionConfig.from_dict(d)


def const_updates(cfg, vectors):
    return {p: (lambda v: (lambda theta, r: np.array(v, dtype=np.float64)))(vectors[p]) for p in cfg.party_ids}


def test_crafted_gradient_sum_round():
    cfg = make_cfg()
    assert pipeline.decentralized_round([[1, 1, 1, 1], [1, 2, 3, 4]], [1, 1], "gradient_sum", cfg.mapper(),
                                        cfg.permutation_key, 1, True).tolist() == [2, 3, 4, 5]
    # parties scale by n_i / n = 1/2 before upload, so feed doubled gradients
    fns = const_updates(cfg, {"p0": [2, 2, 2, 2], "p1": [2, 4, 6, 8]})
    res = run_session(cfg, fns, np.zeros(4))
    for party in res.parties.values():
        assert party.theta.tolist() == [-2, -3, -4, -5]


@pytest.mark.parametrize("alg", ["weighted_average", "gradient_sum", "coordinate_median"])
@pytest.mark.parametrize("A,permute", [(1, False), (1, True), (3, True), (3, False)])
def test_session_matches_centralized_oracle(alg, A, permute):
    cfg = make_cfg(A=A, parties=("a", "b", "c"), k=50, algorithm=alg, permute=permute, rounds=3)
    rng = np.random.default_rng(A)
    base = {p: rng.normal(size=50) for p in cfg.party_ids}
    fns = {p: (lambda b: (lambda theta, r: b * r + 0.1 * theta))(base[p]) for p in cfg.party_ids}
    from shufflefl.simulate import centralized_trajectory
    oracle = centralized_trajectory(cfg, fns, np.zeros(50))
    res = run_session(cfg, fns, np.zeros(50))
    for party in res.parties.values():
        for rec, expect in zip(party.history, oracle):
            assert rec.theta.tobytes() == expect.tobytes()


def test_single_aggregator_no_permutation_uploads_whole_update():
    cfg = make_cfg(A=1, permute=False, algorithm="weighted_average")
    v = {"p0": [1.5, -2.0, 3.0, 0.25], "p1": [0.0, 0.0, 0.0, 0.0]}
    res = run_session(cfg, const_updates(cfg, v), np.zeros(4), record_uploads=True)
    by_party = {u["party_id"]: base64.b64decode(u["payload_b64"]) for u in res.uploads}
    assert by_party["p0"] == np.array(v["p0"]).tobytes()


def test_identical_parties_identical_uploads():
    cfg = make_cfg(A=3, k=30)
    g = list(np.linspace(-1, 1, 30))
    res = run_session(cfg, const_updates(cfg, {"p0": g, "p1": g}), np.zeros(30), record_uploads=True)
    seen = {}
    for u in res.uploads:
        seen.setdefault(u["agg_index"], set()).add(u["payload_b64"])
    assert all(len(s) == 1 for s in seen.values())


def test_registration_order_and_round_ids():
    parties = ("delta", "alpha", "charlie", "bravo")
    cfg = make_cfg(A=3, parties=parties, k=20, rounds=4)
    res = run_session(cfg, const_updates(cfg, {p: np.ones(20) for p in parties}), np.zeros(20))
    for agg in res.aggregators:
        assert agg.registered_parties() == sorted(parties)
        assert agg.round_log == [1, 2, 3, 4]
    for party in res.parties.values():
        assert [r.round_id for r in party.history] == [1, 2, 3, 4]


async def _lone_aggregator(cfg, network):
    root, authority = build_authority(cfg)
    await AttestationServerNode(authority, cfg.attestation_server, network).start()
    agg = AggregatorNode(0, cfg.aggregator_view(0), network, build_processor(root, cfg, 0))
    await agg.attest()
    await agg.start()
    return agg


async def _register(network, cfg, party_id):
    ch = await network.connect(cfg.aggregators[0], name=party_id)
    await ch.send({"type": "register", "role": "party", "party_id": party_id, "weight": 1})
    return ch, await ch.recv()


def test_register_duplicate_late_unknown():
    async def go():
        cfg = make_cfg(A=1, parties=("p0", "p1"))
        net = MemoryNetwork()
        agg = await _lone_aggregator(cfg, net)
        ch, ack = await _register(net, cfg, "p0")
        assert ack["status"] == "ok" and ack["party_index"] == 0
        await ch.send({"type": "register", "role": "party", "party_id": "p0", "weight": 1})
        again = await ch.recv()
        assert again["party_index"] == 0 and agg.registered_parties() == ["p0"]
        _, ack = await _register(net, cfg, "mallory")
        assert ack["status"] == "rejected" and ack["reason"] == "unknown"
        agg._open_round(1)
        late_ch, ack = await _register(net, cfg, "p1")
        assert ack["status"] == "rejected" and ack["reason"] == "late"
        with pytest.raises(ConnectionClosed):
            await late_ch.recv()
        assert agg.registered_parties() == ["p0"]
        await net.shutdown()
    asyncio.run(go())


@pytest.mark.parametrize("bad", [
    {"round_id": 2},
    {"agg_index": 1},
    {"payload_b64": base64.b64encode(np.zeros(3).tobytes()).decode()},
    {"payload_b64": base64.b64encode(np.array([np.nan] * 4).tobytes()).decode()},
])
def test_bad_upload_closes_connection(bad):
    async def go():
        cfg = make_cfg(A=1, parties=("p0", "p1"))
        net = MemoryNetwork()
        agg = await _lone_aggregator(cfg, net)
        ch, _ = await _register(net, cfg, "p0")
        agg._open_round(1)
        msg = {"type": "upload", "round_id": 1, "party_id": "p0", "agg_index": 0,
               "payload_b64": base64.b64encode(np.zeros(4).tobytes()).decode()}
        msg.update(bad)
        await ch.send(msg)
        with pytest.raises(ConnectionClosed):
            await ch.recv()
        assert agg.held_payload_sizes() == []
        await net.shutdown()
    asyncio.run(go())


def test_aggregators_hold_only_their_partition_and_no_secrets():
    cfg = make_cfg(A=3, parties=("p0", "p1", "p2"), k=60, rounds=2, proportions=[0.5, 0.3, 0.2])
    sizes = cfg.partition_sizes()
    observed = []

    res_holder = {}

    def tap(agg_index, round_id, party_id, msg):
        agg = res_holder["aggs"][agg_index]
        observed.append((agg_index, len(base64.b64decode(msg["payload_b64"])) // 8, max(agg.held_payload_sizes() or [0])))

    async def go():
        net = MemoryNetwork(capture=True)
        root, authority = build_authority(cfg)
        await AttestationServerNode(authority, cfg.attestation_server, net).start()
        aggs = [AggregatorNode(i, cfg.aggregator_view(i), net, build_processor(root, cfg, i), tap) for i in range(3)]
        res_holder["aggs"] = aggs
        for a in aggs:
            await a.attest()
            await a.start()
        rng = np.random.default_rng(0)
        parties = [PartyNode(p, cfg, net, np.zeros(60), (lambda g: lambda th, r: g)(rng.normal(size=60)))
                   for p in cfg.party_ids]
        await asyncio.gather(*(p.connect() for p in parties))
        await asyncio.gather(*(a.run() for a in aggs), *(p.run() for p in parties))
        return net, aggs

    net, aggs = asyncio.run(go())
    assert len(observed) == 3 * 3 * 2
    for a, n, held in observed:
        assert n == sizes[a] and held <= sizes[a]

    secrets = [cfg.permutation_key, cfg.mapper_seed]
    creds = [private_key_bytes(a.credential.keypair.signing_key) for a in aggs]

    def scan(obj, depth=0):
        if depth > 4:
            return
        if isinstance(obj, (bytes, bytearray)):
            assert not any(s in bytes(obj) for s in secrets)
        elif isinstance(obj, str):
            assert not any(s.hex() in obj for s in secrets)
        elif isinstance(obj, dict):
            for k, v in obj.items():
                scan(k, depth + 1)
                scan(v, depth + 1)
        elif isinstance(obj, (list, tuple, set)):
            for v in obj:
                scan(v, depth + 1)
        elif isinstance(obj, np.ndarray):
            # the mapper assignment itself would be the giveaway
            assert obj.size != cfg.model_size or obj.dtype.kind == "f"

    for agg in aggs:
        scan(vars(agg))
        assert not any(isinstance(v, type(cfg)) for v in vars(agg).values())

    blob = b"".join(frame for _, _, frame in net.frames)
    for secret in secrets + creds:
        for form in (secret, secret.hex().encode(), base64.b64encode(secret)):
            assert form not in blob
    # the only frames carrying key material are the sealed secret blobs
    assert any(b'"secret_blob"' in f for _, _, f in net.frames)


def test_wrong_permutation_key_is_detected():
    cfg = make_cfg(A=2, parties=("p0", "p1", "p2"), k=20, rounds=2)
    fns = const_updates(cfg, {p: np.arange(20.0) + i for i, p in enumerate(cfg.party_ids)})
    with pytest.raises(RoundAborted, match="divergence|disagree"):
        run_session(cfg, fns, np.zeros(20), party_overrides={"p2": {"permutation_key_hex": "ee" * 32}})


def test_failed_challenge_blocks_registration():
    cfg = make_cfg(A=2)

    async def go():
        net = MemoryNetwork()
        root, authority = build_authority(cfg)
        await AttestationServerNode(authority, cfg.attestation_server, net).start()
        aggs = [AggregatorNode(i, cfg.aggregator_view(i), net, build_processor(root, cfg, i)) for i in range(2)]
        for a in aggs:
            await a.attest()
            await a.start()
        # aggregator 0 answers challenges with some other key
        impostor = SecurityProcessor(SimulatedRoot.from_seed(bytes(32)))
        from shufflefl.attestation import AttestationAuthority, inject_secret, measure
        other = AttestationAuthority(authority.root_key, {0: measure(cfg.aggregator_view(0))})
        aggs[0].credential = inject_secret(other.attest_platform(impostor.attest(0, cfg.aggregator_view(0))).blob,
                                           impostor.dh_key)
        party = PartyNode("p0", cfg, net, np.zeros(4), lambda th, r: th)
        from shufflefl.attestation import AttestationError
        with pytest.raises(AttestationError):
            await party.connect()
        assert aggs[0].registered_parties() == []
        assert not party.verdicts[0].accepted
        await net.shutdown()

    asyncio.run(go())


def test_tampered_view_fails_attestation():
    cfg = make_cfg(A=2)

    async def go():
        net = MemoryNetwork()
        view = dict(cfg.aggregator_view(1), algorithm="coordinate_median")
        with pytest.raises(Exception) as err:
            await run_session_async(cfg, const_updates(cfg, {"p0": [0] * 4, "p1": [0] * 4}), np.zeros(4),
                                    network=net, views={1: view})
        assert getattr(err.value, "reason", None) == "measurement"

    asyncio.run(go())


def test_timeout_aborts_round():
    cfg = make_cfg(A=1, round_timeout=0.3)

    def slow(theta, r):
        import time
        time.sleep(0.6)
        return np.zeros(4)

    fns = const_updates(cfg, {"p0": [0] * 4, "p1": [0] * 4})
    fns["p1"] = slow
    with pytest.raises(RoundAborted):
        run_session(cfg, fns, np.zeros(4))


def test_config_validation():
    with pytest.raises(ConfigError):
        make_cfg(mapper_seed_hex="ab" * 31)
    with pytest.raises(ConfigError):
        make_cfg(algorithm="mean")
    with pytest.raises(ConfigError):
        make_cfg(proportions=[0.9, 0.2])
    with pytest.raises(ConfigError):
        make_cfg(parties=("a", "a"))
    with pytest.raises(ConfigError):
        make_cfg(algorithm="krum", parties=("a", "b", "c"), byzantine_f=1)
    view = make_cfg().aggregator_view(0)
    assert "permutation_key_hex" not in str(view) and "cd" * 32 not in str(view)
