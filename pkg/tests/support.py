"""Shared helpers for the test suite."""
from __future__ import annotations

import random
import socket
from dataclasses import replace

from shufflefl.attestation import AttestationReport

REPORT_FIELDS = ("agg_id", "measurement", "api_version", "policy", "platform_key", "cert_signature",
                 "dh_public", "signature")


def _flip(data: bytes, bit: int) -> bytes:
    b = bytearray(data)
    b[bit // 8] ^= 1 << (bit % 8)
    return bytes(b)


def mutate_report(report: AttestationReport, rng: random.Random) -> tuple[str, AttestationReport]:
    """Flip one uniformly chosen bit of one uniformly chosen report field."""
    name = rng.choice(REPORT_FIELDS)
    if name in ("agg_id", "policy"):
        value = getattr(report, name) ^ (1 << rng.randrange(63))
        return name, replace(report, **{name: value})
    if name == "api_version":
        raw = report.api_version.encode("utf-8", "surrogateescape")
        raw = _flip(raw, rng.randrange(8 * len(raw)))
        return name, replace(report, api_version=raw.decode("utf-8", "surrogateescape"))
    if name in ("platform_key", "cert_signature"):
        cert = report.certificate
        attr = "platform_key" if name == "platform_key" else "root_signature"
        data = getattr(cert, attr)
        cert = replace(cert, **{attr: _flip(data, rng.randrange(8 * len(data)))})
        return name, replace(report, certificate=cert)
    data = getattr(report, name)
    return name, replace(report, **{name: _flip(data, rng.randrange(8 * len(data)))})


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]



def attack_config(num_aggregators=1, proportions=None, permute=False, parties=5, rounds=4, seed=0,
                  num_classes=10, num_features=32):
    """Session whose parties each hold one example and upload raw gradients."""
    from shufflefl.mesh.config import SessionConfig
    d = {
        "aggregators": [f"agg{a}:1" for a in range(num_aggregators)],
        "attestation_server": "att:1",
        "parties": [{"id": f"p{i:03d}", "weight": 1} for i in range(parties)],
        "mapper_seed_hex": f"{seed:064x}",
        "permutation_key_hex": f"{seed + 1:064x}",
        "algorithm": "gradient_sum",
        "rounds": rounds,
        "learning_rate": 0.1,
        "permute": permute,
        "trainer": {"num_classes": num_classes, "num_features": num_features, "examples_per_party": 1,
                    "separation": 0.0, "data_seed": seed, "init_seed": seed + 7},
    }
    if proportions is not None:
        d["proportions"] = proportions
    return SessionConfig.from_dict(d)


def record_trace(cfg, path):
    from shufflefl.simulate import read_trace, simulate
    simulate(cfg, trace_path=path, oracle=False)
    return read_trace(path)


# --- acceptance reporting ------------------------------------------------

CRITERIA: dict[int, tuple[bool, str]] = {}


class criterion:
    """Time a block, record PASS/FAIL for criterion ``number`` and enforce its runtime limit."""

    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._t0
        ok = exc_type is None and elapsed < self.limit_s
        if exc_type is None and not ok:
            self.note(f"runtime {elapsed:.1f}s exceeds {self.limit_s:.0f}s")
        elif exc_type is not None:
            self.note(f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
        line = (f"criterion {self.number} [{'PASS' if ok else 'FAIL'}] {self.title} "
                f"({elapsed:.1f}s/{self.limit_s:.0f}s) " + "; ".join(self.details))
        CRITERIA[self.number] = (ok, line)
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(line)
        return False
