"""Gradient-inversion attacks against what individual aggregators observe.

For a single dense softmax layer and one training example, the gradient
matching problem has a closed-form solution: ``dL/dW[i, j] = (p - y)_i * x_j``
and ``dL/db[i] = (p - y)_i``, so ``x_j`` is a ratio of two observed
gradient entries, and the label is the only non-positive entry of ``dL/db``.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from shufflefl.tensor import ModelMapper, decode_f64, derive_permutation, unpermute

MSE_EDGES = (0.0, 1e-3, 1e-2, 1e-1, 1.0, 1e2, np.inf)
MSE_LABELS = ("[0,1e-3)", "[1e-3,1e-2)", "[1e-2,1e-1)", "[1e-1,1)", "[1,1e2)", ">=1e2")
COSINE_EDGES = (0.0, 0.01, 0.2, 0.4, 0.6, 0.8, np.inf)
COSINE_LABELS = ("[0,0.01)", "[0.01,0.2)", "[0.2,0.4)", "[0.4,0.6)", "[0.6,0.8)", "[0.8,1+]")


@dataclass(frozen=True)
class LeakScenario:
    """Which aggregators' views reach the attacker, and which secrets it holds.

    ``leaked_partitions=None`` means every aggregator is compromised.
    """

    name: str = "scenario"
    leaked_partitions: tuple[int, ...] | None = None
    knows_mapper: bool = False
    knows_permutation: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "LeakScenario":
        leaked = d.get("leaked_partitions")
        return cls(
            name=str(d.get("name", "scenario")),
            leaked_partitions=tuple(int(a) for a in leaked) if leaked is not None else None,
            knows_mapper=bool(d.get("knows_mapper", False)),
            knows_permutation=bool(d.get("knows_permutation", False)),
        )

    def leaked(self, num_aggregators: int) -> tuple[int, ...]:
        if self.leaked_partitions is None:
            return tuple(range(num_aggregators))
        return tuple(sorted(set(self.leaked_partitions)))

    def leaked_fraction(self, counts: Sequence[int]) -> float:
        total = sum(counts)
        return sum(counts[a] for a in self.leaked(len(counts))) / total if total else 0.0


@dataclass
class ReconstructionResult:
    x_hat: np.ndarray
    recovered: np.ndarray = field(repr=False)
    possible: bool = True
    label: int | None = None
    mse: float | None = None
    cosine_distance: float | None = None

    @property
    def num_recovered(self) -> int:
        return int(self.recovered.sum())


# --- attacker's view -----------------------------------------------------

def assemble_view(parts: dict[int, np.ndarray], scenario: LeakScenario, model_size: int,
                  mapper: ModelMapper | None = None, permutation_key: bytes | None = None,
                  round_id: int | None = None, permuted: bool = True) -> np.ndarray:
    """Best full-length gradient estimate from leaked partitions.

    Unseen coordinates are NaN. Without the mapper the attacker lays the
    leaked partitions out contiguously in natural order; without the key it
    takes shuffled parts at face value.
    """
    est = np.full(model_size, np.nan)
    cursor = 0
    for a in sorted(parts):
        part = np.asarray(parts[a], dtype=np.float64)
        if permuted and scenario.knows_permutation:
            if permutation_key is None or round_id is None:
                raise ValueError("knows_permutation needs the permutation key and round id")
            part = unpermute(part, derive_permutation(permutation_key, round_id, a, part.size))
        if scenario.knows_mapper:
            if mapper is None:
                raise ValueError("knows_mapper needs the session mapper")
            est[mapper.indices[a]] = part
        else:
            est[cursor:cursor + part.size] = part
            cursor += part.size
    return est


def split_dense(flat: np.ndarray, num_classes: int, num_features: int) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    split = num_classes * num_features
    return flat[:split].reshape(num_classes, num_features), flat[split:split + num_classes]


# --- attacks ---------------------------------------------------------------

def invert_dense_layer(dW, db) -> ReconstructionResult:
    """Closed-form input recovery for batch size one.

    Invisible entries are NaN. Each feature ``j`` uses the visible row with
    the largest visible nonzero ``|db_i|`` (lowest index on ties); features
    with no usable row are left at 0.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=np.float64))
    db = np.asarray(db, dtype=np.float64)
    c, d = dW.shape
    if db.shape != (c,):
        raise ValueError("db must have one entry per row of dW")
    x_hat = np.zeros(d)
    recovered = np.zeros(d, dtype=bool)
    usable_rows = np.isfinite(db) & (db != 0)
    if not usable_rows.any():
        return ReconstructionResult(x_hat, recovered, possible=False)
    # rows by decreasing |db|, stable so equal magnitudes keep index order
    order = [i for i in np.argsort(-np.abs(np.where(usable_rows, db, 0.0)), kind="stable") if usable_rows[i]]
    for j in range(d):
        for i in order:
            if np.isfinite(dW[i, j]):
                x_hat[j] = dW[i, j] / db[i]
                recovered[j] = True
                break
    return ReconstructionResult(x_hat, recovered, possible=True)


def infer_label(db) -> int | None:
    """Index of the single non-positive visible entry of ``dL/db``, else None.

    ``p_y - 1`` is exactly 0 when the model is confidently right, so zero
    counts alongside negative values.
    """
    db = np.asarray(db, dtype=np.float64)
    negative = np.flatnonzero(np.isfinite(db) & (db <= 0))
    return int(negative[0]) if negative.size == 1 else None


def cosine_distance(g_true, g_observed) -> float:
    """``1 - <a, b> / (|a| |b|)``, clipped to ``[0, 2]``."""
    a = np.asarray(g_true, dtype=np.float64).reshape(-1)
    b = np.asarray(g_observed, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    na, nb = float(a @ a), float(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance is undefined for a zero vector")
    return float(np.clip(1.0 - float(a @ b) / np.sqrt(na * nb), 0.0, 2.0))


def mse(x_hat, x) -> float:
    diff = np.asarray(x_hat, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return float(np.mean(diff * diff))


def attack_observation(est: np.ndarray, num_classes: int, num_features: int, x_true=None, y_true=None,
                       g_true=None) -> ReconstructionResult:
    """Run inversion and label inference on an assembled view and score them."""
    dW, db = split_dense(est, num_classes, num_features)
    res = invert_dense_layer(dW, db)
    res.label = infer_label(db)
    if x_true is not None:
        res.mse = mse(res.x_hat, x_true)
    if g_true is not None:
        filled = np.nan_to_num(est, nan=0.0)
        try:
            res.cosine_distance = cosine_distance(g_true, filled)
        except ValueError:
            res.cosine_distance = None
    return res


def bucket(value: float | None, edges=MSE_EDGES, labels=MSE_LABELS) -> str | None:
    if value is None or not np.isfinite(value):
        return labels[-1] if value is not None else None
    for lo, hi, label in zip(edges[:-1], edges[1:], labels):
        if lo <= value < hi:
            return label
    return labels[-1]


# --- suite over recorded traces -----------------------------------------

def _index_trace(records: Iterable[dict]):
    header = None
    uploads: dict[tuple[int, str], dict[int, np.ndarray]] = defaultdict(dict)
    truths: dict[tuple[int, str], dict] = {}
    for rec in records:
        kind = rec.get("kind")
        if kind == "session":
            header = rec
        elif kind == "upload":
            if "payload_b64" not in rec:
                raise ValueError("attacks need plaintext uploads; encrypted traces carry no gradient")
            uploads[(rec["round_id"], rec["party_id"])][rec["agg_index"]] = decode_f64(rec["payload_b64"])
        elif kind == "truth":
            truths[(rec["round_id"], rec["party_id"])] = rec
    if header is None:
        raise ValueError("trace has no session header")
    return header, uploads, truths


def run_attack_suite(records: Sequence[dict], scenarios: Sequence[LeakScenario], mapper: ModelMapper | None = None,
                     permutation_key: bytes | None = None, rounds: Sequence[int] | None = None) -> dict:
    """Attack every (round, party) upload set under every scenario.

    Returns ``{"records": [...], "summary": {scenario: histograms}}``.
    """
    header, uploads, truths = _index_trace(records)
    if header.get("algorithm") != "gradient_sum":
        raise ValueError("attacks run on gradient uploads; record the trace with algorithm=gradient_sum")
    c, d = int(header["num_classes"]), int(header["num_features"])
    A = int(header["num_aggregators"])
    k = int(header["model_size"])
    counts = header["partition_sizes"]
    wanted = list(rounds) if rounds is not None else list(range(1, int(header["rounds"]) + 1))
    present = {r for r, _ in uploads}
    missing = [r for r in wanted if r not in present]
    if missing:
        raise ValueError(f"trace has no uploads for rounds {missing}")

    out_records = []
    summary = {}
    for sc in scenarios:
        leaked = sc.leaked(A)
        mse_hist = dict.fromkeys(MSE_LABELS, 0)
        cos_hist = dict.fromkeys(COSINE_LABELS, 0)
        n_trials = n_label = n_label_correct = 0
        for (r, pid), parts in sorted(uploads.items()):
            if r not in wanted:
                continue
            truth = truths.get((r, pid))
            if truth is None:
                raise ValueError(f"trace lacks ground truth for round {r}, party {pid}")
            if any(a not in parts for a in leaked):
                raise ValueError(f"trace lacks aggregator uploads for round {r}, party {pid}")
            est = assemble_view({a: parts[a] for a in leaked}, sc, k, mapper, permutation_key, r,
                                permuted=bool(header["permute"]))
            g_true = decode_f64(truth["update_b64"])
            res = attack_observation(est, c, d, truth.get("x"), truth.get("y"), g_true)
            label_correct = None if truth.get("y") is None else (res.label == truth["y"])
            rec = {
                "scenario": sc.name, "round_id": r, "party_id": pid,
                "leaked_fraction": sc.leaked_fraction(counts),
                "mse": res.mse, "mse_bucket": bucket(res.mse),
                "label": res.label, "label_correct": label_correct,
                "cosine_distance": res.cosine_distance,
                "cosine_bucket": bucket(res.cosine_distance, COSINE_EDGES, COSINE_LABELS),
            }
            out_records.append(rec)
            n_trials += 1
            if rec["mse_bucket"] is not None:
                mse_hist[rec["mse_bucket"]] += 1
            if rec["cosine_bucket"] is not None:
                cos_hist[rec["cosine_bucket"]] += 1
            if label_correct is not None:
                n_label += 1
                n_label_correct += int(label_correct)
        summary[sc.name] = {
            "trials": n_trials,
            "leaked_fraction": sc.leaked_fraction(counts),
            "mse_hist": _percent(mse_hist),
            "cosine_hist": _percent(cos_hist),
            "label_accuracy": n_label_correct / n_label if n_label else None,
        }
    return {"records": out_records, "summary": summary}


def _percent(hist: dict) -> dict:
    total = sum(hist.values())
    return {k: (100.0 * v / total if total else 0.0) for k, v in hist.items()}


def format_table(summary: dict, which: str = "mse_hist") -> str:
    labels = MSE_LABELS if which == "mse_hist" else COSINE_LABELS
    names = list(summary)
    title = "MSE" if which == "mse_hist" else "Cosine distance"
    width = max([len(title), *map(len, labels)]) + 2
    colw = max([10, *map(len, names)]) + 2
    lines = [title.ljust(width) + "".join(n.rjust(colw) for n in names)]
    for label in labels:
        lines.append(label.ljust(width) + "".join(f"{summary[n][which][label]:.1f}%".rjust(colw) for n in names))
    return "\n".join(lines)
