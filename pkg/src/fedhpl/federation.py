"""Client uploads and server-side weighted per-class logit aggregation.

Clients upload only correctly predicted logits, either raw (``full`` mode) or
as one mean logit plus count per class (``summary`` mode). For each target
client ``k`` the server weights client ``j`` by the embedding-dimension ratio
``min(d_k/d_j, d_j/d_k)`` and forms::

    p~[k, c] = sum_j beta[k, j] * S[j, c] / (1 + sum_j beta[k, j] * n[j, c])

where ``S[j, c]`` is the sum of ``j``'s correct class-``c`` logits and
``n[j, c]`` their count. Both upload modes produce the same table.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

FLOAT_BYTES = 8
COUNT_BYTES = 8


class ProtocolError(ValueError):
    """A payload violates the upload/aggregation contract."""


@dataclass(frozen=True)
class LogitRecord:
    client_id: int
    logits: np.ndarray
    label: int


@dataclass(frozen=True)
class ClassSummary:
    client_id: int
    class_id: int
    mean_logit: np.ndarray
    count: int


@dataclass(frozen=True)
class ClientMeta:
    client_id: int
    embed_dim: int
    per_class_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ProtocolError(f"client {self.client_id}: embed_dim must be positive")


@dataclass
class ClientTable:
    """One client's view of the global logits: ``logits[c]`` is valid where ``present[c]``."""

    logits: np.ndarray
    present: np.ndarray

    def entry(self, class_id: int) -> np.ndarray | None:
        return self.logits[class_id] if self.present[class_id] else None


@dataclass
class GlobalLogitTable:
    n_classes: int
    tables: dict[int, ClientTable] = field(default_factory=dict)

    def for_client(self, client_id: int) -> ClientTable:
        return self.tables[client_id]

    def response(self, round_: int, client_id: int) -> dict:
        """Server-to-client wire message."""
        tab = self.tables[client_id]
        rows = [
            {
                "class": c,
                "present": bool(tab.present[c]),
                "logits": [float(v) for v in tab.logits[c]],
            }
            for c in range(self.n_classes)
        ]
        return {"round": round_, "client_id": client_id, "table": rows}

    @staticmethod
    def client_table_from_response(msg: Mapping) -> ClientTable:
        rows = sorted(msg["table"], key=lambda r: r["class"])
        logits = np.array([r["logits"] for r in rows], dtype=np.float64)
        present = np.array([bool(r["present"]) for r in rows])
        return ClientTable(logits, present)


def argmax(logits) -> int:
    # numpy's argmax already breaks ties toward the lowest index
    return int(np.argmax(np.asarray(logits)))


def filter_correct(outputs: Iterable[tuple], client_id: int = 0) -> list[LogitRecord]:
    """Keep only (logits, label) pairs whose argmax equals the label."""
    kept = []
    for logits, label in outputs:
        vec = np.asarray(logits, dtype=np.float64)
        if argmax(vec) == int(label):
            kept.append(LogitRecord(client_id, vec.copy(), int(label)))
    return kept


def _kahan_sum(terms: Iterable[np.ndarray], size: int) -> np.ndarray:
    total = np.zeros(size)
    comp = np.zeros(size)
    for term in terms:
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def summarize(records: Sequence[LogitRecord], n_classes: int, client_id: int | None = None) -> list[ClassSummary]:
    if client_id is None:
        client_id = records[0].client_id if records else 0
    by_class: dict[int, list[np.ndarray]] = defaultdict(list)
    for rec in records:
        if rec.client_id != client_id:
            raise ProtocolError(f"summarize got records from clients {client_id} and {rec.client_id}")
        by_class[rec.label].append(rec.logits)
    out = []
    for c in range(n_classes):
        rows = by_class.get(c, [])
        if rows:
            mean = _kahan_sum(rows, n_classes) / len(rows)
        else:
            mean = np.zeros(n_classes)
        out.append(ClassSummary(client_id, c, mean, len(rows)))
    return out


def compute_beta(dims: Sequence[int]) -> np.ndarray:
    d = np.asarray(dims, dtype=np.float64)
    if d.ndim != 1 or np.any(d <= 0):
        raise ValueError(f"embedding dims must be positive, got {list(dims)}")
    # smaller over larger equals min(d_k/d_j, d_j/d_k) and is exactly symmetric
    return np.minimum(d[:, None], d[None, :]) / np.maximum(d[:, None], d[None, :])


def _metas_by_id(metas) -> dict[int, ClientMeta]:
    if isinstance(metas, Mapping):
        return dict(metas)
    return {m.client_id: m for m in metas}


def _aggregate(contrib: dict[int, list[tuple[int, float, np.ndarray]]], metas, n_classes) -> GlobalLogitTable:
    """Shared server step.

    ``contrib[j]`` lists (class, weight count, summed-logit vector) terms that
    client ``j`` contributes.
    """
    metas = _metas_by_id(metas)
    unknown = set(contrib) - set(metas)
    if unknown:
        raise ProtocolError(f"uploads from clients without metadata: {sorted(unknown)}")
    ids = sorted(metas)
    beta = compute_beta([metas[i].embed_dim for i in ids])
    index = {cid: i for i, cid in enumerate(ids)}

    counts = np.zeros((len(ids), n_classes))
    per_class_terms: dict[int, list[tuple[int, np.ndarray]]] = defaultdict(list)
    # fixed client order keeps the result independent of delivery order
    for j in sorted(contrib):
        for c, count, vec in contrib[j]:
            counts[index[j], c] += count
            if count:
                per_class_terms[c].append((index[j], vec))
    for j in contrib:
        declared = metas[j].per_class_counts
        if declared is not None and tuple(declared) != tuple(int(v) for v in counts[index[j]]):
            raise ProtocolError(f"client {j}: declared per-class counts disagree with its upload")

    table = GlobalLogitTable(n_classes)
    for k in ids:
        ki = index[k]
        logits = np.zeros((n_classes, n_classes))
        present = np.zeros(n_classes, dtype=bool)
        for c in range(n_classes):
            if counts[:, c].sum() == 0:
                continue
            numer = _kahan_sum((beta[ki, ji] * vec for ji, vec in per_class_terms[c]), n_classes)
            denom = 1.0 + float(np.dot(beta[ki], counts[:, c]))
            logits[c] = numer / denom
            present[c] = True
        table.tables[k] = ClientTable(logits, present)
    return table


def _infer_classes(vectors) -> int:
    sizes = {v.size for v in vectors}
    if len(sizes) > 1:
        raise ProtocolError(f"logit length mismatch across uploads: {sorted(sizes)}")
    return sizes.pop() if sizes else 0


def aggregate_full(
    all_records: Mapping[int, Sequence[LogitRecord]], metas, n_classes: int | None = None
) -> GlobalLogitTable:
    vectors = [r.logits for recs in all_records.values() for r in recs]
    inferred = _infer_classes(vectors)
    if n_classes is None:
        n_classes = inferred
    elif vectors and inferred != n_classes:
        raise ProtocolError(f"logits have length {inferred}, expected {n_classes}")
    contrib = {}
    for j, recs in all_records.items():
        terms = []
        for rec in recs:
            if rec.client_id != j:
                raise ProtocolError(f"record from client {rec.client_id} filed under client {j}")
            if not 0 <= rec.label < n_classes:
                raise ProtocolError(f"label {rec.label} out of range")
            terms.append((rec.label, 1, rec.logits))
        contrib[j] = terms
    return _aggregate(contrib, metas, n_classes)


def aggregate_summaries(
    all_summaries: Mapping[int, Sequence[ClassSummary]], metas, n_classes: int | None = None
) -> GlobalLogitTable:
    vectors = [s.mean_logit for sums in all_summaries.values() for s in sums]
    inferred = _infer_classes(vectors)
    if n_classes is None:
        n_classes = inferred
    elif vectors and inferred != n_classes:
        raise ProtocolError(f"logits have length {inferred}, expected {n_classes}")
    contrib = {}
    for j, sums in all_summaries.items():
        terms = []
        for s in sums:
            if s.client_id != j:
                raise ProtocolError(f"summary from client {s.client_id} filed under client {j}")
            if s.count < 0:
                raise ProtocolError(f"negative count in summary of client {j}")
            terms.append((s.class_id, s.count, s.count * s.mean_logit))
        contrib[j] = terms
    return _aggregate(contrib, metas, n_classes)


def apply_fallback(table: ClientTable, local_logit, class_id: int) -> np.ndarray:
    entry = table.entry(class_id)
    return np.asarray(local_logit, dtype=np.float64) if entry is None else entry


def aggregate_homogeneous_params(
    param_sets: Mapping[int, Mapping[str, np.ndarray]],
    dims: Mapping[int, int],
    group_keys: Mapping[int, Sequence] | None = None,
) -> dict[int, dict[str, np.ndarray]]:
    """Element-wise mean of parameters within groups of same-dimension clients.

    Clients are grouped by embedding dim, refined by ``group_keys`` when
    given (e.g. depth and prompt length for prompt sharing). Each client gets
    back its own group's mean.
    """
    groups: dict[tuple, list[int]] = defaultdict(list)
    for cid in sorted(param_sets):
        extra = tuple(group_keys[cid]) if group_keys is not None else ()
        groups[(dims[cid],) + extra].append(cid)

    result: dict[int, dict[str, np.ndarray]] = {}
    for key, members in groups.items():
        ref = param_sets[members[0]]
        for cid in members[1:]:
            other = param_sets[cid]
            if set(other) != set(ref) or any(other[n].shape != ref[n].shape for n in ref):
                raise ProtocolError(f"parameter shape mismatch inside group {key}: clients {members[0]} and {cid}")
        averaged = {
            name: _kahan_sum((np.asarray(param_sets[cid][name], dtype=np.float64).ravel() for cid in members),
                             ref[name].size).reshape(ref[name].shape) / len(members)
            for name in ref
        }
        for cid in members:
            result[cid] = {name: arr.copy() for name, arr in averaged.items()}
    return result


# ---------------------------------------------------------------- wire format


def encode_upload(round_: int, client_id: int, embed_dim: int, payload) -> bytes:
    """Serialise a list of LogitRecords or ClassSummaries as the JSON upload message."""
    items = list(payload)
    if items and isinstance(items[0], ClassSummary):
        mode = "summary"
        body = [
            {"class": s.class_id, "count": int(s.count), "mean_logit": [float(v) for v in s.mean_logit]}
            for s in items
        ]
    else:
        mode = "full"
        body = [{"label": r.label, "logits": [float(v) for v in r.logits]} for r in items]
    key = "summaries" if mode == "summary" else "records"
    msg = {"round": round_, "client_id": client_id, "embed_dim": embed_dim, "mode": mode, key: body}
    return json.dumps(msg).encode("utf-8")


def decode_upload(data: bytes | str) -> tuple[dict, list]:
    """Parse an upload message; returns (header fields, records or summaries)."""
    msg = json.loads(data)
    try:
        header = {k: msg[k] for k in ("round", "client_id", "embed_dim", "mode")}
        cid = int(msg["client_id"])
        if msg["mode"] == "summary":
            items = [
                ClassSummary(cid, int(s["class"]), np.array(s["mean_logit"], dtype=np.float64), int(s["count"]))
                for s in msg["summaries"]
            ]
        elif msg["mode"] == "full":
            items = [
                LogitRecord(cid, np.array(r["logits"], dtype=np.float64), int(r["label"]))
                for r in msg["records"]
            ]
        else:
            raise ProtocolError(f"unknown upload mode {msg['mode']!r}")
    except KeyError as exc:
        raise ProtocolError(f"upload message missing field {exc}") from None
    return header, items


def payload_nbytes(payload, n_classes: int) -> int:
    """Numeric size of an upload: 8 bytes per logit coordinate and per label/count."""
    return len(list(payload)) * (n_classes * FLOAT_BYTES + COUNT_BYTES)


def summary_nbytes(n_classes: int) -> int:
    return n_classes * (n_classes * FLOAT_BYTES + COUNT_BYTES)
