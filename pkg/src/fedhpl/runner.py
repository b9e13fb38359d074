"""Round loop: local prompt tuning, correct-logit upload, server aggregation."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import federation as fed
from .config import ExperimentConfig, Policy, UploadMode
from .data import Dataset, gen_synthetic, load_csv, partition_indices
from .distill import objective_terms
from .model import ClientModel, InsertionMode, forward, init_client_model, predict_logits, sgd_step

log = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    def __init__(self, message: str, round_: int, client_id: int | None, partial: list[RoundMetrics]):
        super().__init__(message)
        self.round = round_
        self.client_id = client_id
        self.partial = partial


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Independent stream for (client, round, epoch, purpose)-style keys."""
    words = [master_seed]
    for p in parts:
        words.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return np.random.default_rng(words)


# ---------------------------------------------------------------- metrics


@dataclass
class ClientRoundMetrics:
    client_id: int
    train_loss: float
    ce_loss: float
    kd_loss: float
    test_accuracy: float
    per_class_accuracy: list[float | None]
    upload_bytes: int
    uploaded_logits: int
    global_test_accuracy: float | None = None


@dataclass
class RoundMetrics:
    round: int
    clients: list[ClientRoundMetrics]
    lowest: float = field(init=False)
    average: float = field(init=False)
    highest: float = field(init=False)

    def __post_init__(self):
        accs = [c.test_accuracy for c in self.clients]
        self.lowest = min(accs)
        self.highest = max(accs)
        self.average = float(np.mean(accs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RoundMetrics:
        return cls(round=d["round"], clients=[ClientRoundMetrics(**c) for c in d["clients"]])


def evaluate(model: ClientModel, ds: Dataset) -> tuple[float, list[float | None]]:
    """Overall accuracy and per-class accuracy (None for classes absent from ``ds``)."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(predict_logits(model, ds.features), axis=1)
    hit = pred == ds.labels
    per_class: list[float | None] = []
    for c in range(ds.n_classes):
        mask = ds.labels == c
        per_class.append(float(hit[mask].mean()) if mask.any() else None)
    return float(hit.mean()), per_class


# ---------------------------------------------------------------- clients


@dataclass
class ClientState:
    client_id: int
    model: ClientModel
    train: Dataset
    heldout: Dataset
    initial_hash: str


@dataclass
class LocalResult:
    train_loss: float
    ce_loss: float
    kd_loss: float
    records: list[fed.LogitRecord]


def local_train(
    state: ClientState, table: fed.ClientTable | None, cfg: ExperimentConfig, round_: int
) -> LocalResult:
    """Run the configured local epochs, then collect the correct predictions."""
    model, ds = state.model, state.train
    ce_total = kd_total = 0.0
    seen = 0
    for epoch in range(cfg.local_epochs):
        order = derive_rng(cfg.master_seed, state.client_id, round_, epoch, "batch-order").permutation(len(ds))
        for start in range(0, len(ds), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with ad.Tape():
                logits = forward(model, ds.features[idx])
                total, ce_sum, kd_sum = objective_terms(logits, ds.labels[idx], table, cfg.loss)
            ad.backward_grad(total)
            sgd_step(model, cfg.lr, cfg.momentum, cfg.weight_decay)
            ce_total += ce_sum.item()
            kd_total += 0.0 if kd_sum is None else kd_sum.item()
            seen += len(idx)
    records: list[fed.LogitRecord] = []
    if cfg.policy is not Policy.LOCAL_ONLY:
        logits = predict_logits(model, ds.features)
        records = fed.filter_correct(zip(logits, ds.labels), state.client_id)
    ce = ce_total / seen
    kd = kd_total / seen
    return LocalResult(ce + cfg.loss.gamma * kd, ce, kd, records)


# ---------------------------------------------------------------- simulation


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    dc = cfg.dataset
    if dc.kind == "csv":
        train = load_csv(dc.path, dc.n_classes)
        test = load_csv(dc.test_path, dc.n_classes) if dc.test_path else None
        if train.feature_dim != dc.feature_dim:
            raise ValueError(
                f"{dc.path}: {train.feature_dim} features, expected "
                f"{dc.patch_count} x {dc.patch_dim}"
            )
        return train, test
    layout = (dc.patch_count, dc.patch_dim)
    train = gen_synthetic(dc.n_classes, dc.per_class, dc.feature_dim, layout, dc.noise, dc.seed,
                          separation=dc.separation)
    test = None
    if dc.test_per_class:
        test = gen_synthetic(dc.n_classes, dc.test_per_class, dc.feature_dim, layout, dc.noise, dc.seed,
                             separation=dc.separation, sample_seed=dc.seed + 1)
    return train, test


class Simulation:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        pool, self.global_test = load_data(cfg)
        self.shards = partition_indices(pool, cfg.partition)
        self.clients: list[ClientState] = []
        for cid, (cc, shard) in enumerate(zip(cfg.clients, self.shards)):
            perm = derive_rng(cfg.master_seed, cid, "eval-split").permutation(shard)
            n_eval = int(round(cfg.eval_split_fraction * len(perm)))
            n_eval = min(n_eval, len(perm) - 1)
            heldout, train = pool.subset(perm[:n_eval]), pool.subset(perm[n_eval:])
            if len(heldout) == 0 and self.global_test is None:
                raise ValueError(f"client {cid} has no held-out samples and no global test set exists")
            model = init_client_model(cc.backbone, cfg.dataset.n_classes, cc.mode, cc.prompt_len,
                                      cc.seed, cc.pretext_steps)
            self.clients.append(ClientState(cid, model, train, heldout, model.backbone_hash()))
        self.table: fed.GlobalLogitTable | None = None
        self.history: list[RoundMetrics] = []

    # -- one client, one round (runs on a worker)
    def _client_round(self, state: ClientState, round_: int):
        cfg = self.cfg
        table = None
        if self.table is not None:
            # server response travels as a JSON wire message
            msg = self.table.response(round_ - 1, state.client_id)
            table = fed.GlobalLogitTable.client_table_from_response(msg)
        result = local_train(state, table, cfg, round_)
        upload = None
        if cfg.policy is not Policy.LOCAL_ONLY:
            payload = result.records
            if cfg.upload_mode is UploadMode.SUMMARY:
                payload = fed.summarize(result.records, cfg.dataset.n_classes, state.client_id)
            upload = fed.encode_upload(round_, state.client_id, state.model.embed_dim, payload)
        return result, upload

    def _share_params(self) -> dict[int, int]:
        """+P / +H: average same-dimension prompts or heads; returns bytes per client."""
        cfg = self.cfg
        models = {s.client_id: s.model for s in self.clients}
        dims = {cid: m.embed_dim for cid, m in models.items()}
        if cfg.policy is Policy.FEDHPL_PLUS_PROMPTS:
            states = {cid: m.prompt_state() for cid, m in models.items()}
            keys = {
                cid: (m.mode.value, m.spec.num_layers if m.mode is InsertionMode.DEEP else 0, m.prompt_len)
                for cid, m in models.items()
            }
        else:
            states = {cid: m.head_state() for cid, m in models.items()}
            keys = None
        averaged = fed.aggregate_homogeneous_params(states, dims, keys)
        for cid, m in models.items():
            m.load_state(averaged[cid])
        return {cid: sum(a.size for a in st.values()) * fed.FLOAT_BYTES for cid, st in states.items()}

    def step(self, round_: int) -> RoundMetrics:
        cfg = self.cfg
        results: dict[int, tuple] = {}
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                futures = {s.client_id: pool.submit(self._client_round, s, round_) for s in self.clients}
                for cid, fut in futures.items():
                    results[cid] = self._collect(fut.result, round_, cid)
        else:
            for s in self.clients:
                results[s.client_id] = self._collect(lambda s=s: self._client_round(s, round_), round_, s.client_id)

        # barrier: every payload is in before the server aggregates
        upload_bytes = {cid: 0 for cid in results}
        uploaded = {cid: 0 for cid in results}
        if cfg.policy is not Policy.LOCAL_ONLY:
            payloads, metas = {}, {}
            for cid, (res, wire) in results.items():
                header, items = fed.decode_upload(wire)
                payloads[cid] = items
                metas[cid] = fed.ClientMeta(cid, int(header["embed_dim"]))
                upload_bytes[cid] = fed.payload_nbytes(items, cfg.dataset.n_classes)
                uploaded[cid] = len(res.records)
            try:
                if cfg.upload_mode is UploadMode.SUMMARY:
                    self.table = fed.aggregate_summaries(payloads, metas, cfg.dataset.n_classes)
                else:
                    self.table = fed.aggregate_full(payloads, metas, cfg.dataset.n_classes)
            except Exception as exc:
                raise ExperimentError(f"round {round_}: server aggregation failed: {exc}",
                                      round_, None, list(self.history)) from exc

        per_client = []
        for s in self.clients:
            res = results[s.client_id][0]
            src = s.heldout if len(s.heldout) else self.global_test
            acc, per_class = evaluate(s.model, src)
            gacc = evaluate(s.model, self.global_test)[0] if self.global_test is not None else None
            per_client.append(ClientRoundMetrics(
                client_id=s.client_id,
                train_loss=res.train_loss,
                ce_loss=res.ce_loss,
                kd_loss=res.kd_loss,
                test_accuracy=acc,
                per_class_accuracy=per_class,
                upload_bytes=upload_bytes[s.client_id],
                uploaded_logits=uploaded[s.client_id],
                global_test_accuracy=gacc,
            ))

        if cfg.policy in (Policy.FEDHPL_PLUS_PROMPTS, Policy.FEDHPL_PLUS_HEADS):
            extra = self._share_params()
            for m in per_client:
                m.upload_bytes += extra[m.client_id]

        metrics = RoundMetrics(round_, per_client)
        self.history.append(metrics)
        log.info("round %d: lowest %.4f average %.4f highest %.4f",
                 round_, metrics.lowest, metrics.average, metrics.highest)
        return metrics

    def _collect(self, call: Callable, round_: int, cid: int):
        try:
            return call()
        except Exception as exc:
            raise ExperimentError(f"round {round_}, client {cid}: {exc}", round_, cid,
                                  list(self.history)) from exc

    def run(self, on_round: Callable[[RoundMetrics], None] | None = None) -> list[RoundMetrics]:
        for t in range(1, self.cfg.global_rounds + 1):
            metrics = self.step(t)
            if on_round is not None:
                on_round(metrics)
        return self.history


def run_experiment(cfg: ExperimentConfig, on_round=None) -> list[RoundMetrics]:
    return Simulation(cfg).run(on_round)
