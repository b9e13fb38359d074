"""Cross-entropy, tempered KL distillation and the combined client objective.

The plain-numpy functions are the reference definitions. ``objective_terms``
and ``total_objective`` build the same quantities on the autodiff tape for a
batch of logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad

if TYPE_CHECKING:
    from .federation import ClientTable


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    temperature: float = 4.5

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def _vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{what} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains non-finite values")
    return v


def _log_softmax(v: np.ndarray, temperature: float) -> np.ndarray:
    z = v / temperature
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def softmax_temp(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    v = _vector(logits, "logits")
    z = (v / temperature) - (v / temperature).max()
    e = np.exp(z)
    return e / e.sum()


def ce_loss(logits, label: int) -> float:
    v = _vector(logits, "logits")
    if not 0 <= label < v.size:
        raise ValueError(f"label {label} out of range for {v.size} classes")
    return float(-_log_softmax(v, 1.0)[label])


def _pair(global_logit, local_logit, temperature):
    g = _vector(global_logit, "global logit")
    p = _vector(local_logit, "local logit")
    if g.shape != p.shape:
        raise ValueError(f"logit length mismatch: {g.size} vs {p.size}")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return g, p


def kd_loss(global_logit, local_logit, temperature: float = 4.5) -> float:
    """KL(softmax(global/T) || softmax(local/T))."""
    g, p = _pair(global_logit, local_logit, temperature)
    log_q = _log_softmax(g, temperature)
    log_p = _log_softmax(p, temperature)
    q = np.exp(log_q)
    return float(np.sum(q * (log_q - log_p)))


def kd_decompose(global_logit, local_logit, temperature: float = 4.5) -> tuple[float, float]:
    """Split the KD loss into (cross-entropy, entropy of the tempered global)."""
    g, p = _pair(global_logit, local_logit, temperature)
    log_q = _log_softmax(g, temperature)
    q = np.exp(log_q)
    cross = float(-np.sum(q * _log_softmax(p, temperature)))
    entropy = float(-np.sum(q * log_q))
    return cross, entropy


# ---------------------------------------------------------------- batched, on tape


def kd_targets(logits: np.ndarray, labels: np.ndarray, table: ClientTable) -> np.ndarray:
    """Per-sample distillation targets, falling back to the local logit for absent classes."""
    targets = table.logits[labels].copy()
    missing = ~table.present[labels]
    targets[missing] = logits[missing]
    return targets


def objective_terms(logits: ad.Tensor, labels, table: ClientTable | None, cfg: LossConfig):
    """Return (total, ce_sum, kd_sum) tensors for a batch of raw logits.

    ``table`` is the client's view of the published global logits, or None
    before the first aggregation, in which case the KD term is inactive.
    """
    labels = np.asarray(labels, dtype=np.int64)
    bs, n_c = logits.shape
    if labels.shape != (bs,):
        raise ValueError(f"expected {bs} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_c):
        raise ValueError(f"labels out of range for {n_c} classes")
    onehot = np.zeros((bs, n_c))
    onehot[np.arange(bs), labels] = 1.0

    ce_sum = -ad.sum_(ad.log_softmax(logits, axis=-1) * onehot)
    if table is None or cfg.gamma == 0:
        return ce_sum / bs, ce_sum, None

    if table.logits.shape[1] != n_c:
        raise ValueError(f"global table has {table.logits.shape[1]} classes, logits have {n_c}")
    targets = kd_targets(logits.values, labels, table)
    t = cfg.temperature
    log_q = targets / t
    log_q = log_q - log_q.max(axis=1, keepdims=True)
    log_q = log_q - np.log(np.exp(log_q).sum(axis=1, keepdims=True))
    q = np.exp(log_q)
    neg_entropy = float(np.sum(q * log_q))
    kd_sum = neg_entropy - ad.sum_(ad.log_softmax(logits / t, axis=-1) * q)
    total = (ce_sum + kd_sum * cfg.gamma) / bs
    return total, ce_sum, kd_sum


def total_objective(logits: ad.Tensor, labels, table: ClientTable | None, cfg: LossConfig) -> ad.Tensor:
    return objective_terms(logits, labels, table, cfg)[0]
