"""Writing and reading experiment outputs."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Sequence

from .config import ExperimentConfig, snapshot_dict
from .runner import RoundMetrics

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
CONFIG_FILE = "config.json"

SUMMARY_COLUMNS = [
    "round", "client", "test_accuracy", "global_test_accuracy",
    "train_loss", "ce_loss", "kd_loss", "upload_bytes", "uploaded_logits",
]


def _atomic_write(path: Path, text: str) -> None:
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def metrics_jsonl(metrics: Sequence[RoundMetrics]) -> str:
    return "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in metrics)


def emit_results(metrics: Sequence[RoundMetrics], out_dir, cfg: ExperimentConfig | None = None) -> None:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc

    _atomic_write(out / METRICS_FILE, metrics_jsonl(metrics))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for m in metrics:
        for c in m.clients:
            writer.writerow([
                m.round, c.client_id, c.test_accuracy,
                "" if c.global_test_accuracy is None else c.global_test_accuracy,
                c.train_loss, c.ce_loss, c.kd_loss, c.upload_bytes, c.uploaded_logits,
            ])
    _atomic_write(out / SUMMARY_FILE, buf.getvalue())

    if cfg is not None:
        _atomic_write(out / CONFIG_FILE, json.dumps(snapshot_dict(cfg), indent=2, sort_keys=True) + "\n")


def read_metrics(out_dir) -> list[RoundMetrics]:
    path = Path(out_dir) / METRICS_FILE
    with path.open() as fh:
        return [RoundMetrics.from_dict(json.loads(line)) for line in fh if line.strip()]


def accuracy_table(metrics: Sequence[RoundMetrics]) -> str:
    lines = [f"{'round':>5}  {'lowest':>8}  {'average':>8}  {'highest':>8}"]
    for m in metrics:
        lines.append(f"{m.round:>5}  {100 * m.lowest:8.2f}  {100 * m.average:8.2f}  {100 * m.highest:8.2f}")
    if metrics:
        last = metrics[-1]
        per_client = "  ".join(f"c{c.client_id}={100 * c.test_accuracy:.2f}" for c in last.clients)
        lines.append(f"final per-client accuracy (%): {per_client}")
    return "\n".join(lines)
