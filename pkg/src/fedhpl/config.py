"""Experiment configuration: TOML parsing, defaults and validation."""

from __future__ import annotations

import difflib
import sys
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import PartitionSpec, Scheme
from .distill import LossConfig
from .model import BackboneSpec, InsertionMode


class ConfigError(ValueError):
    pass


class Policy(str, Enum):
    LOCAL_ONLY = "local_only"
    FEDHPL = "fedhpl"
    FEDHPL_PLUS_PROMPTS = "fedhpl_plus_prompts"
    FEDHPL_PLUS_HEADS = "fedhpl_plus_heads"


class UploadMode(str, Enum):
    FULL = "full"
    SUMMARY = "summary"


@dataclass(frozen=True)
class ClientConfig:
    backbone: BackboneSpec
    mode: InsertionMode = InsertionMode.DEEP
    prompt_len: int = 3
    seed: int = 0
    pretext_steps: int = 0


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    n_classes: int = 10
    # synthetic blobs
    per_class: int = 60
    test_per_class: int = 0
    patch_count: int = 4
    patch_dim: int = 8
    noise: float = 1.0
    separation: float = 1.0
    seed: int = 0
    # csv
    path: str | None = None
    test_path: str | None = None

    @property
    def feature_dim(self) -> int:
        return self.patch_count * self.patch_dim


@dataclass(frozen=True)
class ExperimentConfig:
    clients: tuple[ClientConfig, ...]
    dataset: DatasetConfig
    partition: PartitionSpec
    global_rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    upload_mode: UploadMode = UploadMode.SUMMARY
    policy: Policy = Policy.FEDHPL
    eval_split_fraction: float = 0.2
    master_seed: int = 0
    workers: int = 1

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# key -> (type, default); a default of ... marks a required key
_TOP = {
    "global_rounds": (int, 10),
    "local_epochs": (int, 1),
    "batch_size": (int, 16),
    "lr": (float, 0.01),
    "momentum": (float, 0.9),
    "weight_decay": (float, 1e-4),
    "upload_mode": (str, "summary"),
    "policy": (str, "fedhpl"),
    "eval_split_fraction": (float, 0.2),
    "master_seed": (int, 0),
    "workers": (int, 1),
    "loss": (dict, None),
    "partition": (dict, None),
    "dataset": (dict, ...),
    "clients": (list, ...),
}
_LOSS = {"gamma": (float, 1.0), "temperature": (float, 4.5)}
_PARTITION = {
    "scheme": (str, "iid"),
    "alpha": (float, 0.5),
    "min_fraction": (float, 0.01),
    "seed": (int, None),
}
_DATASET = {
    "kind": (str, "synthetic"),
    "n_classes": (int, 10),
    "per_class": (int, 60),
    "test_per_class": (int, 0),
    "patch_count": (int, 4),
    "patch_dim": (int, 8),
    "noise": (float, 1.0),
    "separation": (float, 1.0),
    "seed": (int, 0),
    "path": (str, None),
    "test_path": (str, None),
}
_CLIENT = {
    "num_layers": (int, ...),
    "embed_dim": (int, ...),
    "num_heads": (int, 1),
    "mlp_ratio": (float, 4.0),
    "mode": (str, "deep"),
    "prompt_len": (int, 3),
    "seed": (int, None),
    "pretext_steps": (int, 0),
}


def _section(raw: Any, schema: dict, where: str) -> dict:
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where or 'config'}: expected a table")
    out = {}
    for key in raw:
        if key not in schema:
            hint = difflib.get_close_matches(key, list(schema), n=1)
            suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"{where}{key}: unknown key{suggestion}")
    for key, (typ, default) in schema.items():
        path = where + key
        if key not in raw:
            if default is ...:
                raise ConfigError(f"{path}: required key missing")
            out[key] = default
            continue
        value = raw[key]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if (typ is int and isinstance(value, bool)) or not isinstance(value, typ):
            raise ConfigError(f"{path}: expected {typ.__name__}, got {type(value).__name__}")
        out[key] = value
    return out


def _check(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _enum(enum, value, path):
    try:
        return enum(value)
    except ValueError:
        choices = ", ".join(e.value for e in enum)
        raise ConfigError(f"{path}: {value!r} is not one of {choices}") from None


def config_from_dict(raw: Mapping, overrides: Mapping | None = None) -> ExperimentConfig:
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    top = _section(raw, _TOP, "")
    _check(top["global_rounds"] >= 1, "global_rounds", "T must be >= 1")
    _check(top["local_epochs"] >= 1, "local_epochs", "T_c (local epochs) must be >= 1")
    _check(top["batch_size"] >= 1, "batch_size", "bs must be >= 1")
    _check(top["lr"] >= 0, "lr", "must be >= 0")
    _check(0 <= top["momentum"] < 1, "momentum", "must lie in [0, 1)")
    _check(top["weight_decay"] >= 0, "weight_decay", "must be >= 0")
    _check(0 <= top["eval_split_fraction"] < 1, "eval_split_fraction", "must lie in [0, 1)")
    _check(top["workers"] >= 1, "workers", "must be >= 1")
    _check(top["master_seed"] >= 0, "master_seed", "must be >= 0")

    loss_raw = _section(top["loss"] or {}, _LOSS, "loss.")
    _check(loss_raw["gamma"] >= 0, "loss.gamma", "must be >= 0")
    _check(loss_raw["temperature"] > 0, "loss.temperature", "must be > 0")

    ds_raw = _section(top["dataset"], _DATASET, "dataset.")
    _check(ds_raw["kind"] in ("synthetic", "csv"), "dataset.kind", "must be 'synthetic' or 'csv'")
    _check(ds_raw["n_classes"] >= 1, "dataset.n_classes", "must be >= 1")
    if ds_raw["kind"] == "csv":
        _check(ds_raw["path"] is not None, "dataset.path", "required for csv datasets")
    else:
        _check(ds_raw["per_class"] >= 1, "dataset.per_class", "must be >= 1")
        _check(ds_raw["test_per_class"] >= 0, "dataset.test_per_class", "must be >= 0")
        _check(ds_raw["noise"] >= 0, "dataset.noise", "must be >= 0")
    _check(ds_raw["patch_count"] >= 1, "dataset.patch_count", "must be >= 1")
    _check(ds_raw["patch_dim"] >= 1, "dataset.patch_dim", "must be >= 1")
    dataset = DatasetConfig(**ds_raw)

    clients_raw = top["clients"]
    _check(len(clients_raw) >= 1, "clients", "at least one client required")
    clients = []
    for i, entry in enumerate(clients_raw):
        where = f"clients[{i}]."
        c = _section(entry, _CLIENT, where)
        try:
            spec = BackboneSpec(
                num_layers=c["num_layers"], embed_dim=c["embed_dim"], num_heads=c["num_heads"],
                patch_count=dataset.patch_count, input_dim=dataset.patch_dim, mlp_ratio=c["mlp_ratio"],
            )
        except ValueError as exc:
            raise ConfigError(f"{where[:-1]}: {exc}") from None
        _check(c["prompt_len"] >= 1, where + "prompt_len", "must be >= 1")
        _check(c["pretext_steps"] >= 0, where + "pretext_steps", "must be >= 0")
        clients.append(ClientConfig(
            backbone=spec,
            mode=_enum(InsertionMode, c["mode"], where + "mode"),
            prompt_len=c["prompt_len"],
            seed=c["seed"] if c["seed"] is not None else top["master_seed"] * 1000 + i,
            pretext_steps=c["pretext_steps"],
        ))

    part_raw = _section(top["partition"] or {}, _PARTITION, "partition.")
    scheme = _enum(Scheme, part_raw["scheme"], "partition.scheme")
    try:
        partition = PartitionSpec(
            scheme=scheme,
            num_clients=len(clients),
            alpha=part_raw["alpha"],
            min_fraction=part_raw["min_fraction"],
            seed=part_raw["seed"] if part_raw["seed"] is not None else top["master_seed"],
        )
    except ValueError as exc:
        raise ConfigError(f"partition: {exc}") from None

    return ExperimentConfig(
        clients=tuple(clients),
        dataset=dataset,
        partition=partition,
        global_rounds=top["global_rounds"],
        local_epochs=top["local_epochs"],
        batch_size=top["batch_size"],
        lr=top["lr"],
        momentum=top["momentum"],
        weight_decay=top["weight_decay"],
        loss=LossConfig(**loss_raw),
        upload_mode=_enum(UploadMode, top["upload_mode"], "upload_mode"),
        policy=_enum(Policy, top["policy"], "policy"),
        eval_split_fraction=top["eval_split_fraction"],
        master_seed=top["master_seed"],
        workers=top["workers"],
    )


def parse_config(path, overrides: Mapping | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, overrides)


def snapshot_dict(cfg: ExperimentConfig) -> dict:
    """Resolved config in the same shape ``config_from_dict`` accepts."""
    d = cfg.to_dict()
    clients = []
    for c in d.pop("clients"):
        bb = c.pop("backbone")
        clients.append({
            "num_layers": bb["num_layers"], "embed_dim": bb["embed_dim"],
            "num_heads": bb["num_heads"], "mlp_ratio": bb["mlp_ratio"], **c,
        })
    part = d.pop("partition")
    part.pop("num_clients")
    ds = {k: v for k, v in d.pop("dataset").items() if v is not None}
    return {**d, "clients": clients, "partition": part, "dataset": ds}
