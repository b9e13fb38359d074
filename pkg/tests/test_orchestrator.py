import csv
import json
import math

import numpy as np
import pytest

from fedhpl import runner
from fedhpl.cli import main
from fedhpl.config import ConfigError, Policy, UploadMode, config_from_dict, parse_config, snapshot_dict
from fedhpl.data import Dataset, gen_synthetic
from fedhpl.federation import summary_nbytes
from fedhpl.model import BackboneSpec, init_client_model
from fedhpl.results import CONFIG_FILE, METRICS_FILE, SUMMARY_FILE, emit_results, metrics_jsonl, read_metrics
from fedhpl.runner import ExperimentError, RoundMetrics, Simulation, evaluate, run_experiment

from conftest import small_raw

MINIMAL_TOML = """
[dataset]
n_classes = 4
per_class = 10
patch_count = 2
patch_dim = 3

[[clients]]
num_layers = 1
embed_dim = 8
"""


def _write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------- config


def test_minimal_file_gets_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, MINIMAL_TOML))
    assert cfg.lr == 0.01 and cfg.batch_size == 16
    assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4
    assert cfg.loss.gamma == 1.0 and cfg.loss.temperature == 4.5
    assert cfg.upload_mode is UploadMode.SUMMARY and cfg.policy is Policy.FEDHPL
    assert cfg.clients[0].backbone.patch_count == 2


def test_local_epochs_zero_names_tc(tmp_path):
    with pytest.raises(ConfigError, match="T_c"):
        parse_config(_write(tmp_path, "local_epochs = 0\n" + MINIMAL_TOML))


def test_typo_gets_suggestion(tmp_path):
    with pytest.raises(ConfigError, match="did you mean 'gamma'"):
        parse_config(_write(tmp_path, "[loss]\ngama = 2.0\n" + MINIMAL_TOML))


@pytest.mark.parametrize("patch, needle", [
    ({"batch_size": "16"}, "batch_size: expected int"),
    ({"clients": [{"num_layers": 1, "embed_dim": 10, "num_heads": 3}]}, "clients\\[0\\]"),
    ({"clients": [{"embed_dim": 8}]}, "clients\\[0\\].num_layers: required"),
    ({"partition": {"scheme": "weird"}}, "partition.scheme"),
    ({"partition": {"min_fraction": 0.5}}, "partition"),
])
def test_validation_errors_carry_key_path(patch, needle):
    with pytest.raises(ConfigError, match=needle):
        config_from_dict(small_raw(**patch))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="no such file"):
        parse_config(tmp_path / "absent.toml")


def test_overrides_and_snapshot_round_trip():
    cfg = config_from_dict(small_raw(), {"policy": "local_only", "global_rounds": 5, "master_seed": None})
    assert cfg.policy is Policy.LOCAL_ONLY and cfg.global_rounds == 5
    again = config_from_dict(json.loads(json.dumps(snapshot_dict(cfg))))
    assert again == cfg


# ---------------------------------------------------------------- evaluate


def test_evaluate_perfect_stub(monkeypatch):
    ds = gen_synthetic(4, 5, 6, (2, 3), 1.0, seed=0)
    lookup = {row.tobytes(): y for row, y in zip(ds.features, ds.labels)}

    def oracle(model, feats, batch_size=256):
        return np.eye(4)[[lookup[r.tobytes()] for r in feats]]

    monkeypatch.setattr(runner, "predict_logits", oracle)
    acc, per_class = evaluate(None, ds)
    assert acc == 1.0 and per_class == [1.0] * 4


def test_evaluate_untrained_zero_head():
    ds = gen_synthetic(10, 20, 8, (2, 4), 1.0, seed=1)
    spec = BackboneSpec(num_layers=1, embed_dim=8, num_heads=2, patch_count=2, input_dim=4)
    acc, per_class = evaluate(init_client_model(spec, 10, seed=0), ds)
    # all logits tie at zero, so every prediction is class 0
    assert acc == pytest.approx(np.mean(ds.labels == 0), abs=0)
    assert abs(acc - 0.1) <= 0.05
    assert per_class[0] == 1.0 and all(v == 0.0 for v in per_class[1:])


def test_per_class_accuracy_weighted_average_is_overall():
    ds = gen_synthetic(5, 12, 8, (2, 4), 2.0, seed=2)
    ds = ds.subset(np.flatnonzero(ds.labels != 3))  # one absent class
    spec = BackboneSpec(num_layers=1, embed_dim=8, num_heads=2, patch_count=2, input_dim=4)
    model = init_client_model(spec, 5, seed=0)
    model.head_weight.values[...] = np.random.default_rng(0).normal(size=model.head_weight.shape)
    acc, per_class = evaluate(model, ds)
    assert per_class[3] is None
    counts = np.bincount(ds.labels, minlength=5)
    weighted = sum(counts[c] * per_class[c] for c in range(5) if per_class[c] is not None) / len(ds)
    assert abs(weighted - acc) <= 1e-12


def test_evaluate_rejects_empty():
    spec = BackboneSpec(num_layers=1, embed_dim=8, num_heads=2, patch_count=2, input_dim=4)
    with pytest.raises(ValueError):
        evaluate(init_client_model(spec, 3), Dataset.empty(3, 8))


# ---------------------------------------------------------------- running


def test_round_metric_aggregates():
    metrics = run_experiment(config_from_dict(small_raw(global_rounds=1)))
    m = metrics[0]
    assert m.lowest <= m.average <= m.highest
    assert m.average == pytest.approx(np.mean([c.test_accuracy for c in m.clients]))


def test_local_only_uploads_nothing(small_cfg):
    for m in run_experiment(small_cfg(policy="local_only", global_rounds=3)):
        assert all(c.upload_bytes == 0 and c.uploaded_logits == 0 for c in m.clients)
        assert all(c.kd_loss == 0.0 for c in m.clients)


def test_runs_are_bit_identical(small_cfg):
    a = metrics_jsonl(run_experiment(small_cfg()))
    b = metrics_jsonl(run_experiment(small_cfg()))
    assert a == b


def test_seed_changes_the_run(small_cfg):
    a = metrics_jsonl(run_experiment(small_cfg(master_seed=0)))
    b = metrics_jsonl(run_experiment(small_cfg(master_seed=1)))
    assert a != b


def test_round_one_equals_gamma_zero(small_cfg):
    with_kd = run_experiment(small_cfg(global_rounds=2))
    no_kd = run_experiment(small_cfg(global_rounds=2, loss={"gamma": 0.0}))
    assert json.dumps(with_kd[0].to_dict()) == json.dumps(no_kd[0].to_dict())
    assert with_kd[1].clients[0].kd_loss > 0
    assert no_kd[1].clients[0].train_loss == no_kd[1].clients[0].ce_loss


def test_single_client_fedhpl_tracks_local_only(small_cfg):
    one = {"clients": [{"num_layers": 1, "embed_dim": 8, "num_heads": 2}], "global_rounds": 3}
    fed = run_experiment(small_cfg(**one))
    loc = run_experiment(small_cfg(policy="local_only", **one))
    a, b = fed[0].clients[0], loc[0].clients[0]
    assert (a.train_loss, a.test_accuracy) == (b.train_loss, b.test_accuracy)
    assert a.uploaded_logits > 0
    for m in fed:
        c = m.clients[0]
        assert all(math.isfinite(v) for v in (c.train_loss, c.ce_loss, c.kd_loss))
    # from round 2 on, only the self-distillation term separates the two
    assert fed[1].clients[0].kd_loss > 0
    assert fed[1].clients[0].ce_loss != loc[1].clients[0].ce_loss


def test_backbones_stay_frozen(small_cfg):
    sim = Simulation(small_cfg(global_rounds=2, policy="fedhpl_plus_prompts"))
    sim.run()
    for s in sim.clients:
        assert s.model.backbone_hash() == s.initial_hash


def test_summary_bytes_are_constant(small_cfg):
    for m in run_experiment(small_cfg(global_rounds=3)):
        assert all(c.upload_bytes == summary_nbytes(6) for c in m.clients)


def test_full_bytes_follow_correct_count(small_cfg):
    for m in run_experiment(small_cfg(upload_mode="full")):
        for c in m.clients:
            assert c.upload_bytes == c.uploaded_logits * (6 * 8 + 8)


def test_parallel_matches_sequential(small_cfg):
    seq = metrics_jsonl(run_experiment(small_cfg(workers=1)))
    par = metrics_jsonl(run_experiment(small_cfg(workers=3)))
    assert seq == par


@pytest.mark.parametrize("policy", ["fedhpl_plus_prompts", "fedhpl_plus_heads"])
def test_parameter_sharing_policies(small_cfg, policy):
    sim = Simulation(small_cfg(policy=policy, global_rounds=1))
    metrics = sim.run()
    a, b, c = (s.model for s in sim.clients)
    # clients 0 and 2 share d=8 and one layer; client 1 is alone at d=16
    if policy == "fedhpl_plus_heads":
        np.testing.assert_array_equal(a.head_weight.values, c.head_weight.values)
    else:
        # prompt lengths differ (3 vs 2), so prompts stay private
        assert a.prompts[0].shape != c.prompts[0].shape
    extra = metrics[0].clients[1].upload_bytes - summary_nbytes(6)
    assert extra > 0


def test_prompt_sharing_averages_matching_clients(small_cfg):
    clients = [{"num_layers": 1, "embed_dim": 8, "num_heads": 2, "seed": s} for s in (1, 2)]
    sim = Simulation(small_cfg(policy="fedhpl_plus_prompts", global_rounds=1, clients=clients))
    sim.run()
    np.testing.assert_array_equal(sim.clients[0].model.prompts[0].values, sim.clients[1].model.prompts[0].values)
    assert not np.array_equal(sim.clients[0].model.head_weight.values, sim.clients[1].model.head_weight.values)


def test_failure_carries_round_client_and_partial(small_cfg, monkeypatch):
    sim = Simulation(small_cfg(global_rounds=3))
    original = runner.local_train

    def flaky(state, table, cfg, round_):
        if round_ == 2 and state.client_id == 1:
            raise FloatingPointError("diverged")
        return original(state, table, cfg, round_)

    monkeypatch.setattr(runner, "local_train", flaky)
    with pytest.raises(ExperimentError) as info:
        sim.run()
    err = info.value
    assert (err.round, err.client_id) == (2, 1)
    assert "client 1" in str(err) and len(err.partial) == 1


# ---------------------------------------------------------------- results


def test_emit_results(tmp_path, small_cfg):
    cfg = small_cfg(clients=small_raw()["clients"][:2])
    metrics = run_experiment(cfg)
    emit_results(metrics, tmp_path, cfg)
    lines = (tmp_path / METRICS_FILE).read_text().splitlines()
    assert len(lines) == 2
    with open(tmp_path / SUMMARY_FILE) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {"round", "client", "test_accuracy", "upload_bytes"} <= set(rows[0])
    assert json.loads((tmp_path / CONFIG_FILE).read_text())["global_rounds"] == 2

    back = read_metrics(tmp_path)
    assert [m.to_dict() for m in back] == [m.to_dict() for m in metrics]
    assert RoundMetrics.from_dict(json.loads(lines[0])) == metrics[0]

    emit_results(metrics[:1], tmp_path, cfg)
    assert len((tmp_path / METRICS_FILE).read_text().splitlines()) == 1
    assert not [p for p in tmp_path.iterdir() if p.name.endswith(".tmp")]


def test_emit_results_reports_path(tmp_path, small_cfg):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_results([], blocker / "out")


# ---------------------------------------------------------------- CLI


def _toml_config(tmp_path, **over):
    raw = small_raw(**over)
    lines = [f"{k} = {json.dumps(v)}" for k, v in raw.items() if not isinstance(v, (dict, list))]
    for section in ("partition", "dataset"):
        lines.append(f"[{section}]")
        lines += [f"{k} = {json.dumps(v)}" for k, v in raw[section].items()]
    for c in raw["clients"]:
        lines.append("[[clients]]")
        lines += [f"{k} = {json.dumps(v)}" for k, v in c.items()]
    return _write(tmp_path, "\n".join(lines) + "\n")


def test_cli_run_and_inspect(tmp_path, capsys):
    path = _toml_config(tmp_path)
    out = tmp_path / "res"
    assert main(["run", "--config", str(path), "--out", str(out), "--rounds", "1", "--policy", "local_only"]) == 0
    assert len(read_metrics(out)) == 1
    assert json.loads((out / CONFIG_FILE).read_text())["policy"] == "local_only"
    capsys.readouterr()
    assert main(["inspect", "--results", str(out)]) == 0
    text = capsys.readouterr().out
    assert "lowest" in text and "average" in text and "highest" in text


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", str(_toml_config(tmp_path))]) == 0
    bad = _write(tmp_path, "local_epochs = 0\n" + MINIMAL_TOML, "bad.toml")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "T_c" in capsys.readouterr().err


def test_cli_exit_codes(tmp_path):
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    assert main(["inspect", "--results", str(tmp_path / "nothing")]) == 1
    csv_cfg = _write(tmp_path, MINIMAL_TOML.replace("n_classes = 4", 'n_classes = 4\nkind = "csv"\npath = "/nonexistent.csv"'),
                     "csv.toml")
    assert main(["run", "--config", str(csv_cfg), "--out", str(tmp_path / "r")]) == 1


def test_cli_runtime_failure_emits_partial(tmp_path, monkeypatch):
    original = runner.local_train

    def flaky(state, table, cfg, round_):
        if round_ == 2:
            raise FloatingPointError("boom")
        return original(state, table, cfg, round_)

    monkeypatch.setattr(runner, "local_train", flaky)
    out = tmp_path / "res"
    assert main(["run", "--config", str(_toml_config(tmp_path)), "--out", str(out)]) == 1
    assert len(read_metrics(out)) == 1


def test_shipped_config_validates():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "hetero_noniid.toml"
    assert main(["validate", "--config", str(path)]) == 0
