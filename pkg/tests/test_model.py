import itertools

import numpy as np
import pytest

from fedhpl import autodiff as ad
from fedhpl.model import (
    BackboneSpec,
    InsertionMode,
    embed_patches,
    forward,
    init_client_model,
    load_checkpoint,
    param_count,
    predict_logits,
    save_checkpoint,
    sgd_step,
    trainable_param_count,
)

SPEC = BackboneSpec(num_layers=3, embed_dim=8, num_heads=2, patch_count=4, input_dim=5)


def _x(seed=0, batch=None):
    rng = np.random.default_rng(seed)
    shape = (SPEC.feature_dim,) if batch is None else (batch, SPEC.feature_dim)
    return rng.normal(size=shape)


def _ce_loss(model, x, labels):
    logits = forward(model, x)
    onehot = np.eye(model.n_classes)[labels]
    return -ad.sum_(ad.log_softmax(logits, axis=-1) * onehot)


def _state_bytes(model):
    arrays = [t.values for t in model.backbone.values()] + [p.values for _, p in model.trainable()]
    return b"".join(a.tobytes() for a in arrays)


def test_spec_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        BackboneSpec(num_layers=1, embed_dim=10, num_heads=3, patch_count=2, input_dim=2)


def test_same_seed_gives_identical_models():
    a = init_client_model(SPEC, 5, "deep", 3, seed=4, pretext_steps=3)
    b = init_client_model(SPEC, 5, "deep", 3, seed=4, pretext_steps=3)
    assert _state_bytes(a) == _state_bytes(b)
    c = init_client_model(SPEC, 5, "deep", 3, seed=5, pretext_steps=3)
    assert _state_bytes(a) != _state_bytes(c)


def test_deep_has_one_prompt_block_per_layer():
    spec = BackboneSpec(num_layers=4, embed_dim=8, num_heads=2, patch_count=2, input_dim=3)
    assert len(init_client_model(spec, 3, "deep", 2).prompts) == 4
    assert len(init_client_model(spec, 3, "shallow", 2).prompts) == 1


def test_prompt_init_range_and_zero_head():
    m = init_client_model(SPEC, 6, "deep", prompt_len=5, seed=1)
    r = np.sqrt(6.0 / (8 + 5 * 8))
    for p in m.prompts:
        assert p.shape == (5, 8)
        assert np.all(np.abs(p.values) <= r)
    assert not m.head_weight.values.any() and not m.head_bias.values.any()
    assert all(not t.requires_grad for t in m.backbone.values())


def test_invalid_prompt_len_rejected():
    with pytest.raises(ValueError):
        init_client_model(SPEC, 3, "deep", prompt_len=0)


def test_embed_zero_sample_gives_bias_rows():
    m = init_client_model(SPEC, 3, seed=2)
    m.backbone["pos_embed"].values[...] = 0.0
    m.backbone["patch_embed.bias"].values[...] = np.arange(8.0)
    e = embed_patches(m, np.zeros(SPEC.feature_dim))
    assert e.shape == (SPEC.patch_count, SPEC.embed_dim)
    np.testing.assert_array_equal(e.values, np.tile(np.arange(8.0), (4, 1)))


def test_embed_positions_distinguish_identical_patches():
    m = init_client_model(SPEC, 3, seed=3)
    x = np.tile(np.random.default_rng(0).normal(size=SPEC.input_dim), SPEC.patch_count)
    rows = embed_patches(m, x).values
    for i, j in itertools.combinations(range(SPEC.patch_count), 2):
        assert not np.allclose(rows[i], rows[j])


def test_embed_dimension_mismatch():
    m = init_client_model(SPEC, 3)
    with pytest.raises(ValueError, match="features"):
        embed_patches(m, np.zeros(SPEC.feature_dim + 1))


@pytest.mark.parametrize("mode", ["shallow", "deep"])
def test_forward_output_length(mode):
    m = init_client_model(SPEC, 7, mode, seed=1)
    assert forward(m, _x()).shape == (7,)
    assert forward(m, _x(batch=3)).shape == (3, 7)


def test_batch_rows_match_single_sample():
    m = init_client_model(SPEC, 4, seed=1)
    m.head_weight.values[...] = np.random.default_rng(9).normal(size=m.head_weight.shape)
    xs = _x(batch=3)
    batch = forward(m, xs).values
    for i in range(3):
        np.testing.assert_allclose(forward(m, xs[i]).values, batch[i], rtol=0, atol=1e-12)


def test_shallow_prompt_receives_gradient():
    m = init_client_model(SPEC, 4, "shallow", seed=1)
    m.head_weight.values[...] = np.random.default_rng(2).normal(size=m.head_weight.shape)
    loss = ad.forward_eval(_ce_loss, m, _x(batch=2), np.array([0, 3]))
    ad.backward_grad(loss)
    assert len(m.prompts) == 1
    assert np.abs(m.prompts[0].grad).max() > 0


def test_deep_later_prompts_change_output():
    m = init_client_model(SPEC, 4, "deep", seed=1)
    m.head_weight.values[...] = np.random.default_rng(2).normal(size=m.head_weight.shape)
    x = _x()
    base = forward(m, x).values
    for a in range(1, SPEC.num_layers):
        saved = m.prompts[a].values.copy()
        m.prompts[a].values[...] = 0.0
        assert not np.allclose(forward(m, x).values, base)
        m.prompts[a].values[...] = saved


@pytest.mark.parametrize("mode", ["shallow", "deep"])
def test_prompt_gradient_extent(mode):
    m = init_client_model(SPEC, 4, mode, prompt_len=2, seed=5)
    m.head_weight.values[...] = np.random.default_rng(2).normal(size=m.head_weight.shape)
    ad.backward_grad(ad.forward_eval(_ce_loss, m, _x(batch=3), np.array([0, 1, 2])))
    nonzero = sum(int(np.count_nonzero(p.grad)) for p in m.prompts)
    blocks = SPEC.num_layers if mode == "deep" else 1
    assert nonzero == blocks * 2 * SPEC.embed_dim


@pytest.mark.parametrize("mode", ["shallow", "deep"])
def test_token_count_conserved(mode):
    n = 3
    m = init_client_model(SPEC, 4, mode, prompt_len=n, seed=1)
    shapes = []
    forward(m, _x(batch=2), layer_hook=lambda a, i, o: shapes.append((a, i, o)))
    assert [a for a, _, _ in shapes] == list(range(SPEC.num_layers))
    rows = 1 + n + SPEC.patch_count
    for _, i, o in shapes:
        assert i == o == (2, rows, SPEC.embed_dim)


@pytest.mark.parametrize("mode", ["shallow", "deep"])
def test_end_to_end_gradient(mode):
    m = init_client_model(SPEC, 4, mode, seed=7)
    m.head_weight.values[...] = np.random.default_rng(1).normal(size=m.head_weight.shape)
    xs, ys = _x(3, batch=2), np.array([1, 2])
    rng = np.random.default_rng(0)
    for _, p in m.trainable():
        idx = rng.choice(p.size, size=min(6, p.size), replace=False)
        err = ad.finite_diff_check(lambda _: _ce_loss(m, xs, ys), p, h=1e-5, indices=idx)
        assert err < 1e-4


def test_vit_small_counts():
    # 3850 head params = 3.76K; 384n prompt params = 0.375n K (K = 1024)
    for n in (1, 5, 10, 50):
        c = param_count(384, 12, n, 10, "shallow")
        assert c.head_params == 3850 and c.prompt_params == 384 * n
        assert round(c.head_params / 1024, 2) == 3.76
        assert c.prompt_params / 1024 == 0.375 * n
        deep = param_count(384, 12, n, 10, "deep")
        assert deep.prompt_params / 1024 == 4.5 * n


@pytest.mark.parametrize("d, layers, n_c, head_k, shallow_k, deep_k", [
    (768, 12, 10, 7.51, 0.75, 9.0),
    (1024, 24, 10, 10.01, 1.0, 24.0),
    (384, 12, 100, 37.60, 0.375, 4.5),
])
def test_other_backbone_counts(d, layers, n_c, head_k, shallow_k, deep_k):
    assert round(param_count(d, layers, 1, n_c, "shallow").head_params / 1024, 2) == head_k
    assert param_count(d, layers, 1, n_c, "shallow").prompt_params / 1024 == shallow_k
    assert param_count(d, layers, 1, n_c, "deep").prompt_params / 1024 == deep_k


def test_small_deep_count():
    c = param_count(16, 4, 3, 10, "deep")
    assert (c.prompt_params, c.head_params, c.total) == (192, 170, 362)
    assert param_count(16, 4, 0, 10, "deep").total == 170


def test_param_count_matches_enumeration():
    for d, layers, n, n_c, mode in itertools.product((4, 8), (1, 3), (1, 4), (2, 5), ("shallow", "deep")):
        spec = BackboneSpec(num_layers=layers, embed_dim=d, num_heads=2, patch_count=2, input_dim=3)
        m = init_client_model(spec, n_c, mode, n)
        enumerated = sum(p.size for _, p in m.trainable())
        assert trainable_param_count(m).total == enumerated


def test_sgd_lr_zero_keeps_parameters():
    m = init_client_model(SPEC, 3, seed=1)
    ad.backward_grad(ad.forward_eval(_ce_loss, m, _x(batch=2), np.array([0, 1])))
    before = _state_bytes(m)
    sgd_step(m, lr=0.0)
    assert _state_bytes(m) == before
    assert all(p.grad is None for _, p in m.trainable())


def test_plain_sgd_step_is_exact():
    m = init_client_model(SPEC, 3, seed=1)
    ad.backward_grad(ad.forward_eval(_ce_loss, m, _x(batch=2), np.array([0, 1])))
    expected = {name: p.values - 0.05 * p.grad for name, p in m.trainable()}
    sgd_step(m, lr=0.05, momentum=0.0, weight_decay=0.0)
    for name, p in m.trainable():
        np.testing.assert_array_equal(p.values, expected[name])


def test_momentum_and_decay():
    m = init_client_model(SPEC, 3, seed=1)
    p = m.prompts[0]
    grads = [np.full(p.shape, 0.5), np.full(p.shape, -0.2)]
    v = p.values.copy()
    buf = None
    for g in grads:
        for _, q in m.trainable():
            q.grad = np.zeros(q.shape)
        p.grad = g.copy()
        step = g + 1e-2 * v
        buf = step if buf is None else 0.9 * buf + step
        v = v - 0.1 * buf
        sgd_step(m, lr=0.1, momentum=0.9, weight_decay=1e-2)
    np.testing.assert_allclose(p.values, v, rtol=0, atol=1e-15)


def test_sgd_without_backward_fails():
    m = init_client_model(SPEC, 3)
    with pytest.raises(RuntimeError, match="gradient"):
        sgd_step(m, lr=0.1)


def test_backbone_frozen_over_100_steps():
    m = init_client_model(SPEC, 3, seed=1)
    h0 = m.backbone_hash()
    rng = np.random.default_rng(0)
    for _ in range(100):
        xs = rng.normal(size=(4, SPEC.feature_dim))
        ad.backward_grad(ad.forward_eval(_ce_loss, m, xs, rng.integers(0, 3, size=4)))
        sgd_step(m, lr=0.05)
    assert m.backbone_hash() == h0
    assert m.head_weight.values.any()


def test_checkpoint_round_trip(tmp_path):
    m = init_client_model(SPEC, 4, "shallow", prompt_len=2, seed=3)
    m.head_weight.values[...] = np.random.default_rng(0).normal(size=m.head_weight.shape)
    path = tmp_path / "client.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.mode is InsertionMode.SHALLOW and back.spec == SPEC
    assert _state_bytes(back) == _state_bytes(m)
    np.testing.assert_array_equal(predict_logits(back, _x(batch=3)), predict_logits(m, _x(batch=3)))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ValueError, match="checkpoint"):
        load_checkpoint(path)


def _local_only_accuracy(pretext_steps, seed):
    from fedhpl.config import config_from_dict
    from fedhpl.runner import run_experiment

    cfg = config_from_dict({
        "policy": "local_only",
        "global_rounds": 4,
        "master_seed": seed,
        "dataset": {"n_classes": 10, "per_class": 80, "noise": 1.0, "seed": seed},
        "clients": [{"num_layers": 2, "embed_dim": 16, "num_heads": 2, "pretext_steps": pretext_steps}],
    })
    return run_experiment(cfg)[-1].average


@pytest.mark.slow
def test_pretext_warmup_improves_local_fine_tuning():
    for seed in range(3):
        cold = _local_only_accuracy(0, seed)
        warm = _local_only_accuracy(200, seed)
        assert warm > cold, f"seed {seed}: warm {warm:.4f} <= cold {cold:.4f}"
