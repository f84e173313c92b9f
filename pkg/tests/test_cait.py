import numpy as np
import pytest

from cait_lab import tensor as T
from cait_lab.blocks import ConfigError, LayerScale, PreNormBaseline, Uniform
from cait_lab.cait import (
    FULL_PRESETS,
    AveragePooling,
    CaitConfig,
    ClassAttentionStage,
    InsertAtLayer,
    build_model,
    deit_layout,
    forward,
    model_presets,
    patchify,
    policy_from_str,
    policy_to_str,
)
from cait_lab.flops import (
    ca_layer_flops,
    count_flops,
    count_params,
    ffn_flops,
    sa_layer_flops,
    scaling_exponent,
)
from cait_lab.tensor import Tape, Tensor

from conftest import random_patches, tiny_config

POLICIES = [ClassAttentionStage(), InsertAtLayer(0), InsertAtLayer(1), AveragePooling()]


def _cfg(policy, **kw):
    return tiny_config(cls_policy=policy, ca_depth=2 if isinstance(policy, ClassAttentionStage) else 0, **kw)


# ---------------------------------------------------------------- config


def test_policy_validation():
    with pytest.raises(ConfigError):
        tiny_config(ca_depth=0)
    with pytest.raises(ConfigError):
        tiny_config(cls_policy=AveragePooling())
    with pytest.raises(ConfigError):
        tiny_config(dim=15, heads=2)
    with pytest.raises(ConfigError):
        tiny_config(ca_depth=0, cls_policy=InsertAtLayer(5))


@pytest.mark.parametrize("policy", POLICIES, ids=policy_to_str)
def test_policy_text_round_trip(policy):
    assert policy_from_str(policy_to_str(policy)) == policy


def test_config_items_round_trip():
    cfg = tiny_config(keys_include_class=False, drop_rate=0.15)
    assert CaitConfig.from_items(cfg.to_items()) == cfg
    assert cfg.name == "2+2"


@pytest.mark.parametrize("name", FULL_PRESETS)
def test_presets_use_48_dim_heads(name):
    cfg = model_presets(name)
    assert cfg.dim == 48 * cfg.heads and cfg.ca_depth == 2


def test_preset_examples():
    s36 = model_presets("S-36")
    assert (s36.sa_depth, s36.ca_depth, s36.dim, s36.epsilon, s36.drop_rate) == (36, 2, 384, 1e-6, 0.2)
    xxs = model_presets("XXS-24")
    assert (xxs.dim, xxs.heads, xxs.epsilon, xxs.drop_rate) == (192, 4, 1e-5, 0.05)
    m48 = model_presets("cait_m48")
    assert (m48.dim, m48.epsilon, m48.drop_rate) == (768, 1e-6, 0.4)
    with pytest.raises(ConfigError):
        model_presets("L-99")


def test_toy_presets():
    toy = model_presets("toy-24")
    assert (toy.dim, toy.heads, toy.patch_count, toy.image_size) == (64, 4, 16, 64)
    assert toy.epsilon == 1e-5 and toy.drop_rate == pytest.approx(0.1)
    assert model_presets("s36-like").drop_rate == 0.2


# ---------------------------------------------------------------- forward


@pytest.mark.parametrize("policy", POLICIES, ids=policy_to_str)
def test_logits_shape(policy):
    cfg = _cfg(policy)
    model = build_model(cfg, seed=0)
    logits, _ = forward(model, Tensor(random_patches(cfg)))
    assert logits.shape == (cfg.num_classes,)
    logits, _ = forward(model, Tensor(random_patches(cfg, 3)))
    assert logits.shape == (3, cfg.num_classes)


def test_batched_forward_matches_single():
    cfg = tiny_config()
    model = build_model(cfg, LayerScale(Uniform(0.2)), seed=1)
    x = random_patches(cfg, 3)
    batched, _ = forward(model, Tensor(x))
    for i in range(3):
        single, _ = forward(model, Tensor(x[i]))
        np.testing.assert_allclose(single.data, batched.data[i], rtol=1e-12, atol=1e-14)


def test_patch_freeze_exact():
    cfg = tiny_config()
    model = build_model(cfg, LayerScale(Uniform(0.5)), seed=2)
    trace = {}
    forward(model, Tensor(random_patches(cfg, 4)), trace=trace)
    assert np.array_equal(trace["sa_out"], trace["ca_patches"])


def test_insert_at_zero_is_deit_layout():
    cfg = deit_layout(sa_depth=2, dim=16, heads=2)
    assert isinstance(cfg.cls_policy, InsertAtLayer) and cfg.cls_policy.layer == 0 and cfg.ca_depth == 0
    model = build_model(cfg.replace(patch_count=4, in_chans=1, num_classes=3), PreNormBaseline(), seed=0)
    _, records = forward(model, Tensor(random_patches(model.config)))
    # the class token attends with the patches from the first layer: p + 1 tokens
    assert all(r.stage == "SA" and r.weights.shape[-1] == 5 for r in records)


def test_late_insertion_token_count():
    cfg = _cfg(InsertAtLayer(1))
    model = build_model(cfg, seed=0)
    _, records = forward(model, Tensor(random_patches(cfg)))
    assert [r.weights.shape[-1] for r in records] == [4, 5]


def test_keys_variant_changes_key_count():
    for include, keys in ((True, 5), (False, 4)):
        cfg = tiny_config(keys_include_class=include)
        _, records = forward(build_model(cfg, seed=0), Tensor(random_patches(cfg)))
        ca = [r for r in records if r.stage == "CA"]
        assert len(ca) == 2 and all(r.weights.shape == (2, 1, keys) for r in ca)


def test_layerscale_in_ca_toggle():
    on = build_model(tiny_config(), seed=0)
    off = build_model(tiny_config(layerscale_in_ca=False), seed=0)
    assert "ca_blocks.0.scale1" in on.params and "ca_blocks.0.scale1" not in off.params
    assert "blocks.0.scale1" in off.params


@pytest.mark.parametrize("policy", POLICIES, ids=policy_to_str)
def test_attention_rows_normalized(policy):
    cfg = _cfg(policy)
    _, records = forward(build_model(cfg, seed=0), Tensor(random_patches(cfg, 5)))
    for r in records:
        assert np.all(np.abs(r.row_sums() - 1.0) <= 1e-10)


@pytest.mark.parametrize("policy", POLICIES, ids=policy_to_str)
def test_gradient_reaches_cls_and_trunk(policy):
    cfg = _cfg(policy)
    model = build_model(cfg, LayerScale(Uniform(0.5)), seed=4)
    with Tape() as tape:
        logits, _ = forward(model, Tensor(random_patches(cfg, 2)))
        tape.backward(T.cross_entropy(logits, np.array([0, 2])))
    if not isinstance(policy, AveragePooling):
        assert np.abs(model.params["cls_token"].grad).sum() > 0
    assert np.abs(model.params["patch_embed.weight"].grad).sum() > 0


def test_stochastic_depth_needs_rng_and_is_seeded():
    cfg = tiny_config(drop_rate=0.5)
    model = build_model(cfg, seed=0)
    x = Tensor(random_patches(cfg, 4))
    with pytest.raises(ConfigError):
        forward(model, x, training=True)
    a, _ = forward(model, x, training=True, rng=np.random.default_rng(9))
    b, _ = forward(model, x, training=True, rng=np.random.default_rng(9))
    np.testing.assert_array_equal(a.data, b.data)
    ev1, _ = forward(model, x)
    ev2, _ = forward(model, x, training=True, rng=np.random.default_rng(1))
    assert not np.array_equal(ev1.data, ev2.data)


def test_wrong_patch_shape():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        forward(build_model(cfg, seed=0), Tensor(np.ones((5, cfg.patch_dim))))


def test_patchify_layout():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4)  # C=2, 4x4, patch 2
    p = patchify(img, 2)
    assert p.shape == (4, 8)
    # first patch, first pixel, both channels
    assert p[0, :2].tolist() == [img[0, 0, 0], img[1, 0, 0]]
    assert p[1, :2].tolist() == [img[0, 0, 2], img[1, 0, 2]]
    with pytest.raises(ConfigError):
        patchify(np.ones((1, 5, 5)), 2)


# ---------------------------------------------------------------- accounting


def test_param_count_matches_model():
    for policy in POLICIES:
        cfg = _cfg(policy)
        for strategy, kind in ((LayerScale(Uniform(0.1)), "layerscale"), (PreNormBaseline(), "none")):
            model = build_model(cfg, strategy, seed=0)
            assert model.num_parameters() == count_params(cfg, kind)


def test_layerscale_adds_two_diagonals_per_block():
    cfg = model_presets("S-36")
    extra = count_params(cfg, "layerscale") - count_params(cfg, "none")
    assert extra == 2 * cfg.dim * (cfg.sa_depth + cfg.ca_depth)


def test_ca_and_sa_layers_have_equal_parameters():
    one_sa = count_params(tiny_config(sa_depth=2, talking_heads=False), "none") - \
        count_params(tiny_config(sa_depth=1, talking_heads=False), "none")
    one_ca = count_params(tiny_config(ca_depth=3), "none") - count_params(tiny_config(ca_depth=2), "none")
    assert one_sa == one_ca


@pytest.mark.parametrize("name,params,gflops", [("XXS-24", 12.0, 2.5), ("S-36", 68.2, 13.9), ("XS-24", 26.6, 5.4)])
def test_table_counts(name, params, gflops):
    cfg = model_presets(name)
    assert count_params(cfg) / 1e6 == pytest.approx(params, rel=0.03)
    assert count_flops(cfg) / 1e9 == pytest.approx(gflops, rel=0.05)


def test_deit_layout_flops():
    assert count_flops(deit_layout(12, 0)) / 1e9 == pytest.approx(4.6, rel=0.05)
    assert count_flops(deit_layout(9, 3)) / 1e9 == pytest.approx(3.6, rel=0.05)


@pytest.mark.parametrize("p", [64, 196, 576])
def test_ca_flops_double_with_patches(p):
    assert ca_layer_flops(2 * p, 384) / ca_layer_flops(p, 384) == pytest.approx(2.0, rel=0.01)


def test_breakdown_sums_to_total():
    cfg = model_presets("S-24")
    parts = count_flops(cfg, 224, breakdown=True)
    assert sum(parts.values()) == count_flops(cfg, 224)
    assert count_flops(cfg, 384, breakdown=True)["ca_stage"] > parts["ca_stage"]


def test_flop_exponents():
    ps = [16, 64, 256]
    assert scaling_exponent(ps, [ca_layer_flops(p, 384) for p in ps]) == pytest.approx(1.0, abs=0.15)
    assert scaling_exponent(ps, [sa_layer_flops(p, 384, component="interaction") for p in ps]) == \
        pytest.approx(2.0, abs=0.2)


def test_flops_monotone():
    base = tiny_config(patch_count=16)
    f = count_flops(base, 64)
    assert count_flops(base.replace(patch_count=64), 128) > f
    assert count_flops(base.replace(dim=32), 64) > f
    assert count_flops(base.replace(sa_depth=3), 64) > f
    assert ffn_flops(10, 4, 16) == 2 * 10 * 4 * 16


def test_resolution_must_divide():
    with pytest.raises(ConfigError):
        count_flops(model_presets("S-24"), 200)
