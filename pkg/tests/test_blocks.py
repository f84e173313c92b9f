import math

import numpy as np
import pytest

from cait_lab import tensor as T
from cait_lab.blocks import (
    AdaptedFixup,
    AdaptedReZero,
    AdaptedTFixup,
    ConfigError,
    Constant,
    LayerScale,
    PreNormBaseline,
    STRATEGY_NAMES,
    StochasticDepth,
    Uniform,
    Zero,
    apply_strategy,
    ca_forward,
    default_drop_rate,
    default_epsilon,
    init_block,
    parse_strategy,
    sa_forward,
    stochastic_depth_gate,
    strategy_from_str,
    strategy_to_str,
)
from cait_lab.cait import build_model, fold_layerscale, forward
from cait_lab.gradcheck import check_gradients
from cait_lab.tensor import Tensor

from conftest import random_patches, tiny_config


def _attn(rng, d=8, h=2, kind="SA", talking=True):
    return init_block(rng, kind, d, h, PreNormBaseline(), 4, talking).attn


# ---------------------------------------------------------------- self-attention


def test_single_token_attention_is_one(rng):
    attn = _attn(rng)
    _, w = sa_forward(attn, Tensor(rng.standard_normal((1, 8))), record=True)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))


def test_zero_query_key_gives_uniform_attention(rng):
    attn = _attn(rng, talking=False)
    attn.wq.data[...] = 0
    attn.wk.data[...] = 0
    x = Tensor(rng.standard_normal((5, 8)))
    out, w = sa_forward(attn, x, record=True)
    np.testing.assert_allclose(w, 0.2, atol=1e-15)
    v = x.data @ attn.wv.data + attn.bv.data
    expected = v.mean(axis=0) @ attn.wo.data + attn.bo.data
    np.testing.assert_allclose(out.data, np.tile(expected, (5, 1)), atol=1e-14)


def test_talking_heads_identity_init_matches_plain_attention(rng):
    attn = _attn(rng)
    x = Tensor(rng.standard_normal((2, 4, 8)))
    a, _ = sa_forward(attn, x)
    plain = _attn(np.random.default_rng(0), talking=False)
    for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        getattr(plain, n).data = getattr(attn, n).data
    b, _ = sa_forward(plain, x)
    np.testing.assert_allclose(a.data, b.data, rtol=1e-14)
    np.testing.assert_array_equal(attn.talk_pre.data, np.eye(2))


def test_talking_heads_mixing_changes_output(rng):
    attn = _attn(rng)
    attn.wq.data *= 50  # sharpen logits so head mixing matters
    x = Tensor(rng.standard_normal((4, 8)))
    a, _ = sa_forward(attn, x)
    attn.talk_pre.data = np.array([[0.0, 1.0], [1.0, 0.0]])
    b, _ = sa_forward(attn, x)
    assert not np.allclose(a.data, b.data)


def test_sa_gradient_wrt_input(rng):
    attn = _attn(rng)
    attn.wq.data *= 20
    attn.wk.data *= 20
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    errs = check_gradients(lambda t: T.sum(sa_forward(attn, t)[0]), [x], projection=np.ones(1))
    assert errs[0] < 1e-5


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        init_block(rng, "SA", 10, 3, PreNormBaseline(), 2)


def test_ca_has_no_talking_heads(rng):
    assert _attn(rng, kind="CA").talk_pre is None


# ---------------------------------------------------------------- strategies


def test_apply_strategy_examples(rng):
    br = Tensor(rng.standard_normal((3, 4)))
    np.testing.assert_array_equal(apply_strategy(PreNormBaseline(), br, None).data, br.data)
    zero = apply_strategy(LayerScale(Zero()), br, Tensor(np.zeros(4)))
    np.testing.assert_array_equal(zero.data, 0.0)
    ls = apply_strategy(LayerScale(Constant(0.1)), br, Tensor(np.full(4, 0.1)))
    np.testing.assert_array_equal(ls.data, 0.1 * br.data)
    rz = apply_strategy(AdaptedReZero(), br, Tensor([0.0]))
    np.testing.assert_array_equal(rz.data, 0.0)
    assert rz.shape == br.shape


def test_scalar_strategy_defaults():
    assert AdaptedReZero().alpha0 == 0.0
    assert AdaptedFixup().alpha0 == 1.0
    for s in (AdaptedReZero(), AdaptedFixup(), AdaptedTFixup()):
        assert s.prenorm


@pytest.mark.parametrize("name", STRATEGY_NAMES)
def test_strategy_text_round_trip(name):
    s = parse_strategy(name, 0.25)
    again = strategy_from_str(strategy_to_str(s))
    assert strategy_to_str(again) == strategy_to_str(s)


def test_divergent_strategies_need_opt_in():
    with pytest.raises(ConfigError):
        parse_strategy("rezero-original")
    s = parse_strategy("rezero-original", allow_divergent=True)
    assert not s.prenorm
    with pytest.raises(ConfigError):
        parse_strategy("postnorm")


def test_epsilon_sets_initial_alpha():
    assert parse_strategy("rezero-adapted", 0.1).alpha0 == 0.1


def test_uniform_init_mean(rng):
    from cait_lab.blocks import init_branch_scale

    eps = 1e-3
    draws = np.concatenate([init_branch_scale(rng, LayerScale(Uniform(eps)), 1000).data for _ in range(10)])
    assert draws.min() >= 0 and draws.max() <= 2 * eps
    assert abs(draws.mean() - eps) < 0.05 * eps


def test_constant_init_exact(rng):
    from cait_lab.blocks import init_branch_scale

    np.testing.assert_array_equal(init_branch_scale(rng, LayerScale(Constant(1e-5)), 7).data, 1e-5)


def test_fixup_zero_inits_output_projections(rng):
    blk = init_block(rng, "SA", 8, 2, AdaptedFixup(), 10)
    assert not blk.attn.wo.data.any() and not blk.ffn.w2.data.any()
    assert blk.scale1.data.tolist() == [1.0]


def test_tfixup_scales_with_depth():
    shallow = init_block(np.random.default_rng(0), "SA", 32, 2, AdaptedTFixup(), 2)
    deep = init_block(np.random.default_rng(0), "SA", 32, 2, AdaptedTFixup(), 32)
    ratio = np.abs(deep.attn.wv.data).max() / np.abs(shallow.attn.wv.data).max()
    assert ratio == pytest.approx((32 / 2) ** -0.25)


# ---------------------------------------------------------------- depth defaults


@pytest.mark.parametrize("depth,eps", [(1, 0.1), (12, 0.1), (18, 0.1), (19, 1e-5), (24, 1e-5), (25, 1e-6),
                                       (36, 1e-6), (48, 1e-6)])
def test_default_epsilon(depth, eps):
    assert default_epsilon(depth) == eps


def test_default_epsilon_rejects_zero_depth():
    with pytest.raises(ConfigError):
        default_epsilon(0)


@pytest.mark.parametrize("depth,adjust,rate", [(12, 0.0, 0.0), (24, 0.0, 0.1), (36, 0.0, 0.2), (48, 0.0, 0.3),
                                               (6, 0.0, 0.0), (36, 0.1, 0.3), (24, -0.05, 0.05)])
def test_default_drop_rate(depth, adjust, rate):
    assert default_drop_rate(depth, adjust) == pytest.approx(rate, abs=1e-12)


def test_default_drop_rate_out_of_range():
    with pytest.raises(ConfigError):
        default_drop_rate(12, -0.1)
    with pytest.raises(ConfigError):
        default_drop_rate(48, 0.8)
    assert default_drop_rate(48, 0.66) == 0.95


# ---------------------------------------------------------------- stochastic depth


def test_gate_trivial_cases(rng):
    assert stochastic_depth_gate(StochasticDepth(0.0), rng, True) == 1.0
    assert stochastic_depth_gate(StochasticDepth(0.7), rng, False) == 1.0


def test_gate_is_unbiased(rng):
    g = stochastic_depth_gate(StochasticDepth(0.2), rng, True, size=100_000)
    assert abs(np.mean(g == 0) - 0.2) < 0.01
    assert abs(g.mean() - 1.0) < 0.01
    assert set(np.unique(g)) == {0.0, 1.25}


def test_schedule_validation():
    with pytest.raises(ConfigError):
        StochasticDepth(1.0)
    with pytest.raises(ConfigError):
        StochasticDepth(0.1, mode="linear")


# ---------------------------------------------------------------- model-level invariants


def test_fold_in_equivalence():
    cfg = tiny_config()
    model = build_model(cfg, LayerScale(Uniform(0.3)), seed=3)
    folded = fold_layerscale(model)
    assert not any(n.endswith(("scale1", "scale2")) for n in folded.params)
    for k in range(10):
        x = Tensor(random_patches(cfg, seed=k))
        a, _ = forward(model, x)
        b, _ = forward(folded, x)
        assert np.linalg.norm(a.data - b.data) / np.linalg.norm(a.data) < 1e-10


def test_zero_strategy_weights_give_identity_trunk():
    cfg = tiny_config()
    model = build_model(cfg, LayerScale(Zero()), seed=0)
    x = Tensor(random_patches(cfg, 2))
    trace = {}
    forward(model, x, trace=trace)
    from cait_lab.cait import patch_embed

    x0 = patch_embed(model, x).data
    np.testing.assert_array_equal(trace["sa_out"], x0)


def test_ca_forward_single_key_without_class(rng):
    attn = _attn(rng, kind="CA", talking=False)
    cls = Tensor(rng.standard_normal((1, 8)))
    patch = Tensor(rng.standard_normal((1, 8)))
    out, w = ca_forward(attn, cls, patch, keys_include_class=False)
    np.testing.assert_array_equal(w, np.ones((2, 1, 1)))
    v = patch.data @ attn.wv.data + attn.bv.data
    np.testing.assert_allclose(out.data, v @ attn.wo.data + attn.bo.data, atol=1e-14)


def test_ca_weights_cover_class_and_patches(rng):
    attn = _attn(rng, kind="CA", talking=False)
    _, w = ca_forward(attn, Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((5, 8))))
    assert w.shape == (2, 1, 6)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_ca_hand_computation():
    d = 4
    eye = np.eye(d)
    z = np.zeros(d)
    from cait_lab.blocks import Attention

    attn = Attention(*(Tensor(a) for a in (eye, z, eye, z, eye, z, eye, z)), heads=1)
    cls = np.array([[1.0, 0.0, 0.0, 0.0]])
    patches = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    out, w = ca_forward(attn, Tensor(cls), Tensor(patches), keys_include_class=False)
    # logits q.k / sqrt(4): [0.5, 0]
    a = math.exp(0.5) / (math.exp(0.5) + 1.0)
    np.testing.assert_allclose(w[0, 0], [a, 1 - a], rtol=1e-14)
    np.testing.assert_allclose(out.data, [[a, 1 - a, 0, 0]], rtol=1e-14)


def test_ca_needs_keys():
    # an empty patch set cannot even be built: zero-size dimensions are rejected
    with pytest.raises(T.ShapeError):
        Tensor(np.ones((0, 8)))
