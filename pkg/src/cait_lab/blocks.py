"""Pre-norm transformer blocks and residual-branch weighting strategies.

A block computes ``x + w1 * SA(norm(x))`` followed by ``x + w2 * FFN(norm(x))``
where the branch weights ``w`` depend on the strategy: nothing for the plain
pre-norm baseline, one learnable scalar per branch for the adapted
ReZero/Fixup/T-Fixup variants, and a learnable per-channel diagonal for
LayerScale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid model, strategy or schedule configuration."""


# ---------------------------------------------------------------- LayerScale init laws


@dataclass(frozen=True)
class Constant:
    eps: float


@dataclass(frozen=True)
class Zero:
    pass


@dataclass(frozen=True)
class Uniform:
    """Diagonal entries drawn i.i.d. from U[0, 2 eps]; mean eps."""

    eps: float


@dataclass(frozen=True, eq=False)
class Fixed:
    """Diagonals loaded from a previous run and excluded from training."""

    weights: Mapping[str, np.ndarray] = field(default_factory=dict)


LayerScaleInit = Union[Constant, Zero, Uniform, Fixed]


# ---------------------------------------------------------------- strategies


@dataclass(frozen=True)
class PreNormBaseline:
    pass


@dataclass(frozen=True)
class AdaptedReZero:
    alpha0: float = 0.0
    prenorm: bool = True


@dataclass(frozen=True)
class AdaptedFixup:
    alpha0: float = 1.0
    prenorm: bool = True


@dataclass(frozen=True)
class AdaptedTFixup:
    alpha0: float = 1.0
    prenorm: bool = True


@dataclass(frozen=True, eq=False)
class LayerScale:
    init: LayerScaleInit = Constant(0.1)


ResidualStrategy = Union[PreNormBaseline, AdaptedReZero, AdaptedFixup, AdaptedTFixup, LayerScale]
SCALAR_STRATEGIES = (AdaptedReZero, AdaptedFixup, AdaptedTFixup)

STRATEGY_NAMES = (
    "baseline",
    "rezero-adapted",
    "fixup-adapted",
    "tfixup-adapted",
    "layerscale",
    "layerscale-zero",
    "layerscale-uniform",
)
_DIVERGENT_NAMES = ("rezero-original", "fixup-original")


def uses_prenorm(strategy: ResidualStrategy) -> bool:
    return getattr(strategy, "prenorm", True)


def parse_strategy(name: str, epsilon: Optional[float] = None, allow_divergent: bool = False) -> ResidualStrategy:
    """Build a strategy from its CLI name.

    ``epsilon`` sets the LayerScale init value, or the initial alpha of a
    scalar strategy (the "alpha = epsilon" variant).
    """
    if name in _DIVERGENT_NAMES and not allow_divergent:
        raise ConfigError(f"strategy {name!r} drops pre-norm and warmup; pass allow_divergent to use it")
    if name == "baseline":
        return PreNormBaseline()
    if name in ("rezero-adapted", "rezero-original"):
        return AdaptedReZero(0.0 if epsilon is None else epsilon, prenorm=name.endswith("adapted"))
    if name in ("fixup-adapted", "fixup-original"):
        return AdaptedFixup(1.0 if epsilon is None else epsilon, prenorm=name.endswith("adapted"))
    if name == "tfixup-adapted":
        return AdaptedTFixup(1.0 if epsilon is None else epsilon)
    if name in ("layerscale", "layerscale-uniform", "layerscale-zero"):
        if name == "layerscale-zero":
            return LayerScale(Zero())
        eps = 0.1 if epsilon is None else epsilon
        return LayerScale(Uniform(eps) if name == "layerscale-uniform" else Constant(eps))
    raise ConfigError(f"unknown strategy {name!r}; expected one of {', '.join(STRATEGY_NAMES)}")


def strategy_to_str(strategy: ResidualStrategy) -> str:
    """Compact text form used in manifests and checkpoints (round-trips with ``strategy_from_str``)."""
    if isinstance(strategy, PreNormBaseline):
        return "baseline"
    if isinstance(strategy, SCALAR_STRATEGIES):
        tag = {AdaptedReZero: "rezero", AdaptedFixup: "fixup", AdaptedTFixup: "tfixup"}[type(strategy)]
        suffix = "adapted" if strategy.prenorm else "original"
        return f"{tag}-{suffix}:{strategy.alpha0!r}"
    init = strategy.init
    if isinstance(init, Constant):
        return f"layerscale:constant:{init.eps!r}"
    if isinstance(init, Uniform):
        return f"layerscale:uniform:{init.eps!r}"
    if isinstance(init, Zero):
        return "layerscale:zero"
    return "layerscale:fixed"


def strategy_from_str(text: str) -> ResidualStrategy:
    parts = text.split(":")
    head = parts[0]
    if head == "baseline":
        return PreNormBaseline()
    if head.startswith(("rezero", "fixup", "tfixup")):
        cls = {"rezero": AdaptedReZero, "fixup": AdaptedFixup, "tfixup": AdaptedTFixup}[head.split("-")[0]]
        return cls(float(parts[1]), prenorm=head.endswith("adapted"))
    if head == "layerscale":
        kind = parts[1]
        if kind == "constant":
            return LayerScale(Constant(float(parts[2])))
        if kind == "uniform":
            return LayerScale(Uniform(float(parts[2])))
        if kind == "zero":
            return LayerScale(Zero())
        if kind == "fixed":
            return LayerScale(Fixed())
    raise ConfigError(f"cannot parse strategy {text!r}")


# ---------------------------------------------------------------- depth-dependent defaults


def default_epsilon(depth: int) -> float:
    """LayerScale init value for a network with ``depth`` SA+FFN pairs."""
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    if depth <= 18:
        return 0.1
    if depth <= 24:
        return 1e-5
    return 1e-6


def default_drop_rate(depth: int, width_adjust: float = 0.0) -> float:
    """Uniform stochastic-depth rate ``max(0.1 (depth/12 - 1), 0) + width_adjust``.

    Results above 0.95 are clamped to 0.95; anything outside [0, 1) is an error.
    """
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    rate = round(max(0.1 * (depth / 12 - 1), 0.0) + width_adjust, 12)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop rate {rate} for depth {depth} (adjust {width_adjust}) is outside [0, 1)")
    return min(rate, 0.95)


# ---------------------------------------------------------------- stochastic depth


@dataclass(frozen=True)
class StochasticDepth:
    drop_rate: float = 0.0
    mode: str = "uniform"

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if self.mode != "uniform":
            raise ConfigError("only the uniform drop-rate schedule is supported")


def stochastic_depth_gate(schedule: StochasticDepth, rng: np.random.Generator, training: bool, size=None):
    """Branch multiplier: 0 with probability d_r, else 1/(1 - d_r); always 1 in evaluation.

    With ``size`` given, returns one independent gate per sample.
    """
    p = schedule.drop_rate
    if not training or p == 0.0:
        return 1.0 if size is None else np.ones(size)
    keep = rng.random(size) >= p
    return (keep / (1.0 - p)) if size is not None else float(keep) / (1.0 - p)


# ---------------------------------------------------------------- parameter containers


@dataclass
class Attention:
    """Projection weights of one multi-head (self- or class-) attention layer.

    Weights act on row vectors (``y = x @ W + b``). The talking-heads matrices,
    when present, right-multiply the head axis of the logits (``pre``) and of
    the softmax output (``post``).
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int
    talk_pre: Optional[Tensor] = None
    talk_post: Optional[Tensor] = None

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass
class FFN:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class Block:
    """Attention branch plus FFN branch with their norms and strategy weights."""

    kind: str  # "SA" or "CA"
    norm1_g: Tensor
    norm1_b: Tensor
    attn: Attention
    norm2_g: Tensor
    norm2_b: Tensor
    ffn: FFN
    scale1: Optional[Tensor] = None
    scale2: Optional[Tensor] = None
    prenorm: bool = True


# ---------------------------------------------------------------- forward pieces


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, d // heads)), (0, 2, 1, 3))


def _mix_heads(a: Tensor, mix: Tensor) -> Tensor:
    # a: [B, h, q, k]; mixes the head axis by right-multiplying with ``mix``
    moved = T.transpose(a, (0, 2, 3, 1))
    return T.transpose(T.matmul(moved, mix), (0, 3, 1, 2))


def attend(attn: Attention, q_in: Tensor, kv_in: Tensor, talking_heads: bool = True):
    """Multi-head attention of ``q_in`` [B, q, d] over ``kv_in`` [B, k, d].

    Returns ``(output [B, q, d], softmax weights [B, h, q, k])``.
    """
    d = attn.dim
    h = attn.heads
    if d % h:
        raise ConfigError(f"width {d} is not divisible by {h} heads")
    B, Nq, _ = q_in.shape
    q = _split_heads(T.add(T.matmul(q_in, attn.wq), attn.bq), h)
    k = _split_heads(T.add(T.matmul(kv_in, attn.wk), attn.bk), h)
    v = _split_heads(T.add(T.matmul(kv_in, attn.wv), attn.bv), h)
    logits = T.mul_const(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d / h))
    if talking_heads and attn.talk_pre is not None:
        logits = _mix_heads(logits, attn.talk_pre)
    weights = T.softmax(logits)
    mixed = weights
    if talking_heads and attn.talk_post is not None:
        mixed = _mix_heads(weights, attn.talk_post)
    ctx = T.matmul(mixed, v)  # [B, h, q, dh]
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Nq, d))
    out = T.add(T.matmul(ctx, attn.wo), attn.bo)
    return out, weights.data


def _batched(x: Tensor):
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def sa_forward(attn: Attention, x: Tensor, record: bool = False):
    """Self-attention branch value for ``x`` of shape [p, d] or [B, p, d].

    Returns ``(out, weights)`` where ``weights`` is the softmax tensor
    ([h, p, p] or [B, h, p, p]) when ``record`` is set, else None.
    """
    xb, single = _batched(x)
    if xb.shape[-1] != attn.dim:
        raise ConfigError(f"input width {xb.shape[-1]} does not match layer width {attn.dim}")
    out, w = attend(attn, xb, xb)
    if single:
        out = T.reshape(out, out.shape[1:])
        w = w[0]
    return out, (w if record else None)


def ca_forward(attn: Attention, x_class: Tensor, x_patches: Tensor, keys_include_class: bool = True,
               talking_heads: bool = False):
    """Class-attention branch value for the class token.

    The query comes from ``x_class`` ([1, d] or [B, 1, d]) only; keys and values
    come from ``[x_class, x_patches]`` or from ``x_patches`` alone. Patch
    embeddings are read, never written. Returns ``(out_class, weights)`` with
    weights of shape [h, 1, keys] (or [B, h, 1, keys]).
    """
    cb, single = _batched(x_class)
    pb, _ = _batched(x_patches)
    if cb.shape[-1] != attn.dim or pb.shape[-1] != attn.dim:
        raise ConfigError(f"widths {cb.shape[-1]}/{pb.shape[-1]} do not match layer width {attn.dim}")
    if cb.shape[-2] != 1:
        raise ConfigError(f"class input must hold one token, got {cb.shape}")
    z = T.concat([cb, pb], axis=1) if keys_include_class else pb
    out, w = attend(attn, cb, z, talking_heads=talking_heads)
    if single:
        out = T.reshape(out, out.shape[1:])
        w = w[0]
    return out, w


def ffn_forward(ffn: FFN, x: Tensor) -> Tensor:
    return T.add(T.matmul(T.gelu(T.add(T.matmul(x, ffn.w1), ffn.b1)), ffn.w2), ffn.b2)


def apply_strategy(strategy: ResidualStrategy, branch_out: Tensor, weight: Optional[Tensor]) -> Tensor:
    """Weight a branch output with this layer's strategy parameter.

    ``weight`` is the layer's alpha (shape [1]) for scalar strategies or its
    diagonal (shape [d]) for LayerScale; the baseline ignores it.
    """
    if isinstance(strategy, PreNormBaseline) or weight is None:
        return branch_out
    if isinstance(strategy, LayerScale):
        return T.scale_rows(branch_out, weight)
    return T.scale(branch_out, weight)


def _gate(x: Tensor, gate) -> Tensor:
    if gate is None:
        return x
    g = np.asarray(gate, dtype=np.float64)
    if g.ndim == 0:
        return x if g == 1.0 else T.mul_const(x, g)
    if np.all(g == 1.0):
        return x
    return T.mul_const(x, g.reshape((-1,) + (1,) * (x.ndim - 1)))


def _norm(x: Tensor, g: Tensor, b: Tensor, on: bool) -> Tensor:
    return T.layer_norm(x, g, b) if on else x


def _branch_ratio(branch: Tensor, x: Tensor) -> np.ndarray:
    """Per-sample ||branch|| / ||x||; +inf where the input norm vanishes."""
    B = x.shape[0]
    num = np.linalg.norm(branch.data.reshape(B, -1), axis=1)
    den = np.linalg.norm(x.data.reshape(B, -1), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)


def sa_block_forward(block: Block, x: Tensor, strategy: ResidualStrategy, gates=(None, None),
                     talking_heads: bool = True, probe: Optional[list] = None, index: int = 0):
    """One SA+FFN block on ``x`` [B, N, d]; returns ``(x_next, attention weights)``."""
    h = _norm(x, block.norm1_g, block.norm1_b, block.prenorm)
    br, w = attend(block.attn, h, h, talking_heads=talking_heads)
    br = apply_strategy(strategy, br, block.scale1)
    if probe is not None:
        probe.append((index, "SA", _branch_ratio(br, x)))
    x = T.add(x, _gate(br, gates[0]))
    h = _norm(x, block.norm2_g, block.norm2_b, block.prenorm)
    br = apply_strategy(strategy, ffn_forward(block.ffn, h), block.scale2)
    if probe is not None:
        probe.append((index, "FFN", _branch_ratio(br, x)))
    x = T.add(x, _gate(br, gates[1]))
    return x, w


def ca_block_forward(block: Block, x_class: Tensor, x_patches: Tensor, strategy: ResidualStrategy,
                     keys_include_class: bool = True, gates=(None, None), talking_heads: bool = False):
    """One CA+FFN block; only the class token [B, 1, d] is updated."""
    if block.prenorm:
        u = T.layer_norm(T.concat([x_class, x_patches], axis=1), block.norm1_g, block.norm1_b)
        cls_n = T.narrow(u, 1, 0, 1)
        patches_n = T.narrow(u, 1, 1, x_patches.shape[1])
    else:
        cls_n, patches_n = x_class, x_patches
    br, w = ca_forward(block.attn, cls_n, patches_n, keys_include_class, talking_heads=talking_heads)
    br = apply_strategy(strategy, br, block.scale1)
    x_class = T.add(x_class, _gate(br, gates[0]))
    h = _norm(x_class, block.norm2_g, block.norm2_b, block.prenorm)
    br = apply_strategy(strategy, ffn_forward(block.ffn, h), block.scale2)
    x_class = T.add(x_class, _gate(br, gates[1]))
    return x_class, w


# ---------------------------------------------------------------- initialization


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _xavier_uniform(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


def init_block(rng: np.random.Generator, kind: str, dim: int, heads: int, strategy: ResidualStrategy,
               n_blocks: int, talking_heads: bool = True, mlp_ratio: int = 4, with_scales: bool = True) -> Block:
    """Fresh block parameters.

    The base init is truncated normal (std 0.02) with zero biases. Adapted
    Fixup and T-Fixup then rescale their branch weights using ``n_blocks``,
    the total number of residual blocks in the network.
    """
    if dim % heads:
        raise ConfigError(f"width {dim} is not divisible by {heads} heads")
    hidden = mlp_ratio * dim

    def mat(i, o):
        return trunc_normal(rng, (i, o))

    W = {n: mat(dim, dim) for n in ("wq", "wk", "wv", "wo")}
    w1, w2 = mat(dim, hidden), mat(hidden, dim)

    if isinstance(strategy, AdaptedFixup):
        shrink = n_blocks ** -0.5
        W["wv"] = rng.standard_normal((dim, dim)) * math.sqrt(2.0 / dim) * shrink
        w1 = rng.standard_normal((dim, hidden)) * math.sqrt(2.0 / dim) * shrink
        W["wo"] = np.zeros((dim, dim))
        w2 = np.zeros((hidden, dim))
    elif isinstance(strategy, AdaptedTFixup):
        gain = 0.67 * n_blocks ** -0.25
        W = {n: _xavier_uniform(rng, dim, dim) for n in ("wq", "wk", "wv", "wo")}
        W["wv"] *= gain
        W["wo"] *= gain
        w1 = _xavier_uniform(rng, dim, hidden) * gain
        w2 = _xavier_uniform(rng, hidden, dim) * gain

    def p(arr):
        return Tensor(arr, requires_grad=True)

    talk = kind == "SA" and talking_heads
    attn = Attention(
        wq=p(W["wq"]), bq=p(np.zeros(dim)),
        wk=p(W["wk"]), bk=p(np.zeros(dim)),
        wv=p(W["wv"]), bv=p(np.zeros(dim)),
        wo=p(W["wo"]), bo=p(np.zeros(dim)),
        heads=heads,
        talk_pre=p(np.eye(heads)) if talk else None,
        talk_post=p(np.eye(heads)) if talk else None,
    )
    ffn = FFN(p(w1), p(np.zeros(hidden)), p(w2), p(np.zeros(dim)))
    scale1 = scale2 = None
    if with_scales:
        scale1 = init_branch_scale(rng, strategy, dim)
        scale2 = init_branch_scale(rng, strategy, dim)
    return Block(
        kind=kind,
        norm1_g=p(np.ones(dim)), norm1_b=p(np.zeros(dim)),
        attn=attn,
        norm2_g=p(np.ones(dim)), norm2_b=p(np.zeros(dim)),
        ffn=ffn,
        scale1=scale1, scale2=scale2,
        prenorm=uses_prenorm(strategy),
    )


def init_branch_scale(rng: np.random.Generator, strategy: ResidualStrategy, dim: int) -> Optional[Tensor]:
    """Strategy parameter for one branch: None, an alpha [1], or a diagonal [d].

    ``Fixed`` diagonals are filled in later by the model builder, which knows
    the parameter names.
    """
    if isinstance(strategy, PreNormBaseline):
        return None
    if isinstance(strategy, SCALAR_STRATEGIES):
        return Tensor([strategy.alpha0], requires_grad=True)
    init = strategy.init
    if isinstance(init, Constant):
        return Tensor(np.full(dim, init.eps), requires_grad=True)
    if isinstance(init, Zero):
        return Tensor(np.zeros(dim), requires_grad=True)
    if isinstance(init, Uniform):
        return Tensor(rng.uniform(0.0, 2.0 * init.eps, dim), requires_grad=True)
    return Tensor(np.zeros(dim), requires_grad=False)
