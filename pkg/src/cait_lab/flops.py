"""Closed-form parameter and FLOP counts for CaiT-style configurations.

FLOPs follow the usual vision-transformer convention: one multiply-accumulate
of a matrix product counts as one FLOP; norms, softmax, GELU and residual
additions are ignored.
"""
from __future__ import annotations

import math

from .cait import AveragePooling, CaitConfig, ClassAttentionStage, InsertAtLayer
from .blocks import ConfigError


def _block_params(d: int, hidden: int, heads: int, talking: bool, scales: str) -> int:
    n = 4 * d * d + 4 * d  # q, k, v, o projections and biases
    n += d * hidden + hidden + hidden * d + d  # FFN
    n += 4 * d  # two LayerNorms
    if talking:
        n += 2 * heads * heads
    if scales == "layerscale":
        n += 2 * d
    elif scales == "scalar":
        n += 2
    return n


def count_params(config: CaitConfig, strategy: str = "layerscale") -> int:
    """Exact trainable-parameter count.

    ``strategy`` names the residual weighting: ``"layerscale"`` (two diagonals
    per block), ``"scalar"`` (two alphas per block) or ``"none"``.
    """
    if strategy not in ("layerscale", "scalar", "none"):
        raise ConfigError(f"unknown strategy kind {strategy!r}")
    d, hidden = config.dim, config.mlp_ratio * config.dim
    n = config.patch_dim * d + d + config.patch_count * d
    if not isinstance(config.cls_policy, AveragePooling):
        n += d
    n += config.sa_depth * _block_params(d, hidden, config.heads, config.talking_heads, strategy)
    ca_scales = strategy if config.layerscale_in_ca else "none"
    n += config.ca_depth * _block_params(d, hidden, config.heads, False, ca_scales)
    n += 2 * d + d * config.num_classes + config.num_classes
    return n


def sa_layer_flops(tokens: int, d: int, heads: int = 1, talking: bool = False,
                   component: str = "total") -> int:
    """FLOPs of one self-attention layer (without its FFN).

    ``component="interaction"`` keeps only the query-key and weights-value
    products, the part whose size depends on tokens x tokens.
    """
    inter = 2 * tokens * tokens * d
    if component == "interaction":
        return inter
    n = 4 * tokens * d * d + inter
    if talking:
        n += 2 * heads * heads * tokens * tokens
    return n


def ca_layer_flops(keys: int, d: int, component: str = "total") -> int:
    """FLOPs of one class-attention layer: a single query over ``keys`` keys."""
    inter = 2 * keys * d
    if component == "interaction":
        return inter
    return 2 * d * d + 2 * keys * d * d + inter


def ffn_flops(tokens: int, d: int, hidden: int) -> int:
    return 2 * tokens * d * hidden


def count_flops(config: CaitConfig, resolution: int = 224, breakdown: bool = False):
    """Forward-pass FLOPs for one image at ``resolution`` x ``resolution``.

    The patch count is derived from the resolution, so the same config can be
    evaluated at 224 and 384. With ``breakdown`` a dict of per-stage totals is
    returned instead of the integer sum.
    """
    if resolution % config.patch_size:
        raise ConfigError(f"resolution {resolution} is not divisible by patch size {config.patch_size}")
    p = (resolution // config.patch_size) ** 2
    d, h = config.dim, config.heads
    hidden = config.mlp_ratio * d
    parts = {"patch_embed": p * config.patch_dim * d}
    policy = config.cls_policy
    sa = 0
    for i in range(config.sa_depth):
        tokens = p + 1 if isinstance(policy, InsertAtLayer) and i >= policy.layer else p
        sa += sa_layer_flops(tokens, d, h, config.talking_heads) + ffn_flops(tokens, d, hidden)
    parts["sa_stage"] = sa
    ca = 0
    if isinstance(policy, ClassAttentionStage):
        keys = p + 1 if config.keys_include_class else p
        ca = config.ca_depth * (ca_layer_flops(keys, d) + ffn_flops(1, d, hidden))
    parts["ca_stage"] = ca
    parts["head"] = d * config.num_classes
    if breakdown:
        return parts
    return int(sum(parts.values()))


def scaling_exponent(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = [math.log(x) for x in xs]
    ly = [math.log(y) for y in ys]
    mx, my = sum(lx) / len(lx), sum(ly) / len(ly)
    num = sum((a - mx) * (b - my) for a, b in zip(lx, ly))
    den = sum((a - mx) ** 2 for a in lx)
    return num / den
