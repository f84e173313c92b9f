"""CaiT model assembly: patch embedding, self-attention stage, class token policy.

Three ways of producing the classifier input are supported:

* ``ClassAttentionStage`` - the class token only enters a separate stage of
  class-attention blocks that read the (frozen) patch embeddings.
* ``InsertAtLayer(k)`` - the class token joins the patch sequence before SA
  block ``k`` (``k = 0`` is the ViT/DeiT layout).
* ``AveragePooling`` - no class token; patch embeddings are mean-pooled.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .blocks import (
    SCALAR_STRATEGIES,
    Block,
    ConfigError,
    Constant,
    Fixed,
    LayerScale,
    PreNormBaseline,
    ResidualStrategy,
    StochasticDepth,
    ca_block_forward,
    init_block,
    sa_block_forward,
    stochastic_depth_gate,
    trunc_normal,
)
from .tensor import Tensor


@dataclass(frozen=True)
class ClassAttentionStage:
    pass


@dataclass(frozen=True)
class AveragePooling:
    pass


@dataclass(frozen=True)
class InsertAtLayer:
    layer: int = 0


ClsPolicy = Union[ClassAttentionStage, AveragePooling, InsertAtLayer]


def policy_to_str(policy: ClsPolicy) -> str:
    if isinstance(policy, ClassAttentionStage):
        return "class-attention"
    if isinstance(policy, AveragePooling):
        return "avg-pool"
    return f"insert@{policy.layer}"


def policy_from_str(text: str) -> ClsPolicy:
    if text == "class-attention":
        return ClassAttentionStage()
    if text == "avg-pool":
        return AveragePooling()
    if text.startswith("insert@"):
        return InsertAtLayer(int(text.split("@", 1)[1]))
    raise ConfigError(f"unknown class-token policy {text!r}")


@dataclass(frozen=True)
class CaitConfig:
    sa_depth: int
    ca_depth: int
    dim: int
    heads: int
    patch_count: int = 196
    num_classes: int = 1000
    epsilon: float = 1e-5
    drop_rate: float = 0.0
    cls_policy: ClsPolicy = field(default_factory=ClassAttentionStage)
    keys_include_class: bool = True
    layerscale_in_ca: bool = True
    talking_heads: bool = True
    patch_size: int = 16
    in_chans: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.sa_depth < 1 or self.ca_depth < 0:
            raise ConfigError(f"invalid depths {self.sa_depth}+{self.ca_depth}")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"width {self.dim} must be a positive multiple of heads {self.heads}")
        if self.patch_count < 1 or math.isqrt(self.patch_count) ** 2 != self.patch_count:
            raise ConfigError(f"patch count {self.patch_count} must be a positive perfect square")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if isinstance(self.cls_policy, ClassAttentionStage):
            if self.ca_depth < 1:
                raise ConfigError("the class-attention policy needs ca_depth >= 1")
        elif self.ca_depth != 0:
            raise ConfigError(f"policy {policy_to_str(self.cls_policy)} requires ca_depth == 0")
        if isinstance(self.cls_policy, InsertAtLayer) and not 0 <= self.cls_policy.layer < self.sa_depth:
            raise ConfigError(f"insertion layer {self.cls_policy.layer} outside [0, {self.sa_depth})")

    @property
    def grid(self) -> int:
        return math.isqrt(self.patch_count)

    @property
    def image_size(self) -> int:
        return self.grid * self.patch_size

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    @property
    def name(self) -> str:
        return f"{self.sa_depth}+{self.ca_depth}"

    def replace(self, **changes) -> "CaitConfig":
        return dataclasses.replace(self, **changes)

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out.append((f.name, policy_to_str(v) if f.name == "cls_policy" else repr(v)))
        return out

    @classmethod
    def from_items(cls, items) -> "CaitConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in dict(items).items():
            if k not in types:
                continue
            if k == "cls_policy":
                kw[k] = policy_from_str(v)
            elif v in ("True", "False"):
                kw[k] = v == "True"
            elif types[k] in ("int", int):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


# ---------------------------------------------------------------- presets

# name: (depth, width, heads, epsilon, drop rate)
_FULL_PRESETS = {
    "XXS-24": (24, 192, 4, 1e-5, 0.05),
    "XXS-36": (36, 192, 4, 1e-6, 0.1),
    "XS-24": (24, 288, 6, 1e-5, 0.05),
    "XS-36": (36, 288, 6, 1e-6, 0.1),
    "S-24": (24, 384, 8, 1e-5, 0.1),
    "S-36": (36, 384, 8, 1e-6, 0.2),
    "S-48": (48, 384, 8, 1e-6, 0.3),
    "M-24": (24, 768, 16, 1e-5, 0.2),
    "M-36": (36, 768, 16, 1e-6, 0.3),
    "M-48": (48, 768, 16, 1e-6, 0.4),
}
FULL_PRESETS = tuple(_FULL_PRESETS)

# desk-scale models on 64x64 single-channel images: 16 patches of 16x16
_TOY = dict(dim=64, heads=4, patch_count=16, in_chans=1, num_classes=2)
TOY_PRESETS = ("toy-12", "toy-24", "toy-36", "s36-like")


def _canonical(name: str) -> str:
    key = name.strip().upper().replace("_", "-")
    if key.startswith("CAIT-"):
        key = key[5:]
    for preset in _FULL_PRESETS:
        if key == preset or key == preset.replace("-", ""):
            return preset
    return name.strip().lower()


def model_presets(name: str) -> CaitConfig:
    """Configuration for a named model (full-size families or desk-scale toys)."""
    key = _canonical(name)
    if key in _FULL_PRESETS:
        depth, dim, heads, eps, dr = _FULL_PRESETS[key]
        return CaitConfig(sa_depth=depth, ca_depth=2, dim=dim, heads=heads, epsilon=eps, drop_rate=dr)
    if key in ("toy-12", "toy-24", "toy-36"):
        return toy_config(int(key.split("-")[1]))
    if key == "s36-like":
        _, _, _, eps, dr = _FULL_PRESETS["S-36"]
        return CaitConfig(sa_depth=36, ca_depth=2, epsilon=eps, drop_rate=dr, **_TOY)
    known = ", ".join(FULL_PRESETS + TOY_PRESETS)
    raise ConfigError(f"unknown preset {name!r}; known presets: {known}")


def toy_config(depth: int, ca_depth: int = 2) -> CaitConfig:
    """Desk-scale model with ``depth`` SA blocks and depth-default epsilon and drop rate."""
    from .blocks import default_drop_rate, default_epsilon

    return CaitConfig(sa_depth=depth, ca_depth=ca_depth, epsilon=default_epsilon(depth),
                      drop_rate=default_drop_rate(depth), **_TOY)


def deit_layout(sa_depth: int = 12, ca_depth: int = 0, dim: int = 384, heads: int = 6,
                cls_policy: Optional[ClsPolicy] = None) -> CaitConfig:
    """DeiT-Small style layout (6 heads, no talking-heads) with an optional CA split."""
    if cls_policy is None:
        cls_policy = ClassAttentionStage() if ca_depth else InsertAtLayer(0)
    return CaitConfig(sa_depth=sa_depth, ca_depth=ca_depth, dim=dim, heads=heads,
                      cls_policy=cls_policy, talking_heads=False)


# ---------------------------------------------------------------- records


@dataclass
class AttentionRecord:
    """Softmax weights of one attention layer: [h, q, keys] or [B, h, q, keys]."""

    layer_index: int
    stage: str
    weights: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=-1)

    def patch_maps(self, grid: int, keys_include_class: bool = True) -> np.ndarray:
        """Class-token attention over patches reshaped to [..., h, grid, grid].

        Only valid for CA records (single query). The class key, when present,
        is dropped, so maps do not sum to one in that case.
        """
        w = self.weights[..., 0, :]
        if keys_include_class:
            w = w[..., 1:]
        return w.reshape(w.shape[:-1] + (grid, grid))


# ---------------------------------------------------------------- model


@dataclass
class CaitModel:
    config: CaitConfig
    strategy: ResidualStrategy
    params: dict
    blocks: list
    ca_blocks: list
    frozen: set = field(default_factory=set)

    def named_parameters(self):
        return list(self.params.items())

    def trainable(self) -> dict:
        return {n: t for n, t in self.params.items() if n not in self.frozen}

    def num_parameters(self, trainable_only: bool = True) -> int:
        src = self.trainable() if trainable_only else self.params
        return int(np.sum([t.size for t in src.values()]))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict:
        return {n: t.data for n, t in self.params.items()}


def _block_params(prefix: str, blk: Block) -> dict:
    out = {
        f"{prefix}.norm1.gamma": blk.norm1_g,
        f"{prefix}.norm1.beta": blk.norm1_b,
    }
    a = blk.attn
    for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        out[f"{prefix}.attn.{n}"] = getattr(a, n)
    if a.talk_pre is not None:
        out[f"{prefix}.attn.talk_pre"] = a.talk_pre
        out[f"{prefix}.attn.talk_post"] = a.talk_post
    out[f"{prefix}.norm2.gamma"] = blk.norm2_g
    out[f"{prefix}.norm2.beta"] = blk.norm2_b
    for n in ("w1", "b1", "w2", "b2"):
        out[f"{prefix}.ffn.{n}"] = getattr(blk.ffn, n)
    if blk.scale1 is not None:
        out[f"{prefix}.scale1"] = blk.scale1
        out[f"{prefix}.scale2"] = blk.scale2
    return out


def is_scale_param(name: str) -> bool:
    return name.endswith((".scale1", ".scale2"))


def build_model(config: CaitConfig, strategy: Optional[ResidualStrategy] = None, seed=0) -> CaitModel:
    """Randomly initialized model; ``seed`` may be an int or a Generator.

    The default strategy is LayerScale with ``config.epsilon``.
    """
    if strategy is None:
        strategy = LayerScale(Constant(config.epsilon))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    d = config.dim
    n_blocks = config.sa_depth + config.ca_depth

    def p(arr):
        return Tensor(arr, requires_grad=True)

    params = {
        "patch_embed.weight": p(trunc_normal(rng, (config.patch_dim, d))),
        "patch_embed.bias": p(np.zeros(d)),
        "pos_embed": p(trunc_normal(rng, (config.patch_count, d))),
    }
    if not isinstance(config.cls_policy, AveragePooling):
        params["cls_token"] = p(trunc_normal(rng, (1, d)))
    blocks, ca_blocks = [], []
    for i in range(config.sa_depth):
        blk = init_block(rng, "SA", d, config.heads, strategy, n_blocks, config.talking_heads, config.mlp_ratio)
        blocks.append(blk)
        params.update(_block_params(f"blocks.{i}", blk))
    for j in range(config.ca_depth):
        blk = init_block(rng, "CA", d, config.heads, strategy, n_blocks, False, config.mlp_ratio,
                         with_scales=config.layerscale_in_ca)
        ca_blocks.append(blk)
        params.update(_block_params(f"ca_blocks.{j}", blk))
    params["norm.gamma"] = p(np.ones(d))
    params["norm.beta"] = p(np.zeros(d))
    params["head.weight"] = p(trunc_normal(rng, (d, config.num_classes)))
    params["head.bias"] = p(np.zeros(config.num_classes))

    frozen = set()
    if isinstance(strategy, LayerScale) and isinstance(strategy.init, Fixed):
        weights = strategy.init.weights
        for name, t in params.items():
            if not is_scale_param(name):
                continue
            if name not in weights:
                raise ConfigError(f"fixed LayerScale weights lack {name!r}")
            src = np.asarray(weights[name], dtype=np.float64)
            if src.shape != t.shape:
                raise ConfigError(f"fixed weights {name!r} have shape {src.shape}, expected {t.shape}")
            t.data[...] = src
            t.requires_grad = False
            frozen.add(name)
    for name, t in params.items():
        t.name = name
    return CaitModel(config, strategy, params, blocks, ca_blocks, frozen)


def patch_embed(model: CaitModel, patches: Tensor) -> Tensor:
    x = T.add(T.matmul(patches, model.params["patch_embed.weight"]), model.params["patch_embed.bias"])
    return T.add(x, model.params["pos_embed"])


def _class_tokens(model: CaitModel, batch: int) -> Tensor:
    cls = T.reshape(model.params["cls_token"], (1, 1, model.config.dim))
    return cls if batch == 1 else T.concat([cls] * batch, axis=0)


def forward(model: CaitModel, image_patches: Tensor, training: bool = False,
            rng: Optional[np.random.Generator] = None, probe: Optional[list] = None,
            trace: Optional[dict] = None):
    """Logits and per-layer attention records for patchified images.

    ``image_patches`` is [p, patch_dim] (one image, logits [C]) or
    [B, p, patch_dim] (logits [B, C]). In training mode stochastic depth draws
    from ``rng``. ``probe`` collects SA-stage branch ratios; ``trace`` receives
    copies of the patch embeddings entering and leaving the class stage.
    """
    cfg = model.config
    x = image_patches
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1:] != (cfg.patch_count, cfg.patch_dim):
        raise ConfigError(f"expected patches of shape [*, {cfg.patch_count}, {cfg.patch_dim}], got {image_patches.shape}")
    B = x.shape[0]
    schedule = StochasticDepth(cfg.drop_rate)
    if training and cfg.drop_rate > 0 and rng is None:
        raise ConfigError("training with stochastic depth needs an rng")

    def gates():
        if not training or cfg.drop_rate == 0:
            return (None, None)
        return (stochastic_depth_gate(schedule, rng, True, B), stochastic_depth_gate(schedule, rng, True, B))

    strategy = model.strategy
    records = []
    x = patch_embed(model, x)
    policy = cfg.cls_policy
    for i, blk in enumerate(model.blocks):
        if isinstance(policy, InsertAtLayer) and i == policy.layer:
            x = T.concat([_class_tokens(model, B), x], axis=1)
        x, w = sa_block_forward(blk, x, strategy, gates(), cfg.talking_heads, probe, i)
        records.append(AttentionRecord(i, "SA", w[0] if single else w))

    if isinstance(policy, ClassAttentionStage):
        if trace is not None:
            trace["sa_out"] = x.data.copy()
        cls = _class_tokens(model, B)
        ca_strategy = strategy if cfg.layerscale_in_ca else PreNormBaseline()
        for j, blk in enumerate(model.ca_blocks):
            cls, w = ca_block_forward(blk, cls, x, ca_strategy, cfg.keys_include_class, gates())
            records.append(AttentionRecord(j, "CA", w[0] if single else w))
        if trace is not None:
            trace["ca_patches"] = x.data.copy()
        feat = cls
    elif isinstance(policy, InsertAtLayer):
        feat = T.narrow(x, 1, 0, 1)
    else:
        feat = T.mean(x, axis=1, keepdims=True)
    feat = T.layer_norm(feat, model.params["norm.gamma"], model.params["norm.beta"])
    feat = T.reshape(feat, (B, cfg.dim))
    logits = T.add(T.matmul(feat, model.params["head.weight"]), model.params["head.bias"])
    if single:
        logits = T.reshape(logits, (cfg.num_classes,))
    return logits, records


def patchify(images: np.ndarray, patch_size: int = 16) -> np.ndarray:
    """[B, C, H, W] (or [C, H, W]) images to [B, p, patch_size * patch_size * C] patches.

    Patches are ordered row-major over the grid and flattened as (py, px, c).
    """
    single = images.ndim == 3
    if single:
        images = images[None]
    B, C, H, W = images.shape
    if H % patch_size or W % patch_size:
        raise ConfigError(f"image size {H}x{W} is not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    x = images.reshape(B, C, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 3, 5, 1).reshape(B, gh * gw, patch_size * patch_size * C)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x[0] if single else x


def fold_layerscale(model: CaitModel) -> CaitModel:
    """Equivalent baseline model with branch weights folded into output projections.

    Each diagonal (or scalar) multiplies the columns and bias of the last
    linear map of its branch, after which the branch needs no extra weighting.
    """
    import copy

    folded = copy.deepcopy(model)
    for blk in folded.blocks + folded.ca_blocks:
        for scale, w, b in ((blk.scale1, blk.attn.wo, blk.attn.bo), (blk.scale2, blk.ffn.w2, blk.ffn.b2)):
            if scale is None:
                continue
            s = scale.data if scale.size > 1 else scale.data[0]
            w.data[...] = w.data * s
            b.data[...] = b.data * s
        blk.scale1 = blk.scale2 = None
    folded.params = {n: t for n, t in folded.params.items() if not is_scale_param(n)}
    folded.frozen = set()
    folded.strategy = PreNormBaseline()
    return folded


def strategy_param_kind(strategy: ResidualStrategy) -> str:
    if isinstance(strategy, LayerScale):
        return "layerscale"
    if isinstance(strategy, SCALAR_STRATEGIES):
        return "scalar"
    return "none"
