"""Patch-token attention encoder and EMA aggregation of per-layer attention."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .params import ModelState, init_linear
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for inconsistent model or pipeline configuration."""


@dataclass
class BackboneConfig:
    image_side: int = 16
    patch_side: int = 4
    in_channels: int = 1
    embed_dim: int = 32
    heads: int = 4
    layers: int = 6
    mlp_ratio: int = 4
    feature_dim: int = 32
    num_classes: int = 4
    # 1-based index of the first layer entering the EMA; None means layers // 2 + 1
    attn_agg_start: Optional[int] = None
    ema_lambda: float = 0.99
    # weight the previous accumulator by lambda instead of the current layer
    ema_swap: bool = False

    def __post_init__(self):
        self.validate()

    @property
    def agg_start(self) -> int:
        return self.attn_agg_start if self.attn_agg_start is not None else self.layers // 2 + 1

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def validate(self) -> None:
        if self.image_side % self.patch_side:
            raise ConfigError(f"image_side {self.image_side} not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 1 <= self.agg_start <= self.layers:
            raise ConfigError(f"attn_agg_start {self.agg_start} outside [1, {self.layers}]")
        if not 0.0 <= self.ema_lambda <= 1.0:
            raise ConfigError(f"ema_lambda {self.ema_lambda} outside [0, 1]")

    @classmethod
    def vit_b16(cls, num_classes: int = 65) -> "BackboneConfig":
        """ViT-B/16 on 224x224 RGB with a 256-d feature head."""
        return cls(image_side=224, patch_side=16, in_channels=3, embed_dim=768, heads=12, layers=12,
                   mlp_ratio=4, feature_dim=256, num_classes=num_classes, attn_agg_start=5)


@dataclass
class ForwardOutputs:
    """Batched forward results; every tensor has the batch on axis 0."""

    layer_feats: List[Tensor]
    global_attn: Tensor
    f_t: Tensor
    z_t: Tensor
    f_a: Optional[Tensor] = None
    z_a: Optional[Tensor] = None
    attn_weights: List[Tensor] = field(default_factory=list)


def param_shapes(cfg: BackboneConfig) -> dict:
    """Shapes of every feature-extractor and classifier parameter."""
    D, H, P = cfg.embed_dim, cfg.mlp_hidden, cfg.patch_side * cfg.patch_side * cfg.in_channels
    shapes = {
        "backbone.patch.w": (P, D),
        "backbone.patch.b": (D,),
        "backbone.cls": (1, 1, D),
        "backbone.pos": (1, cfg.tokens, D),
    }
    for i in range(cfg.layers):
        p = f"backbone.blocks.{i}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "q.w": (D, D), p + "q.b": (D,),
            p + "k.w": (D, D), p + "k.b": (D,),
            p + "v.w": (D, D), p + "v.b": (D,),
            p + "proj.w": (D, D), p + "proj.b": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "fc1.w": (D, H), p + "fc1.b": (H,),
            p + "fc2.w": (H, D), p + "fc2.b": (D,),
        })
    shapes.update({
        "backbone.norm.g": (D,),
        "backbone.norm.b": (D,),
        "head.w": (D, cfg.feature_dim),
        "head.b": (cfg.feature_dim,),
        "classifier.w": (cfg.feature_dim, cfg.num_classes),
        "classifier.b": (cfg.num_classes,),
    })
    return shapes


def init_params(model: ModelState, cfg: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> None:
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("backbone.cls", "backbone.pos"):
            value = (0.02 * rng.standard_normal(shape)).astype(dtype)
        elif leaf == "g":
            value = np.ones(shape, dtype=dtype)
        elif leaf == "w":
            value, _ = init_linear(rng, shape[0], shape[1], dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        model.add(name, value)


def patchify(images: Tensor, patch_side: int) -> Tensor:
    """(B, C, H, W) -> (B, N, C*p*p), patches in row-major order."""
    B, C, H, W = images.shape
    g = H // patch_side
    x = images.reshape(B, C, g, patch_side, g, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * patch_side * patch_side)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return x.reshape(B, N, heads, D // heads).transpose(0, 2, 1, 3)


def mhsa_layer(tokens: Tensor, model: ModelState, prefix: str, heads: int):
    """One pre-norm transformer block.

    Returns ``(tokens_out, attn_feat, weights)`` where ``attn_feat`` is the
    projected multi-head self-attention output before the residual add and
    the MLP, and ``weights`` is the (B, heads, N+1, N+1) attention matrix.
    """
    B, N, D = tokens.shape
    p = lambda s: model[prefix + s]  # noqa: E731
    x = T.layer_norm(tokens, p("ln1.g"), p("ln1.b"))
    q = _split_heads(T.linear(x, p("q.w"), p("q.b")), heads)
    k = _split_heads(T.linear(x, p("k.w"), p("k.b")), heads)
    v = _split_heads(T.linear(x, p("v.w"), p("v.b")), heads)
    scale = 1.0 / np.sqrt(D // heads)
    weights = T.softmax(T.mul(T.matmul(q, T.swap_last(k)), scale), axis=-1)
    sa = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, N, D)
    attn_feat = T.linear(sa, p("proj.w"), p("proj.b"))
    tokens = tokens + attn_feat
    h = T.relu(T.linear(T.layer_norm(tokens, p("ln2.g"), p("ln2.b")), p("fc1.w"), p("fc1.b")))
    tokens = tokens + T.linear(h, p("fc2.w"), p("fc2.b"))
    return tokens, attn_feat, weights


def ema_aggregate(layer_feats: List[Tensor], l_start: int, lam: float, swap: bool = False) -> Tensor:
    """EMA over layers ``l_start..L`` (1-based), weighting the current layer by ``lam``.

    With ``swap=True`` the accumulator keeps weight ``lam`` instead.
    """
    L = len(layer_feats)
    if not 1 <= l_start <= L:
        raise ConfigError(f"empty aggregation window: l_start={l_start}, L={L}")
    cur_w, acc_w = (1.0 - lam, lam) if swap else (lam, 1.0 - lam)
    acc = layer_feats[l_start - 1]
    for layer in layer_feats[l_start:]:
        acc = T.add(T.mul(layer, cur_w), T.mul(acc, acc_w))
    return acc


def encode(images: Tensor, model: ModelState, cfg: BackboneConfig) -> ForwardOutputs:
    """Backbone half of the forward pass (no ADM)."""
    if images.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.image_side, cfg.image_side):
        raise T.DimensionError(
            f"expected images of shape (B, {cfg.in_channels}, {cfg.image_side}, {cfg.image_side}), got {images.shape}")
    B = images.shape[0]
    x = T.linear(patchify(images, cfg.patch_side), model["backbone.patch.w"], model["backbone.patch.b"])
    cls = T.add(Tensor(np.zeros((B, 1, cfg.embed_dim), dtype=x.dtype)), model["backbone.cls"])
    x = T.add(T.concatenate([cls, x], axis=1), model["backbone.pos"])
    feats, weights = [], []
    for i in range(cfg.layers):
        x, attn_feat, w = mhsa_layer(x, model, f"backbone.blocks.{i}.", cfg.heads)
        feats.append(attn_feat)
        weights.append(w)
    x = T.layer_norm(x, model["backbone.norm.g"], model["backbone.norm.b"])
    f_t = T.linear(x[:, 0, :], model["head.w"], model["head.b"])
    z_t = T.linear(f_t, model["classifier.w"], model["classifier.b"])
    global_attn = ema_aggregate(feats, cfg.agg_start, cfg.ema_lambda, cfg.ema_swap)
    return ForwardOutputs(layer_feats=feats, global_attn=global_attn, f_t=f_t, z_t=z_t, attn_weights=weights)


def count_params_closed_form(cfg: BackboneConfig) -> int:
    """Hand formula for the feature extractor + classifier size."""
    D, H, L, F, C = cfg.embed_dim, cfg.mlp_hidden, cfg.layers, cfg.feature_dim, cfg.num_classes
    P = cfg.patch_side ** 2 * cfg.in_channels
    per_block = 4 * D + 4 * (D * D + D) + (D * H + H) + (H * D + D)
    return (P * D + D) + D + cfg.tokens * D + L * per_block + 2 * D + (D * F + F) + (F * C + C)
