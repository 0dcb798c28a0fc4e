"""Assistant Domain Module: a conv head over the reshaped global attention map."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .params import ModelState, init_conv, init_linear
from .tensor import Tensor


@dataclass
class AdmConfig:
    """Conv plan and head sizes.

    ``channels`` lists the input width followed by one output width per conv.
    When the last conv width differs from ``feature_dim`` a linear projection
    maps the pooled vector to ``feature_dim``.
    """

    channels: Tuple[int, ...] = (32, 12, 12, 12)
    kernels: Tuple[int, ...] = (3, 3, 3)
    strides: Tuple[int, ...] = (1, 1, 2)
    paddings: Tuple[int, ...] = (1, 1, 1)
    input_side: int = 4
    head_hidden: int = 16
    feature_dim: int = 32
    num_classes: int = 4
    squared_feature_loss: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.strides = tuple(int(s) for s in self.strides)
        self.paddings = tuple(int(p) for p in self.paddings)
        self.validate()

    @property
    def num_convs(self) -> int:
        return len(self.channels) - 1

    def spatial_sizes(self) -> list:
        sizes = [self.input_side]
        for k, s, p in zip(self.kernels, self.strides, self.paddings):
            sizes.append(T.conv_output_size(sizes[-1], k, s, p))
        return sizes

    @property
    def pooled_dim(self) -> int:
        return self.channels[-1]

    @property
    def needs_projection(self) -> bool:
        return self.pooled_dim != self.feature_dim

    def validate(self) -> None:
        n = self.num_convs
        if n < 1 or not (len(self.kernels) == len(self.strides) == len(self.paddings) == n):
            raise ConfigError("ADM conv plan lists must all have one entry per conv")
        if min(self.spatial_sizes()) < 1:
            raise ConfigError(f"ADM conv plan collapses {self.input_side}x{self.input_side} below 1x1: "
                              f"{self.spatial_sizes()}")

    @classmethod
    def vit_b16(cls, num_classes: int = 65) -> "AdmConfig":
        """Channel and stride plan of the ViT-B variant (768x14x14 input)."""
        return cls(channels=(768, 512, 256, 256), kernels=(3, 3, 3), strides=(2, 1, 1), paddings=(0, 0, 0),
                   input_side=14, head_hidden=256, feature_dim=256, num_classes=num_classes)


def param_shapes(cfg: AdmConfig) -> dict:
    shapes = {}
    for i in range(cfg.num_convs):
        cin, cout, k = cfg.channels[i], cfg.channels[i + 1], cfg.kernels[i]
        shapes[f"adm.conv{i}.w"] = (cout, cin, k, k)
        shapes[f"adm.bn{i}.g"] = (cout,)
        shapes[f"adm.bn{i}.b"] = (cout,)
    if cfg.needs_projection:
        shapes["adm.proj.w"] = (cfg.pooled_dim, cfg.feature_dim)
        shapes["adm.proj.b"] = (cfg.feature_dim,)
    shapes["adm.fc1.w"] = (cfg.feature_dim, cfg.head_hidden)
    shapes["adm.fc1.b"] = (cfg.head_hidden,)
    shapes["adm.fc2.w"] = (cfg.head_hidden, cfg.num_classes)
    shapes["adm.fc2.b"] = (cfg.num_classes,)
    return shapes


def init_params(model: ModelState, cfg: AdmConfig, rng: np.random.Generator, dtype=np.float32) -> None:
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("adm.conv"):
            value = init_conv(rng, shape[1], shape[0], shape[2], dtype)
        elif name.startswith("adm.bn"):
            value = np.ones(shape, dtype=dtype) if leaf == "g" else np.zeros(shape, dtype=dtype)
        elif leaf == "w":
            value, _ = init_linear(rng, shape[0], shape[1], dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        model.add(name, value)
    for i in range(cfg.num_convs):
        c = cfg.channels[i + 1]
        model.add_buffer(f"adm.bn{i}.mean", np.zeros(c, dtype=dtype))
        model.add_buffer(f"adm.bn{i}.var", np.ones(c, dtype=dtype))


def count_params_closed_form(cfg: AdmConfig) -> int:
    convs = sum(cfg.channels[i] * cfg.channels[i + 1] * cfg.kernels[i] ** 2 + 2 * cfg.channels[i + 1]
                for i in range(cfg.num_convs))
    proj = cfg.pooled_dim * cfg.feature_dim + cfg.feature_dim if cfg.needs_projection else 0
    head = cfg.feature_dim * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * cfg.num_classes + cfg.num_classes
    return convs + proj + head


def reshape_attention(global_attn: Tensor) -> Tensor:
    """(B, N+1, D) -> (B, D, sqrt(N), sqrt(N)), dropping the CLS token.

    Token ``1 + r*side + c`` lands at spatial position (r, c).
    """
    B, N1, D = global_attn.shape
    side = math.isqrt(N1 - 1)
    if side * side != N1 - 1:
        raise ConfigError(f"cannot reshape {N1 - 1} patch tokens into a square map")
    patches = global_attn[:, 1:, :]
    return patches.transpose(0, 2, 1).reshape(B, D, side, side)


def adm_forward(fmap: Tensor, model: ModelState, cfg: AdmConfig, training: bool):
    """Conv stack and two-layer head. Returns ``(f_a, z_a)``."""
    if fmap.ndim != 4 or fmap.shape[1] != cfg.channels[0] or fmap.shape[2] != cfg.input_side:
        raise T.DimensionError(
            f"ADM expects (B, {cfg.channels[0]}, {cfg.input_side}, {cfg.input_side}), got {fmap.shape}")
    x = fmap
    last = cfg.num_convs - 1
    for i in range(cfg.num_convs):
        x = T.conv2d(x, model[f"adm.conv{i}.w"], stride=cfg.strides[i], padding=cfg.paddings[i])
        x = T.batch_norm(x, model[f"adm.bn{i}.g"], model[f"adm.bn{i}.b"],
                         model.buffers[f"adm.bn{i}.mean"], model.buffers[f"adm.bn{i}.var"], training)
        if i < last:
            x = T.relu(x)
    x = T.avg_pool2d(x)
    f_a = x.reshape(x.shape[0], cfg.pooled_dim)
    if cfg.needs_projection:
        f_a = T.linear(f_a, model["adm.proj.w"], model["adm.proj.b"])
    h = T.relu(T.linear(f_a, model["adm.fc1.w"], model["adm.fc1.b"]))
    z_a = T.linear(h, model["adm.fc2.w"], model["adm.fc2.b"])
    return f_a, z_a


def distill_loss(f_a: Tensor, f_s: Tensor, z_a: Tensor, z_s: Tensor, squared: bool = False) -> Tensor:
    """Batch mean of ``||f_a - f_s|| + KL(softmax(z_a) || softmax(z_s))``.

    ``f_s`` and ``z_s`` are the teacher (main branch) outputs and are detached.
    """
    f_s, z_s = f_s.detach(), z_s.detach()
    diff = T.sub(f_a, f_s)
    if squared:
        feat = T.tsum(T.mul(diff, diff), axis=-1)
    else:
        feat = T.l2_norm(diff, axis=-1)
    logp_a = T.log_softmax(z_a, axis=-1)
    p_a = T.exp(logp_a)
    logp_s = T.log_softmax(z_s, axis=-1)
    kl = T.tsum(T.mul(p_a, T.sub(logp_a, logp_s)), axis=-1)
    return T.mean(T.add(feat, kl))
