"""Full network: backbone, feature head, classifier and ADM."""
from __future__ import annotations

import dataclasses

import numpy as np

from . import adm as adm_mod
from . import backbone as bb
from .adm import AdmConfig
from .backbone import BackboneConfig, ConfigError, ForwardOutputs
from .params import ADM_PREFIXES, ModelState
from .tensor import Tensor


def matched_adm_config(bcfg: BackboneConfig, acfg: AdmConfig) -> AdmConfig:
    """Copy of ``acfg`` with input width/side and head sizes tied to the backbone."""
    side = bcfg.image_side // bcfg.patch_side
    channels = (bcfg.embed_dim,) + tuple(acfg.channels[1:])
    return dataclasses.replace(acfg, channels=channels, input_side=side,
                               feature_dim=bcfg.feature_dim, num_classes=bcfg.num_classes)


def build_model(bcfg: BackboneConfig, acfg: AdmConfig, seed: int = 0, dtype=np.float32) -> ModelState:
    """Initialize every parameter from one seeded generator."""
    if acfg.channels[0] != bcfg.embed_dim or acfg.input_side ** 2 != bcfg.num_patches:
        raise ConfigError(
            f"ADM input {acfg.channels[0]}x{acfg.input_side}x{acfg.input_side} does not match backbone "
            f"tokens ({bcfg.embed_dim} wide, {bcfg.num_patches} patches)")
    if acfg.feature_dim != bcfg.feature_dim or acfg.num_classes != bcfg.num_classes:
        raise ConfigError("ADM feature_dim/num_classes must match the backbone")
    rng = np.random.default_rng(seed)
    model = ModelState(backbone_cfg=bcfg, adm_cfg=acfg)
    bb.init_params(model, bcfg, rng, dtype)
    adm_mod.init_params(model, acfg, rng, dtype)
    return model


def forward(images, model: ModelState, mode: str = "train", with_adm: bool = True,
            detach_adm_input: bool = False) -> ForwardOutputs:
    """Run the backbone, then the ADM on the reshaped global attention map.

    ``mode`` selects batch-norm statistics in the ADM (the backbone has no
    batch-dependent layers). ``detach_adm_input`` cuts the gradient path from
    the ADM back into the backbone.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    out = bb.encode(images, model, model.backbone_cfg)
    if with_adm:
        x_a = out.global_attn.detach() if detach_adm_input else out.global_attn
        fmap = adm_mod.reshape_attention(x_a)
        out.f_a, out.z_a = adm_mod.adm_forward(fmap, model, model.adm_cfg, training=(mode == "train"))
    return out


def backbone_param_count(model: ModelState) -> int:
    return model.num_params() - model.num_params(ADM_PREFIXES)


def adm_param_count(model: ModelState) -> int:
    return model.num_params(ADM_PREFIXES)


def overhead_ratio(bcfg: BackboneConfig, acfg: AdmConfig) -> float:
    """(backbone + ADM) / backbone parameter ratio from shapes alone."""
    base = sum(int(np.prod(s)) for s in bb.param_shapes(bcfg).values())
    extra = sum(int(np.prod(s)) for s in adm_mod.param_shapes(acfg).values())
    return (base + extra) / base
