"""Pixel-level confidence encoder.

The light-cluster mapping of every pixel comes from a bidirectional state
space scan; a scalar sigmoid gate per pixel weights it before the encoder MLP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, Mlp, linear, mlp
from .ssm import SsmParams, init_ssm, plane_scan
from .tensor import DimensionError, Tensor, as_tensor, reshape, sigmoid, transpose

__all__ = ["PceParams", "PceOutput", "init_pce", "pce_forward", "confidence_mask"]


@dataclass
class PceParams:
    ssm: SsmParams
    mlp_e: Mlp
    conf_head: Linear


@dataclass
class PceOutput:
    encoded: Tensor     # [C, H, W] or [B, C, H, W]
    confidence: Tensor  # [1, H, W] or [B, 1, H, W]


def init_pce(rng: np.random.Generator, channels: int, state_size: int = 16) -> PceParams:
    return PceParams(
        ssm=init_ssm(rng, channels, channels, state_size),
        mlp_e=mlp(rng, channels, 2 * channels, channels),
        conf_head=linear(rng, channels, 1),
    )


def pce_forward(params: PceParams, feat) -> PceOutput:
    feat = as_tensor(feat)
    single = feat.ndim == 3
    if single:
        feat = reshape(feat, (1,) + feat.shape)
    c = params.mlp_e.fc1.in_features
    if feat.shape[1] != params.ssm.in_channels or params.ssm.out_channels != c:
        raise DimensionError(f"feature width {feat.shape[1]} does not match encoder width {c}")
    lmap = transpose(plane_scan(params.ssm, feat), (0, 2, 3, 1))       # [B, H, W, C]
    conf = sigmoid(params.conf_head(lmap))                              # [B, H, W, 1]
    encoded = transpose(params.mlp_e(conf * lmap), (0, 3, 1, 2))
    conf = transpose(conf, (0, 3, 1, 2))
    if single:
        return PceOutput(reshape(encoded, encoded.shape[1:]), reshape(conf, conf.shape[1:]))
    return PceOutput(encoded, conf)


def confidence_mask(out: PceOutput, tau: float) -> np.ndarray:
    """Pixels whose confidence is at least ``tau``; shape [H, W] (or [B, H, W])."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {tau}")
    conf = out.confidence.data
    return conf[..., 0, :, :] >= tau
