"""Image-plane spatial decoder.

``state_project`` runs a second state-space scan over the compensated maps
and adds a per-view dynamic bias; ``build_cost_volume`` lifts the state to the
voxels by sampling it at their projections and merges it with the plain
back-projected features through MLP_D.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, GridSpec, project_points
from .layers import Linear, Mlp, linear, mlp
from .ssm import SsmParams, init_ssm, plane_scan
from .tensor import (DimensionError, Tensor, as_tensor, bilinear_sample, concat, matmul,
                     reshape, transpose)

__all__ = ["IpsdParams", "CostVolume", "init_ipsd", "state_project", "build_cost_volume"]


@dataclass
class IpsdParams:
    proj: Tensor      # [2C, C_s], no bias: the additive term is the dynamic bias
    ssm_a: SsmParams  # C_s -> C_s
    bias_net: Linear  # pooled CR [2C] -> [C_s]
    mlp_d: Mlp        # [C_s + C] -> C, with a linear skip

    @property
    def state_channels(self) -> int:
        return self.proj.shape[1]


@dataclass
class CostVolume:
    features: Tensor   # [N, C_v]; rows of invalid voxels are zero
    valid: np.ndarray  # [N] bool
    depth: np.ndarray  # [N] camera-frame depth of each voxel centre
    level: str = ""


def init_ipsd(rng: np.random.Generator, channels: int, state_channels: int | None = None,
              state_size: int = 16) -> IpsdParams:
    cs = state_channels or channels
    return IpsdParams(
        proj=Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * channels), (2 * channels, cs)), requires_grad=True),
        ssm_a=init_ssm(rng, cs, cs, state_size),
        bias_net=linear(rng, 2 * channels, cs),
        mlp_d=mlp(rng, cs + channels, 2 * channels, channels, skip=True),
    )


def state_project(params: IpsdParams, cr) -> Tensor:
    """State = scan(F_project(CR)) + B(CR) for [2C, H, W] or [B, 2C, H, W] input."""
    cr = as_tensor(cr)
    single = cr.ndim == 3
    if single:
        cr = reshape(cr, (1,) + cr.shape)
    b, c2, h, w = cr.shape
    if c2 != params.proj.shape[0]:
        raise DimensionError(f"state_project expects {params.proj.shape[0]} channels, got {c2}")
    cs = params.state_channels
    x = transpose(matmul(transpose(cr, (0, 2, 3, 1)), params.proj), (0, 3, 1, 2))   # [B, C_s, H, W]
    scanned = plane_scan(params.ssm_a, x)
    pooled = cr.mean(axis=(2, 3))                                                   # [B, 2C]
    bias = reshape(params.bias_net(pooled), (b, cs, 1, 1))
    out = scanned + bias
    return reshape(out, out.shape[1:]) if single else out


def build_cost_volume(params: IpsdParams, state, f_bp, cam: CameraModel, grid: GridSpec,
                      coords: np.ndarray | None = None, level: str = "") -> CostVolume:
    """Per-voxel TCV = MLP_D[sample(state), F_BP]; ``f_bp`` is ``(features [N, C], valid [N])``.

    ``coords`` picks the voxel subset (default: the whole grid) and must be the
    one ``f_bp`` was computed on.
    """
    state = as_tensor(state)
    feats, valid = f_bp
    feats = as_tensor(feats)
    valid = np.asarray(valid, dtype=bool)
    pts = grid.centers(coords)
    if feats.shape[0] != len(pts) or valid.shape != (len(pts),):
        raise ValueError(f"back-projected features cover {feats.shape[0]} voxels, grid selection has {len(pts)}")
    if state.ndim != 3 or state.shape[0] != params.state_channels:
        raise DimensionError(f"state must be [{params.state_channels}, H, W], got {state.shape}")
    if feats.shape[1] + params.state_channels != params.mlp_d.fc1.in_features:
        raise DimensionError("back-projected feature width does not match MLP_D")
    ncoords, z, in_view = project_points(pts, cam)
    valid = valid & in_view
    mask = Tensor(valid[:, None].astype(np.float64))
    spatial = transpose(bilinear_sample(state, Tensor(ncoords)))                      # [N, C_s]
    tcv = params.mlp_d(concat([spatial * mask, feats * mask], axis=1)) * mask
    return CostVolume(tcv, valid, np.where(valid, z, 0.0), level)
