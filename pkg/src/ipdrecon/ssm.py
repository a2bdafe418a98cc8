"""State-space kernel shared by the confidence encoder and the spatial decoder.

Each input channel c owns an M-dimensional state driven by the shared
continuous matrix ``u`` and its own step ``d_c``::

    h^c_t = exp(d_c u) h^c_{t-1} + w_hat_c x_{t,c}
    y_t   = readoutᵀ Σ_c h^c_t

Images are serialized in raster order and scanned in both directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (DimensionError, NumericError, Tensor, as_tensor, concat,
                     channel_scan, matexp, matmul, reshape, softplus, transpose)

__all__ = ["SsmParams", "DiscretizedSsm", "hippo_init", "init_ssm", "discretize", "plane_scan"]


def hippo_init(m: int) -> np.ndarray:
    """HiPPO-LegS state matrix of size ``m``."""
    if m < 1:
        raise ValueError("state size must be >= 1")
    n = np.arange(m)
    r = np.sqrt(2 * n + 1)
    a = -np.tril(np.outer(r, r), -1)
    a[n, n] = -(n + 1.0)
    return a


def _inv_softplus(d):
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("step sizes must be positive")
    return np.where(d > 20, d, np.log(np.expm1(np.minimum(d, 20))))


@dataclass
class SsmParams:
    u: Tensor        # [M, M]
    w: Tensor        # [C, M]
    d_raw: Tensor    # [C]; the step is softplus(d_raw)
    readout: Tensor  # [M, C_out]

    @classmethod
    def from_values(cls, u, w, d, readout, requires_grad: bool = False) -> "SsmParams":
        u = np.asarray(u, dtype=np.float64)
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (w.shape[0],))
        return cls(Tensor(u, requires_grad), Tensor(w, requires_grad),
                   Tensor(_inv_softplus(d), requires_grad),
                   Tensor(np.asarray(readout, dtype=np.float64), requires_grad))

    @property
    def state_size(self) -> int:
        return self.u.shape[0]

    @property
    def in_channels(self) -> int:
        return self.w.shape[0]

    @property
    def out_channels(self) -> int:
        return self.readout.shape[1]

    def step(self) -> Tensor:
        return softplus(self.d_raw)


@dataclass
class DiscretizedSsm:
    q_hat: Tensor  # [C, M, M]
    w_hat: Tensor  # [C, M]


def init_ssm(rng: np.random.Generator, c_in: int, c_out: int, m: int = 16, d0: float = 0.1) -> SsmParams:
    return SsmParams(
        u=Tensor(hippo_init(m), requires_grad=True),
        w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), (c_in, m)), requires_grad=True),
        d_raw=Tensor(np.full(c_in, _inv_softplus(d0)), requires_grad=True),
        readout=Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), (m, c_out)), requires_grad=True),
    )


def discretize(p: SsmParams) -> DiscretizedSsm:
    """Zero-order hold via one augmented exponential per channel.

    ``expm([[d u, d w_c], [0, 0]]) = [[e^{du}, (e^{du} - I) u⁻¹ w_c], [0, 1]]``
    holds for singular ``u`` too, so no inverse is formed.
    """
    for t in (p.u, p.w, p.d_raw):
        if not np.all(np.isfinite(t.data)):
            raise NumericError("non-finite SSM parameters")
    m = p.state_size
    c = p.in_channels
    d = p.step()
    du = reshape(d, (c, 1, 1)) * reshape(p.u, (1, m, m))
    dw = reshape(reshape(d, (c, 1)) * p.w, (c, m, 1))
    top = concat([du, dw], axis=2)
    aug = concat([top, Tensor(np.zeros((c, 1, m + 1)))], axis=1)
    e = matexp(aug)
    return DiscretizedSsm(q_hat=e[:, :m, :m], w_hat=e[:, :m, m])


def plane_scan(p: SsmParams, feat, direction: str = "both", disc: DiscretizedSsm | None = None) -> Tensor:
    """Scan feature maps [C, H, W] (or [B, C, H, W]) -> [C_out, H, W] (or batched).

    ``direction`` is ``"both"`` (mean of the two raster directions),
    ``"forward"`` or ``"reverse"``.
    """
    feat = as_tensor(feat)
    single = feat.ndim == 3
    if single:
        feat = reshape(feat, (1,) + feat.shape)
    b, c, h, w = feat.shape
    if c != p.in_channels:
        raise DimensionError(f"scan expects {p.in_channels} channels, got {c}")
    disc = disc or discretize(p)
    t = h * w
    x = transpose(reshape(feat, (b, c, t)), (2, 1, 0))                # [T, C, B]
    s = channel_scan(disc.q_hat, disc.w_hat, x, direction)             # [T, M, B]
    y = matmul(transpose(p.readout), s)                                # [T, C_out, B]
    out = reshape(transpose(y, (2, 1, 0)), (b, p.out_channels, h, w))
    return reshape(out, out.shape[1:]) if single else out
