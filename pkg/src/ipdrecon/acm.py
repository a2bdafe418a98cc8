"""Affine compensation: warp the encoded map by a learnable 2x3 affine,
attenuate channels, and concatenate with the unwarped map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, bilinear_sample, concat, matmul, reshape

__all__ = ["AcmParams", "init_acm", "make_grid", "warp", "acm_forward",
           "affine_invariance_probe", "rotation90", "translation", "shear", "reflection"]


@dataclass
class AcmParams:
    A: Tensor    # [2, 3]
    b_c: Tensor  # [C]


def init_acm(channels: int) -> AcmParams:
    return AcmParams(Tensor(np.eye(2, 3), requires_grad=True),
                     Tensor(np.ones(channels), requires_grad=True))


def make_grid(h: int, w: int) -> np.ndarray:
    """Normalized pixel-centre grid [H, W, 2] holding (x, y); corners map to ±1."""
    if h < 1 or w < 1:
        raise ValueError("grid extents must be >= 1")
    xs = 2.0 * np.arange(w) / (w - 1) - 1.0 if w > 1 else np.zeros(1)
    ys = 2.0 * np.arange(h) / (h - 1) - 1.0 if h > 1 else np.zeros(1)
    g = np.empty((h, w, 2))
    g[..., 0] = xs[None, :]
    g[..., 1] = ys[:, None]
    return g


def warp(feat, A) -> Tensor:
    """Resample ``feat`` ([C,H,W] or [B,C,H,W]) at ``A · [x, y, 1]`` for every grid point."""
    feat, A = as_tensor(feat), as_tensor(A)
    shape = feat.shape
    h, w = shape[-2:]
    grid = make_grid(h, w).reshape(-1, 2)
    homog = Tensor(np.concatenate([grid, np.ones((h * w, 1))], axis=1))
    coords = matmul(homog, A.T)                                   # [HW, 2]
    flat = reshape(feat, (-1, h, w))
    out = bilinear_sample(flat, coords)                           # [B*C, HW]
    return reshape(out, shape)


def acm_forward(params: AcmParams, R) -> Tensor:
    """CR = concat(R, warp(R, A) ⊙ b_c) along channels."""
    R = as_tensor(R)
    c = R.shape[-3]
    ap = warp(R, params.A) * reshape(params.b_c, (c, 1, 1))
    return concat([R, ap], axis=R.ndim - 3)


# invariance probes --------------------------------------------------------------

def rotation90(k: int) -> np.ndarray:
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][k % 4]
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def translation(dx_px: float, dy_px: float, h: int, w: int) -> np.ndarray:
    return np.array([[1.0, 0.0, 2.0 * dx_px / max(w - 1, 1)],
                     [0.0, 1.0, 2.0 * dy_px / max(h - 1, 1)]])


def shear(k: float) -> np.ndarray:
    return np.array([[1.0, k, 0.0], [0.0, 1.0, 0.0]])


def reflection() -> np.ndarray:
    return np.array([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _bilinear_reference(feat: np.ndarray, x: float, y: float) -> np.ndarray:
    """Scalar bilinear lookup in pixel units with zero padding."""
    c, h, w = feat.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = np.zeros(c)
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if 0 <= yy < h and 0 <= xx < w:
                out += wy * wx * feat[:, yy, xx]
    return out


def affine_invariance_probe(R, family: str, **kw) -> dict:
    """Check lattice-level affine invariances of the warp on feature map ``R`` [C,H,W].

    Families: ``rotation`` (``k`` quarter turns, square maps), ``reflection``,
    ``translation`` (``dx``, ``dy`` pixels; integer shifts are compared on the
    interior, fractional shifts against a scalar bilinear reference),
    ``shear`` (``k``; the row y = 0 is invariant).
    """
    r = np.asarray(as_tensor(R).data)
    c, h, w = r.shape
    report = {"family": family}
    if family == "rotation":
        if h != w:
            raise ValueError("rotation probe needs a square map")
        k = int(kw.get("k", 1))
        got = warp(r, rotation90(k)).data
        expected = r
        for _ in range(k % 4):
            # one quarter turn samples (x, y) -> (-y, x)
            expected = np.rot90(expected, k=1, axes=(1, 2))
        err = float(np.abs(got - expected).max())
        report.update(max_abs_error=err,
                      permutation=bool(np.array_equal(np.sort(got, axis=None), np.sort(r, axis=None))))
    elif family == "reflection":
        got = warp(r, reflection()).data
        err = float(np.abs(got - r[:, :, ::-1]).max())
        report.update(max_abs_error=err)
    elif family == "translation":
        dx, dy = float(kw.get("dx", 1)), float(kw.get("dy", 0))
        got = warp(r, translation(dx, dy, h, w)).data
        if dx == int(dx) and dy == int(dy):
            ix, iy = int(dx), int(dy)
            ys = slice(max(0, -iy), h - max(0, iy))
            xs = slice(max(0, -ix), w - max(0, ix))
            inner = got[:, ys, xs]
            src = r[:, ys.start + iy:ys.stop + iy, xs.start + ix:xs.stop + ix]
            err = float(np.abs(inner - src).max())
            a = inner.reshape(c, -1).T
            b = src.reshape(c, -1).T
            da = np.linalg.norm(a[:, None] - a[None], axis=-1)
            db = np.linalg.norm(b[:, None] - b[None], axis=-1)
            report.update(max_abs_error=err, pairwise_distance_change=float(np.abs(da - db).max()))
        else:
            ref = np.empty_like(got)
            for i in range(h):
                for j in range(w):
                    ref[:, i, j] = _bilinear_reference(r, j + dx, i + dy)
            err = float(np.abs(got[:, 1:-1, 1:-1] - ref[:, 1:-1, 1:-1]).max())
            report.update(max_abs_error=err)
    elif family == "shear":
        if h % 2 == 0:
            raise ValueError("shear probe needs an odd height so that y = 0 is a pixel row")
        k = float(kw.get("k", 0.5))
        got = warp(r, shear(k)).data
        mid = h // 2
        err = float(np.abs(got[:, mid] - r[:, mid]).max())
        report.update(max_abs_error=err)
    else:
        raise ValueError(f"unsupported transform family {family!r}")
    report["passed"] = report["max_abs_error"] < 1e-12 and report.get("pairwise_distance_change", 0.0) < 1e-12
    return report
