"""Coarse-to-fine reconstruction: feature stack, per-view encoding, attention
fusion, occupancy filtering, TSDF regression, losses, training and file I/O."""
from __future__ import annotations

import dataclasses
import os
import struct
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acm import AcmParams, acm_forward, init_acm
from .geometry import (CameraModel, GridSpec, TriangleMesh, VoxelVolume, back_project,
                       marching_cubes, select_keyframes)
from .ipsd import CostVolume, IpsdParams, build_cost_volume, init_ipsd, state_project
from .layers import Linear, Mlp, linear, mlp, named_parameters
from .pce import PceParams, confidence_mask, init_pce, pce_forward
from .tensor import (DimensionError, absolute, NumericError, Tape, Tensor, as_tensor, concat, gelu,
                     log_softmax, masked_log_softmax, masked_softmax, matmul, reshape, stack,
                     take, tanh, transpose, unfold2d, upsample2x)

__all__ = [
    "LEVELS", "PipelineConfig", "Backbone", "FeaturePyramid", "FusionHead", "StageHead", "LevelParams",
    "Model", "LevelOutput", "LossReport", "TrainingError", "CheckpointError", "Adam",
    "init_model", "extract_features", "fuse_views", "occupancy_filter", "child_offsets",
    "encode_views", "level_forward", "compute_losses", "visibility_targets", "reconstruct",
    "train_toy", "save_checkpoint", "load_checkpoint", "write_loss_csv", "load_config", "dump_config",
    "TrainScene", "Reconstruction", "reconstruct_volume", "training_forward", "Fusion", "read_checkpoint",
    "checkpoint_bytes", "loss_csv", "atomic_write",
]

LEVELS = ("coarse", "medium", "fine")
_OCTANTS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


class TrainingError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


class CheckpointError(ValueError):
    """A checkpoint does not match the model it is loaded into."""


# configuration -------------------------------------------------------------------

@dataclass
class PipelineConfig:
    width_coarse: int = 32
    width_medium: int = 24
    width_fine: int = 16
    state_size: int = 16
    conf_tau: float = 0.05
    n_views: int = 10
    views_per_step: int = 8
    max_medium: int = 4000
    max_fine: int = 6000
    steps: int = 500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    ablation: bool = False
    chunk: int = 20000

    def __post_init__(self):
        for name in ("width_coarse", "width_medium", "width_fine", "state_size", "n_views",
                     "views_per_step", "max_medium", "max_fine", "chunk"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0.0 < self.conf_tau < 1.0:
            raise ValueError("conf_tau must lie in (0, 1)")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.adam_eps <= 0:
            raise ValueError("invalid optimizer settings")

    def widths(self) -> dict[str, int]:
        return {"coarse": self.width_coarse, "medium": self.width_medium, "fine": self.width_fine}


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Flat TOML file plus keyword overrides; unknown keys are an error."""
    import tomli

    values = {}
    if path is not None:
        values.update(tomli.loads(Path(path).read_text()))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**values)


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else repr(v)}")
    return "\n".join(lines) + "\n"


# parameters ------------------------------------------------------------------------

@dataclass
class Backbone:
    conv1: Linear   # 3*9 -> C_fine, stride 2
    conv2: Linear   # C_fine*9 -> C_medium, stride 2
    conv3: Linear   # C_medium*9 -> C_coarse, stride 2
    lat_m: Linear   # C_coarse -> C_medium
    lat_f: Linear   # C_medium -> C_fine


@dataclass
class FeaturePyramid:
    coarse: Tensor  # [B, C_c, H/8, W/8]
    medium: Tensor  # [B, C_m, H/4, W/4]
    fine: Tensor    # [B, C_f, H/2, W/2]

    def __getitem__(self, level: str) -> Tensor:
        return getattr(self, level)


@dataclass
class FusionHead:
    query: Tensor   # [C]
    key: Linear     # [C + 1] -> C (voxel features plus view depth)
    value: Linear   # C -> C


@dataclass
class StageHead:
    inp: Linear
    body: list      # coarse: 3x3x3 convs as Linear(27 H, H); else pointwise Mlp
    out: Linear     # H -> 2 logits, or H -> 1 for the TSDF


@dataclass
class LevelParams:
    pce: PceParams
    acm: AcmParams
    ipsd: IpsdParams
    fusion: FusionHead
    head: StageHead


@dataclass
class Model:
    backbone: Backbone
    levels: dict
    arch: np.ndarray = field(default=None)  # widths, state size, ablation flag

    def parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in named_parameters({"backbone": self.backbone, "levels": self.levels}).items()
                if v.requires_grad}


def _conv_layer(rng, c_in, c_out):
    return linear(rng, c_in * 9, c_out, scale=np.sqrt(2.0 / (c_in * 9)))


def init_model(cfg: PipelineConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    w = cfg.widths()
    bb = Backbone(_conv_layer(rng, 3, w["fine"]), _conv_layer(rng, w["fine"], w["medium"]),
                  _conv_layer(rng, w["medium"], w["coarse"]),
                  linear(rng, w["coarse"], w["medium"]), linear(rng, w["medium"], w["fine"]))
    levels = {}
    parent = None
    for lvl in LEVELS:
        c = w[lvl]
        n_in = 2 * c + 1 + (3 + w[parent] if parent else 0)
        if lvl == "coarse":
            body = [linear(rng, 27 * c, c, scale=np.sqrt(1.0 / (27 * c))) for _ in range(2)]
        else:
            body = [mlp(rng, c, 2 * c, c)]
        out = linear(rng, c, 1 if lvl == "fine" else 2)
        head = StageHead(linear(rng, n_in, c), body, out)
        fusion = FusionHead(Tensor(rng.normal(0, 1 / np.sqrt(c), c), requires_grad=True),
                            linear(rng, c + 1, c), linear(rng, c, c))
        levels[lvl] = LevelParams(init_pce(rng, c, cfg.state_size), init_acm(c),
                                  init_ipsd(rng, c, c, cfg.state_size), fusion, head)
        parent = lvl
    arch = np.array([w["coarse"], w["medium"], w["fine"], cfg.state_size, float(cfg.ablation)])
    return Model(bb, levels, arch)


# 2D features -----------------------------------------------------------------------

def _conv(layer: Linear, x: Tensor) -> Tensor:
    b = x.shape[0]
    cols, ho, wo = unfold2d(x, 3, 2, 1), (x.shape[2] + 1) // 2, (x.shape[3] + 1) // 2
    y = gelu(layer(cols))                                           # [B, Ho*Wo, C]
    return transpose(reshape(y, (b, ho, wo, layer.out_features)), (0, 3, 1, 2))


def _lateral(layer: Linear, x: Tensor) -> Tensor:
    return transpose(layer(transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))


def extract_features(bb: Backbone, images) -> FeaturePyramid:
    """Three stride-2 conv stages; coarser maps are projected and added to finer ones."""
    if isinstance(images, (list, tuple)):
        shapes = {np.shape(no) for no in (im.data if isinstance(im, Tensor) else im for im in images)}
        if len(shapes) != 1:
            raise ValueError(f"images differ in size: {sorted(shapes)}")
        images = stack([as_tensor(im) for im in images])
    x = as_tensor(images)
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"expected [B, 3, H, W] images, got {x.shape}")
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ValueError("image height and width must be multiples of 8")
    f1 = _conv(bb.conv1, x)
    f2 = _conv(bb.conv2, f1)
    f3 = _conv(bb.conv3, f2)
    medium = f2 + upsample2x(_lateral(bb.lat_m, f3))
    fine = f1 + upsample2x(_lateral(bb.lat_f, medium))
    return FeaturePyramid(f3, medium, fine)


# fusion ------------------------------------------------------------------------------

@dataclass
class Fusion:
    fused: Tensor       # [N, C]
    spread: Tensor      # [N, C] attention-weighted variance of the view values
    weights: Tensor     # [V, N], a simplex over the valid views of each voxel
    scores: Tensor      # [V, N] pre-softmax attention scores
    view_mask: np.ndarray
    valid: np.ndarray   # [N] voxels seen by at least one view


def fuse_views(head: FusionHead, volumes: list[CostVolume]) -> Fusion:
    """Attention over the views valid at each voxel."""
    if not volumes:
        raise ValueError("fusion needs at least one view")
    n = volumes[0].features.shape[0]
    if any(v.features.shape[0] != n for v in volumes):
        raise ValueError("cost volumes cover different voxel sets")
    mask = np.stack([v.valid for v in volumes])                               # [V, N]
    feats = stack([v.features for v in volumes])                              # [V, N, C]
    depth = Tensor(np.stack([v.depth for v in volumes])[..., None])           # [V, N, 1]
    c = feats.shape[2]
    keys = head.key(concat([feats, depth], axis=2))
    scores = matmul(keys, reshape(head.query, (c, 1)))[..., 0] * (1.0 / np.sqrt(c))
    w = masked_softmax(scores, mask, axis=0)
    vals = head.value(feats)
    wv = reshape(w, w.shape + (1,))
    fused = (wv * vals).sum(axis=0)
    spread = (wv * (vals - reshape(fused, (1,) + fused.shape)) ** 2).sum(axis=0)
    return Fusion(fused, spread, w, scores, mask, mask.any(axis=0))


# sparse voxel sets -------------------------------------------------------------------

def child_offsets() -> np.ndarray:
    return _OCTANTS.copy()


def occupancy_filter(coords: np.ndarray, occupied: np.ndarray):
    """Children (on the 2x finer grid) of the occupied voxels.

    Returns (child coords [8n, 3], index of each child's parent in ``coords``).
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    parents = np.flatnonzero(np.asarray(occupied, dtype=bool))
    kids = (2 * coords[parents])[:, None, :] + _OCTANTS[None]
    return kids.reshape(-1, 3), np.repeat(parents, 8)


def _neighbour_index(grid: GridSpec, coords: np.ndarray) -> np.ndarray:
    """[N, 27] rows of the 3x3x3 neighbours of each voxel; absent ones point at row N."""
    lut = np.full(grid.dims, len(coords), dtype=np.int64)
    lut[tuple(coords.T)] = np.arange(len(coords))
    offs = np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3)
    nb = coords[:, None, :] + offs[None]
    inside = np.all((nb >= 0) & (nb < np.array(grid.dims)), axis=2)
    nbc = np.where(inside[..., None], nb, 0)
    idx = lut[nbc[..., 0], nbc[..., 1], nbc[..., 2]]
    return np.where(inside, idx, len(coords))


# per-level forward -------------------------------------------------------------------

@dataclass
class ViewEncoding:
    feats: Tensor                 # [B, C, h, w] backbone features
    state: Tensor | None          # [B, C, h, w] decoder state (None when ablated)
    conf_masks: list | None       # per-view boolean masks at image resolution


@dataclass
class LevelOutput:
    coords: np.ndarray
    hidden: Tensor
    logits: Tensor | None         # [N, 2] occupancy
    tsdf: Tensor | None           # [N]
    fusion: Fusion

    @property
    def view_mask(self) -> np.ndarray:
        return self.fusion.view_mask


def _upsample_mask(m: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = np.minimum((np.arange(h) * m.shape[0]) // h, m.shape[0] - 1)
    xs = np.minimum((np.arange(w) * m.shape[1]) // w, m.shape[1] - 1)
    return m[np.ix_(ys, xs)]


def encode_views(lp: LevelParams, feats: Tensor, level: str, cfg: PipelineConfig,
                 image_hw: tuple[int, int]) -> ViewEncoding:
    """PCE -> ACM -> state projection for every view of one level."""
    if cfg.ablation:
        return ViewEncoding(feats, None, None)
    enc = pce_forward(lp.pce, feats)
    cr = acm_forward(lp.acm, enc.encoded)
    state = state_project(lp.ipsd, cr)
    masks = None
    if level == "coarse":
        cm = confidence_mask(enc, cfg.conf_tau)
        masks = [_upsample_mask(m, *image_hw) for m in cm]
    return ViewEncoding(feats, state, masks)


def level_forward(lp: LevelParams, level: str, enc: ViewEncoding, cams: list[CameraModel],
                  grid: GridSpec, coords: np.ndarray, parent: LevelOutput | None = None,
                  parent_index: np.ndarray | None = None) -> LevelOutput:
    """Cost volumes, fusion and the stage head on the voxel subset ``coords``."""
    vols = []
    zero_state = None
    for i, cam in enumerate(cams):
        f_i = enc.feats[i]
        mask = enc.conf_masks[i] if enc.conf_masks is not None else None
        fbp = back_project(grid, f_i, cam, mask, coords)
        if enc.state is None:
            if zero_state is None:
                zero_state = Tensor(np.zeros((lp.ipsd.state_channels,) + f_i.shape[1:]))
            st = zero_state
        else:
            st = enc.state[i]
        vols.append(build_cost_volume(lp.ipsd, st, fbp, cam, grid, coords, level))
    fu = fuse_views(lp.fusion, vols)
    frac = Tensor(fu.view_mask.mean(axis=0)[:, None])
    parts = [fu.fused, fu.spread, frac]
    if parent is not None:
        off = Tensor((coords - 2 * parent.coords[parent_index]) - 0.5)
        parts += [off, take(parent.hidden, parent_index, axis=0)]
    head = lp.head
    h = gelu(head.inp(concat(parts, axis=1)))
    if level == "coarse":
        nbr = _neighbour_index(grid, coords)
        for conv in head.body:
            padded = concat([h, Tensor(np.zeros((1, h.shape[1])))], axis=0)
            h = h + gelu(conv(reshape(take(padded, nbr, axis=0), (len(coords), -1))))
    else:
        for block in head.body:
            h = h + block(h)
    out = head.out(h)
    if level == "fine":
        return LevelOutput(coords, h, None, tanh(out[:, 0]), fu)
    return LevelOutput(coords, h, out, None, fu)


def _predicted_occupied(out: LevelOutput) -> np.ndarray:
    """S_state = argmax of the two occupancy logits (ties count as free)."""
    lg = out.logits.data
    return lg[:, 1] > lg[:, 0]


# losses -------------------------------------------------------------------------------

@dataclass
class LossReport:
    l_fusion: dict
    l_occ: dict
    l_tsdf: float
    total: float
    total_tensor: Tensor | None = None

    @property
    def fusion_sum(self) -> float:
        return float(sum(self.l_fusion.values()))

    @property
    def occ_sum(self) -> float:
        return float(sum(self.l_occ.values()))


def visibility_targets(grid: GridSpec, coords: np.ndarray, cams: list[CameraModel], depths: list,
                       view_mask: np.ndarray, band: float) -> np.ndarray:
    """[V, N] uniform distributions over views whose GT depth lies within ``band`` of the voxel.

    Columns with no such view are all zero and are left unsupervised.
    """
    pts = grid.centers(coords)
    vis = np.zeros(view_mask.shape, dtype=bool)
    for i, (cam, d) in enumerate(zip(cams, depths)):
        u, v, z = cam.project(pts)
        iu = np.clip(np.round(u), 0, cam.width - 1).astype(np.int64)
        iv = np.clip(np.round(v), 0, cam.height - 1).astype(np.int64)
        dg = np.asarray(d)[iv, iu]
        vis[i] = view_mask[i] & np.isfinite(dg) & (np.abs(dg - z) < band)
    cnt = vis.sum(axis=0)
    return vis / np.maximum(cnt, 1)


def compute_losses(outputs: dict, gt: dict, targets: dict) -> LossReport:
    """Fusion cross-entropy per level, occupancy BCE (coarse, medium) and fine TSDF L1.

    ``outputs`` maps level -> LevelOutput, ``gt`` maps level -> GT VoxelVolume
    on the same grid and ``targets`` maps level -> [V, N] visibility targets.
    """
    l_f, l_p = {}, {}
    l_t = Tensor(0.0)
    terms = []
    for lvl, out in outputs.items():
        vol = gt[lvl]
        if out.coords.size and ((out.coords.max(axis=0) >= np.array(vol.dims)).any() or out.coords.min() < 0):
            raise ValueError(f"{lvl} predictions fall outside the ground-truth grid")
        tgt = targets[lvl]
        if tgt.shape != out.view_mask.shape:
            raise ValueError(f"{lvl} visibility targets do not match the fusion weights")
        sup = tgt.sum(axis=0) > 0
        if sup.any():
            logw = masked_log_softmax(out.fusion.scores, out.view_mask, axis=0)
            ce = -(logw * Tensor(tgt)).sum(axis=0)
            l_f[lvl] = (ce * Tensor(sup.astype(np.float64))).sum() * (1.0 / sup.sum())
        else:
            l_f[lvl] = Tensor(0.0)
        terms.append(l_f[lvl])
        gt_vals = vol.values[tuple(out.coords.T)]
        if out.logits is not None:
            occ = (np.abs(gt_vals) < 1.0).astype(np.int64)
            ls = log_softmax(out.logits, axis=1)
            l_p[lvl] = -(ls * Tensor(np.eye(2)[occ])).sum() * (1.0 / max(len(occ), 1))
            terms.append(l_p[lvl])
        elif len(gt_vals):
            l_t = absolute(out.tsdf - Tensor(gt_vals)).mean()
            terms.append(l_t)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossReport({k: float(v.data) for k, v in l_f.items()}, {k: float(v.data) for k, v in l_p.items()},
                      float(l_t.data), float(total.data), total)


# inference ----------------------------------------------------------------------------

def _canonical_order(cams: list[CameraModel]) -> list[int]:
    """Sort views by pose so that the input order cannot change the result."""
    return sorted(range(len(cams)), key=lambda i: tuple(np.round(cams[i].P, 12).ravel()))


def _run_level(lp, level, enc, cams, grid, coords, parent, pidx, chunk) -> LevelOutput:
    if len(coords) <= chunk:
        return level_forward(lp, level, enc, cams, grid, coords, parent, pidx)
    hs, ls, ts = [], [], []
    for s in range(0, len(coords), chunk):
        o = level_forward(lp, level, enc, cams, grid, coords[s:s + chunk], parent,
                          None if pidx is None else pidx[s:s + chunk])
        hs.append(o.hidden.data)
        (ts if o.tsdf is not None else ls).append((o.tsdf if o.tsdf is not None else o.logits).data)
    hidden = Tensor(np.concatenate(hs))
    if level == "fine":
        return LevelOutput(coords, hidden, None, Tensor(np.concatenate(ts)), None)
    return LevelOutput(coords, hidden, Tensor(np.concatenate(ls)), None, None)


@dataclass
class Reconstruction:
    mesh: TriangleMesh
    tsdf: VoxelVolume
    keyframes: list
    counts: dict


def reconstruct_volume(images, cams: list[CameraModel], model: Model, grid_coarse: GridSpec,
                       cfg: PipelineConfig) -> Reconstruction:
    """Full inference: keyframes, encodings, coarse-to-fine filtering, TSDF, Marching Cubes."""
    if len(images) != len(cams):
        raise ValueError("need exactly one camera per image")
    if not cams:
        raise ValueError("no views given")
    order = _canonical_order(cams)
    kept = [order[i] for i in select_keyframes([cams[i] for i in order], cfg.n_views)]
    if not kept:
        raise ValueError("no keyframes survive selection")
    imgs = Tensor(np.stack([np.asarray(no_grad(images[i])) for i in kept]))
    kcams = [cams[i] for i in kept]
    hw = (kcams[0].height, kcams[0].width)
    pyr = extract_features(model.backbone, imgs)
    grids = {"coarse": grid_coarse}
    grids["medium"] = grid_coarse.child()
    grids["fine"] = grids["medium"].child()
    coords = grid_coarse.all_coords()
    parent, pidx = None, None
    counts = {}
    fine_vol = VoxelVolume(grids["fine"], np.ones(grids["fine"].dims), np.zeros(grids["fine"].dims, dtype=bool))
    for lvl in LEVELS:
        counts[lvl] = int(len(coords))
        if not len(coords):
            break
        lp = model.levels[lvl]
        enc = encode_views(lp, pyr[lvl], lvl, cfg, hw)
        out = _run_level(lp, lvl, enc, kcams, grids[lvl], coords, parent, pidx, cfg.chunk)
        if lvl == "fine":
            fine_vol.values[tuple(coords.T)] = out.tsdf.data
            fine_vol.valid[tuple(coords.T)] = True
            break
        coords, pidx = occupancy_filter(coords, _predicted_occupied(out))
        parent = out
    mesh = marching_cubes(fine_vol) if fine_vol.valid.any() else TriangleMesh.empty()
    return Reconstruction(mesh, fine_vol, kept, counts)


def reconstruct(images, cams, model, grid_coarse, cfg) -> TriangleMesh:
    return reconstruct_volume(images, cams, model, grid_coarse, cfg).mesh


def no_grad(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# training ------------------------------------------------------------------------------

class Adam:
    """First/second-moment optimizer with bias correction."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            if self.lr:
                p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


@dataclass
class TrainScene:
    images: np.ndarray      # [V, 3, H, W]
    cams: list
    depths: list
    grids: dict
    gt: dict

    @classmethod
    def from_bundle(cls, b) -> "TrainScene":
        return cls(np.stack(b.images), list(b.cameras), list(b.depths), dict(b.grids), dict(b.gt_tsdf))


def _subsample(rng, coords, pidx, limit):
    if len(coords) <= limit:
        return coords, pidx
    sel = np.sort(rng.choice(len(coords), limit, replace=False))
    return coords[sel], pidx[sel]


def training_forward(model: Model, cfg: PipelineConfig, scene: TrainScene, views: np.ndarray,
                     rng: np.random.Generator) -> LossReport:
    """One supervised pass; children spawn from predicted or GT occupancy."""
    cams = [scene.cams[i] for i in views]
    depths = [scene.depths[i] for i in views]
    hw = (cams[0].height, cams[0].width)
    pyr = extract_features(model.backbone, Tensor(scene.images[views]))
    coords = scene.grids["coarse"].all_coords()
    parent, pidx = None, None
    outs, tgts = {}, {}
    for lvl in LEVELS:
        if not len(coords):
            break
        grid = scene.grids[lvl]
        lp = model.levels[lvl]
        enc = encode_views(lp, pyr[lvl], lvl, cfg, hw)
        out = level_forward(lp, lvl, enc, cams, grid, coords, parent, pidx)
        outs[lvl] = out
        tgts[lvl] = visibility_targets(grid, coords, cams, depths, out.view_mask, 3.0 * grid.voxel_size)
        if lvl == "fine":
            break
        gt_occ = np.abs(scene.gt[lvl].values[tuple(coords.T)]) < 1.0
        coords, pidx = occupancy_filter(coords, _predicted_occupied(out) | gt_occ)
        coords, pidx = _subsample(rng, coords, pidx, cfg.max_medium if lvl == "coarse" else cfg.max_fine)
        parent = out
    return compute_losses(outs, scene.gt, tgts)


def train_toy(scenes: list[TrainScene], cfg: PipelineConfig, model: Model | None = None,
              log=None) -> tuple[Model, list[LossReport]]:
    """Adam on the summed losses; one scene and a random view subset per step."""
    if not scenes:
        raise ValueError("no training scenes")
    model = model or init_model(cfg)
    params = model.parameters()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for step in range(cfg.steps + 1):
        scene = scenes[step % len(scenes)]
        nv = min(cfg.views_per_step, len(scene.cams))
        views = np.sort(rng.choice(len(scene.cams), nv, replace=False))
        with Tape() as tape:
            rep = training_forward(model, cfg, scene, views, rng)
        if not np.isfinite(rep.total):
            raise TrainingError(step, f"non-finite loss after {step} updates")
        history.append(rep)
        if log is not None:
            log(step, rep)
        if step == cfg.steps:
            break
        tape.backward(rep.total_tensor)
        rep.total_tensor = None
        opt.step()
    return model, history


# files -----------------------------------------------------------------------------------

MAGIC = b"IPDR"
VERSION = 1


def atomic_write(path, data: bytes | str):
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _all_tensors(model: Model) -> dict[str, np.ndarray]:
    out = {"arch": np.asarray(model.arch, dtype=np.float64)}
    for k, t in named_parameters({"backbone": model.backbone, "levels": model.levels}).items():
        out[k] = t.data
    return out


def checkpoint_bytes(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in _all_tensors(model).items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: Model):
    atomic_write(path, checkpoint_bytes(model))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an IPDR checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{rank}I", data, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(data, "<f8", count, pos).reshape(shape).copy()
            pos += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record after {len(out)} records") from exc
    return out


def load_checkpoint(path, cfg: PipelineConfig | None = None) -> Model:
    """Rebuild the model described by the checkpoint and fill its weights.

    With ``cfg`` given, its architecture must agree with the file's.
    """
    recs = read_checkpoint(path)
    if "arch" not in recs or recs["arch"].shape != (5,):
        raise CheckpointError("record 'arch' missing or malformed")
    a = recs["arch"]
    base = cfg or PipelineConfig()
    want = dataclasses.replace(base, width_coarse=int(a[0]), width_medium=int(a[1]), width_fine=int(a[2]),
                               state_size=int(a[3]), ablation=bool(a[4]))
    if cfg is not None and (cfg.widths() != want.widths() or cfg.state_size != want.state_size
                            or cfg.ablation != want.ablation):
        raise CheckpointError("record 'arch' does not match the configured architecture")
    model = init_model(want)
    expected = _all_tensors(model)
    for name, arr in expected.items():
        if name not in recs:
            raise CheckpointError(f"record {name!r} missing from checkpoint")
        if recs[name].shape != arr.shape:
            raise CheckpointError(f"record {name!r} has shape {recs[name].shape}, expected {arr.shape}")
    extra = [k for k in recs if k not in expected]
    if extra:
        raise CheckpointError(f"record {extra[0]!r} is not part of the model")
    for name, t in named_parameters({"backbone": model.backbone, "levels": model.levels}).items():
        t.data = recs[name]
    return model


def loss_csv(history: list[LossReport]) -> str:
    lines = ["step,l_fusion,l_occ,l_tsdf,total"]
    for i, r in enumerate(history):
        lines.append(f"{i},{r.fusion_sum!r},{r.occ_sum!r},{r.l_tsdf!r},{r.total!r}")
    return "\n".join(lines) + "\n"


def write_loss_csv(path, history: list[LossReport]):
    atomic_write(path, loss_csv(history))
