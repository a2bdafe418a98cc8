"""Procedural indoor scenes with analytic signed distance, Lambertian rendering
and camera trajectories; the desk-scale stand-in for a real RGB-D dataset."""
from __future__ import annotations

import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (CameraModel, GridSpec, TriangleMesh, VoxelVolume, look_at,
                       marching_cubes, read_intrinsics, read_ply, read_poses,
                       write_intrinsics, write_ply, write_poses)

__all__ = [
    "Box", "Cylinder", "Sphere", "SceneSdf", "LightingModel", "SceneSpec", "SceneBundle",
    "generate_scene", "build_bundle", "gt_mesh", "shade", "render_view", "make_trajectory", "scene_grids", "tsdf_volume",
    "write_bundle", "load_bundle", "write_ppm", "read_ppm", "write_tsdf", "read_tsdf",
    "default_lighting", "TRUNCATION_VOXELS", "TrajectoryError", "heldout_views",
    "verify_bundle",
]

TRUNCATION_VOXELS = 3.0


# primitives ---------------------------------------------------------------------

def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


@dataclass
class Box:
    center: tuple
    half: tuple
    yaw: float = 0.0
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, p):
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        d = p - np.asarray(self.center)
        local = np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], -1)
        return _box_sdf(local, 0.0, np.asarray(self.half))


@dataclass
class Cylinder:
    center: tuple
    radius: float
    half_height: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, p):
        d = p - np.asarray(self.center)
        q = np.stack([np.hypot(d[..., 0], d[..., 1]) - self.radius, np.abs(d[..., 2]) - self.half_height], -1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


_KINDS = {"box": Box, "cylinder": Cylinder, "sphere": Sphere}


@dataclass
class SceneSdf:
    """Room interior (free space positive) plus furniture solids."""

    room_lo: np.ndarray
    room_hi: np.ndarray
    furniture: list = field(default_factory=list)
    wall_albedo: tuple = ((0.75, 0.7, 0.65), (0.6, 0.7, 0.75), (0.7, 0.75, 0.6),
                          (0.65, 0.6, 0.75), (0.55, 0.5, 0.45), (0.9, 0.9, 0.9))

    def __post_init__(self):
        self.room_lo = np.asarray(self.room_lo, dtype=np.float64)
        self.room_hi = np.asarray(self.room_hi, dtype=np.float64)
        if np.any(self.room_hi - self.room_lo <= 0):
            raise ValueError("room extents must be positive")

    def room_sdf(self, p):
        c = 0.5 * (self.room_lo + self.room_hi)
        return -_box_sdf(p, c, 0.5 * (self.room_hi - self.room_lo))

    def parts(self, p):
        """Signed distance of every part, [..., 1 + n_furniture]; part 0 is the room."""
        return np.stack([self.room_sdf(p)] + [f.sdf(p) for f in self.furniture], axis=-1)

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        return self.parts(p).min(axis=-1)

    def normal(self, p, eps: float = 1e-4):
        n = np.empty(p.shape)
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            n[..., k] = self(p + e) - self(p - e)
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def albedo(self, p):
        parts = self.parts(p)
        which = parts.argmin(axis=-1)
        out = np.empty(p.shape)
        # room faces: pick the nearest wall, order -x +x -y +y -z +z
        dl = p - self.room_lo
        dh = self.room_hi - p
        face = np.stack([dl[..., 0], dh[..., 0], dl[..., 1], dh[..., 1], dl[..., 2], dh[..., 2]], -1).argmin(-1)
        walls = np.asarray(self.wall_albedo)
        out[:] = walls[face]
        for i, f in enumerate(self.furniture, start=1):
            out[which == i] = np.asarray(f.albedo)
        return out


@dataclass
class LightingModel:
    positions: np.ndarray
    intensities: np.ndarray
    ambient: float = 0.1
    attenuation: float = 0.3

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.intensities = np.atleast_1d(np.asarray(self.intensities, dtype=np.float64))
        if np.any(self.intensities < 0) or self.ambient < 0:
            raise ValueError("light intensities must be non-negative")


def default_lighting(scene: SceneSdf) -> LightingModel:
    c = 0.5 * (scene.room_lo + scene.room_hi)
    top = scene.room_hi[2] - 0.3
    ext = scene.room_hi - scene.room_lo
    pos = [[c[0] - 0.25 * ext[0], c[1] - 0.2 * ext[1], top], [c[0] + 0.25 * ext[0], c[1] + 0.2 * ext[1], top]]
    return LightingModel(pos, [0.9, 0.6], ambient=0.1, attenuation=0.3)


# scene specification ----------------------------------------------------------------

@dataclass
class SceneSpec:
    room: tuple = (4.0, 3.0, 2.5)
    n_furniture: int = 3
    n_views: int = 20
    width: int = 64
    height: int = 48
    focal: float = 40.0
    voxel_size_fine: float = 0.04
    margin: float = 0.08
    trajectory: str = "circle"
    seed: int = 0

    def __post_init__(self):
        self.room = tuple(float(r) for r in self.room)
        if len(self.room) != 3 or min(self.room) <= 0:
            raise ValueError("room extents must be three positive numbers")
        if self.n_furniture < 0 or self.n_views < 1 or self.width < 2 or self.height < 2:
            raise ValueError("invalid scene spec counts")
        if self.focal <= 0 or self.voxel_size_fine <= 0 or self.margin < 0:
            raise ValueError("focal length, voxel size and margin must be positive")

    def to_toml(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                lines.append(f"{k} = [{', '.join(repr(float(x)) for x in v)}]")
            elif isinstance(v, str):
                lines.append(f'{k} = "{v}"')
            else:
                lines.append(f"{k} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def generate_scene(spec: SceneSpec) -> SceneSdf:
    """Room of the given extents with ``n_furniture`` primitives along the walls."""
    rng = np.random.default_rng(spec.seed)
    ext = np.asarray(spec.room)
    lo, hi = np.zeros(3), ext
    furniture = []
    palette = rng.uniform(0.25, 0.95, size=(max(spec.n_furniture, 1), 3))
    for i in range(spec.n_furniture):
        kind = ("box", "cylinder", "box", "sphere")[i % 4]
        side = rng.integers(4)
        along = rng.uniform(0.25, 0.75)
        depth_in = rng.uniform(0.3, 0.5)
        if side == 0:
            xy = (depth_in, along * ext[1])
        elif side == 1:
            xy = (ext[0] - depth_in, along * ext[1])
        elif side == 2:
            xy = (along * ext[0], depth_in)
        else:
            xy = (along * ext[0], ext[1] - depth_in)
        alb = tuple(float(a) for a in palette[i])
        if kind == "box":
            half = (rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.45))
            furniture.append(Box((xy[0], xy[1], half[2]), half, float(rng.uniform(-0.5, 0.5)), alb))
        elif kind == "cylinder":
            r, hh = rng.uniform(0.12, 0.22), rng.uniform(0.2, 0.5)
            furniture.append(Cylinder((xy[0], xy[1], hh), r, hh, alb))
        else:
            r = rng.uniform(0.15, 0.25)
            furniture.append(Sphere((xy[0], xy[1], rng.uniform(r, 0.8)), r, alb))
    return SceneSdf(lo, hi, furniture)


# rendering --------------------------------------------------------------------------

def _sphere_trace(scene: SceneSdf, orig: np.ndarray, dirs: np.ndarray, max_steps=256, tol=1e-4, t_max=100.0):
    scale = np.linalg.norm(dirs, axis=-1)
    t = np.zeros(len(dirs))
    done = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        act = ~done
        if not act.any():
            break
        d = scene(orig + t[act, None] * dirs[act])
        hit = np.abs(d) < tol
        t[act] += np.where(hit, 0.0, d / scale[act])
        idx = np.flatnonzero(act)
        done[idx[hit | (t[act] > t_max)]] = True
    return t, done


def shade(scene: SceneSdf, light: LightingModel, pts: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Direct Lambertian shading with exponential distance attenuation, [N, 3]."""
    irr = np.full(len(pts), light.ambient)
    for pos, inten in zip(light.positions, light.intensities):
        to = pos - pts
        dist = np.linalg.norm(to, axis=-1)
        cos = np.maximum(0.0, np.einsum("nk,nk->n", normals, to) / np.maximum(dist, 1e-12))
        irr += cos * inten * np.exp(-light.attenuation * dist)
    return scene.albedo(pts) * irr[:, None]


def render_view(scene: SceneSdf, light: LightingModel, cam: CameraModel):
    """Sphere-traced (image [3, H, W] in [0, 1], depth [H, W] with inf background)."""
    if scene(cam.center[None])[0] < 0:
        raise ValueError("camera centre lies inside solid geometry")
    dirs = cam.pixel_rays().reshape(-1, 3)
    t, done = _sphere_trace(scene, cam.center, dirs)
    pts = cam.center + t[:, None] * dirs
    hit = done & (np.abs(scene(pts)) < 1e-3)
    depth = np.where(hit, t, np.inf)
    img = np.zeros((len(dirs), 3))
    if hit.any():
        n = scene.normal(pts[hit])
        img[hit] = shade(scene, light, pts[hit], n)
    img = np.clip(img, 0.0, 1.0)
    h, w = cam.height, cam.width
    return img.T.reshape(3, h, w), depth.reshape(h, w)


# trajectories -----------------------------------------------------------------------

class TrajectoryError(RuntimeError):
    """No free-space camera placement could be found."""


def make_trajectory(scene: SceneSdf, n_views: int, pattern: str = "circle", width: int = 64,
                    height: int = 48, focal: float = 40.0, seed: int = 0, phase: float = 0.0,
                    clearance: float = 0.1) -> list[CameraModel]:
    """Cameras on an interior loop looking at points inside the room.

    ``circle``: near the room centre looking outward, view i at angle
    2π(i + phase)/n, with alternating pitch.  ``perimeter``: a rectangle inset
    from the walls, looking across the room at alternating heights.  ``phase``
    is a fraction of the spacing between views, so 0.5 lands halfway between
    the poses of the phase-0 loop.  Blocked eyes retreat toward the centre.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = scene.room_lo, scene.room_hi
    c = 0.5 * (lo + hi)
    ext = hi - lo
    cams = []
    for i in range(n_views):
        s = (i + phase) / n_views
        if pattern == "circle":
            ang = 2 * np.pi * s
            rad = 0.12 * min(ext[0], ext[1])
            eye0 = np.array([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang), lo[2] + 0.5 * ext[2]])
            pitch = (-0.35, 0.1, -0.6, 0.3)[i % 4]
            dist = 0.45 * min(ext[0], ext[1])
            look = np.array([dist * np.cos(ang), dist * np.sin(ang), pitch * dist])
        elif pattern == "perimeter":
            t = (s % 1.0) * 4.0
            inset = 0.3 * np.minimum(ext[:2], 1.5)
            a, b = lo[:2] + inset, hi[:2] - inset
            side, f = int(t), t - int(t)
            corners = [a, (b[0], a[1]), b, (a[0], b[1]), a]
            xy = np.asarray(corners[side]) * (1 - f) + np.asarray(corners[side + 1]) * f
            eye0 = np.array([xy[0], xy[1], lo[2] + 0.55 * ext[2]])
            look = np.array([c[0], c[1], lo[2] + (0.1, 0.45, 0.8)[i % 3] * ext[2]]) - eye0
        else:
            raise ValueError(f"unknown trajectory pattern {pattern!r}")
        for attempt in range(50):
            pull = min(1.0, 0.04 * attempt) * (c - eye0) * np.array([1.0, 1.0, 0.0])
            jitter = rng.normal(0, 0.02, 3) if attempt else np.zeros(3)
            eye = eye0 + pull + jitter
            if scene(eye[None])[0] > clearance:
                break
        else:
            raise TrajectoryError(f"no free-space placement found for view {i}")
        target = np.clip(eye + look, lo + 0.05, hi - 0.05)
        P = look_at(eye, target)
        cams.append(CameraModel.from_intrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height, P))
    return cams


# ground truth volumes ---------------------------------------------------------------

def scene_grids(scene: SceneSdf, voxel_size_fine: float = 0.04, margin: float = 0.08) -> dict[str, GridSpec]:
    """Nested coarse/medium/fine grids sharing an origin; each level doubles the dims."""
    vs_c = 4 * voxel_size_fine
    origin = scene.room_lo - margin
    span = scene.room_hi - scene.room_lo + 2 * margin
    dims_c = tuple(int(np.ceil(s / vs_c - 1e-9)) for s in span)
    coarse = GridSpec(origin, vs_c, dims_c)
    medium = coarse.child()
    return {"coarse": coarse, "medium": medium, "fine": medium.child()}


def tsdf_volume(scene: SceneSdf, grid: GridSpec, truncation: float | None = None) -> VoxelVolume:
    """Analytic SDF sampled at voxel centres, clipped to ±truncation and normalized."""
    trunc = truncation if truncation is not None else TRUNCATION_VOXELS * grid.voxel_size
    sdf = scene(grid.centers()).reshape(grid.dims)
    return VoxelVolume(grid, np.clip(sdf / trunc, -1.0, 1.0))


def gt_mesh(scene: SceneSdf, grid_fine: GridSpec) -> TriangleMesh:
    fine2 = grid_fine.child()
    sdf = scene(fine2.centers()).reshape(fine2.dims)
    return marching_cubes(VoxelVolume(fine2, sdf))


# bundle I/O ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray):
    """8-bit binary PPM from a [3, H, W] float image in [0, 1]."""
    q = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError("only binary P6 PPM is supported")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    px = np.frombuffer(data[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


_TSDF_MAGIC = b"TSDF"


def write_tsdf(path, vol: VoxelVolume):
    """``TSDF`` magic, dims (3 x u32), origin (3 x f64), voxel size (f64), f32 payload; little-endian."""
    with open(path, "wb") as fh:
        fh.write(_TSDF_MAGIC)
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3d", *vol.origin))
        fh.write(struct.pack("<d", vol.voxel_size))
        fh.write(vol.values.astype("<f4").tobytes())


def read_tsdf(path) -> VoxelVolume:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _TSDF_MAGIC:
        raise ValueError(f"{path}: not a TSDF volume")
    dims = struct.unpack_from("<3I", data, 4)
    origin = struct.unpack_from("<3d", data, 16)
    vs = struct.unpack_from("<d", data, 40)[0]
    vals = np.frombuffer(data, dtype="<f4", offset=48, count=int(np.prod(dims))).reshape(dims)
    return VoxelVolume(GridSpec(origin, vs, dims), vals.astype(np.float64))


@dataclass
class SceneBundle:
    spec: SceneSpec
    scene: SceneSdf
    light: LightingModel
    cameras: list
    images: list          # [3, H, W] arrays
    depths: list          # [H, W] arrays, inf background
    grids: dict
    gt_tsdf: dict         # level -> VoxelVolume
    gt_mesh: TriangleMesh | None = None


def build_bundle(spec: SceneSpec, with_mesh: bool = True) -> SceneBundle:
    scene = generate_scene(spec)
    light = default_lighting(scene)
    cams = make_trajectory(scene, spec.n_views, spec.trajectory, spec.width, spec.height, spec.focal, spec.seed)
    rendered = [render_view(scene, light, c) for c in cams]
    grids = scene_grids(scene, spec.voxel_size_fine, spec.margin)
    # one band at every scale, so coarse occupancy marks only voxels near a surface
    trunc = TRUNCATION_VOXELS * spec.voxel_size_fine
    tsdf = {k: tsdf_volume(scene, g, trunc) for k, g in grids.items()}
    mesh = gt_mesh(scene, grids["fine"]) if with_mesh else None
    return SceneBundle(spec, scene, light, cams, [r[0] for r in rendered], [r[1] for r in rendered],
                       grids, tsdf, mesh)


def write_bundle(bundle: SceneBundle, out_dir, force: bool = False):
    """Write the bundle atomically: everything goes to a sibling temp dir first."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} exists and is not empty (use force)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".bundle-", dir=out.parent))
    try:
        (tmp / "images").mkdir()
        (tmp / "scene.toml").write_text(bundle.spec.to_toml())
        for i, img in enumerate(bundle.images):
            write_ppm(tmp / "images" / f"{i:03d}.ppm", img)
        write_poses(tmp / "poses.txt", bundle.cameras)
        write_intrinsics(tmp / "intrinsics.txt", bundle.cameras[0])
        if bundle.gt_mesh is not None:
            write_ply(tmp / "gt_mesh.ply", bundle.gt_mesh)
        for k, vol in bundle.gt_tsdf.items():
            write_tsdf(tmp / f"gt_tsdf_{k}.bin", vol)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_bundle(path, with_depth: bool = True) -> SceneBundle:
    """Read a bundle; the analytic scene is regenerated from ``scene.toml``."""
    import tomli

    p = Path(path)
    if not (p / "scene.toml").is_file():
        raise FileNotFoundError(f"{p} is not a scene bundle")
    spec = SceneSpec.from_dict(tomli.loads((p / "scene.toml").read_text()))
    scene = generate_scene(spec)
    light = default_lighting(scene)
    fx, fy, cx, cy, w, h = read_intrinsics(p / "intrinsics.txt")
    cams = [CameraModel.from_intrinsics(fx, fy, cx, cy, w, h, P) for P in read_poses(p / "poses.txt")]
    images = [read_ppm(p / "images" / f"{i:03d}.ppm") for i in range(len(cams))]
    depths = [render_view(scene, light, c)[1] for c in cams] if with_depth else []
    tsdf = {k: read_tsdf(p / f"gt_tsdf_{k}.bin") for k in ("coarse", "medium", "fine")}
    grids = {k: v.grid for k, v in tsdf.items()}
    mesh = read_ply(p / "gt_mesh.ply") if (p / "gt_mesh.ply").exists() else None
    return SceneBundle(spec, scene, light, cams, images, depths, grids, tsdf, mesh)


def _heldout_phase(k: int, n_train: int) -> float:
    # the phase whose loop positions stay farthest from every training position
    train = np.arange(n_train) / n_train
    best, best_gap = 0.5, -1.0
    for m in range(32):
        phi = (m + 0.5) / 32
        pos = (np.arange(k) + phi) / k
        d = np.abs(pos[:, None] - train[None, :])
        gap = np.minimum(d, 1.0 - d).min()
        if gap > best_gap + 1e-12:
            best, best_gap = phi, gap
    return best


def heldout_views(bundle: SceneBundle, k: int):
    """``k`` test views on the training loop, placed between its poses.

    Returns (images, cameras, depths), rendered on the fly.
    """
    sp = bundle.spec
    phase = _heldout_phase(k, len(bundle.cameras))
    cams = make_trajectory(bundle.scene, k, sp.trajectory, sp.width, sp.height, sp.focal, sp.seed, phase=phase)
    rendered = [render_view(bundle.scene, bundle.light, c) for c in cams]
    return [r[0] for r in rendered], cams, [r[1] for r in rendered]


def verify_bundle(bundle: SceneBundle) -> list[tuple[str, bool, str]]:
    """Invariant checks on a bundle as ``(name, passed, detail)`` triples."""
    from .geometry import backproject_depth

    sc = bundle.scene
    checks = []
    g = bundle.grids
    nested = (np.allclose(g["medium"].origin, g["coarse"].origin) and np.allclose(g["fine"].origin, g["coarse"].origin)
              and g["medium"].dims == g["coarse"].child().dims and g["fine"].dims == g["medium"].child().dims)
    checks.append(("nested grids", bool(nested), "medium and fine halve the coarse voxel"))
    lo = min(float(v.values.min()) for v in bundle.gt_tsdf.values())
    hi = max(float(v.values.max()) for v in bundle.gt_tsdf.values())
    checks.append(("tsdf range", -1.0 <= lo and hi <= 1.0, f"values in [{lo:.3f}, {hi:.3f}]"))
    bad = 0
    for vol in bundle.gt_tsdf.values():
        sdf = sc(vol.grid.centers()).reshape(vol.dims)
        strict = np.abs(sdf) > 1e-6
        bad += int(np.sum(strict & (np.sign(sdf) != np.sign(vol.values))))
    checks.append(("tsdf sign", bad == 0, f"{bad} voxels disagree with the analytic SDF"))
    clear = min(float(sc(c.center[None])[0]) for c in bundle.cameras)
    checks.append(("camera clearance", clear > 0.1, f"closest camera is {clear:.3f} m from a surface"))
    worst = 0.0
    for cam, d in zip(bundle.cameras, bundle.depths):
        pts = backproject_depth(d, cam)
        if len(pts):
            worst = max(worst, float(np.abs(sc(pts)).max()))
    checks.append(("depth on surface", worst < 2e-3, f"max |sdf| of back-projected depth {worst:.2e} m"))
    if bundle.gt_mesh is not None:
        err = float(np.abs(sc(bundle.gt_mesh.vertices)).max()) if len(bundle.gt_mesh.vertices) else np.inf
        tol = bundle.spec.voxel_size_fine
        checks.append(("gt mesh on surface", err < tol, f"max |sdf| at mesh vertices {err:.2e} m"))
    shapes = {np.shape(im) for im in bundle.images}
    want = (3, bundle.spec.height, bundle.spec.width)
    in_range = all(float(np.min(im)) >= 0.0 and float(np.max(im)) <= 1.0 for im in bundle.images)
    checks.append(("images", shapes == {want} and in_range and len(bundle.images) == len(bundle.cameras),
                   f"{len(bundle.images)} images of shape {want}, values in [0, 1]"))
    return checks
