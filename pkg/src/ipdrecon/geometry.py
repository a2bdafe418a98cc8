"""Cameras, voxel grids, back-projection, Marching Cubes and depth rendering.

Conventions: OpenCV pinhole (x right, y down, z forward), ``P`` maps camera
to world coordinates, pixel (row i, col j) has its centre at u = j, v = i.
Depth is the camera-frame z of a point.  Voxel (i, j, k) of a grid has its
centre at ``origin + (ijk + 0.5) * voxel_size``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .tensor import Tensor, as_tensor, bilinear_sample, transpose

__all__ = [
    "CameraModel", "look_at", "GridSpec", "VoxelVolume", "TriangleMesh",
    "select_keyframes", "project_points", "back_project", "marching_cubes",
    "render_depth", "backproject_depth", "write_ply", "read_ply",
    "write_poses", "read_poses", "write_intrinsics", "read_intrinsics",
    "VOXEL_SIZES",
]

VOXEL_SIZES = {"coarse": 0.16, "medium": 0.08, "fine": 0.04}
_Z_NEAR = 1e-6


@dataclass
class CameraModel:
    K: np.ndarray
    P: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.K.shape != (3, 3) or self.P.shape != (4, 4):
            raise ValueError("K must be 3x3 and P 4x4")
        if not (self.K[0, 0] > 0 and self.K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        r = self.P[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-8 or np.linalg.det(r) < 0:
            raise ValueError("pose rotation must be orthonormal with det +1")

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, width, height, P=None) -> "CameraModel":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(4) if P is None else P, int(height), int(width))

    @property
    def center(self) -> np.ndarray:
        return self.P[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.P[:3, :3]

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.P[:3, 3]) @ self.P[:3, :3]

    def project(self, pts: np.ndarray):
        """World points [N, 3] -> (u, v, z) arrays."""
        pc = self.world_to_camera(pts)
        z = pc[:, 2]
        zs = np.where(np.abs(z) > _Z_NEAR, z, _Z_NEAR)
        u = self.K[0, 0] * pc[:, 0] / zs + self.K[0, 2]
        v = self.K[1, 1] * pc[:, 1] / zs + self.K[1, 2]
        return u, v, z

    def rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """World-frame ray directions with unit camera-z, so ray parameter = depth."""
        x = (u - self.K[0, 2]) / self.K[0, 0]
        y = (v - self.K[1, 2]) / self.K[1, 1]
        d = np.stack([x, y, np.ones_like(x)], axis=-1)
        return d @ self.P[:3, :3].T

    def pixel_rays(self) -> np.ndarray:
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return self.rays(u, v)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose looking from ``eye`` toward ``target``."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    P = np.eye(4)
    P[:3, 0], P[:3, 1], P[:3, 2], P[:3, 3] = x, y, z, eye
    return P


def _rotation_deg(r1: np.ndarray, r2: np.ndarray) -> float:
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def select_keyframes(cams: list[CameraModel], n_max: int, t_min: float = 0.1, r_min: float = 15.0) -> list[int]:
    """Greedy sweep: keep a frame once it moved ``t_min`` metres or turned ``r_min`` degrees."""
    if not cams:
        raise ValueError("no poses to select from")
    kept = [0]
    for i in range(1, len(cams)):
        if len(kept) >= n_max:
            break
        last = cams[kept[-1]]
        moved = np.linalg.norm(cams[i].center - last.center)
        turned = _rotation_deg(last.rotation, cams[i].rotation)
        if moved >= t_min or turned >= r_min:
            kept.append(i)
    return kept[:n_max]


# voxel grids -------------------------------------------------------------------

@dataclass
class GridSpec:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)

    def centers(self, coords: np.ndarray | None = None) -> np.ndarray:
        if coords is None:
            coords = self.all_coords()
        return self.origin + (np.asarray(coords) + 0.5) * self.voxel_size

    def all_coords(self) -> np.ndarray:
        nx, ny, nz = self.dims
        return np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
                        axis=-1).reshape(-1, 3)

    def child(self) -> "GridSpec":
        return GridSpec(self.origin, self.voxel_size / 2.0, tuple(2 * d for d in self.dims))

    def flat_index(self, coords: np.ndarray) -> np.ndarray:
        nx, ny, nz = self.dims
        c = np.asarray(coords)
        return (c[:, 0] * ny + c[:, 1]) * nz + c[:, 2]

    def aligned_with(self, other: "GridSpec") -> bool:
        return (self.dims == other.dims and abs(self.voxel_size - other.voxel_size) < 1e-12
                and np.allclose(self.origin, other.origin, atol=1e-12))


@dataclass
class VoxelVolume:
    grid: GridSpec
    values: np.ndarray                  # dims or dims + (C,)
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.grid.dims, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape[:3] != self.grid.dims or self.valid.shape != self.grid.dims:
            raise ValueError("payload and mask must match the grid dims")

    @property
    def origin(self):
        return self.grid.origin

    @property
    def voxel_size(self):
        return self.grid.voxel_size

    @property
    def dims(self):
        return self.grid.dims


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.faces)

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_use_counts(self) -> dict:
        e = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                    self.faces[:, [2, 0]]]), axis=1)
        keys, counts = np.unique(e, axis=0, return_counts=True)
        return dict(zip(map(tuple, keys), counts))

    def is_closed(self) -> bool:
        if not len(self.faces):
            return True
        return all(c == 2 for c in self.edge_use_counts().values())


# projection ---------------------------------------------------------------------

def project_points(pts: np.ndarray, cam: CameraModel):
    """Normalized sampling coords [N, 2], depth [N] and in-frustum mask [N]."""
    u, v, z = cam.project(pts)
    valid = (z > _Z_NEAR) & (u >= 0) & (u <= cam.width - 1) & (v >= 0) & (v <= cam.height - 1)
    xn = 2.0 * u / max(cam.width - 1, 1) - 1.0
    yn = 2.0 * v / max(cam.height - 1, 1) - 1.0
    coords = np.stack([np.where(valid, xn, 0.0), np.where(valid, yn, 0.0)], axis=1)
    return coords, z, valid


def back_project(grid: GridSpec, feat, cam: CameraModel, conf_mask: np.ndarray | None = None,
                 coords: np.ndarray | None = None):
    """Sample image features at voxel projections.

    Returns (features [N, C] tensor with zero rows for invalid voxels, valid [N]).
    ``coords`` selects a sparse subset of voxels; default is the full grid.
    """
    feat = as_tensor(feat)
    pts = grid.centers(coords)
    ncoords, _, valid = project_points(pts, cam)
    if conf_mask is not None:
        u, v, _ = cam.project(pts)
        iu = np.clip(np.round(u), 0, cam.width - 1).astype(np.int64)
        iv = np.clip(np.round(v), 0, cam.height - 1).astype(np.int64)
        valid &= np.asarray(conf_mask, dtype=bool)[iv, iu]
    sampled = bilinear_sample(feat, Tensor(ncoords))          # [C, N]
    return transpose(sampled) * Tensor(valid[:, None].astype(np.float64)), valid


# marching cubes -------------------------------------------------------------------

_TRI_PAD = np.full((256, 15), -1, dtype=np.int64)
for _c, _row in enumerate(TRIANGLES):
    _TRI_PAD[_c, :len(_row)] = _row
_TRI_COUNT = np.array([len(r) // 3 for r in TRIANGLES])
_CORNER_OFF = np.array(CORNERS)
_EDGE_LO = np.array([np.minimum(_CORNER_OFF[a], _CORNER_OFF[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNER_OFF[b] - _CORNER_OFF[a]))) for a, b in EDGES])


def marching_cubes(volume: VoxelVolume, level: float = 0.0) -> TriangleMesh:
    """Zero-level surface of a scalar volume sampled at voxel centres.

    Cells touching an invalid voxel are skipped.  Values equal to ``level``
    count as outside.  Vertices are shared between cells through a global
    edge key, so the output ordering is deterministic.
    """
    vals = volume.values
    if vals.ndim != 3:
        raise ValueError("marching_cubes expects a scalar volume")
    nx, ny, nz = vals.shape
    if min(nx, ny, nz) < 2:
        return TriangleMesh.empty()
    inside = vals < level
    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    ok = np.ones_like(cube, dtype=bool)
    for k, (ox, oy, oz) in enumerate(CORNERS):
        sl = (slice(ox, nx - 1 + ox), slice(oy, ny - 1 + oy), slice(oz, nz - 1 + oz))
        cube |= inside[sl].astype(np.int64) << k
        ok &= volume.valid[sl]
    active = ok & (cube > 0) & (cube < 255)
    cells = np.argwhere(active)
    if not len(cells):
        return TriangleMesh.empty()
    cases = cube[active]
    ntri = _TRI_COUNT[cases]
    cell_rep = np.repeat(np.arange(len(cells)), ntri)
    slot = np.arange(ntri.sum()) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    tri_edges = np.stack([_TRI_PAD[cases[cell_rep], 3 * slot + j] for j in range(3)], axis=1)
    base = cells[cell_rep]                                            # [T, 3]
    lo = base[:, None, :] + _EDGE_LO[tri_edges]                       # [T, 3, 3]
    axis = _EDGE_AXIS[tri_edges]
    key = ((lo[..., 0] * ny + lo[..., 1]) * nz + lo[..., 2]) * 3 + axis
    ukeys, inverse = np.unique(key.reshape(-1), return_inverse=True)
    faces = inverse.reshape(-1, 3)
    a = np.stack(np.unravel_index(ukeys // 3, (nx, ny, nz)), axis=1)
    ax = ukeys % 3
    b = a.copy()
    b[np.arange(len(b)), ax] += 1
    va = vals[a[:, 0], a[:, 1], a[:, 2]]
    vb = vals[b[:, 0], b[:, 1], b[:, 2]]
    t = (level - va) / (vb - va)
    pos = a + t[:, None] * (b - a)
    verts = volume.origin + (pos + 0.5) * volume.voxel_size
    faces = faces[:, [0, 2, 1]]                # normals point toward the positive side
    mesh = TriangleMesh(verts, faces)
    keep = mesh.triangle_areas() > 1e-12
    if not keep.all():
        faces = faces[keep]
        used, remap = np.unique(faces.reshape(-1), return_inverse=True)
        mesh = TriangleMesh(verts[used], remap.reshape(-1, 3))
    return mesh


# depth rendering --------------------------------------------------------------------

def _ray_hits(orig, dirs, v0, v1, v2):
    """Möller–Trumbore for paired rays and triangles; returns t or inf."""
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(dirs, e2)
    det = np.einsum("nk,nk->n", pvec, e1)
    okd = np.abs(det) > 1e-14
    inv = np.where(okd, 1.0 / np.where(okd, det, 1.0), 0.0)
    tvec = orig - v0
    uu = np.einsum("nk,nk->n", pvec, tvec) * inv
    qvec = np.cross(tvec, e1)
    vv = np.einsum("nk,nk->n", dirs, qvec) * inv
    tt = np.einsum("nk,nk->n", e2, qvec) * inv
    hit = okd & (uu >= 0) & (vv >= 0) & (uu + vv <= 1) & (tt > _Z_NEAR)
    return np.where(hit, tt, np.inf)


def render_depth(mesh: TriangleMesh, cam: CameraModel, max_pairs: int = 2_000_000) -> np.ndarray:
    """Nearest ray-triangle hit depth per pixel; ``inf`` where nothing is hit.

    Triangles in front of the camera are tested only against pixels in their
    projected bounding box; triangles straddling the camera plane are tested
    against every pixel.
    """
    h, w = cam.height, cam.width
    depth = np.full(h * w, np.inf)
    if not len(mesh.faces):
        return depth.reshape(h, w)
    dirs = cam.pixel_rays().reshape(-1, 3)
    orig = cam.center
    tri = mesh.vertices[mesh.faces]                                  # [T, 3, 3]
    u, v, z = cam.project(tri.reshape(-1, 3))
    u, v, z = u.reshape(-1, 3), v.reshape(-1, 3), z.reshape(-1, 3)
    front = (z > _Z_NEAR).all(axis=1)
    straddle = ~front & (z > _Z_NEAR).any(axis=1)

    x0 = np.clip(np.floor(u.min(axis=1)), 0, w)
    x1 = np.clip(np.ceil(u.max(axis=1)), -1, w - 1)
    y0 = np.clip(np.floor(v.min(axis=1)), 0, h)
    y1 = np.clip(np.ceil(v.max(axis=1)), -1, h - 1)
    bw = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    bh = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    area = np.where(front, bw * bh, 0)
    ids = np.flatnonzero(area)
    start = 0
    while start < len(ids):
        cum = np.cumsum(area[ids[start:]])
        stop = start + max(1, int(np.searchsorted(cum, max_pairs, side="right")))
        sel = ids[start:stop]
        cnt = area[sel]
        rep = np.repeat(sel, cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        px = x0[rep].astype(np.int64) + local % bw[rep]
        py = y0[rep].astype(np.int64) + local // bw[rep]
        pix = py * w + px
        t = tri[rep]
        tt = _ray_hits(orig, dirs[pix], t[:, 0], t[:, 1], t[:, 2])
        np.minimum.at(depth, pix, tt)
        start = stop
    for k in np.flatnonzero(straddle):
        t = np.broadcast_to(tri[k], (len(dirs), 3, 3))
        depth = np.minimum(depth, _ray_hits(orig, dirs, t[:, 0], t[:, 1], t[:, 2]))
    return depth.reshape(h, w)


def backproject_depth(depth: np.ndarray, cam: CameraModel, mask: np.ndarray | None = None) -> np.ndarray:
    """World points [N, 3] for pixels with finite depth (and ``mask``)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    sel = np.isfinite(depth)
    if mask is not None:
        sel &= mask
    return cam.center + cam.rays(u[sel], v[sel]) * depth[sel][:, None]


# file formats -----------------------------------------------------------------------

def write_ply(path, mesh: TriangleMesh, binary: bool = False):
    """PLY with ``vertex`` (x, y, z float) and ``face`` (list uchar int) elements."""
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z",
              f"element face {len(mesh.faces)}", "property list uchar int vertex_indices",
              "end_header"]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(mesh.vertices.astype("<f4").tobytes())
            rec = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = mesh.faces
            fh.write(rec.tobytes())
        else:
            lines = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices.astype(np.float32)]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
    os.replace(tmp, path)


def read_ply(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header") + len(b"end_header")
    end = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    fmt = "ascii"
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts and parts[0] == "format":
            fmt = parts[1]
    body = data[end:]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        verts = np.array([[float(x) for x in r.split()[:3]] for r in rows[:nv]]).reshape(-1, 3)
        faces = np.array([[int(x) for x in r.split()[1:4]] for r in rows[nv:nv + nf]]).reshape(-1, 3)
    elif fmt == "binary_little_endian":
        verts = np.frombuffer(body[:12 * nv], dtype="<f4").reshape(-1, 3).astype(np.float64)
        rec = np.frombuffer(body[12 * nv:12 * nv + 13 * nf], dtype=[("n", "u1"), ("i", "<i4", (3,))])
        faces = rec["i"].astype(np.int64)
    else:
        raise ValueError(f"unsupported PLY format {fmt}")
    return TriangleMesh(verts, faces)


def write_poses(path, cams: list[CameraModel]):
    with open(path, "w") as fh:
        for cam in cams:
            fh.write(" ".join(repr(float(x)) for x in cam.P.reshape(-1)) + "\n")


def read_poses(path) -> list[np.ndarray]:
    vals = np.loadtxt(path, ndmin=2)
    return [row.reshape(4, 4) for row in vals]


def write_intrinsics(path, cam: CameraModel):
    K = cam.K
    with open(path, "w") as fh:
        vals = " ".join(repr(float(x)) for x in (K[0, 0], K[1, 1], K[0, 2], K[1, 2]))
        fh.write(f"{vals} {cam.width} {cam.height}\n")


def read_intrinsics(path):
    """Returns (fx, fy, cx, cy, width, height)."""
    parts = open(path).read().split()
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return fx, fy, cx, cy, int(parts[4]), int(parts[5])
