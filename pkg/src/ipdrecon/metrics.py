"""2D depth metrics, 3D mesh metrics and view-count stability metrics."""
from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .geometry import TriangleMesh

__all__ = ["EvaluationError", "DepthMetrics", "MeshMetrics", "StabilityReport", "depth_metrics",
           "nearest_distances", "mesh_metrics", "sample_points", "stability_report",
           "metrics_csv", "stability_csv", "point_distance"]

THRESHOLD = 0.05


class EvaluationError(ValueError):
    """Raised when a metric is undefined for the given inputs."""


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_1_25: float


@dataclass
class MeshMetrics:
    acc: float
    comp: float
    chamfer: float
    prec: float
    recall: float
    fscore: float

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class StabilityReport:
    cv: float
    prr_prec: float
    prr_recall: float
    prr_fscore: float
    mean_prr: float
    max_drop: float
    si: float


def depth_metrics(d, d_gt, valid=None) -> DepthMetrics:
    """Averages over pixels where both depths are finite and positive (and ``valid``)."""
    d = np.asarray(d, dtype=np.float64)
    g = np.asarray(d_gt, dtype=np.float64)
    if d.shape != g.shape:
        raise EvaluationError(f"depth maps differ in shape: {d.shape} vs {g.shape}")
    m = np.isfinite(d) & np.isfinite(g) & (g > 0) & (d > 0)
    if valid is not None:
        m &= np.asarray(valid, dtype=bool)
    if not m.any():
        raise EvaluationError("no pixel has both a valid prediction and ground truth")
    d, g = d[m], g[m]
    diff = d - g
    ratio = np.maximum(d / g, g / d)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        delta_1_25=float(np.mean(ratio < 1.25)),
    )


# nearest neighbours --------------------------------------------------------------

def point_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between paired rows; the single formula used everywhere."""
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def nearest_distances(query, target) -> np.ndarray:
    """Exact distance from every query point to its nearest target point (k-d tree)."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    t = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if not len(q) or not len(t):
        raise EvaluationError("nearest-neighbour search needs non-empty point sets")
    idx = cKDTree(t).query(q, k=1)[1]
    # recompute with the shared formula so ties and rounding match the oracle exactly
    return point_distance(q, t[idx])


def mesh_metrics(pred, gt, threshold: float = THRESHOLD) -> MeshMetrics:
    """Accuracy/completeness family between two point clouds (metres)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if not len(pred) or not len(gt):
        raise EvaluationError("mesh metrics need non-empty point clouds")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    acc, comp = float(d_pred.mean()), float(d_gt.mean())
    prec, recall = float(np.mean(d_pred < threshold)), float(np.mean(d_gt < threshold))
    f = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MeshMetrics(acc, comp, (acc + comp) / 2, prec, recall, f)


def sample_points(mesh: TriangleMesh, density: float = 2500.0, seed: int = 0) -> np.ndarray:
    """Mesh vertices plus area-weighted uniform samples, ``density`` points per m²."""
    if not len(mesh.faces):
        return mesh.vertices.copy()
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    n = int(round(float(areas.sum()) * density))
    if n == 0:
        return mesh.vertices.copy()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    v = mesh.vertices[mesh.faces[tri]]
    pts = (1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1] + (s * r2)[:, None] * v[:, 2]
    return np.concatenate([mesh.vertices, pts])


# stability -------------------------------------------------------------------------

def _triple(row):
    if isinstance(row, MeshMetrics):
        return row.prec, row.recall, row.fscore
    p, r, f = row
    return float(p), float(r), float(f)


def stability_report(rows) -> StabilityReport:
    """Stability metrics over ``{view_count: MeshMetrics or (prec, recall, fscore)}``.

    Retention and drop compare the smallest view count against the largest.
    Values are percentages except SI.
    """
    if len(rows) < 2:
        raise EvaluationError("stability needs at least two view counts")
    counts = sorted(rows)
    m = np.array([_triple(rows[c]) for c in counts])        # [n, 3] prec, recall, fscore
    if np.any(m.mean(axis=0) <= 0) or np.any(m[-1] <= 0):
        raise EvaluationError("stability metrics need positive performance values")
    f = m[:, 2]
    # exact rational arithmetic, so identical rows give exactly zero
    cv = float(statistics.stdev(f.tolist()) / statistics.fmean(f.tolist()) * 100.0)
    prr = m[0] / m[-1] * 100.0
    max_drop = float((f[-1] - f[0]) / f[-1] * 100.0)
    rng_ = m.max(axis=0) - m.min(axis=0)
    si = float(np.prod(1.0 - rng_ / m.max(axis=0)))
    return StabilityReport(cv, float(prr[0]), float(prr[1]), float(prr[2]), float(prr.mean()), max_drop, si)


# CSV -------------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_csv(values: dict) -> str:
    """``metric,value`` lines for a flat mapping (dataclasses are expanded)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in values.items():
        if hasattr(v, "__dataclass_fields__"):
            for kk, vv in asdict(v).items():
                w.writerow([kk, _fmt(vv)])
        else:
            w.writerow([k, _fmt(v)])
    return buf.getvalue()


def stability_csv(rows: dict, report: StabilityReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["views", "acc", "comp", "chamfer", "prec", "recall", "fscore"])
    for c in sorted(rows):
        w.writerow([c] + [_fmt(x) for x in rows[c].as_tuple()])
    w.writerow([])
    w.writerow(["stability"])
    for k, v in asdict(report).items():
        w.writerow([k, "nan" if math.isnan(v) else _fmt(v)])
    return buf.getvalue()
