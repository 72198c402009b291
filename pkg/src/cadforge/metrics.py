"""Geometry evaluation metrics.

Voxel-grid IoU with a z-axis rotation search, Chamfer distance over surface
samples, Gaussian Frechet distance between embedding sets, k-ball coverage,
and success-rate summaries with nearest-rank percentiles.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, mesh_is_watertight

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 64
DEFAULT_SAMPLE_COUNT = 4096
ROTATION_STEP_DEG = 45.0
# barycentric coordinates this close to an edge count as a degenerate ray hit
_TIE_EPS = 1e-9
_TIE_NUDGE = 1e-7
_MAX_RAY_RETRIES = 32


class MetricsError(Exception):
    """Raised for degenerate geometry or mismatched metric inputs."""


# -- normalization --------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationTransform:
    """Records the center shift and uniform scale applied to a mesh."""

    center: tuple[float, float, float]
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.array(self.center)) / self.scale


def normalize_mesh(mesh: TriMesh) -> tuple[TriMesh, NormalizationTransform]:
    """Center the bounding box at the origin and scale the longest edge to 1."""
    if not len(mesh.vertices) or not len(mesh.triangles):
        raise MetricsError("cannot normalize an empty mesh")
    bounds = mesh.bounds()
    extent = bounds[1] - bounds[0]
    longest = float(extent.max())
    if longest <= 0.0:
        raise MetricsError("degenerate mesh: zero-extent bounding box")
    center = (bounds[0] + bounds[1]) / 2.0
    transform = NormalizationTransform(tuple(float(c) for c in center), longest)
    vertices = (mesh.vertices - center) / longest
    return TriMesh(vertices, mesh.triangles), transform


def rotate_mesh_z(mesh: TriMesh, degrees: float) -> TriMesh:
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return TriMesh(mesh.vertices @ rot.T, mesh.triangles)


# -- voxel occupancy -------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyGrid:
    resolution: int
    bits: np.ndarray
    transform: NormalizationTransform | None = None

    def __post_init__(self) -> None:
        if self.resolution < 2:
            raise MetricsError("grid resolution must be at least 2")
        bits = np.asarray(self.bits, dtype=bool)
        expected = (self.resolution,) * 3
        if bits.shape != expected:
            raise MetricsError(f"grid shape {bits.shape} != {expected}")
        object.__setattr__(self, "bits", bits)

    @property
    def occupied_count(self) -> int:
        return int(self.bits.sum())


def _column_crossings(
    y: float,
    z: float,
    corner_a: np.ndarray,
    edge_b: np.ndarray,
    edge_c: np.ndarray,
    denom: np.ndarray,
    parallel: np.ndarray,
    yz_lo: np.ndarray,
    yz_hi: np.ndarray,
) -> np.ndarray | None:
    """Triangle-crossing x coordinates for the +x ray through (y, z).

    Returns None when the ray grazes an edge, vertex, or in-plane triangle,
    in which case the caller perturbs the ray origin and retries.
    """
    py = y - corner_a[:, 1]
    pz = z - corner_a[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (py * edge_c[:, 2] - edge_c[:, 1] * pz) / denom
        v = (edge_b[:, 1] * pz - py * edge_b[:, 2]) / denom
        w = 1.0 - u - v

    # a ray lying in a triangle's plane only matters if it can touch the sliver
    if np.any(
        parallel
        & (y >= yz_lo[:, 0] - _TIE_EPS)
        & (y <= yz_hi[:, 0] + _TIE_EPS)
        & (z >= yz_lo[:, 1] - _TIE_EPS)
        & (z <= yz_hi[:, 1] + _TIE_EPS)
    ):
        return None

    ok = ~parallel
    near_inside = ok & (u > -_TIE_EPS) & (v > -_TIE_EPS) & (w > -_TIE_EPS)
    borderline = near_inside & ((u < _TIE_EPS) | (v < _TIE_EPS) | (w < _TIE_EPS))
    if np.any(borderline):
        return None

    inside = ok & (u >= _TIE_EPS) & (v >= _TIE_EPS) & (w >= _TIE_EPS)
    if not np.any(inside):
        return np.empty(0)
    x_cross = (
        corner_a[inside, 0] + u[inside] * edge_b[inside, 0] + v[inside] * edge_c[inside, 0]
    )
    return np.sort(x_cross)


def voxelize(mesh: TriMesh, resolution: int = DEFAULT_RESOLUTION) -> OccupancyGrid:
    """Occupancy over [-0.5, 0.5]^3 by +x ray-crossing parity at voxel centers.

    The mesh must already be normalized into the domain and watertight;
    grazing rays are re-cast from an origin nudged in y and z.
    """
    if not len(mesh.triangles):
        raise MetricsError("cannot voxelize an empty mesh")
    if not mesh_is_watertight(mesh):
        raise MetricsError("cannot voxelize a non-watertight mesh")

    a, b, c = mesh.corners()
    edge_b = b - a
    edge_c = c - a
    denom = edge_b[:, 1] * edge_c[:, 2] - edge_c[:, 1] * edge_b[:, 2]
    parallel = np.abs(denom) < 1e-12
    yz = np.stack([np.stack([a[:, 1], a[:, 2]], axis=1),
                   np.stack([b[:, 1], b[:, 2]], axis=1),
                   np.stack([c[:, 1], c[:, 2]], axis=1)])
    yz_lo = yz.min(axis=0)
    yz_hi = yz.max(axis=0)

    centers = -0.5 + (np.arange(resolution) + 0.5) / resolution
    bits = np.zeros((resolution, resolution, resolution), dtype=bool)
    for j, y0 in enumerate(centers):
        for k, z0 in enumerate(centers):
            crossings = None
            for attempt in range(_MAX_RAY_RETRIES):
                # quadratic z offset keeps retry origins non-collinear, so no
                # single mesh edge can stay degenerate across retries
                crossings = _column_crossings(
                    y0 + attempt * _TIE_NUDGE,
                    z0 + attempt * attempt * _TIE_NUDGE,
                    a, edge_b, edge_c, denom, parallel, yz_lo, yz_hi,
                )
                if crossings is not None:
                    break
            if crossings is None:
                raise MetricsError(f"ray through column ({y0}, {z0}) stayed degenerate")
            if crossings.size:
                # inside iff an odd number of crossings lie ahead of the center
                ahead = crossings.size - np.searchsorted(crossings, centers, side="right")
                bits[:, j, k] = (ahead % 2) == 1
    return OccupancyGrid(resolution, bits)


def normalized_grid(mesh: TriMesh, resolution: int = DEFAULT_RESOLUTION) -> OccupancyGrid:
    normalized, transform = normalize_mesh(mesh)
    grid = voxelize(normalized, resolution)
    return OccupancyGrid(resolution, grid.bits, transform)


@dataclass(frozen=True)
class IouResult:
    value: float
    both_empty: bool = False


def grid_iou(a: OccupancyGrid, b: OccupancyGrid) -> IouResult:
    """Intersection over union of two occupancy grids of equal resolution."""
    if a.resolution != b.resolution:
        raise MetricsError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        logger.warning("IoU of two empty grids; reporting 0.0")
        return IouResult(0.0, both_empty=True)
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return IouResult(inter / union)


def best_rotation_iou(
    pred: TriMesh, gt: TriMesh, resolution: int = DEFAULT_RESOLUTION
) -> tuple[float, float]:
    """Max IoU over 45-degree z rotations of pred; returns (iou, degrees)."""
    gt_grid = normalized_grid(gt, resolution)
    best_value = -1.0
    best_angle = 0.0
    for step in range(8):
        angle = step * ROTATION_STEP_DEG
        rotated = rotate_mesh_z(pred, angle) if angle else pred
        value = grid_iou(normalized_grid(rotated, resolution), gt_grid).value
        if value > best_value:
            best_value = value
            best_angle = angle
    return best_value, best_angle


# -- surface sampling and Chamfer distance ---------------------------------------


@dataclass(frozen=True)
class PointSample:
    points: np.ndarray
    transform: NormalizationTransform | None = None

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not len(points):
            raise MetricsError("point sample must be nonempty")
        if not np.all(np.isfinite(points)):
            raise MetricsError("point sample contains non-finite values")
        object.__setattr__(self, "points", points)


def sample_surface(
    mesh: TriMesh, count: int = DEFAULT_SAMPLE_COUNT, seed: int = 0
) -> PointSample:
    """Uniform-by-area surface samples via seeded triangle + barycentric draws."""
    if not len(mesh.triangles):
        raise MetricsError("cannot sample an empty mesh")
    v0, v1, v2 = mesh.corners()
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise MetricsError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    points = (
        (1.0 - r1)[:, None] * v0[picks]
        + (r1 * (1.0 - r2))[:, None] * v1[picks]
        + (r1 * r2)[:, None] * v2[picks]
    )
    return PointSample(points)


def _as_points(sample: PointSample | np.ndarray) -> np.ndarray:
    if isinstance(sample, PointSample):
        return sample.points
    return PointSample(sample).points


def chamfer_distance(a: PointSample | np.ndarray, b: PointSample | np.ndarray) -> float:
    """Symmetric mean of minimum squared distances between two samples."""
    pa = _as_points(a)
    pb = _as_points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


# -- distributional metrics -------------------------------------------------------


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise MetricsError(f"covariance shape {cov.shape} does not match mean {mean.size}")
        if not np.allclose(cov, cov.T, atol=1e-9):
            raise MetricsError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", (cov + cov.T) / 2.0)


def fit_gaussian(vectors: np.ndarray) -> GaussianSummary:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise MetricsError("need at least 2 vectors to fit a Gaussian")
    mean = vectors.mean(axis=0)
    cov = np.cov(vectors, rowvar=False, bias=False).reshape(
        vectors.shape[1], vectors.shape[1]
    )
    return GaussianSummary(mean, cov)


def frechet_from_summaries(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet distance between Gaussians: ||mu_a - mu_b||^2 + trace term.

    The matrix square root comes from the eigendecomposition of the
    symmetrized product; negative eigenvalues are clamped to zero.
    """
    if a.mean.size != b.mean.size:
        raise MetricsError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    delta = a.mean - b.mean
    product = a.covariance @ b.covariance
    sym = (product + product.T) / 2.0
    eigvals = np.linalg.eigvalsh(sym)
    sqrt_trace = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    value = float(delta @ delta + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * sqrt_trace)
    return max(value, 0.0)


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two embedding sets."""
    ga = fit_gaussian(a)
    gb = fit_gaussian(b)
    return frechet_from_summaries(ga, gb)


def kball_coverage(ref: np.ndarray, syn: np.ndarray, k: int) -> float:
    """Fraction of ref points with a syn point inside their k-th-neighbor ball.

    The radius for each ref point is the distance to its k-th nearest other
    ref point; coverage needs at least one syn point within that radius.
    """
    ref = np.asarray(ref, dtype=np.float64)
    syn = np.asarray(syn, dtype=np.float64)
    if ref.ndim != 2 or syn.ndim != 2 or ref.shape[1] != syn.shape[1]:
        raise MetricsError("ref and syn must be 2-D with matching dimension")
    if k < 1 or ref.shape[0] <= k:
        raise MetricsError(f"need more than k={k} reference points, have {ref.shape[0]}")
    ref_dists, _ = cKDTree(ref).query(ref, k=k + 1)
    radii = ref_dists[:, k]
    nearest_syn, _ = cKDTree(syn).query(ref)
    covered = nearest_syn <= radii + 1e-12
    return float(np.mean(covered))


# -- reporting --------------------------------------------------------------------


def nearest_rank_percentile(values: Sequence[float], percent: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    if not values:
        raise MetricsError("percentile of empty sequence")
    if not 0.0 < percent <= 100.0:
        raise MetricsError(f"percent must be in (0, 100], got {percent}")
    ordered = sorted(values)
    rank = math.ceil(percent / 100.0 * len(ordered))
    return float(ordered[rank - 1])


def _stat_block(values: list[float]) -> dict[str, float]:
    return {
        "mean": float(sum(values) / len(values)),
        "median": nearest_rank_percentile(values, 50.0),
        "p75": nearest_rank_percentile(values, 75.0),
        "p90": nearest_rank_percentile(values, 90.0),
    }


def success_rate(results: Iterable[dict[str, Any]]) -> dict[str, Any]:
    """Executable fraction plus IoU/Chamfer statistics over successful samples."""
    results = list(results)
    n = len(results)
    successful = [r for r in results if r.get("executed_ok")]
    summary: dict[str, Any] = {
        "n": n,
        "n_success": len(successful),
        "success_rate_percent": (100.0 * len(successful) / n) if n else 0.0,
    }
    ious = [float(r["iou"]) for r in successful if "iou" in r and r["iou"] is not None]
    chamfers = [
        float(r["chamfer"]) for r in successful if "chamfer" in r and r["chamfer"] is not None
    ]
    if ious:
        summary["iou"] = _stat_block(ious)
    if chamfers:
        summary["chamfer"] = _stat_block(chamfers)
    return summary
