"""Particle sampling from multi-view point clouds.

Two routes to a fixed-size particle set:

- gps_sample: merge all views, isolate the object by color, denoise,
  reconstruct a surface mesh by ball pivoting, and spread particles evenly
  over it. Robust to occlusion because the reconstruction welds partial
  views into one connected surface.
- lps_sample: the local baseline; each view is filtered and wrapped in its
  own convex hull, hull surfaces are sampled, and the merged pool is pruned.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .bpa import BpaConfig, bpa_reconstruct
from .errors import PipelineError
from .mesh import TriangleMesh, _farthest_point_subset, clean_non_manifold, \
    uniform_sample_mesh
from .pointcloud import ColoredPointCloud, HsvRange, estimate_normals, \
    hsv_filter, register_clouds, remove_outliers, voxel_downsample

__all__ = ["ParticleSet", "GpsConfig", "gps_sample", "gps_pipeline",
           "lps_sample", "save_particles_csv", "load_particles_csv"]


@dataclass(frozen=True)
class ParticleSet:
    """Fixed-size set of 3D particles, meters."""

    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("particle coordinates must be finite")
        object.__setattr__(self, "positions", p)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class GpsConfig:
    hsv: HsvRange = field(default_factory=lambda: HsvRange(20.0, 40.0,
                                                           s_min=0.5))
    v_s: float = 0.005
    sor_k: int = 16
    sor_ratio: float = 2.0
    bpa: BpaConfig | None = None    # None: radii derived from point spacing
    n_particles: int = 64
    normals_k: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 8:
            raise ValueError(f"n_particles must be >= 8, got {self.n_particles}")
        if self.v_s <= 0:
            raise ValueError("v_s must be positive")


def _require(n, stage, minimum=3):
    if n < minimum:
        raise PipelineError(
            stage, f"stage left {n} points, need at least {minimum}"
        )


def gps_pipeline(views, extrinsics, cfg):
    """Full pipeline; returns (ParticleSet, cleaned TriangleMesh)."""
    if sum(len(v) for v in views) == 0:
        raise PipelineError("register", "all views are empty")
    cloud = register_clouds(views, extrinsics)

    cloud = hsv_filter(cloud, cfg.hsv)
    _require(len(cloud), "hsv_filter")

    cloud = voxel_downsample(cloud, cfg.v_s)
    _require(len(cloud), "voxel_downsample")

    k = min(cfg.sor_k, len(cloud) - 1)
    cloud = remove_outliers(cloud, k=k, std_ratio=cfg.sor_ratio)
    _require(len(cloud), "remove_outliers")

    k = min(cfg.normals_k, len(cloud) - 1)
    if k < 3:
        raise PipelineError("estimate_normals",
                            f"{len(cloud)} points cannot support a plane fit")
    normals, valid = estimate_normals(cloud, k=k)
    cloud = cloud.select(valid)
    normals = normals[valid]
    _require(len(cloud), "estimate_normals")

    pts = cloud.positions
    if len(pts) < 5:
        raise PipelineError("ball_pivoting",
                            f"{len(pts)} points are too few to pivot on")
    bpa_cfg = cfg.bpa if cfg.bpa is not None else BpaConfig.from_cloud(pts)
    mesh = bpa_reconstruct(pts, normals, bpa_cfg)
    if len(mesh.triangles) == 0:
        raise PipelineError("ball_pivoting", "reconstruction has no triangles")

    mesh = clean_non_manifold(mesh)
    if len(mesh.triangles) == 0:
        raise PipelineError("clean_non_manifold", "no triangles survived")

    particles = uniform_sample_mesh(mesh, cfg.n_particles, seed=cfg.seed)
    return ParticleSet(particles), mesh


def gps_sample(views, extrinsics, cfg):
    """Global route: reconstruct one surface from all views, then sample it.

    Returns exactly cfg.n_particles points. Raises PipelineError naming the
    stage whenever an intermediate stage leaves too few points to continue.
    """
    particles, _ = gps_pipeline(views, extrinsics, cfg)
    return particles


def _hull_mesh(points):
    """Convex hull as a mesh; coplanar inputs fall back to a lifted 2D hull.

    Returns None when the points are too degenerate for any hull (collinear).
    """
    from scipy.spatial import ConvexHull, QhullError

    if len(points) >= 4:
        try:
            hull = ConvexHull(points)
            return TriangleMesh(hull.points.copy(),
                                hull.simplices.astype(np.int64))
        except QhullError:
            pass
    center = points.mean(axis=0)
    centered = points - center
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if len(s) < 2 or s[1] < 1e-12:
        return None
    uv = centered @ vt[:2].T
    try:
        hull2 = ConvexHull(uv)
    except QhullError:
        return None
    ring = hull2.vertices  # counter-clockwise boundary
    if len(ring) < 3:
        return None
    tris = np.array([[ring[0], ring[i], ring[i + 1]]
                     for i in range(1, len(ring) - 1)], dtype=np.int64)
    return TriangleMesh(points.copy(), tris)


def lps_sample(views, extrinsics, cfg):
    """Local baseline: per-view color filter, per-view convex hull, sample
    each hull surface, merge, and prune back to cfg.n_particles."""
    if sum(len(v) for v in views) == 0:
        raise PipelineError("register", "all views are empty")

    pool = []
    for i, (view, ext) in enumerate(zip(views, extrinsics)):
        if len(view) == 0:
            continue
        world = ColoredPointCloud(ext.apply(view.positions), view.colors,
                                  "world")
        filtered = voxel_downsample(hsv_filter(world, cfg.hsv), cfg.v_s)
        pts = filtered.positions
        if len(pts) == 0:
            continue
        mesh = _hull_mesh(pts)
        if mesh is None:
            pool.append(pts)
            continue
        pool.append(uniform_sample_mesh(mesh, cfg.n_particles,
                                        seed=cfg.seed + i))
    if not pool:
        raise PipelineError("hsv_filter", "no points survived in any view")
    merged = np.vstack(pool)
    _require(len(merged), "hull_sampling", minimum=cfg.n_particles)
    return ParticleSet(_farthest_point_subset(merged, cfg.n_particles))


def save_particles_csv(path, particles):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "z"])
        for row in particles.positions:
            w.writerow([f"{v:.9e}" for v in row])


def load_particles_csv(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected header x,y,z")
    return ParticleSet(np.array([[float(v) for v in r] for r in rows[1:]]))
