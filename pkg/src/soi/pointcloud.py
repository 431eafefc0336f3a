"""Colored point clouds and the preprocessing primitives of the sampling pipeline.

Clouds are stored as arrays (positions in meters, colors as HSV with hue in
degrees) rather than per-point objects; all operations are pure functions.
"""

from dataclasses import dataclass

import numpy as np

from .octree import Octree, knn_bulk

__all__ = [
    "ColoredPoint",
    "ColoredPointCloud",
    "RigidTransform",
    "HsvRange",
    "rgb_to_hsv",
    "hsv_to_rgb",
    "register_clouds",
    "hsv_filter",
    "voxel_downsample",
    "remove_outliers",
    "estimate_normals",
    "knn",
    "radius_neighbors",
]


@dataclass(frozen=True)
class ColoredPoint:
    """One sensor point: xyz position (m) and HSV color (h deg, s/v in [0,1])."""

    position: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        c = np.asarray(self.color, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("position must be finite")
        _check_hsv(c[None, :])
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "color", c)


def _check_hsv(colors):
    h, s, v = colors[:, 0], colors[:, 1], colors[:, 2]
    if np.any((h < 0) | (h >= 360)):
        raise ValueError("hue must lie in [0, 360)")
    if np.any((s < 0) | (s > 1) | (v < 0) | (v > 1)):
        raise ValueError("saturation/value must lie in [0, 1]")


class ColoredPointCloud:
    """Ordered point set with per-point HSV color and a frame identifier."""

    def __init__(self, positions, colors, frame_id="world"):
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        colors = np.asarray(colors, dtype=float).reshape(-1, 3)
        if len(positions) != len(colors):
            raise ValueError("positions and colors must have equal length")
        if positions.size and not np.all(np.isfinite(positions)):
            raise ValueError("positions contain NaN/inf")
        if colors.size:
            _check_hsv(colors)
        self.positions = positions
        self.colors = colors
        self.frame_id = str(frame_id)

    @classmethod
    def empty(cls, frame_id="world"):
        return cls(np.empty((0, 3)), np.empty((0, 3)), frame_id)

    @classmethod
    def from_points(cls, points, frame_id="world"):
        if not points:
            return cls.empty(frame_id)
        return cls(
            np.stack([p.position for p in points]),
            np.stack([p.color for p in points]),
            frame_id,
        )

    def point(self, i):
        return ColoredPoint(self.positions[i], self.colors[i])

    def select(self, mask_or_indices):
        return ColoredPointCloud(
            self.positions[mask_or_indices], self.colors[mask_or_indices], self.frame_id
        )

    def __len__(self):
        return len(self.positions)

    def __repr__(self):
        return f"ColoredPointCloud({len(self)} pts, frame={self.frame_id!r})"


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform: x_world = rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rot_z(cls, angle, translation=(0.0, 0.0, 0.0)):
        c, s = np.cos(angle), np.sin(angle)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(r, np.asarray(translation, dtype=float))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other):
        """self ∘ other: apply `other` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class HsvRange:
    """Inclusive HSV box; a hue range with h_min > h_max wraps through 0°."""

    h_min: float
    h_max: float
    s_min: float = 0.0
    s_max: float = 1.0
    v_min: float = 0.0
    v_max: float = 1.0

    def __post_init__(self):
        if self.s_min > self.s_max or self.v_min > self.v_max:
            raise ValueError("saturation/value mins must not exceed maxes")
        for name in ("h_min", "h_max"):
            h = getattr(self, name)
            if not 0 <= h < 360:
                raise ValueError(f"{name}={h} outside [0, 360)")

    def contains(self, colors):
        colors = np.asarray(colors, dtype=float).reshape(-1, 3)
        h, s, v = colors[:, 0], colors[:, 1], colors[:, 2]
        if self.h_min <= self.h_max:
            hue_ok = (h >= self.h_min) & (h <= self.h_max)
        else:  # wrapped through 0°
            hue_ok = (h >= self.h_min) | (h <= self.h_max)
        return (
            hue_ok
            & (s >= self.s_min)
            & (s <= self.s_max)
            & (v >= self.v_min)
            & (v <= self.v_max)
        )


def rgb_to_hsv(rgb):
    """Standard hexcone RGB -> HSV; rgb in [0,1], hue in degrees [0, 360)."""
    rgb = np.asarray(rgb, dtype=float).reshape(-1, 3)
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    maxc = rgb.max(axis=1)
    minc = rgb.min(axis=1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    nz = delta > 0
    rc = np.where(nz, (maxc - r) / np.where(nz, delta, 1.0), 0.0)
    gc = np.where(nz, (maxc - g) / np.where(nz, delta, 1.0), 0.0)
    bc = np.where(nz, (maxc - b) / np.where(nz, delta, 1.0), 0.0)
    h = np.where(r == maxc, bc - gc, np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(nz, (h / 6.0) % 1.0, 0.0) * 360.0
    return np.stack([h, s, v], axis=1)


def hsv_to_rgb(hsv):
    """Inverse hexcone conversion; hue in degrees."""
    hsv = np.asarray(hsv, dtype=float).reshape(-1, 3)
    h = (hsv[:, 0] / 60.0) % 6.0
    s, v = hsv[:, 1], hsv[:, 2]
    i = np.floor(h).astype(int)
    f = h - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i % 6, choices_r)
    g = np.choose(i % 6, choices_g)
    b = np.choose(i % 6, choices_b)
    return np.stack([r, g, b], axis=1)


def register_clouds(clouds, extrinsics):
    """Merge camera-frame clouds into one world-frame cloud.

    Each cloud i is mapped by extrinsics[i] (camera -> world); points keep
    their input ordering, clouds concatenated in argument order.
    """
    if len(clouds) != len(extrinsics):
        raise ValueError(
            f"got {len(clouds)} clouds but {len(extrinsics)} extrinsics"
        )
    if len(clouds) == 0:
        raise ValueError("need at least one cloud")
    pos = [t.apply(c.positions) if len(c) else c.positions for c, t in zip(clouds, extrinsics)]
    col = [c.colors for c in clouds]
    return ColoredPointCloud(np.concatenate(pos), np.concatenate(col), "world")


def hsv_filter(cloud, hsv_range):
    """Keep exactly the points whose color lies in the range; order preserved."""
    if len(cloud) == 0:
        return cloud.select(np.zeros(0, dtype=bool))
    return cloud.select(hsv_range.contains(cloud.colors))


def voxel_downsample(cloud, v_s):
    """One centroid point per occupied voxel of side v_s, grid anchored at origin.

    Positions and s/v color channels are averaged arithmetically; hue uses the
    circular mean so voxels straddling the 0°/360° wrap average sensibly.
    Output voxels are ordered by voxel key, so the result is deterministic and
    re-applying at the same v_s is the identity.
    """
    if v_s <= 0:
        raise ValueError(f"voxel size must be > 0, got {v_s}")
    n = len(cloud)
    if n == 0:
        return cloud
    keys = np.floor(cloud.positions / v_s).astype(np.int64)
    uniq, inverse, counts = np.unique(
        keys, axis=0, return_inverse=True, return_counts=True
    )
    m = len(uniq)
    pos = np.zeros((m, 3))
    np.add.at(pos, inverse, cloud.positions)
    pos /= counts[:, None]
    sv = np.zeros((m, 2))
    np.add.at(sv, inverse, cloud.colors[:, 1:])
    sv /= counts[:, None]
    hr = np.radians(cloud.colors[:, 0])
    circ = np.zeros((m, 2))
    np.add.at(circ, inverse, np.stack([np.cos(hr), np.sin(hr)], axis=1))
    hue = np.degrees(np.arctan2(circ[:, 1], circ[:, 0])) % 360.0
    hue[hue >= 360.0] = 0.0  # fp modulo of a tiny negative can land on 360
    # singleton voxels keep their exact hue (atan2 round-trip is not exact)
    first = np.full(m, n, dtype=int)
    np.minimum.at(first, inverse, np.arange(n))
    hue = np.where(counts == 1, cloud.colors[first % n, 0], hue)
    return ColoredPointCloud(pos, np.column_stack([hue, sv]), cloud.frame_id)


def remove_outliers(cloud, k=16, std_ratio=2.0):
    """Statistical outlier removal over mean k-nearest-neighbor distances.

    A point is dropped when its mean kNN distance exceeds the global mean plus
    std_ratio standard deviations (population std). Deterministic; output is a
    subset of the input in input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(cloud) <= k:
        raise ValueError(f"need more than k={k} points, got {len(cloud)}")
    _, dists = knn_bulk(cloud.positions, k)
    mean_d = dists.mean(axis=1)
    thresh = mean_d.mean() + std_ratio * mean_d.std()
    return cloud.select(mean_d <= thresh)


def estimate_normals(cloud, k=12):
    """Unit normals from PCA over each point's k nearest neighbors.

    Returns (normals (N,3), valid (N,) bool). The normal is the eigenvector of
    the neighborhood covariance with the smallest eigenvalue, flipped to point
    away from the cloud centroid. Rank-deficient neighborhoods (collinear or
    coincident) are flagged invalid and must be excluded downstream.
    """
    n = len(cloud)
    if not n > k:
        raise ValueError(f"need |cloud| > k, got {n} points with k={k}")
    if k < 3:
        raise ValueError("k must be >= 3 for a plane fit")
    idx, _ = knn_bulk(cloud.positions, k)
    neigh = cloud.positions[idx]  # (N, k, 3)
    mean = neigh.mean(axis=1, keepdims=True)
    centered = neigh - mean
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    valid = evals[:, 1] / scale > 1e-8  # rank >= 2 in the tangent plane
    centroid = cloud.positions.mean(axis=0)
    outward = np.einsum("ni,ni->n", normals, cloud.positions - centroid)
    normals = np.where(outward[:, None] < 0, -normals, normals)
    return normals, valid


def knn(cloud, query, k):
    """Exact k nearest point indices via octree; ties go to the lower index."""
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds cloud size {len(cloud)}")
    return Octree(cloud.positions).knn(query, k)


def radius_neighbors(cloud, query, r):
    """Sorted indices of points within distance r (inclusive) of the query."""
    return Octree(cloud.positions).radius_neighbors(query, r)
