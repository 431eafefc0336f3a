"""Ball-pivoting surface reconstruction over an oriented point cloud.

A ball of fixed radius is seeded on three points whose circumball is empty,
then rolled over front edges: for each edge the candidate giving the smallest
pivot angle is attached. Failed edges are retried with the next (larger)
radius. Deterministic: seeds take the lowest-index valid triple, candidate
ties break to the lower point index, and the front is processed FIFO.
"""

import math
from collections import defaultdict, deque

import numpy as np

from .mesh import TriangleMesh
from .octree import Octree, knn_bulk

__all__ = ["BpaConfig", "bpa_reconstruct"]

# A point counts as strictly inside a ball only when it clears this margin,
# so points lying exactly on the sphere (regular grids) do not block a pivot.
_INSIDE_SLACK = 1e-9
_ANGLE_EPS = 1e-9


class BpaConfig:
    """Strictly increasing pivot radii in meters."""

    def __init__(self, radii):
        radii = tuple(float(r) for r in radii)
        if not radii:
            raise ValueError("need at least one radius")
        if any(r <= 0 for r in radii):
            raise ValueError("radii must be positive")
        if any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("radii must be strictly increasing")
        self.radii = radii

    @classmethod
    def from_cloud(cls, points, k=4):
        """Radius schedule {r, 2r, 4r} with r twice the mean k-neighbor spacing."""
        points = np.asarray(points, dtype=float)
        if len(points) < k + 1:
            raise ValueError("too few points to estimate spacing")
        _, d = knn_bulk(points, k)
        r = 2.0 * float(d.mean())
        return cls((r, 2.0 * r, 4.0 * r))

    def __repr__(self):
        return f"BpaConfig(radii={self.radii})"


def _cross(a, b):
    """Row-wise cross product without numpy's axis bookkeeping overhead."""
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([ay * bz - az * by, az * bx - ax * bz,
                     ax * by - ay * bx], axis=-1)


def _circum_many(pa, pb, pc):
    """Circumcenter, squared circumradius, and unit normal for triangles
    (pa, pb[k], pc[k]); pa fixed, pb broadcastable against pc (K,3).
    Degenerate rows get nan."""
    ab = np.broadcast_to(pb - pa, pc.shape)
    ac = pc - pa
    n = _cross(ab, ac)
    n2 = (n**2).sum(axis=1)
    ab2 = (ab**2).sum(axis=1)
    ac2 = (ac**2).sum(axis=1)
    degncut = (ab2 * ac2) * 1e-24
    bad = n2 <= degncut
    n2safe = np.where(bad, 1.0, n2)
    t1 = ac2[:, None] * _cross(n, ab)
    t2 = ab2[:, None] * _cross(ac, n)
    cc = pa + (t1 + t2) / (2.0 * n2safe[:, None])
    r2 = ((cc - pa) ** 2).sum(axis=1)
    nhat = n / np.sqrt(n2safe)[:, None]
    r2[bad] = np.nan
    return cc, r2, nhat


class _Front:
    """Mesh-in-progress bookkeeping shared by seeding and pivoting.

    Triangles carry a consistent winding: each undirected edge may host its
    two directed half-edges only once each, so a candidate whose triangle
    would repeat an existing half-edge direction is rejected. This breaks
    co-spherical ties (regular grids) toward a consistent tiling instead of
    overlapping triangles.
    """

    def __init__(self, points, normals):
        self.p = points
        self.n = normals
        self.tree = Octree(points)
        self.tris = []
        self.tri_set = set()
        self.edge_count = defaultdict(int)
        self.half_edges = set()  # directed (u, v) pairs used by some triangle
        self.front = {}  # (lo, hi) -> (opposite vertex, ball normal, (u, v))
        self.front_deg = np.zeros(len(points), dtype=np.int32)
        self.used = np.zeros(len(points), dtype=bool)

    def ball_empty(self, center, rho, triple):
        near = self.tree.radius_neighbors(center, rho - _INSIDE_SLACK)
        return all(i in triple for i in near)

    @staticmethod
    def ball_empty_among(center, rho, triple, idx, pts):
        """Emptiness tested against a precomputed superset of possible
        violators (idx, pts); avoids a tree query per candidate."""
        d2 = ((pts - center) ** 2).sum(axis=1)
        bad = idx[d2 < (rho - _INSIDE_SLACK) ** 2]
        return all(i in triple for i in bad)

    def add_triangle(self, a, b, c, nhat, queue):
        """a, b, c in final winding order; nhat is the ball-side normal."""
        self.tris.append((a, b, c))
        self.tri_set.add(tuple(sorted((a, b, c))))
        self.used[[a, b, c]] = True
        for u, v, opp in ((a, b, c), (b, c, a), (c, a, b)):
            self.half_edges.add((u, v))
            e = (u, v) if u < v else (v, u)
            self.edge_count[e] += 1
            if self.edge_count[e] == 1:
                self.front[e] = (opp, nhat, (u, v))
                self.front_deg[e[0]] += 1
                self.front_deg[e[1]] += 1
                queue.append(e)
            elif e in self.front:
                del self.front[e]
                self.front_deg[e[0]] -= 1
                self.front_deg[e[1]] -= 1


def _pivot(st, e, rho, queue):
    """Roll the ball over front edge e; attach the first-contact candidate."""
    i, j = e
    opp, nhat, (eu, ev) = st.front[e]
    pi, pj, po = st.p[i], st.p[j], st.p[opp]
    cc, r2, ntri = _circum_many(pi, pj, po[None, :])
    if np.isnan(r2[0]) or r2[0] > rho**2:
        return False
    ntri = ntri[0] if float(ntri[0] @ nhat) >= 0 else -ntri[0]
    c_old = cc[0] + math.sqrt(max(rho**2 - r2[0], 0.0)) * ntri

    m = 0.5 * (pi + pj)
    axis = pj - pi
    axis = axis / np.linalg.norm(axis)
    u = c_old - m
    u = u - (u @ axis) * axis
    un = np.linalg.norm(u)
    if un < 1e-15:
        return False
    u = u / un
    w = np.cross(axis, u)
    if float((c_old - po) @ w) < 0:
        w = -w

    d2m = ((st.p - m) ** 2).sum(axis=1)
    near = np.nonzero(d2m <= 4.0 * rho * rho)[0]
    if len(near) == 0:
        return False
    near_pts = st.p[near]  # any ball violator lies within 2*rho of m
    mask = (near != i) & (near != j) & (near != opp)
    mask &= ~(st.used[near] & (st.front_deg[near] == 0))  # interior verts
    cand = near[mask]
    if len(cand) == 0:
        return False
    cc_x, r2_x, n_x = _circum_many(pi, pj, st.p[cand])
    ok = ~np.isnan(r2_x) & (r2_x <= rho**2)
    if not ok.any():
        return False
    cand, cc_x, r2_x, n_x = cand[ok], cc_x[ok], r2_x[ok], n_x[ok]
    h = np.sqrt(np.maximum(rho**2 - r2_x, 0.0))

    # both resting positions of the ball for every candidate
    centers = np.concatenate([cc_x + h[:, None] * n_x,
                              cc_x - h[:, None] * n_x])
    sides = np.concatenate([n_x, -n_x])
    cand2 = np.concatenate([cand, cand])
    v = centers - m
    theta = np.mod(np.arctan2(v @ w, v @ u), 2.0 * math.pi)
    # a contact at angle 0 is legitimate (4 co-spherical points: the resting
    # ball already touches the candidate); near-2pi values are the same
    # configuration seen across the wrap, fold them back
    theta = np.where(theta >= 2.0 * math.pi - _ANGLE_EPS, 0.0, theta)
    # reject configurations unanimously opposed to the point normals
    # (keeps the ball from wrapping around an open sheet boundary)
    d_i = sides @ st.n[i]
    d_j = sides @ st.n[j]
    d_x = (sides * st.n[cand2]).sum(axis=1)
    live = ~((d_i <= 0) & (d_j <= 0) & (d_x <= 0))
    # the new triangle's winding must face the ball, or the sheet would fold
    # onto itself
    p_eu, p_ev = st.p[eu], st.p[ev]
    wvec = _cross(p_eu - p_ev, st.p[cand2] - p_ev)
    live &= (wvec * sides).sum(axis=1) > 0
    # first contact: smallest pivot angle, ties to the lower point index
    order = np.lexsort((cand2, theta))
    order = order[live[order]]

    for k in order:
        x = int(cand2[k])
        tri_key = tuple(sorted((i, j, x)))
        if tri_key in st.tri_set:
            continue
        # new triangle (ev, eu, x) glues onto the stored half-edge (eu, ev)
        if (eu, x) in st.half_edges or (x, ev) in st.half_edges:
            continue
        if not st.ball_empty_among(centers[k], rho, (i, j, x), near, near_pts):
            continue
        st.add_triangle(ev, eu, x, sides[k], queue)
        return True
    return False


_SEED_FANOUT = 24  # pair scan per orphan limited to its nearest partners


def _seed(st, rho, cursor, queue):
    """Lowest-index orphan triple whose circumball of radius rho is empty.

    Per orphan, all partner pairs are evaluated in one vectorized pass,
    scanned in (b, c) lexicographic order for determinism.
    """
    n = len(st.p)
    a = cursor[0]
    while a < n:
        if st.used[a]:
            a += 1
            continue
        pa = st.p[a]
        near = np.nonzero(((st.p - pa) ** 2).sum(axis=1) <= 4.0 * rho * rho)[0]
        near_pts = st.p[near]
        nb = near[(near > a) & ~st.used[near]]
        if len(nb) >= 2:
            if len(nb) > _SEED_FANOUT:
                d2 = ((st.p[nb] - pa) ** 2).sum(axis=1)
                keep = np.lexsort((nb, d2))[:_SEED_FANOUT]
                nb = np.sort(nb[keep])
            bi, ci = np.triu_indices(len(nb), k=1)
            bs, cs = nb[bi], nb[ci]
            cc, r2, nhat = _circum_many(pa, st.p[bs], st.p[cs])
            ok = ~np.isnan(r2) & (r2 <= rho**2)
            if ok.any():
                bs, cs = bs[ok], cs[ok]
                cc, r2, nhat = cc[ok], r2[ok], nhat[ok]
                flip = (nhat * (st.n[a] + st.n[bs] + st.n[cs])).sum(axis=1) < 0
                nhat = np.where(flip[:, None], -nhat, nhat)
                h = np.sqrt(np.maximum(rho**2 - r2, 0.0))
                centers = cc + h[:, None] * nhat
                # batched emptiness versus the shared 2*rho neighborhood
                d2 = ((near_pts[None] - centers[:, None]) ** 2).sum(axis=-1)
                inside = d2 < (rho - _INSIDE_SLACK) ** 2
                rows = np.arange(len(bs))
                inside[:, near == a] = False
                inside[rows, np.searchsorted(near, bs)] = False
                inside[rows, np.searchsorted(near, cs)] = False
                empty = ~inside.any(axis=1)
                if empty.any():
                    k = int(np.argmax(empty))
                    b, c, nh = int(bs[k]), int(cs[k]), nhat[k]
                    pb2, pc2 = st.p[b], st.p[c]
                    if float(np.dot(np.cross(pb2 - pa, pc2 - pa), nh)) < 0:
                        b, c = c, b
                    st.add_triangle(a, b, c, nh, queue)
                    cursor[0] = a
                    return True
        a += 1
        cursor[0] = a
    return False


def bpa_reconstruct(points, normals, config):
    """Reconstruct a triangle mesh; vertices are a subset of the input points.

    Every output triangle satisfies the empty-ball property at the radius it
    was created with. The result may still contain bowtie vertices; run
    clean_non_manifold afterwards when the strict invariant is needed.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise ValueError("surface reconstruction needs at least 3 points")
    if len(normals) != len(points):
        raise ValueError("one normal per point required")

    st = _Front(points, normals)
    for rho in config.radii:
        queue = deque(sorted(st.front.keys()))
        cursor = [0]
        while True:
            while queue:
                e = queue.popleft()
                if e in st.front:
                    _pivot(st, e, rho, queue)
            if not _seed(st, rho, cursor, queue):
                break

    if not st.tris:
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=int))
    mesh = TriangleMesh(points, np.array(st.tris, dtype=int), normals)
    return mesh.compact()
