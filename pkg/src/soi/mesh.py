"""Triangle meshes: manifold checking and repair, area-uniform resampling, I/O.

The reconstruction stage promises a manifold-with-boundary: every edge borders
at most two triangles and every vertex's incident triangles form one
edge-connected fan. `clean_non_manifold` enforces that invariant greedily.
"""

from collections import defaultdict

import numpy as np

__all__ = [
    "TriangleMesh",
    "manifold_violations",
    "is_manifold",
    "clean_non_manifold",
    "uniform_sample_mesh",
    "write_obj",
    "write_mesh_ply",
    "read_mesh",
]


class TriangleMesh:
    """Vertices (V,3) in meters, triangles (F,3) vertex indices, optional normals."""

    def __init__(self, vertices, triangles, vertex_normals=None):
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise ValueError("triangle index out of range")
            a, b, c = triangles.T
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("degenerate triangle (repeated vertex index)")
        self.vertices = vertices
        self.triangles = triangles
        self.vertex_normals = (
            None if vertex_normals is None
            else np.asarray(vertex_normals, dtype=float).reshape(-1, 3)
        )

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    def triangle_areas(self):
        v = self.vertices
        t = self.triangles
        cross = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.sqrt((cross**2).sum(axis=1))

    def area(self):
        return float(self.triangle_areas().sum()) if len(self) else 0.0

    def edge_counts(self):
        """Map from undirected edge (lo, hi) to list of incident triangle ids."""
        edges = defaultdict(list)
        for f, (a, b, c) in enumerate(self.triangles):
            for u, v in ((a, b), (b, c), (c, a)):
                edges[(min(u, v), max(u, v))].append(f)
        return edges

    def euler_characteristic(self):
        v_used = np.unique(self.triangles) if len(self) else np.empty(0, int)
        return len(v_used) - len(self.edge_counts()) + len(self)

    def compact(self):
        """Drop vertices not referenced by any triangle, reindexing faces."""
        if len(self) == 0:
            return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=int))
        used = np.unique(self.triangles)
        remap = np.full(len(self.vertices), -1, dtype=int)
        remap[used] = np.arange(len(used))
        normals = None if self.vertex_normals is None else self.vertex_normals[used]
        return TriangleMesh(self.vertices[used], remap[self.triangles], normals)

    def point_distance(self, points):
        """Distance from each query point to the mesh surface (exact, O(P·F))."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self) == 0:
            raise ValueError("empty mesh")
        tri = self.vertices[self.triangles]  # (F, 3, 3)
        out = np.empty(len(points))
        for i, p in enumerate(points):
            out[i] = np.sqrt(_point_tri_sqdist(p, tri).min())
        return out


def _point_tri_sqdist(p, tri):
    """Squared distance from point p to each triangle in tri (F,3,3)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(axis=1)
    d2 = (ac * ap).sum(axis=1)
    bp = p - b
    d3 = (ab * bp).sum(axis=1)
    d4 = (ac * bp).sum(axis=1)
    cp = p - c
    d5 = (ab * cp).sum(axis=1)
    d6 = (ac * cp).sum(axis=1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = np.maximum(va + vb + vc, 1e-300)
    v = vb / denom
    w = vc / denom
    closest = a + v[:, None] * ab + w[:, None] * ac

    # vertex regions
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    # edge regions
    t_ab = np.clip(d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0), 0, 1)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + t_ab[:, None] * ab, closest)
    t_ac = np.clip(d2 / np.where(d2 - d6 != 0, d2 - d6, 1.0), 0, 1)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + t_ac[:, None] * ac, closest)
    num = d4 - d3
    den = (d4 - d3) + (d5 - d6)
    t_bc = np.clip(num / np.where(den != 0, den, 1.0), 0, 1)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[:, None], b + t_bc[:, None] * (c - b), closest)

    return ((p - closest) ** 2).sum(axis=1)


def _fan_components(mesh, vertex, tri_ids):
    """Connected components of the triangles around `vertex`, linked by shared
    edges incident to that vertex."""
    edge_to_tris = defaultdict(list)
    for f in tri_ids:
        tri = mesh.triangles[f]
        others = [v for v in tri if v != vertex]
        for o in others:
            edge_to_tris[o].append(f)
    parent = {f: f for f in tri_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for tris in edge_to_tris.values():
        for other in tris[1:]:
            ra, rb = find(tris[0]), find(other)
            if ra != rb:
                parent[rb] = ra
    comps = defaultdict(list)
    for f in tri_ids:
        comps[find(f)].append(f)
    return list(comps.values())


def manifold_violations(mesh):
    """Return (over_shared_edges, bowtie_vertices) breaking the invariant."""
    edges = mesh.edge_counts()
    bad_edges = {e: fs for e, fs in edges.items() if len(fs) > 2}
    vert_tris = defaultdict(list)
    for f, tri in enumerate(mesh.triangles):
        for v in tri:
            vert_tris[int(v)].append(f)
    bad_vertices = {}
    for v, fs in vert_tris.items():
        comps = _fan_components(mesh, v, fs)
        if len(comps) > 1:
            bad_vertices[v] = comps
    return bad_edges, bad_vertices


def is_manifold(mesh):
    bad_edges, bad_vertices = manifold_violations(mesh)
    return not bad_edges and not bad_vertices


def clean_non_manifold(mesh):
    """Greedy repair to a manifold-with-boundary.

    Repeats two passes until clean: (1) on any edge shared by more than two
    triangles keep the two lowest-indexed ones, (2) at any vertex whose fan is
    disconnected keep only the largest-area component (ties: the component
    containing the lowest triangle index). Unreferenced vertices are compacted
    away. Idempotent.
    """
    current = mesh
    for _ in range(len(mesh.triangles) + 1):
        bad_edges, bad_vertices = manifold_violations(current)
        if not bad_edges and not bad_vertices:
            break
        drop = set()
        for fs in bad_edges.values():
            drop.update(sorted(fs)[2:])
        areas = current.triangle_areas()
        for comps in bad_vertices.values():
            scored = sorted(
                comps, key=lambda fs: (-sum(areas[f] for f in fs), min(fs))
            )
            for fs in scored[1:]:
                drop.update(fs)
        keep = [f for f in range(len(current.triangles)) if f not in drop]
        current = TriangleMesh(
            current.vertices, current.triangles[keep], current.vertex_normals
        )
    return current.compact()


def uniform_sample_mesh(mesh, n, seed=0):
    """n points sampled area-uniformly from the surface, blue-noise thinned.

    Draws 4n candidates (triangle chosen proportionally to area, barycentric
    coordinates uniform), then keeps n by greedy farthest-point selection
    seeded at the first candidate. Deterministic per seed; every output point
    lies exactly on a mesh triangle.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    m = 4 * n
    tri_idx = rng.choice(len(areas), size=m, p=areas / total)
    u = rng.random(m)
    v = rng.random(m)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.triangles[tri_idx]]
    cand = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (
        tri[:, 2] - tri[:, 0]
    )
    return _farthest_point_subset(cand, n)


def _farthest_point_subset(candidates, n):
    chosen = np.empty((n, 3))
    chosen[0] = candidates[0]
    d = np.sqrt(((candidates - candidates[0]) ** 2).sum(axis=1))
    for i in range(1, n):
        nxt = int(np.argmax(d))  # argmax takes the first max: lower index wins
        chosen[i] = candidates[nxt]
        nd = np.sqrt(((candidates - candidates[nxt]) ** 2).sum(axis=1))
        np.minimum(d, nd, out=d)
    return chosen


def write_obj(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if mesh.vertex_normals is not None:
            for vn in mesh.vertex_normals:
                f.write(f"vn {vn[0]:.9g} {vn[1]:.9g} {vn[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def write_mesh_ply(path, mesh):
    with open(path, "w") as f:
        f.write(
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(mesh.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        for v in mesh.vertices:
            f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def read_mesh(path):
    """Read a triangle mesh from OBJ or ASCII PLY (by extension)."""
    path = str(path)
    if path.endswith(".obj"):
        verts, faces = [], []
        with open(path) as f:
            for line in f:
                tok = line.split()
                if not tok:
                    continue
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    faces.append([int(t.split("/")[0]) - 1 for t in tok[1:4]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=int).reshape(-1, 3))
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: unsupported mesh format")
    n_v = n_f = 0
    i = 0
    for i, line in enumerate(lines):
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            n_v = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            n_f = int(tok[2])
        elif tok[:1] == ["end_header"]:
            break
    body = lines[i + 1:]
    verts = np.array([[float(x) for x in body[j].split()[:3]] for j in range(n_v)])
    faces = np.array(
        [[int(x) for x in body[n_v + j].split()[1:4]] for j in range(n_f)], dtype=int
    )
    return TriangleMesh(verts.reshape(-1, 3), faces.reshape(-1, 3))
