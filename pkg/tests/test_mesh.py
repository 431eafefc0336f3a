import numpy as np
import pytest

from soi.mesh import (
    TriangleMesh,
    clean_non_manifold,
    is_manifold,
    manifold_violations,
    read_mesh,
    uniform_sample_mesh,
    write_mesh_ply,
    write_obj,
)


def disk_fan(n=8):
    """Triangle fan around a center vertex: a manifold disk."""
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    verts = np.vstack([[0, 0, 0], np.column_stack([np.cos(ang), np.sin(ang),
                                                   np.zeros(n)])])
    tris = [[0, 1 + i, 1 + (i + 1) % n] for i in range(n)]
    return TriangleMesh(verts, tris)


def test_validation():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((3, 3)), [[0, 1, 1]])


def test_disk_is_manifold_and_euler_one():
    mesh = disk_fan()
    assert is_manifold(mesh)
    assert mesh.euler_characteristic() == 1


def test_over_shared_edge_detected_and_cleaned():
    verts = np.array([
        [0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, -1, 0.0],
    ])
    # three triangles share edge (0, 1)
    mesh = TriangleMesh(verts, [[0, 1, 2], [0, 1, 3], [0, 1, 4]])
    bad_edges, _ = manifold_violations(mesh)
    assert (0, 1) in bad_edges
    cleaned = clean_non_manifold(mesh)
    assert is_manifold(cleaned)
    # the two lowest-indexed triangles survive
    assert len(cleaned.triangles) == 2
    kept = {tuple(sorted(t)) for t in cleaned.triangles}
    orig = [tuple(sorted(t)) for t in mesh.triangles]
    assert kept == set(orig[:2])


def test_bowtie_keeps_larger_fan():
    # two fans meeting only at vertex 0; left fan has much larger area
    verts = np.array([
        [0, 0, 0],
        [-2, -2, 0], [-2, 2, 0],          # big triangle with 0
        [0.1, -0.1, 0], [0.1, 0.1, 0],    # small triangle with 0
    ])
    mesh = TriangleMesh(verts, [[0, 3, 4], [0, 1, 2]])
    _, bad_vertices = manifold_violations(mesh)
    assert 0 in bad_vertices
    cleaned = clean_non_manifold(mesh)
    assert is_manifold(cleaned)
    assert len(cleaned.triangles) == 1
    assert np.isclose(cleaned.area(), mesh.triangle_areas()[1])


def test_clean_is_idempotent_and_preserves_manifold_input():
    mesh = disk_fan()
    out = clean_non_manifold(mesh)
    assert np.array_equal(out.triangles, mesh.triangles)
    assert np.array_equal(out.vertices, mesh.vertices)

    rng = np.random.default_rng(0)
    for _ in range(30):
        nv = int(rng.integers(4, 12))
        verts = rng.normal(size=(nv, 3))
        nt = int(rng.integers(1, 20))
        tris = []
        for _ in range(nt):
            t = rng.choice(nv, size=3, replace=False)
            tris.append(t)
        mesh = TriangleMesh(verts, np.array(tris))
        c1 = clean_non_manifold(mesh)
        assert is_manifold(c1)
        c2 = clean_non_manifold(c1)
        assert np.array_equal(c1.triangles, c2.triangles)
        assert np.array_equal(c1.vertices, c2.vertices)


def test_compact_drops_unreferenced():
    verts = np.array([[0, 0, 0], [5, 5, 5], [1, 0, 0], [0, 1, 0.0]])
    mesh = TriangleMesh(verts, [[0, 2, 3]])
    out = mesh.compact()
    assert len(out.vertices) == 3
    assert not np.any(np.all(out.vertices == [5, 5, 5], axis=1))


def test_point_distance():
    mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), [[0, 1, 2]])
    q = np.array([
        [0.2, 0.2, 0.5],    # above interior
        [2.0, 0.0, 0.0],    # beyond vertex b
        [0.5, -1.0, 0.0],   # beside edge ab
    ])
    d = mesh.point_distance(q)
    assert np.allclose(d, [0.5, 1.0, 1.0], atol=1e-12)


class TestUniformSample:
    def square(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
        return TriangleMesh(verts, [[0, 1, 2], [0, 2, 3]])

    def test_quadrant_balance(self):
        pts = uniform_sample_mesh(self.square(), 10000, seed=0)
        qx = pts[:, 0] > 0.5
        qy = pts[:, 1] > 0.5
        for mask in (qx & qy, qx & ~qy, ~qx & qy, ~qx & ~qy):
            assert abs(int(mask.sum()) - 2500) <= 150

    def test_points_on_surface_and_deterministic(self):
        mesh = self.square()
        pts = uniform_sample_mesh(mesh, 200, seed=3)
        assert mesh.point_distance(pts).max() < 1e-9
        again = uniform_sample_mesh(mesh, 200, seed=3)
        assert np.array_equal(pts, again)
        other = uniform_sample_mesh(mesh, 200, seed=4)
        assert not np.array_equal(pts, other)

    def test_area_weighting(self):
        # tiny triangle next to a huge one: nearly all samples on the big one
        verts = np.array([[0, 0, 0], [10, 0, 0], [0, 10, 0],
                          [20, 0, 0], [20.1, 0, 0], [20, 0.1, 0.0]])
        mesh = TriangleMesh(verts, [[0, 1, 2], [3, 4, 5]])
        pts = uniform_sample_mesh(mesh, 500, seed=0)
        frac_small = (pts[:, 0] > 15).mean()
        assert frac_small < 0.01

    def test_errors(self):
        with pytest.raises(ValueError):
            uniform_sample_mesh(self.square(), 0, seed=0)
        degenerate = TriangleMesh(
            np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]]).repeat(1, 0),
            np.empty((0, 3), dtype=int),
        )
        with pytest.raises(ValueError):
            uniform_sample_mesh(degenerate, 5, seed=0)


def test_mesh_io_roundtrip(tmp_path):
    mesh = disk_fan()
    for name, writer in (("m.obj", write_obj), ("m.ply", write_mesh_ply)):
        path = tmp_path / name
        writer(path, mesh)
        back = read_mesh(path)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-8)
        assert np.array_equal(back.triangles, mesh.triangles)
