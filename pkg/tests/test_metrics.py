import heapq
import itertools

import numpy as np
import pytest

from soi.metrics import (
    Assignment,
    HybridWeights,
    cd_cm,
    chamfer,
    chamfer_grad,
    emd,
    emd_cm,
    emd_grad,
    geodesic_distance,
    hybrid,
    hybrid_cm,
    hybrid_grad,
)


def chamfer_brute(p1, p2):
    total = 0.0
    for a in p1:
        total += min(((a - b) ** 2).sum() for b in p2)
    for b in p2:
        total += min(((a - b) ** 2).sum() for a in p1)
    return total


def emd_brute(p1, p2):
    best = np.inf
    for perm in itertools.permutations(range(len(p2))):
        cost = sum(np.linalg.norm(p1[i] - p2[j]) for i, j in enumerate(perm))
        best = min(best, cost)
    return best


def dijkstra_brute(adj, src):
    """adj: dict node -> list of (node, weight)."""
    dist = {src: 0.0}
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, np.inf):
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def ring(n, radius=1.0):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang),
                            np.zeros(n)])


class TestChamfer:
    def test_identical_zero(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(20, 3))
        assert chamfer(p, p) == 0.0

    def test_two_singletons(self):
        p1 = np.array([[0.0, 0, 0]])
        p2 = np.array([[1.0, 0, 0]])
        assert chamfer(p1, p2) == pytest.approx(2.0, abs=1e-15)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            p1 = rng.normal(size=(64, 3))
            p2 = rng.normal(size=(64, 3))
            assert abs(chamfer(p1, p2) - chamfer_brute(p1, p2)) < 1e-12

    def test_symmetric_and_permutation_invariant(self):
        rng = np.random.default_rng(2)
        p1 = rng.normal(size=(30, 3))
        p2 = rng.normal(size=(40, 3))
        assert chamfer(p1, p2) == pytest.approx(chamfer(p2, p1), rel=1e-15)
        perm = rng.permutation(30)
        assert chamfer(p1[perm], p2) == pytest.approx(chamfer(p1, p2), rel=1e-15)

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            chamfer(np.empty((0, 3)), np.zeros((1, 3)))


class TestEmd:
    def test_permutation_costs_zero(self):
        rng = np.random.default_rng(3)
        p1 = rng.normal(size=(12, 3))
        p2 = p1[rng.permutation(12)]
        cost, assignment = emd(p1, p2)
        assert cost == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(p2[assignment.perm], p1)

    def test_translation(self):
        rng = np.random.default_rng(4)
        p1 = rng.normal(size=(15, 3))
        t = np.array([0.3, -0.1, 0.2])
        cost, assignment = emd(p1, p1 + t)
        assert cost == pytest.approx(15 * np.linalg.norm(t), rel=1e-12)
        assert np.array_equal(assignment.perm, np.arange(15))

    def test_matches_factorial_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(60):
            n = int(rng.integers(2, 8))
            p1 = rng.normal(size=(n, 3))
            p2 = rng.normal(size=(n, 3))
            cost, _ = emd(p1, p2)
            assert cost == pytest.approx(emd_brute(p1, p2), abs=1e-10)

    def test_symmetric_cost(self):
        rng = np.random.default_rng(6)
        p1 = rng.normal(size=(10, 3))
        p2 = rng.normal(size=(10, 3))
        assert emd(p1, p2)[0] == pytest.approx(emd(p2, p1)[0], rel=1e-12)

    def test_cardinality_mismatch(self):
        with pytest.raises(ValueError):
            emd(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_assignment_validates(self):
        with pytest.raises(ValueError):
            Assignment(np.array([0, 0, 2]), 1.0)


class TestHybrid:
    def test_weights(self):
        rng = np.random.default_rng(7)
        p1 = rng.normal(size=(16, 3))
        p2 = rng.normal(size=(16, 3))
        assert hybrid(p1, p1) == 0.0
        assert hybrid(p1, p2, HybridWeights(1.0, 0.0)) == pytest.approx(
            chamfer(p1, p2), rel=1e-15
        )
        expected = 0.15 * chamfer(p1, p2) + 0.85 * emd(p1, p2)[0]
        assert hybrid(p1, p2) == pytest.approx(expected, rel=1e-15)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            HybridWeights(-0.1, 0.5)

    def test_cm_reporting_forms(self):
        p1 = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        p2 = np.array([[0.0, 0, 0], [1.0, 0.02, 0]])
        # both directions see NN distances (0, 0.02): mean 1 cm
        assert cd_cm(p1, p2) == pytest.approx(1.0, rel=1e-12)
        assert emd_cm(p1, p2) == pytest.approx(1.0, rel=1e-12)
        assert hybrid_cm(p1, p2) == pytest.approx(1.0, rel=1e-9)


class TestGradients:
    def fd_grad(self, fn, p1, h=1e-5):
        g = np.zeros_like(p1)
        for i in range(p1.shape[0]):
            for c in range(3):
                up = p1.copy(); up[i, c] += h
                dn = p1.copy(); dn[i, c] -= h
                g[i, c] = (fn(up) - fn(dn)) / (2 * h)
        return g

    def test_zero_at_identity(self):
        rng = np.random.default_rng(8)
        p = rng.normal(size=(10, 3))
        assert np.allclose(emd_grad(p, p), 0)

    def test_chamfer_grad_matches_fd(self):
        rng = np.random.default_rng(9)
        p1 = rng.normal(size=(16, 3))
        p2 = rng.normal(size=(16, 3))
        g = chamfer_grad(p1, p2)
        fd = self.fd_grad(lambda q: chamfer(q, p2), p1)
        assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4

    def test_emd_grad_matches_fd(self):
        rng = np.random.default_rng(10)
        p1 = rng.normal(size=(16, 3))
        p2 = rng.normal(size=(16, 3))
        g = emd_grad(p1, p2)
        fd = self.fd_grad(lambda q: emd(q, p2)[0], p1)
        assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4

    def test_hybrid_grad_matches_fd(self):
        rng = np.random.default_rng(11)
        p1 = rng.normal(size=(16, 3))
        p2 = rng.normal(size=(16, 3))
        g = hybrid_grad(p1, p2)
        fd = self.fd_grad(lambda q: hybrid(q, p2), p1)
        assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-12) < 1e-4

    def test_emd_translation_directions(self):
        rng = np.random.default_rng(12)
        p2 = rng.normal(size=(12, 3))
        t = np.array([0.05, 0.02, -0.04])
        g = emd_grad(p2 + t, p2)
        expected = t / np.linalg.norm(t)
        assert np.allclose(g, expected, atol=1e-9)


class TestGeodesic:
    def test_identity_zero(self):
        p = ring(20)
        assert geodesic_distance(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_antipodal_duplicate_contributes_semiperimeter(self):
        m = 24
        p2 = ring(m, radius=0.5)
        p1 = p2.copy()
        # drop the point at vertex 0 and duplicate its antipode: the spare
        # copy gets matched across the ring
        p1[0] = p2[m // 2]
        total = geodesic_distance(p1, p2) * m
        perimeter = m * np.linalg.norm(p2[0] - p2[1])
        assert abs(total - perimeter / 2) / (perimeter / 2) < 0.05

    def test_matches_dijkstra_brute_force_on_ring(self):
        m = 20
        rng = np.random.default_rng(13)
        p2 = ring(m)
        p1 = p2 + rng.normal(scale=0.02, size=p2.shape)

        # brute-force reference with the same k=4 graph
        idx = np.argsort(
            ((p2[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2)
            + np.eye(m) * 1e9, axis=1,
        )[:, :4]
        adj = {i: [] for i in range(m)}
        for i in range(m):
            for j in idx[i]:
                w = float(np.linalg.norm(p2[i] - p2[j]))
                adj[i].append((int(j), w))
                adj[int(j)].append((i, w))
        nearest = ((p1[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2).argmin(axis=1)
        matched = emd(p1, p2)[1].perm
        expect = np.mean([
            dijkstra_brute(adj, int(nearest[i]))[int(matched[i])]
            for i in range(m)
        ])
        assert geodesic_distance(p1, p2) == pytest.approx(expect, rel=1e-12)

    def test_disconnected_graph_reports_components(self):
        far = np.vstack([ring(8), ring(8) + [100.0, 0, 0]])
        with pytest.raises(ValueError, match="component"):
            geodesic_distance(far, far)
