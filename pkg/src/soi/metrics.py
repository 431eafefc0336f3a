"""Set distances between particle sets and their gradients.

`chamfer` is the summed-squared nearest-neighbor form and `emd` the exact
one-to-one assignment of Euclidean distances; `hybrid` blends the two raw
values (defaults 0.15/0.85; the units are mixed on purpose, matching how the
training loss is defined). The *_cm variants are per-point reporting forms
in centimeters and feed the success threshold. Gradients hold the matching
fixed (nearest neighbors and assignment), with ties broken to the lower
index, so they are exact away from matching switches.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .octree import knn_bulk

__all__ = [
    "Assignment", "HybridWeights",
    "chamfer", "chamfer_grad", "emd", "emd_grad",
    "hybrid", "hybrid_grad", "cd_cm", "emd_cm", "hybrid_cm", "gd_cm",
    "geodesic_distance",
]


@dataclass(frozen=True)
class Assignment:
    """Bijection from the first set onto the second, with its total cost."""

    perm: np.ndarray
    cost: float

    def __post_init__(self):
        perm = np.asarray(self.perm, dtype=int)
        if not np.array_equal(np.sort(perm), np.arange(len(perm))):
            raise ValueError("perm must be a permutation of 0..N-1")
        object.__setattr__(self, "perm", perm)


@dataclass(frozen=True)
class HybridWeights:
    alpha: float = 0.15
    beta: float = 0.85

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("hybrid weights must be non-negative")


def _check(p1, p2, same_len=False):
    p1 = np.asarray(p1, dtype=float).reshape(-1, 3)
    p2 = np.asarray(p2, dtype=float).reshape(-1, 3)
    if len(p1) == 0 or len(p2) == 0:
        raise ValueError("point sets must be non-empty")
    if same_len and len(p1) != len(p2):
        raise ValueError(f"point sets must match in size ({len(p1)} vs {len(p2)})")
    return p1, p2


def _sqdist(p1, p2):
    return ((p1[:, None, :] - p2[None, :, :]) ** 2).sum(axis=2)


def chamfer(p1, p2):
    """Sum of squared nearest-neighbor distances, both directions (m^2)."""
    p1, p2 = _check(p1, p2)
    d2 = _sqdist(p1, p2)
    return float(d2.min(axis=1).sum() + d2.min(axis=0).sum())


def chamfer_grad(p1, p2):
    """d chamfer / d p1 with both nearest-neighbor maps held fixed."""
    p1, p2 = _check(p1, p2)
    d2 = _sqdist(p1, p2)
    nn12 = d2.argmin(axis=1)  # first (lowest-index) minimum on ties
    nn21 = d2.argmin(axis=0)
    grad = 2.0 * (p1 - p2[nn12])
    delta = 2.0 * (p1[nn21] - p2)
    np.add.at(grad, nn21, delta)
    return grad


def emd(p1, p2):
    """Exact minimal-cost bijection under Euclidean distances.

    Returns (cost in meters, Assignment). Solved fresh on every call; the
    matching is never cached across timesteps.
    """
    p1, p2 = _check(p1, p2, same_len=True)
    d = np.sqrt(_sqdist(p1, p2))
    rows, cols = linear_sum_assignment(d)
    perm = np.empty(len(p1), dtype=int)
    perm[rows] = cols
    cost = float(np.sqrt(((p1 - p2[perm]) ** 2).sum(axis=1)).sum())
    return cost, Assignment(perm, cost)


def emd_grad(p1, p2):
    """d emd / d p1 with the assignment held fixed; zero on coincident pairs."""
    p1, p2 = _check(p1, p2, same_len=True)
    _, assignment = emd(p1, p2)
    diff = p1 - p2[assignment.perm]
    norm = np.sqrt((diff**2).sum(axis=1))
    safe = np.where(norm > 0, norm, 1.0)
    return diff / safe[:, None] * (norm > 0)[:, None]


def hybrid(p1, p2, w=HybridWeights()):
    return w.alpha * chamfer(p1, p2) + w.beta * emd(p1, p2)[0]


def hybrid_grad(p1, p2, w=HybridWeights()):
    return w.alpha * chamfer_grad(p1, p2) + w.beta * emd_grad(p1, p2)


def cd_cm(p1, p2):
    """Mean nearest-neighbor distance, averaged over both directions, in cm."""
    p1, p2 = _check(p1, p2)
    d2 = _sqdist(p1, p2)
    d12 = np.sqrt(d2.min(axis=1)).mean()
    d21 = np.sqrt(d2.min(axis=0)).mean()
    return float(0.5 * (d12 + d21) * 100.0)


def emd_cm(p1, p2):
    """Mean matched-pair distance in cm."""
    p1, p2 = _check(p1, p2, same_len=True)
    return float(emd(p1, p2)[0] / len(p1) * 100.0)


def hybrid_cm(p1, p2, w=HybridWeights()):
    return w.alpha * cd_cm(p1, p2) + w.beta * emd_cm(p1, p2)


def gd_cm(p1, p2, k_graph=4):
    return geodesic_distance(p1, p2, k_graph) * 100.0


def _neighbor_graph(points, k):
    idx, dist = knn_bulk(points, k)
    n = len(points)
    rows = np.repeat(np.arange(n), k)
    cols = idx.ravel()
    data = dist.ravel()
    g = csr_matrix((data, (rows, cols)), shape=(n, n))
    return g.maximum(g.T)  # symmetrize, keeping the Euclidean weight


def geodesic_distance(p1, p2, k_graph=4):
    """Mean graph distance on p2 between each p1 point's nearest p2 vertex
    and its assignment-matched p2 vertex.

    The graph connects every p2 point to its k_graph nearest neighbors
    (symmetric, Euclidean edge weights). Raises if it is disconnected.
    """
    p1, p2 = _check(p1, p2, same_len=True)
    if len(p2) <= k_graph:
        raise ValueError(f"need more than k={k_graph} points to build the graph")
    graph = _neighbor_graph(p2, k_graph)
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        sizes = np.bincount(labels)
        detail = ", ".join(f"component {i}: {s} points" for i, s in enumerate(sizes))
        raise ValueError(
            f"neighbor graph is disconnected ({n_comp} components; {detail}); "
            "increase k_graph or check the particle set"
        )
    nearest = _sqdist(p1, p2).argmin(axis=1)
    matched = emd(p1, p2)[1].perm
    sources = np.unique(nearest)
    dmat = dijkstra(graph, directed=False, indices=sources)
    row_of = {int(s): r for r, s in enumerate(sources)}
    total = 0.0
    for i in range(len(p1)):
        total += dmat[row_of[int(nearest[i])], matched[i]]
    return float(total / len(p1))
