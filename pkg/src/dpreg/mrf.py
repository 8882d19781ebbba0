"""Neighbour graph and mean-field inference for the driving-point MRF.

The model over discrete displacements psi(p) in D is

    log P(psi) = alpha * sum_p mu[p, psi(p)]
                 - lam * sum_p sum_{n in N(p)} w[p, n] * |psi(p) - psi(n)|^2

with ``w[p, n] = exp(-|p - n|^2 / (2 sigma))``.  Each undirected edge appears
twice in the double sum, hence the factor 2 in the mean-field update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .matching import DisplacementDistribution, SearchRegion


@dataclass(frozen=True)
class MrfConfig:
    weight: float = 10.0         # lambda
    bandwidth: float = 8.0       # sigma_p
    temperature: float = 1000.0  # alpha, multiplies the potentials
    iterations: int = 5
    neighbors: int = 6

    def __post_init__(self):
        if self.weight < 0 or self.bandwidth <= 0 or self.temperature <= 0:
            raise ValueError("need weight >= 0, bandwidth > 0, temperature > 0")
        if self.iterations < 0 or self.neighbors < 0:
            raise ValueError("iterations and neighbors must be non-negative")


@dataclass
class NeighborGraph:
    """Symmetric kNN adjacency with Gaussian edge weights.

    ``weights`` is a tensor, tape-tracked when the points were; ``matrix``
    gives the plain array.
    """

    adjacency: np.ndarray
    weights: ad.Tensor

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self.weights.data

    def neighbors(self, p: int) -> list[int]:
        return [int(n) for n in np.flatnonzero(self.adjacency[p])]

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return list(zip(i.tolist(), j.tolist()))


def knn_adjacency(pts: np.ndarray, k: int) -> np.ndarray:
    """Union-symmetrised kNN adjacency; ties broken by index, ``k`` clamped to n - 1."""
    n = len(pts)
    k = min(k, n - 1)
    adj = np.zeros((n, n), dtype=bool)
    if k > 0:
        d2 = cdist(pts, pts, "sqeuclidean") + np.diag(np.full(n, np.inf))
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        adj[np.repeat(np.arange(n), k), order.ravel()] = True
    adj |= adj.T
    np.fill_diagonal(adj, False)
    return adj


def edge_weights(points, adjacency: np.ndarray, bandwidth: float) -> ad.Tensor:
    """``exp(-|p - n|^2 / (2 bandwidth))`` on edges, differentiable in the points."""
    points = ad.as_tensor(points)
    P = points.data
    d2 = cdist(P, P, "sqeuclidean")
    W = np.where(adjacency, np.exp(-d2 / (2.0 * bandwidth)), 0.0)

    def backward(g):
        S = (g + g.T) * W
        return (-(S.sum(axis=1)[:, None] * P - S @ P) / bandwidth,)

    return ad.custom_op(W, (points,), backward)


def build_graph(points, cfg: MrfConfig) -> NeighborGraph:
    """k-nearest-neighbour graph, symmetrised by union, Gaussian edge weights.

    ``points`` may be a DrivingPointSet, an (N, 3) array or a tracked tensor;
    only the weights carry gradients, the topology is fixed per call.
    """
    if hasattr(points, "provenance"):
        points = points.points
    points = ad.as_tensor(points)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("build_graph needs at least one point")
    adj = knn_adjacency(points.data, cfg.neighbors)
    return NeighborGraph(adj, edge_weights(points, adj, cfg.bandwidth))


def mean_field(dist: DisplacementDistribution, graph: NeighborGraph, cfg: MrfConfig) -> ad.Tensor:
    """Synchronous mean-field marginals q (|O|, |D|); differentiable in the potentials."""
    mu = dist.potentials
    P, K = mu.shape
    if graph.size != P:
        raise ValueError(f"graph has {graph.size} nodes but distribution has {P} points")
    deltas = dist.region.displacements()
    sq = (deltas**2).sum(axis=1)
    W = graph.weights
    unary = ad.scalar_mul(mu, cfg.temperature)
    q = ad.softmax(unary, axis=1)
    if cfg.weight == 0 or not graph.adjacency.any():
        return q
    deg = ad.sum_(W, axis=1, keepdims=True)
    for _ in range(cfg.iterations):
        m = ad.matmul(q, deltas)                  # (P, 3) expected displacement
        s = ad.matmul(q, sq[:, None])             # (P, 1) expected squared norm
        Wm = ad.matmul(W, m)
        Ws = ad.matmul(W, s)
        cross = ad.matmul(Wm, deltas.T)           # (P, K)
        pair = ad.sub(ad.add(ad.mul(deg, sq[None, :]), Ws), ad.scalar_mul(cross, 2.0))
        logits = ad.sub(unary, ad.scalar_mul(pair, 2.0 * cfg.weight))
        q = ad.softmax(logits, axis=1)
    return q


def mean_estimate(q, region: SearchRegion) -> ad.Tensor:
    """Soft-argmax displacement per point: sum_k q[p, k] * delta_k."""
    return ad.matmul(ad.as_tensor(q), region.displacements())


def mrf_energy(labels, mu: np.ndarray, deltas: np.ndarray, graph: NeighborGraph, cfg: MrfConfig) -> float:
    """Negative log-density (up to a constant) of a discrete labelling."""
    labels = np.asarray(labels)
    unary = cfg.temperature * mu[np.arange(len(labels)), labels].sum()
    disp = deltas[labels]
    diff = ((disp[:, None, :] - disp[None, :, :]) ** 2).sum(axis=2)
    return float(-unary + cfg.weight * (graph.matrix * diff).sum())


def nearest_labels(psi: np.ndarray, region: SearchRegion) -> np.ndarray:
    """Index of the admissible displacement closest to each continuous estimate."""
    steps = region.steps
    per_axis = np.abs(np.asarray(psi)[:, :, None] - steps[None, None, :]).argmin(axis=2)
    n = len(steps)
    return (per_axis[:, 0] * n + per_axis[:, 1]) * n + per_axis[:, 2]

