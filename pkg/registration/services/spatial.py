import logging
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from config import DEFAULT_KNN_K
from ..models.cloud import PointCloud, NeighborGraph, GeometryError
from .geometry import CloudLike, as_points

logger = logging.getLogger(__name__)

# Relative slack used to widen tree radii so rounding never hides a tied point
TIE_SLACK = 1e-9


def _squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    return ((points - query) ** 2).sum(axis=1)


class SpatialIndex:
    """
    Exact nearest-neighbor index over a point cloud.

    The kd-tree proposes candidates; the final choice is always made on
    squared distances computed here, breaking ties by the lowest index, so
    results match a brute-force scan exactly.
    """

    def __init__(self, cloud: CloudLike):
        self.points = as_points(cloud)
        if self.points.shape[0] == 0:
            raise GeometryError("Cannot index an empty cloud.")
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def _widen(self, distances: np.ndarray) -> np.ndarray:
        return distances * (1.0 + TIE_SLACK) + TIE_SLACK

    def _resolve(self, query: np.ndarray, candidates) -> Tuple[int, float]:
        candidates = np.sort(np.asarray(candidates, dtype=np.intp))
        d2 = _squared_distances(self.points[candidates], query)
        best = int(np.argmin(d2))  # first minimum -> lowest index
        return int(candidates[best]), float(d2[best])

    def nearest(self, query: np.ndarray) -> Tuple[int, float]:
        """Exact nearest stored point to `query`: (index, euclidean distance)."""
        query = np.asarray(query, dtype=np.float64).reshape(3)
        distance, _ = self.tree.query(query, k=1)
        candidates = self.tree.query_ball_point(query, r=float(self._widen(np.asarray(distance))))
        index, d2 = self._resolve(query, candidates)
        return index, float(np.sqrt(d2))

    def nearest_many(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorized `nearest`; only near-tied rows take the slow exact path."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        n_queries = queries.shape[0]
        if len(self) == 1:
            d2 = _squared_distances(queries, self.points[0])
            return np.zeros(n_queries, dtype=np.intp), np.sqrt(d2)

        _, idx = self.tree.query(queries, k=2)
        first = ((self.points[idx[:, 0]] - queries) ** 2).sum(axis=1)
        second = ((self.points[idx[:, 1]] - queries) ** 2).sum(axis=1)
        take_second = (second < first) | ((second == first) & (idx[:, 1] < idx[:, 0]))
        best_idx = np.where(take_second, idx[:, 1], idx[:, 0]).astype(np.intp)
        best_d2 = np.where(take_second, second, first)

        lo, hi = np.minimum(first, second), np.maximum(first, second)
        suspicious = np.flatnonzero(hi - lo <= TIE_SLACK * hi + 1e-300)
        for row in suspicious:
            radius = float(self._widen(np.sqrt(hi[row])))
            candidates = self.tree.query_ball_point(queries[row], r=radius)
            best_idx[row], best_d2[row] = self._resolve(queries[row], candidates)
        return best_idx, np.sqrt(best_d2)


def build_index(cloud: CloudLike) -> SpatialIndex:
    return SpatialIndex(cloud)


def nearest(index: SpatialIndex, query: np.ndarray) -> Tuple[int, float]:
    """Exact nearest neighbor of a single query point (lowest-index tie-break)."""
    return index.nearest(query)


def build_knn_graph(cloud: CloudLike, k: int = DEFAULT_KNN_K) -> NeighborGraph:
    """
    Symmetrized k-nearest-neighbor graph.

    Edge {i, j} exists when j is among the k nearest of i or i among the k
    nearest of j. Neighbors are ordered by (squared distance, index) and k is
    capped at n - 1.
    """
    points = as_points(cloud)
    n = points.shape[0]
    if n < 2:
        raise GeometryError(f"A neighbor graph needs at least 2 points, got {n}.")
    if k < 1:
        raise GeometryError(f"k must be >= 1, got {k}.")
    k_eff = min(k, n - 1)

    if k_eff == n - 1:
        i, j = np.triu_indices(n, k=1)
        return NeighborGraph(n, np.column_stack([i, j]))

    index = SpatialIndex(points)
    # The (k+1)-th distance (self included) bounds every true k-nearest neighbor
    distances, _ = index.tree.query(points, k=k_eff + 1)
    radii = index._widen(distances[:, -1])
    balls = index.tree.query_ball_point(points, r=radii)

    heads = np.repeat(np.arange(n, dtype=np.intp), k_eff)
    tails = np.empty(n * k_eff, dtype=np.intp)
    for i, ball in enumerate(balls):
        candidates = np.asarray(ball, dtype=np.intp)
        candidates = candidates[candidates != i]
        d2 = _squared_distances(points[candidates], points[i])
        order = np.lexsort((candidates, d2))[:k_eff]
        tails[i * k_eff:(i + 1) * k_eff] = candidates[order]

    graph = NeighborGraph(n, np.column_stack([heads, tails]))
    logger.debug(f"Built {k_eff}-NN graph over {n} points with {graph.edge_count} edges.")
    return graph
