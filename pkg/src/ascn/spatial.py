"""Exact k-nearest-neighbour search and padded receptive fields.

Neighbour order is ascending squared distance, computed as
``dx*dx + dy*dy + dz*dz`` on coordinate differences, with exact ties broken
by the lower point index. A scipy kd-tree proposes candidates; the ordering
is always decided on the recomputed distances, and any row whose candidate
set cannot be proven complete falls back to a full scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloudio import PointCloud
from .errors import DegenerateCloud, InvalidParam

_SLACK = 4


def _sqdist(diff: np.ndarray) -> np.ndarray:
    x, y, z = diff[..., 0], diff[..., 1], diff[..., 2]
    return x * x + y * y + z * z


class SpatialIndex:
    """Immutable kd-tree over a cloud's points, keeping original indices."""

    def __init__(self, cloud: PointCloud):
        self.points = cloud.points
        self.n = len(cloud)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def _scan(self, q: int, k: int) -> np.ndarray:
        d2 = _sqdist(self.points - self.points[q])
        d2[q] = np.inf
        order = np.lexsort((np.arange(self.n), d2))
        return order[:k]

    def knn_table(self, k: int) -> np.ndarray:
        """Neighbour lists for every point, shape (N, min(k, N-1))."""
        if k < 1:
            raise InvalidParam("k must be >= 1")
        kk = min(k, self.n - 1)
        if kk == 0:
            return np.empty((self.n, 0), dtype=np.int64)
        q = min(self.n, kk + 1 + _SLACK)
        tree_d, cand = self._tree.query(self.points, k=q)
        cand = cand.astype(np.int64)
        d2 = _sqdist(self.points[cand] - self.points[:, None, :])
        d2[cand == np.arange(self.n)[:, None]] = np.inf
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        table = cand[:, :kk].copy()
        if q < self.n:
            bound = tree_d[:, -1] * (1.0 - 1e-9)
            unsafe = ~(d2[:, kk - 1] < bound * bound)
            for row in np.flatnonzero(unsafe):
                table[row] = self._scan(row, kk)
        return table


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud)


def k_nearest(index: SpatialIndex, query_index: int, k: int) -> list[int]:
    """Up to ``k`` nearest neighbours of a stored point, excluding the point itself."""
    if k < 1:
        raise InvalidParam("k must be >= 1")
    kk = min(k, index.n - 1)
    if kk == 0:
        return []
    q = min(index.n, kk + 1 + _SLACK)
    tree_d, cand = index._tree.query(index.points[query_index], k=q)
    cand = np.atleast_1d(cand).astype(np.int64)
    d2 = _sqdist(index.points[cand] - index.points[query_index])
    d2[cand == query_index] = np.inf
    order = np.lexsort((cand, d2))
    if q < index.n and not d2[order[kk - 1]] < (np.atleast_1d(tree_d)[-1] * (1 - 1e-9)) ** 2:
        return index._scan(query_index, kk).tolist()
    return cand[order[:kk]].tolist()


@dataclass(frozen=True, eq=False)
class ReceptiveField:
    """A centre point, its neighbours in ascending distance, padded to ``M_max`` slots.

    Padded slots repeat the centre index and carry a zero direction and zero
    distance.
    """

    center_index: int
    neighbor_indices: np.ndarray  # (M_max,)
    directions: np.ndarray  # (M_max, 3)
    distances: np.ndarray  # (M_max,)
    valid_count: int

    @property
    def m_max(self) -> int:
        return self.neighbor_indices.shape[0]


@dataclass(frozen=True, eq=False)
class FieldBatch:
    """Receptive fields of every point in a cloud, stacked into arrays."""

    neighbor_indices: np.ndarray  # (N, M_max)
    directions: np.ndarray  # (N, M_max, 3)
    distances: np.ndarray  # (N, M_max)
    valid_count: np.ndarray  # (N,)

    def __len__(self):
        return self.neighbor_indices.shape[0]

    @property
    def m_max(self) -> int:
        return self.neighbor_indices.shape[1]

    def field(self, n: int) -> ReceptiveField:
        return ReceptiveField(n, self.neighbor_indices[n], self.directions[n],
                              self.distances[n], int(self.valid_count[n]))

    def __iter__(self):
        return (self.field(n) for n in range(len(self)))

    def max_distances(self) -> np.ndarray:
        """Farthest real neighbour per field; 0 for a field with no neighbours."""
        far = self.distances[np.arange(len(self)), np.maximum(self.valid_count - 1, 0)]
        return np.where(self.valid_count > 0, far, 0.0)

    def valid_mask(self) -> np.ndarray:
        return np.arange(self.m_max)[None, :] < self.valid_count[:, None]


def fields_from_table(points: np.ndarray, table: np.ndarray, m: np.ndarray, m_max: int) -> FieldBatch:
    """Assemble padded fields from sorted neighbour lists and per-point sizes ``m``."""
    n = points.shape[0]
    if n < 2:
        raise DegenerateCloud("a receptive field needs at least two points")
    m = np.broadcast_to(np.asarray(m, dtype=np.int64), (n,))
    if np.any(m < 1) or np.any(m > m_max):
        raise InvalidParam("neighbourhood sizes must satisfy 1 <= M <= M_max")
    valid = np.minimum(m, table.shape[1])
    centers = np.arange(n)
    width = min(m_max, table.shape[1])
    nbr = np.repeat(centers[:, None], m_max, axis=1)
    nbr[:, :width] = table[:, :width]
    pad = np.arange(m_max)[None, :] >= valid[:, None]
    nbr[pad] = np.broadcast_to(centers[:, None], nbr.shape)[pad]
    directions = points[nbr] - points[:, None, :]
    distances = np.sqrt(_sqdist(directions))
    return FieldBatch(nbr, directions, distances, valid)


def receptive_field(cloud: PointCloud, index: SpatialIndex, n: int, M: int, M_max: int) -> ReceptiveField:
    if not 1 <= M <= M_max:
        raise InvalidParam("need 1 <= M <= M_max")
    if len(cloud) < 2:
        raise DegenerateCloud("a receptive field needs at least two points")
    nbrs = np.array(k_nearest(index, n, M), dtype=np.int64)
    valid = nbrs.shape[0]
    idx = np.full(M_max, n, dtype=np.int64)
    idx[:valid] = nbrs
    directions = cloud.points[idx] - cloud.points[n]
    distances = np.sqrt(_sqdist(directions))
    return ReceptiveField(n, idx, directions, distances, valid)


def receptive_fields(cloud: PointCloud, index: SpatialIndex, m, m_max: int) -> FieldBatch:
    """Fields for every point; ``m`` is a scalar or a per-point size array."""
    return fields_from_table(cloud.points, index.knn_table(m_max), m, m_max)


def max_distance(rf: ReceptiveField) -> float:
    """Distance to the farthest real neighbour; padded slots never count."""
    return float(rf.distances[rf.valid_count - 1])
