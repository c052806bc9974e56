"""Exact k-nearest example pixels for every centroid, built once per run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyExample

# kd-tree distances are only used to shortlist candidates; the final order
# comes from sq_distances. This slack absorbs rounding differences.
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


def sq_distances(points: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance from each row of ``points`` to ``q``.

    Summed channel by channel in a fixed order so every caller (including
    the brute-force reference in the tests) gets bit-identical values.
    """
    d = points[..., 0] - q[..., 0]
    out = d * d
    for c in range(1, points.shape[-1]):
        d = points[..., c] - q[..., c]
        out = out + d * d
    return out


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    """Per-centroid example indices, nearest first, ties by lower index."""

    k_nn: int
    neighbors: np.ndarray

    def __post_init__(self):
        self.neighbors.flags.writeable = False

    def __len__(self):
        return self.neighbors.shape[0]

    def query(self, m: int) -> np.ndarray:
        if not 0 <= m < self.neighbors.shape[0]:
            raise IndexError(f"centroid index {m} out of range [0, {self.neighbors.shape[0]})")
        return self.neighbors[m]


def build_index(x0: np.ndarray, y: np.ndarray, k_nn: int) -> NeighborIndex:
    """Find the ``k_nn`` nearest rows of ``y`` for every row of ``x0``.

    Args:
        x0: ``(M, 3)`` normalized Lab centroids at initialization.
        y: ``(K, 3)`` normalized Lab example pixels.
        k_nn: neighbors per centroid; clipped to ``K``.

    Returns:
        NeighborIndex whose lists are exactly what a full sort by
        (squared distance, example index) would give.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    if y.shape[0] == 0:
        raise EmptyExample("example image has no pixels")
    k = min(k_nn, y.shape[0])

    # Duplicate colors collapse to one tree point; each keeps its sorted
    # list of original indices so the tie rule stays exact.
    colors, inverse = np.unique(y, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    starts = np.searchsorted(inverse[order], np.arange(colors.shape[0] + 1))
    members = [order[starts[u] : starts[u + 1]] for u in range(colors.shape[0])]

    n_unique = colors.shape[0]
    ku = min(k, n_unique)
    tree = cKDTree(colors)
    probe = min(ku + 1, n_unique)
    dist, cand = tree.query(x0, k=probe)
    dist = dist.reshape(x0.shape[0], probe)
    cand = cand.reshape(x0.shape[0], probe)

    out = np.empty((x0.shape[0], k), dtype=np.int64)
    for m in range(x0.shape[0]):
        radius = dist[m, ku - 1]
        if probe == ku:
            uniq = np.arange(n_unique)
        elif dist[m, ku] > radius * (1 + _REL_SLACK) + _ABS_SLACK:
            uniq = cand[m, :ku]
        else:
            uniq = np.asarray(
                tree.query_ball_point(x0[m], radius * (1 + _REL_SLACK) + _ABS_SLACK),
                dtype=np.int64,
            )
        pool = np.concatenate([members[u][:k] for u in uniq])
        d2 = sq_distances(y[pool], x0[m])
        pick = np.lexsort((pool, d2))[:k]
        out[m] = pool[pick]
    return NeighborIndex(k, out)
