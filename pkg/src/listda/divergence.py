"""Exact Wasserstein-1 distances between equal-size empirical samples.

Item-level samples pool every feature vector; list-level samples flatten
each list after sorting its items lexicographically, which makes the
flattened Euclidean metric independent of item order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .losses import min_balanced_01_loss


@dataclass(frozen=True)
class EmpiricalDist:
    """Uniform distribution over ``n`` points (rows of ``points``)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("an empirical distribution needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def diameter(self, other=None):
        pts = self.points if other is None else np.vstack([self.points, other.points])
        return float(cdist(pts, pts).max())


def _coerce(p):
    return p if isinstance(p, EmpiricalDist) else EmpiricalDist(p)


def wasserstein1_exact(p, q):
    """Min-cost perfect matching under Euclidean cost, divided by ``n``."""
    p, q = _coerce(p), _coerce(q)
    if p.n != q.n:
        raise ValueError(f"equal sample sizes required, got {p.n} and {q.n}")
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    cost = cdist(p.points, q.points)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / p.n)


def _check_lists(features):
    arr = [np.asarray(z, dtype=np.float64) for z in features]
    shapes = {z.shape for z in arr}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ValueError(f"feature lists must share one (ℓ, k) shape, got {sorted(shapes)}")
    return np.stack(arr)


def canonical_order(z):
    """Item order sorting an ``(ℓ, k)`` list lexicographically by its vectors."""
    z = np.asarray(z)
    return np.lexsort(z.T[::-1])


def canonicalize(features):
    stacked = _check_lists(features)
    return np.stack([z[canonical_order(z)] for z in stacked])


def item_level_dist(features):
    stacked = _check_lists(features)
    return EmpiricalDist(stacked.reshape(-1, stacked.shape[-1]))


def list_level_dist(features):
    canon = canonicalize(features)
    return EmpiricalDist(canon.reshape(canon.shape[0], -1))


def subsample_equal(p, q, rng):
    """Subsample the larger sample to ``min(n_p, n_q)`` points without replacement."""
    p, q = _coerce(p), _coerce(q)
    n = min(p.n, q.n)

    def cut(d):
        return d if d.n == n else EmpiricalDist(d.points[np.sort(rng.choice(d.n, n, replace=False))])

    return cut(p), cut(q)


def prop_a1_check(p, q, diameter):
    """Return ``(w1, bound, holds)`` with ``bound = R (1 - min balanced 0-1 loss)``."""
    p, q = _coerce(p), _coerce(q)
    observed = p.diameter(q)
    if diameter < observed * (1 - 1e-12):
        raise ValueError(f"diameter {diameter} is below the observed diameter {observed}")
    w1 = wasserstein1_exact(p, q)
    bound = diameter * (1.0 - min_balanced_01_loss(p.points, q.points))
    return w1, bound, bool(w1 <= bound + 1e-12 * max(1.0, diameter))
