"""Nonparametric k-nearest-neighbor estimators over particle clouds.

Neighbor search has two routes: a chunked brute-force scan, and a k-d tree
(:class:`scipy.spatial.cKDTree`) used to shortlist candidates whose distances
are then recomputed with the brute-force formula.  Both routes therefore
return bit-identical distances, with ties broken by point index.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, DegenerateRadiusError, DimensionError, DomainError

EULER_GAMMA = 0.57721566490153286060651209
DISTANCE_FLOOR = 1e-8

# extra candidates pulled from the tree so near-ties survive the exact re-rank
_TREE_MARGIN = 4
_BRUTE_CHUNK = 256


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("KMYRIAD_THREADS", "1")))
    except ValueError:
        return 1


# special functions


def digamma(x: float) -> float:
    """Digamma via upward recurrence to x >= 6, then the asymptotic series."""
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"digamma needs x > 0, got {x}")
    acc = 0.0
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760))))))
    return acc + math.log(x) - 0.5 * inv - series


def log_ball_volume(d: int, radius):
    """Natural log of the d-ball volume; ``-inf`` at radius 0."""
    radius = np.asarray(radius, dtype=np.float64)
    const = 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d + 1.0)
    with np.errstate(divide="ignore"):
        return const + d * np.log(radius)


def ball_volume(d: int, radius):
    if d < 1:
        raise DomainError(f"dimension must be positive, got {d}")
    out = math.pi ** (0.5 * d) / math.gamma(0.5 * d + 1.0) * np.asarray(radius, dtype=np.float64) ** d
    return float(out) if out.ndim == 0 else out


# particle clouds


@dataclass(frozen=True)
class ParticleCloud:
    points: np.ndarray
    weights: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise DimensionError(f"points must be [N, d], got shape {pts.shape}")
        if pts.shape[0] < 2:
            raise ContractError("a particle cloud needs at least two points")
        if not np.isfinite(pts).all():
            raise DomainError("particle cloud contains non-finite points")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise DimensionError("weights must have one entry per point")
            if not (np.isfinite(w).all() and (w > 0).all()):
                raise DomainError("weights must be finite and strictly positive")
            object.__setattr__(self, "weights", w)
        if self.labels is not None:
            lab = np.asarray(self.labels).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise DimensionError("labels must have one entry per point")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def select(self, label) -> "ParticleCloud":
        mask = self.labels == label
        return ParticleCloud(self.points[mask])


def as_cloud(x) -> ParticleCloud:
    return x if isinstance(x, ParticleCloud) else ParticleCloud(x)


# neighbor search


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _check_k(k: int, available: int) -> None:
    if k < 1:
        raise ContractError(f"k must be positive, got {k}")
    if k > available:
        raise ContractError(f"k={k} exceeds the {available} available neighbors")


def _brute(points: np.ndarray, q: np.ndarray, k: int, self_index=None):
    """Exhaustive k-NN of ``q`` against ``points``; ``self_index[i]`` is excluded for row i."""
    radius = np.empty(q.shape[0])
    index = np.empty((q.shape[0], k), dtype=np.intp)
    for start in range(0, q.shape[0], _BRUTE_CHUNK):
        stop = min(start + _BRUTE_CHUNK, q.shape[0])
        d = _dist(q[start:stop, None, :], points[None, :, :])
        if self_index is not None:
            d[np.arange(stop - start), self_index[start:stop]] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        index[start:stop] = order
        radius[start:stop] = np.take_along_axis(d, order[:, -1:], axis=1)[:, 0]
    return radius, index


def knn_brute(points, k: int, queries=None) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive k-NN.

    Returns ``(radius, index)`` where ``radius[i]`` is the distance to the
    k-th neighbor and ``index[i]`` lists the k neighbors in order.  Without
    ``queries`` the points query themselves and self is excluded.
    """
    points = np.asarray(points, dtype=np.float64)
    self_query = queries is None
    q = points if self_query else np.asarray(queries, dtype=np.float64)
    _check_k(k, points.shape[0] - (1 if self_query else 0))
    return _brute(points, q, k, np.arange(q.shape[0]) if self_query else None)


def knn_tree(points, k: int, queries=None) -> tuple[np.ndarray, np.ndarray]:
    """k-NN through a k-d tree shortlist; same contract as :func:`knn_brute`."""
    points = np.asarray(points, dtype=np.float64)
    self_query = queries is None
    q = points if self_query else np.asarray(queries, dtype=np.float64)
    n = points.shape[0]
    _check_k(k, n - (1 if self_query else 0))
    kq = min(n, k + (1 if self_query else 0) + _TREE_MARGIN)
    _, cand = cKDTree(points).query(q, k=kq, workers=_threads())
    cand = np.asarray(cand, dtype=np.intp).reshape(q.shape[0], kq)
    d = _dist(q[:, None, :], points[cand])
    if self_query:
        d[cand == np.arange(q.shape[0])[:, None]] = np.inf
    # sort by distance, ties by point index
    order = np.lexsort((cand, d), axis=1)[:, :k]
    index = np.take_along_axis(cand, order, axis=1)
    radius = np.take_along_axis(d, order[:, -1:], axis=1)[:, 0]
    if kq < n:
        # a tie at the k-th radius may continue past the shortlist; redo those rows exhaustively
        reach = np.where(np.isinf(d), -np.inf, d).max(axis=1)
        rows = np.flatnonzero(reach <= radius)
        if rows.size:
            radius[rows], index[rows] = _brute(points, q[rows], k, rows if self_query else None)
    return radius, index


def knn_distances(cloud, k: int, method: str = "tree") -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    pts = as_cloud(cloud).points
    search = knn_tree if method == "tree" else knn_brute
    return search(pts, k)[0]


# entropy


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    k: int
    contributions: np.ndarray = field(repr=False)

    @property
    def bias(self) -> float:
        return math.log(self.k) - digamma(self.k)


def _require_positive(radius: np.ndarray, what: str, floor: float | None) -> np.ndarray:
    if floor is not None:
        return np.maximum(radius, floor)
    bad = np.flatnonzero(radius == 0)
    if bad.size:
        shown = ", ".join(str(i) for i in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise DegenerateRadiusError(f"zero {what} at indices {shown}{more}", bad)
    return radius


def entropy_from_radii(radius: np.ndarray, dim: int, k: int) -> EntropyEstimate:
    """Classic kNN differential entropy (nats) given k-th neighbor radii."""
    n = radius.shape[0]
    contrib = math.log(n) + log_ball_volume(dim, radius) - math.log(k)
    value = float(np.mean(contrib)) + math.log(k) - digamma(k)
    return EntropyEstimate(value, k, contrib)


def entropy_knn(cloud, k: int = 5, radius_floor: float | None = None) -> EntropyEstimate:
    """kNN differential entropy.

    A zero radius raises :class:`DegenerateRadiusError` unless the caller
    opts into ``radius_floor``.
    """
    cloud = as_cloud(cloud)
    radius = _require_positive(knn_distances(cloud, k), "k-NN radius", radius_floor)
    return entropy_from_radii(radius, cloud.dim, k)


def particle_loss(cloud, k: int = 5, floor: float = DISTANCE_FLOOR) -> tuple[float, np.ndarray]:
    """Constant-free log-distance surrogate, one term ``d*ln(R)`` per particle.

    Radii are floored at ``floor`` so duplicated states give a large negative
    but finite term.
    """
    cloud = as_cloud(cloud)
    radius = np.maximum(knn_distances(cloud, k), floor)
    per = cloud.dim * np.log(radius)
    return float(per.sum()), per


def weighted_entropy(cloud: ParticleCloud, k: int = 5, normalize: bool = True) -> EntropyEstimate:
    """Importance-weighted kNN entropy.

    ``W_j`` is the summed weight of the k neighbors of particle j.  With
    ``normalize`` the per-particle weights are rescaled to sum to one first.
    """
    if cloud.weights is None:
        raise ContractError("weighted_entropy needs per-particle weights")
    w = cloud.weights / cloud.weights.sum() if normalize else cloud.weights
    radius, index = knn_tree(cloud.points, k)
    _require_positive(radius, "k-NN radius", None)
    agg = w[index].sum(axis=1)
    log_v = log_ball_volume(cloud.dim, radius)
    contrib = -agg * (np.log(agg) - log_v)
    value = float(np.mean(contrib)) + math.log(k) - digamma(k)
    return EntropyEstimate(value, k, contrib)


# divergence


def kl_knn(p, q, k: int = 5, radius_floor: float | None = None) -> float:
    """kNN estimate of KL(p || q) in nats from samples of each."""
    p, q = as_cloud(p), as_cloud(q)
    if p.dim != q.dim:
        raise DimensionError(f"clouds differ in dimension: {p.dim} vs {q.dim}")
    n, m = p.n, q.n
    _check_k(k, min(n - 1, m))
    rho = _require_positive(knn_tree(p.points, k)[0], "within-sample radius", radius_floor)
    nu = _require_positive(knn_tree(q.points, k, queries=p.points)[0], "cross-sample radius",
                           radius_floor)
    return float(p.dim / n * np.sum(np.log(nu / rho)) + math.log(m / (n - 1)))


def pairwise_diversity(clouds, k: int = 5, radius_floor: float | None = None
                       ) -> tuple[float, list[float]]:
    """Mean over heads of KL(own states || states of every other head)."""
    pts = [as_cloud(c).points for c in clouds]
    if len(pts) < 2:
        raise ContractError("diversity needs at least two heads")
    per_head = []
    for h, own in enumerate(pts):
        others = np.concatenate([c for j, c in enumerate(pts) if j != h])
        per_head.append(kl_knn(own, others, k, radius_floor))
    return float(np.mean(per_head)), per_head
