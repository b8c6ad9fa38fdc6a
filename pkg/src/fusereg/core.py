"""Point clouds, rigid transforms and nearest-neighbour search.

Everything here is float64 and immutable once constructed. Arrays handed
out by :class:`PointCloud` and :class:`RigidTransform` are read-only views.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

ORTHO_TOL = 1e-9


class DegenerateConfigurationError(ValueError):
    pass


class EmptyIndexError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) points with optional (N, 3) uint8 colours."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.colors is not None:
            raw = np.asarray(self.colors)
            if raw.size == 0:
                raw = raw.reshape(0, 3)
            if raw.shape != pts.shape:
                raise ValueError(
                    f"colors shape {raw.shape} does not match points {pts.shape}")
            if np.any(raw < 0) or np.any(raw > 255):
                raise ValueError("color channels must lie in [0, 255]")
            object.__setattr__(self, "colors", _frozen(raw.astype(np.uint8)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_colors(self) -> bool:
        return self.colors is not None

    def select(self, idx) -> "PointCloud":
        idx = np.asarray(idx)
        cols = None if self.colors is None else self.colors[idx]
        return PointCloud(self.points[idx], cols)

    @classmethod
    def empty(cls, colored: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8) if colored else None)


def _project_rotation(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> rotation @ x + translation, with rotation in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("transform entries must be finite")
        if (np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL
                or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL):
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_matrix(rotvec), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def __repr__(self):
        return f"RigidTransform(yaw={self.yaw:.6f}, translation={self.translation.tolist()})"


def rotvec_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-15:
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        return _project_rotation(np.eye(3) + k)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * (kx @ kx)


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply_points(cloud.points), cloud.colors)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if (np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL
            or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL):
        r = _project_rotation(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def objective_eq4(target: np.ndarray, source: np.ndarray, t: RigidTransform) -> float:
    """Mean squared residual |p_t - R p_s - T|^2 over paired rows."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if target.shape[0] == 0:
        raise ValueError("objective needs at least one pair")
    if target.shape != source.shape:
        raise ValueError("target and source must pair row for row")
    d = target - t.apply_points(source)
    return float(np.einsum("ij,ij->", d, d) / target.shape[0])


def best_fit_transform(target: np.ndarray, source: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid transform taking ``source`` onto ``target``.

    SVD of the cross-covariance with the usual reflection fix. Raises
    :class:`DegenerateConfigurationError` for fewer than three pairs or
    collinear configurations.
    """
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if target.shape != source.shape:
        raise ValueError("target and source must pair row for row")
    if target.shape[0] < 3:
        raise DegenerateConfigurationError(
            f"need at least 3 pairs, got {target.shape[0]}")
    mu_s = source.mean(axis=0)
    mu_t = target.mean(axis=0)
    h = (source - mu_s).T @ (target - mu_t)
    u, s, vt = np.linalg.svd(h)
    scale = max(s[0], np.finfo(float).tiny)
    if s[1] <= 1e-12 * scale:
        raise DegenerateConfigurationError("cross-covariance is rank deficient")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return RigidTransform(r, mu_t - r @ mu_s)


class NeighborIndex:
    """k-d tree over a cloud's points; nearest ties go to the lowest id."""

    def __init__(self, cloud):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
        self.points = _frozen(np.asarray(pts, dtype=np.float64).reshape(-1, 3))
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return self.points.shape[0]

    def _require(self):
        if self._tree is None:
            raise EmptyIndexError("nearest-neighbour query on an empty index")

    def nearest(self, query) -> tuple[int, float]:
        ids, dists = self.nearest_many(np.asarray(query, dtype=np.float64).reshape(1, 3))
        return int(ids[0]), float(dists[0])

    def nearest_many(self, queries: np.ndarray,
                     max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Nearest id and distance per query row.

        Queries with no point within ``max_distance`` get id ``len(self)`` and
        distance ``inf``.
        """
        self._require()
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(4, len(self))
        d, i = self._tree.query(q, k=k, distance_upper_bound=max_distance)
        if k == 1:
            return i.astype(np.intp), d
        tied = d == d[:, :1]
        best = np.where(tied, i, np.iinfo(np.intp).max).min(axis=1)
        # all k candidates tied: fall back to an exhaustive ball query
        full = np.flatnonzero(tied.all(axis=1) & np.isfinite(d[:, 0]))
        for row in full:
            cand = self._tree.query_ball_point(q[row], d[row, 0] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(cand)
            cd = np.linalg.norm(self.points[cand] - q[row], axis=1)
            best[row] = cand[cd == cd.min()].min()
        best = best.astype(np.intp)
        best[~np.isfinite(d[:, 0])] = len(self)
        return best, d[:, 0]

    def knn(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        self._require()
        k = min(k, len(self))
        d, i = self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3), k=k)
        return i.reshape(-1, k), d.reshape(-1, k)

    def radius(self, queries: np.ndarray, r: float) -> list[list[int]]:
        """Ids within ``r`` (inclusive) of each query, ascending."""
        if self._tree is None:
            return [[] for _ in range(len(np.asarray(queries).reshape(-1, 3)))]
        res = self._tree.query_ball_point(
            np.asarray(queries, dtype=np.float64).reshape(-1, 3), r)
        return [sorted(x) for x in res]

    def pairs_within(self, r: float) -> np.ndarray:
        """All (i, j), i != j, with |p_i - p_j| <= r, as an (M, 2) array."""
        if self._tree is None:
            return np.zeros((0, 2), dtype=np.intp)
        p = self._tree.query_pairs(r, output_type="ndarray")
        return np.concatenate([p, p[:, ::-1]]).astype(np.intp)


def nearest_neighbor(index: NeighborIndex, query) -> tuple[int, float]:
    return index.nearest(query)
