"""Detect the Lidar body as a vertical cylinder in the coloured cloud.

Hypotheses are scored with a Gaussian/uniform mixture log-likelihood on the
radial residual plus a colour penalty against the body's known colour, and
the detected axis anchors the coarse Lidar-to-camera transform.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import NeighborIndex, PointCloud, RigidTransform
from .roi import RoiConfig

MAX_RGB_DIST2 = 3 * 255.0 ** 2
# beyond this many sigmas the Gaussian term no longer moves a float64 sum
_FAR_SIGMAS = 12.0


class EmptyPointsError(ValueError):
    pass


class ColorlessCloudError(ValueError):
    pass


class InsufficientPointsError(ValueError):
    pass


class NoModelFoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class CylinderModel:
    axis_x: float
    axis_y: float
    radius: float
    z_low: float = 0.0
    z_high: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")
        if not self.z_low < self.z_high:
            raise ValueError("z_low must be below z_high")

    @property
    def axis(self) -> np.ndarray:
        return np.array([self.axis_x, self.axis_y])

    def residuals(self, points: np.ndarray) -> np.ndarray:
        """Signed radial distance of each point from the cylinder surface."""
        p = np.asarray(points, dtype=np.float64)
        return np.hypot(p[:, 0] - self.axis_x, p[:, 1] - self.axis_y) - self.radius


@dataclass(frozen=True)
class MlesacConfig:
    sigma: float = 0.01
    window_volume: Optional[float] = None  # None: XY bounding-box area of the cloud
    gamma_init: float = 0.5
    gamma_em_iters: int = 5
    rgb_weight: float = 1.0 / MAX_RGB_DIST2
    reference_color: tuple = (20, 20, 20)
    n_exponent: int = 2
    max_iterations: int = 1000
    min_inlier_fraction: float = 0.1
    known_radius: Optional[float] = None
    seed: int = 0
    # sampling guidance; neither changes how hypotheses are scored
    color_guided: bool = True
    local_sampling: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.window_volume is not None and not self.window_volume > 0:
            raise ValueError("window_volume must be positive")
        if not 0 < self.gamma_init < 1:
            raise ValueError("gamma_init must lie in (0, 1)")
        if self.rgb_weight < 0:
            raise ValueError("rgb_weight must be non-negative")
        if not 0 < self.min_inlier_fraction < 1:
            raise ValueError("min_inlier_fraction must lie in (0, 1)")
        if self.known_radius is not None and not self.known_radius > 0:
            raise ValueError("known_radius must be positive")
        if self.max_iterations < 1 or self.gamma_em_iters < 0 or self.n_exponent < 1:
            raise ValueError("iteration counts and exponent must be positive")


@dataclass(frozen=True)
class LandmarkResult:
    model: CylinderModel
    inlier_ids: np.ndarray
    score: float
    gamma_final: float
    window_volume: float
    iterations: int


def window_area(points: np.ndarray) -> float:
    p = np.asarray(points)
    ext = p[:, :2].max(axis=0) - p[:, :2].min(axis=0)
    return float(max(ext[0] * ext[1], np.finfo(float).eps))


def _volume(points, cfg: MlesacConfig) -> float:
    return cfg.window_volume if cfg.window_volume is not None else window_area(points)


def _gauss_peak(cfg: MlesacConfig) -> float:
    return (1.0 / (np.sqrt(2 * np.pi) * cfg.sigma)) ** cfg.n_exponent


def geometric_log_likelihood(points: PointCloud, model: CylinderModel,
                             cfg: MlesacConfig, gamma: float,
                             volume: Optional[float] = None) -> float:
    """Sum over points of log(gamma * N(r; sigma) + (1 - gamma) / v)."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    if len(pts) == 0:
        raise EmptyPointsError("likelihood of an empty point set")
    v = volume if volume is not None else _volume(pts, cfg)
    r = model.residuals(pts)
    g = _gauss_peak(cfg) * np.exp(-r * r / (2 * cfg.sigma ** 2))
    return float(np.sum(np.log(gamma * g + (1 - gamma) / v)))


def rgb_loss(points: PointCloud, cfg: MlesacConfig) -> float:
    """beta * sum of squared colour distances to the reference colour."""
    if not points.has_colors:
        raise ColorlessCloudError("RGB loss needs a coloured cloud")
    d = points.colors.astype(np.float64) - np.asarray(cfg.reference_color, np.float64)
    return float(cfg.rgb_weight * np.sum(d * d))


def inlier_mask(points: np.ndarray, model: CylinderModel, cfg: MlesacConfig) -> np.ndarray:
    return np.abs(model.residuals(points)) <= 3 * cfg.sigma


def combined_loss(points: PointCloud, model: CylinderModel, cfg: MlesacConfig,
                  gamma: float, volume: Optional[float] = None) -> float:
    """Negated mixture log-likelihood plus colour penalty over the model's inliers."""
    l1 = geometric_log_likelihood(points, model, cfg, gamma, volume)
    inl = points.select(np.flatnonzero(inlier_mask(points.points, model, cfg)))
    return -l1 + rgb_loss(inl, cfg)


def estimate_gamma(residuals: np.ndarray, cfg: MlesacConfig, volume: float,
                   n_total: Optional[int] = None) -> float:
    """Fixed-point EM on the mixing factor.

    ``residuals`` may be a subset of the points when the remaining
    ``n_total - len(residuals)`` are far enough that their inlier
    responsibility is zero.
    """
    n = len(residuals) if n_total is None else n_total
    g = _gauss_peak(cfg) * np.exp(-residuals ** 2 / (2 * cfg.sigma ** 2))
    u = 1.0 / volume
    gamma = cfg.gamma_init
    for _ in range(cfg.gamma_em_iters):
        num = gamma * g
        gamma = float(np.sum(num / (num + (1 - gamma) * u)) / n)
        gamma = min(max(gamma, 1e-12), 1 - 1e-12)
    return gamma


# ---------------------------------------------------------- circle fits

def circle_from_three(p: np.ndarray):
    """Circumscribed circle of three XY points, or None when collinear."""
    (ax, ay), (bx, by), (cx, cy) = p[:, :2]
    d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1])) ** 2
    if abs(d) <= 1e-12 * max(scale, 1e-300):
        return None
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, float(np.hypot(ax - ux, ay - uy))


def circles_from_two(p: np.ndarray, r: float):
    """The (up to two) circles of radius r through two XY points."""
    a, b = p[0, :2], p[1, :2]
    chord = b - a
    d = np.hypot(*chord)
    if d == 0 or d > 2 * r:
        return []
    m = (a + b) / 2
    h = np.sqrt(max(r * r - (d / 2) ** 2, 0.0))
    perp = np.array([-chord[1], chord[0]]) / d
    return [(*(m + h * perp), r), (*(m - h * perp), r)]


def fit_circle(xy: np.ndarray, radius: Optional[float] = None, init=None, iters: int = 50):
    """Geometric least-squares circle (centre, radius) by Gauss-Newton.

    With ``radius`` given only the centre is fitted.
    """
    xy = np.asarray(xy, dtype=np.float64)[:, :2]
    if init is None:
        # algebraic fit as the starting point
        A = np.column_stack([xy, np.ones(len(xy))])
        b = (xy ** 2).sum(axis=1)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        cx, cy = sol[0] / 2, sol[1] / 2
        r0 = np.sqrt(max(sol[2] + cx * cx + cy * cy, 1e-300))
        init = (cx, cy, r0 if radius is None else radius)
    c = np.array(init[:2], dtype=np.float64)
    r = float(init[2] if radius is None else radius)
    for _ in range(iters):
        diff = xy - c
        dist = np.maximum(np.hypot(diff[:, 0], diff[:, 1]), 1e-300)
        res = dist - r
        J = np.column_stack([-diff / dist[:, None], -np.ones(len(xy))])
        if radius is not None:
            J = J[:, :2]
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        c = c + step[:2]
        if radius is None:
            r = r + step[2]
        if np.max(np.abs(step)) < 1e-15 * max(1.0, abs(r)):
            break
    return float(c[0]), float(c[1]), float(abs(r))


# -------------------------------------------------------------- MLESAC

class _Scorer:
    """Fast exact-to-rounding loss evaluation via an XY k-d tree."""

    def __init__(self, pts, color_pen, cfg, volume):
        self.pts = pts
        self.tree = cKDTree(pts[:, :2])
        self.pen = color_pen  # squared colour distance per point
        self.cfg = cfg
        self.v = volume
        self.n = len(pts)
        self.margin = _FAR_SIGMAS * cfg.sigma

    def score(self, cx, cy, r):
        cfg = self.cfg
        idx = np.asarray(self.tree.query_ball_point((cx, cy), r + self.margin), dtype=np.intp)
        if idx.size:
            d = np.hypot(self.pts[idx, 0] - cx, self.pts[idx, 1] - cy) - r
            keep = np.abs(d) <= self.margin
            idx, d = idx[keep], d[keep]
        else:
            d = np.zeros(0)
        gamma = estimate_gamma(d, cfg, self.v, self.n)
        g = _gauss_peak(cfg) * np.exp(-d * d / (2 * cfg.sigma ** 2))
        u = (1 - gamma) / self.v
        l1 = np.sum(np.log(gamma * g + u)) + (self.n - d.size) * np.log(u)
        inl = np.abs(d) <= 3 * cfg.sigma
        l2 = cfg.rgb_weight * np.sum(self.pen[idx[inl]])
        return float(-l1 + l2), gamma, int(inl.sum())


def detect_cylinder(cloud: PointCloud, cfg: MlesacConfig = MlesacConfig()) -> LandmarkResult:
    """MLESAC search for a vertical cylinder; returns the minimum-loss model.

    Each iteration draws a minimal sample (3 points, or 2 with a known
    radius), forms the candidate circle(s), refines the mixing factor by EM
    and scores the combined loss over every window point. The winner is
    re-fitted by least squares on its 3-sigma inliers.
    """
    if not cloud.has_colors:
        raise ColorlessCloudError("cylinder detection needs a coloured cloud")
    n = len(cloud)
    if n < 3:
        raise InsufficientPointsError(f"need at least 3 points, got {n}")
    pts = cloud.points
    v = _volume(pts, cfg)
    diff = cloud.colors.astype(np.float64) - np.asarray(cfg.reference_color, np.float64)
    pen = np.einsum("ij,ij->i", diff, diff)
    scorer = _Scorer(pts, pen, cfg, v)
    rng = np.random.default_rng(cfg.seed)

    weights = None
    if cfg.color_guided:
        w = np.exp(-20.0 * pen / MAX_RGB_DIST2)
        weights = w / w.sum()
    m = 2 if cfg.known_radius is not None else 3
    reach = None
    if cfg.local_sampling and cfg.known_radius is not None:
        reach = 2 * cfg.known_radius + 6 * cfg.sigma

    best = (np.inf, None, None, -1)
    for it in range(cfg.max_iterations):
        first = int(rng.choice(n, p=weights))
        if reach is not None:
            nb = scorer.tree.query_ball_point(pts[first, :2], reach)
            nb = [j for j in nb if j != first]
            if len(nb) < m - 1:
                continue
            rest = rng.choice(len(nb), size=m - 1, replace=False)
            sample = np.array([first] + [nb[j] for j in rest])
        else:
            others = rng.choice(n - 1, size=m - 1, replace=False)
            others = others + (others >= first)
            sample = np.concatenate([[first], others])
        if m == 3:
            c = circle_from_three(pts[sample])
            cands = [] if c is None else [c]
        else:
            cands = circles_from_two(pts[sample], cfg.known_radius)
        for cx, cy, r in cands:
            s, gamma, _ = scorer.score(cx, cy, r)
            if s < best[0]:
                best = (s, (cx, cy, r), gamma, it)
    if best[1] is None:
        raise NoModelFoundError("no valid hypothesis could be formed")

    cx, cy, r = best[1]
    for _ in range(5):
        probe = CylinderModel(cx, cy, r)
        inl = np.flatnonzero(inlier_mask(pts, probe, cfg))
        if len(inl) < m:
            break
        cx, cy, r = fit_circle(pts[inl], cfg.known_radius, init=(cx, cy, r))
    model = CylinderModel(cx, cy, r)
    inl = np.flatnonzero(inlier_mask(pts, model, cfg))
    frac = len(inl) / n
    if frac < cfg.min_inlier_fraction or len(inl) < 2:
        raise NoModelFoundError(
            f"best inlier fraction {frac:.4f} below {cfg.min_inlier_fraction}")
    z = pts[inl, 2]
    z_lo, z_hi = float(z.min()), float(z.max())
    if not z_lo < z_hi:
        z_hi = z_lo + np.finfo(float).eps * max(1.0, abs(z_lo))
    model = CylinderModel(cx, cy, r, z_lo, z_hi)
    gamma = estimate_gamma(model.residuals(pts), cfg, v)
    score = combined_loss(cloud, model, cfg, gamma, v)
    return LandmarkResult(model, inl, score, gamma, v, best[3] + 1)


# ----------------------------------------------------- coarse transform

class CoarseError(ValueError):
    pass


@dataclass(frozen=True)
class CoarseConfig:
    sensor_height: Optional[float] = None
    yaw_steps: int = 72
    trim_fraction: float = 0.5

    def __post_init__(self):
        if self.yaw_steps < 1:
            raise ValueError("yaw_steps must be at least 1")
        if not 0 < self.trim_fraction <= 1:
            raise ValueError("trim_fraction must lie in (0, 1]")


def estimate_sensor_height(sparse: PointCloud, band: float = 0.05) -> float:
    """Height of the sparse sensor above the floor, from its lowest returns."""
    if len(sparse) == 0:
        raise CoarseError("cannot estimate sensor height from an empty cloud")
    z = sparse.points[:, 2]
    low = z[z <= z.min() + band]
    return float(-np.median(low))


def sparse_roi(sparse: PointCloud, sensor_height: float, cfg: RoiConfig = RoiConfig()) -> PointCloud:
    """Band-select sparse-frame points by their height above the floor."""
    h = sparse.points[:, 2] + sensor_height
    return sparse.select(np.flatnonzero((h >= cfg.z_min) & (h <= cfg.z_max)))


def trimmed_cost(points: np.ndarray, index: NeighborIndex, trim_fraction: float) -> float:
    """Mean of the smallest ``trim_fraction`` share of nearest-neighbour distances."""
    _, d = index.nearest_many(points)
    k = max(1, int(np.ceil(trim_fraction * len(d))))
    return float(np.mean(np.partition(d, k - 1)[:k]))


def yaw_candidates(steps: int) -> np.ndarray:
    return 2 * np.pi * np.arange(steps) / steps


def yaw_costs(result: LandmarkResult, cfg: CoarseConfig, sparse_roi_cloud: PointCloud,
              dense_roi_cloud: PointCloud) -> np.ndarray:
    if len(sparse_roi_cloud) == 0 or len(dense_roi_cloud) == 0:
        raise CoarseError("coarse alignment needs non-empty ROI clouds")
    if cfg.sensor_height is None:
        raise CoarseError("sensor_height must be set (see estimate_sensor_height)")
    index = NeighborIndex(dense_roi_cloud)
    t = np.array([result.model.axis_x, result.model.axis_y, cfg.sensor_height])
    costs = []
    for yaw in yaw_candidates(cfg.yaw_steps):
        moved = RigidTransform.from_yaw(yaw, t).apply_points(sparse_roi_cloud.points)
        costs.append(trimmed_cost(moved, index, cfg.trim_fraction))
    return np.array(costs)


def coarse_transform_from_landmark(result: LandmarkResult, cfg: CoarseConfig,
                                   sparse_roi_cloud: PointCloud,
                                   dense_roi_cloud: PointCloud) -> RigidTransform:
    """Sparse-frame -> dense-frame transform from the detected body axis.

    Translation puts the sparse origin on the axis at ``sensor_height``; yaw
    is the grid candidate with the lowest trimmed nearest-neighbour cost.
    """
    costs = yaw_costs(result, cfg, sparse_roi_cloud, dense_roi_cloud)
    yaw = yaw_candidates(cfg.yaw_steps)[int(np.argmin(costs))]
    if cfg.yaw_steps == 1:
        return RigidTransform(np.eye(3), (result.model.axis_x, result.model.axis_y, cfg.sensor_height))
    return RigidTransform.from_yaw(
        yaw, (result.model.axis_x, result.model.axis_y, cfg.sensor_height))
