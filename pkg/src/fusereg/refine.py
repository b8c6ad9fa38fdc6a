"""Fine registration: normals, FPFH, Fast Global Registration and ICP."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import (NeighborIndex, PointCloud, RigidTransform, best_fit_transform,
                   compose, objective_eq4, rotvec_to_matrix)

FPFH_BINS = 11


class MismatchedNormalsError(ValueError):
    pass


class TooFewCorrespondencesError(ValueError):
    pass


class NoCorrespondencesError(ValueError):
    pass


# ------------------------------------------------------------- normals

@dataclass(frozen=True, eq=False)
class NormalCloud:
    normals: np.ndarray  # (N, 3); zero rows where ``valid`` is False
    valid: np.ndarray    # (N,) bool

    def __len__(self):
        return len(self.normals)


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float64)


def _neighbor_pairs(pts: np.ndarray, radius: float) -> np.ndarray:
    """Directed (i, j) pairs within radius, i != j, sorted by i then j."""
    if len(pts) < 2:
        return np.zeros((0, 2), dtype=np.intp)
    p = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    p = np.concatenate([p, p[:, ::-1]]).astype(np.intp)
    return p[np.lexsort((p[:, 1], p[:, 0]))]


def compute_normals(cloud, radius: float, viewpoint=(0.0, 0.0, 0.0)) -> NormalCloud:
    """PCA normals over radius neighbourhoods, flipped to face ``viewpoint``.

    Points with fewer than three points (themselves included) inside the
    radius get a zero normal and ``valid = False``.
    """
    if not radius > 0:
        raise ValueError("normal radius must be positive")
    pts = _points(cloud)
    n = len(pts)
    pairs = _neighbor_pairs(pts, radius)
    count = np.bincount(pairs[:, 0], minlength=n) + 1
    # covariance of offsets from the owner point; shift-invariant
    q = pts[pairs[:, 1]] - pts[pairs[:, 0]]
    s1 = np.stack([np.bincount(pairs[:, 0], q[:, k], minlength=n) for k in range(3)], 1)
    s2 = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s2[:, a, b] = s2[:, b, a] = np.bincount(pairs[:, 0], q[:, a] * q[:, b], minlength=n)
    mean = s1 / count[:, None]
    cov = s2 / count[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    valid = count >= 3
    view = np.asarray(viewpoint, np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = 0.0
    return NormalCloud(normals, valid)


# ---------------------------------------------------------------- FPFH

def pair_features(p1, n1, p2, n2):
    """Darboux-frame (alpha, phi, theta) for each row-paired point couple.

    The frame is anchored on whichever endpoint's normal is closer to the
    connecting line, which makes the triple independent of pair order.
    Returns arrays of alpha, phi in [-1, 1] and theta in [-pi, pi].
    """
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    dist = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("ij,ij->i", n1, d) / dist
    a2 = np.einsum("ij,ij->i", n2, d) / dist
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[:, None], n2, n1)
    nt = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)
    v = np.cross(d, u)
    vn = np.linalg.norm(v, axis=1)
    ok = vn > 0
    v = v / np.where(ok, vn, 1.0)[:, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, nt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, nt), np.einsum("ij,ij->i", u, nt))
    alpha = np.where(ok, alpha, 0.0)
    phi = np.where(ok, phi, 0.0)
    theta = np.where(ok, theta, 0.0)
    return alpha, phi, theta


def feature_bins(alpha, phi, theta, nbins: int = FPFH_BINS):
    ba = np.floor(nbins * (alpha + 1.0) * 0.5)
    bp = np.floor(nbins * (phi + 1.0) * 0.5)
    bt = np.floor(nbins * (theta + np.pi) / (2 * np.pi))
    return tuple(np.clip(b, 0, nbins - 1).astype(np.intp) for b in (ba, bp, bt))


def _normalize_blocks(h: np.ndarray, nbins: int = FPFH_BINS) -> np.ndarray:
    blocks = h.reshape(len(h), 3, nbins)
    s = blocks.sum(axis=2, keepdims=True)
    blocks = np.where(s > 0, 100.0 * blocks / np.where(s > 0, s, 1.0), 0.0)
    return blocks.reshape(len(h), 3 * nbins)


def compute_fpfh(cloud, normals: NormalCloud, radius: float) -> np.ndarray:
    """(N, 33) FPFH signatures: [alpha | phi | theta] 11-bin blocks, each summing to 100.

    Points with no usable neighbour get an all-zero row.
    """
    pts = _points(cloud)
    if len(normals) != len(pts):
        raise MismatchedNormalsError(
            f"{len(normals)} normals for {len(pts)} points")
    if not radius > 0:
        raise ValueError("feature radius must be positive")
    n = len(pts)
    pairs = _neighbor_pairs(pts, radius)
    i, j = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(pts[j] - pts[i], axis=1)
    use = normals.valid[i] & normals.valid[j] & (dist > 0)
    i, j, dist = i[use], j[use], dist[use]
    nrm = normals.normals
    ba, bp, bt = feature_bins(*pair_features(pts[i], nrm[i], pts[j], nrm[j]))
    spfh = np.zeros((n, 3 * FPFH_BINS))
    for block, b in enumerate((ba, bp, bt)):
        np.add.at(spfh, (i, block * FPFH_BINS + b), 1.0)
    spfh = _normalize_blocks(spfh)
    k = np.bincount(i, minlength=n).astype(np.float64)
    acc = np.zeros_like(spfh)
    np.add.at(acc, i, spfh[j] / dist[:, None])
    fpfh = spfh + acc / np.where(k > 0, k, 1.0)[:, None]
    return _normalize_blocks(fpfh)


# ---------------------------------------------------------------- FGR

@dataclass(frozen=True)
class FgrConfig:
    feature_radius: float = 0.25
    normal_radius: float = 0.1
    tuple_test_count: int = 1000
    tuple_scale: float = 0.95
    mu_init: Optional[float] = None  # None: squared diameter of the target
    mu_div_factor: float = 1.4
    mu_update_every: int = 4
    mu_floor: float = 0.01 ** 2
    max_iterations: int = 64
    seed: int = 0

    def __post_init__(self):
        if not (self.feature_radius > 0 and self.normal_radius > 0):
            raise ValueError("radii must be positive")
        if self.tuple_test_count < 1 or self.max_iterations < 1 or self.mu_update_every < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.tuple_scale < 1:
            raise ValueError("tuple_scale must lie in (0, 1)")
        if self.mu_init is not None and not self.mu_init > 0:
            raise ValueError("mu_init must be positive")
        if not (self.mu_div_factor > 1 and self.mu_floor > 0):
            raise ValueError("mu_div_factor must exceed 1 and mu_floor be positive")


def mutual_nearest(src_feats: np.ndarray, dst_feats: np.ndarray) -> np.ndarray:
    """(M, 2) pairs (i, j) where i and j are each other's nearest in feature space."""
    src_feats = np.asarray(src_feats, np.float64)
    dst_feats = np.asarray(dst_feats, np.float64)
    if len(src_feats) == 0 or len(dst_feats) == 0:
        raise ValueError("feature matching needs non-empty signature sets")
    _, fwd = cKDTree(dst_feats).query(src_feats, k=1)
    _, back = cKDTree(src_feats).query(dst_feats, k=1)
    i = np.arange(len(src_feats))
    keep = back[fwd] == i
    return np.column_stack([i[keep], fwd[keep]]).astype(np.intp)


def tuple_test(corr: np.ndarray, src_pts: np.ndarray, dst_pts: np.ndarray,
               cfg: FgrConfig) -> np.ndarray:
    """Keep correspondences that appear in a random triple with consistent edge lengths.

    Up to ``100 * len(corr)`` triples are drawn; drawing stops once
    ``cfg.tuple_test_count`` triples have passed.
    """
    m = len(corr)
    if m < 3:
        return np.zeros((0, 2), dtype=np.intp)
    rng = np.random.default_rng(cfg.seed)
    trials = 100 * m
    lo, hi = cfg.tuple_scale, 1.0 / cfg.tuple_scale
    picks = rng.integers(0, m, size=(trials, 3))
    a = corr[picks]  # (trials, 3, 2)
    ps, pd = src_pts[a[..., 0]], dst_pts[a[..., 1]]
    ok = np.ones(trials, dtype=bool)
    for u, v in ((0, 1), (1, 2), (2, 0)):
        ls = np.linalg.norm(ps[:, u] - ps[:, v], axis=1)
        ld = np.linalg.norm(pd[:, u] - pd[:, v], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = ls / ld
        ok &= (ls > 0) & (ld > 0) & (ratio >= lo) & (ratio <= hi)
    passed = np.flatnonzero(ok)[: cfg.tuple_test_count]
    kept = np.unique(picks[passed].ravel())
    return corr[kept]


def match_features(src_feats: np.ndarray, dst_feats: np.ndarray, src_pts: np.ndarray,
                   dst_pts: np.ndarray, cfg: FgrConfig = FgrConfig()) -> np.ndarray:
    """Reciprocal feature matches surviving the tuple test, as (source_id, target_id)."""
    corr = mutual_nearest(src_feats, dst_feats)
    return tuple_test(corr, np.asarray(src_pts, np.float64), np.asarray(dst_pts, np.float64), cfg)


def geman_mcclure_weight(r2: np.ndarray, mu: float) -> np.ndarray:
    """Line-process weight (mu / (mu + r^2))^2 for squared residuals r2.

    Only an exact zero residual gets weight 1; tiny residuals are kept just
    below it rather than rounding up.
    """
    r2 = np.asarray(r2, dtype=np.float64)
    w = (mu / (mu + r2)) ** 2
    return np.where(r2 > 0, np.minimum(w, np.nextafter(1.0, 0.0)), w)


@dataclass
class FgrResult:
    transform: RigidTransform
    correspondences: np.ndarray
    iterations: int
    mu_trace: list = field(default_factory=list)
    objective_trace: list = field(default_factory=list)


def optimize_pairwise(src: np.ndarray, dst: np.ndarray, cfg: FgrConfig,
                      mu_init: float) -> FgrResult:
    """Graduated Geman-McClure alignment of paired rows src -> dst."""
    T = RigidTransform.identity()
    mu = mu_init
    mus, objs = [], []
    for it in range(cfg.max_iterations):
        if it > 0 and it % cfg.mu_update_every == 0 and mu > cfg.mu_floor:
            mu = max(mu / cfg.mu_div_factor, cfg.mu_floor)
        q = T.apply_points(src)
        r = q - dst
        r2 = np.einsum("ij,ij->i", r, r)
        w = geman_mcclure_weight(r2, mu)
        # d(q)/d(omega) = -[q]x for a left-multiplied small rotation
        J = np.zeros((len(q), 3, 6))
        J[:, 0, 1], J[:, 0, 2] = q[:, 2], -q[:, 1]
        J[:, 1, 0], J[:, 1, 2] = -q[:, 2], q[:, 0]
        J[:, 2, 0], J[:, 2, 1] = q[:, 1], -q[:, 0]
        J[:, :, 3:] = np.eye(3)
        JtJ = np.einsum("n,nki,nkj->ij", w, J, J)
        Jtr = np.einsum("n,nki,nk->i", w, J, r)
        try:
            x = np.linalg.solve(JtJ, -Jtr)
        except np.linalg.LinAlgError:
            break
        T = compose(RigidTransform(rotvec_to_matrix(x[:3]), x[3:]), T)
        mus.append(mu)
        objs.append(float(np.sum(mu * r2 / (mu + r2))))
    return FgrResult(T, np.zeros((0, 2), np.intp), len(mus), mus, objs)


def cloud_diameter(pts: np.ndarray) -> float:
    ext = pts.max(axis=0) - pts.min(axis=0)
    return float(np.linalg.norm(ext))


def fgr_align(source, target, cfg: FgrConfig = FgrConfig(),
              source_viewpoint=(0.0, 0.0, 0.0), target_viewpoint=(0.0, 0.0, 0.0)) -> FgrResult:
    """Feature-based global alignment of ``source`` onto ``target``.

    Both clouds are expected to be voxel-downsampled already.
    """
    sp, tp = _points(source), _points(target)
    if len(sp) < 10 or len(tp) < 10:
        raise TooFewCorrespondencesError(
            f"FGR needs at least 10 points per cloud, got {len(sp)} and {len(tp)}")
    sn = compute_normals(sp, cfg.normal_radius, source_viewpoint)
    tn = compute_normals(tp, cfg.normal_radius, target_viewpoint)
    sf = compute_fpfh(sp, sn, cfg.feature_radius)
    tf = compute_fpfh(tp, tn, cfg.feature_radius)
    # rows without any histogram mass carry no information
    s_ok = np.flatnonzero(sf.any(axis=1))
    t_ok = np.flatnonzero(tf.any(axis=1))
    if len(s_ok) == 0 or len(t_ok) == 0:
        raise TooFewCorrespondencesError("no point has a usable FPFH signature")
    corr = match_features(sf[s_ok], tf[t_ok], sp[s_ok], tp[t_ok], cfg)
    corr = np.column_stack([s_ok[corr[:, 0]], t_ok[corr[:, 1]]]) if len(corr) else corr
    if len(corr) < 4:
        raise TooFewCorrespondencesError(f"only {len(corr)} correspondences survive")
    mu0 = cfg.mu_init if cfg.mu_init is not None else cloud_diameter(tp) ** 2
    res = optimize_pairwise(sp[corr[:, 0]], tp[corr[:, 1]], cfg, mu0)
    res.correspondences = corr
    return res


# ---------------------------------------------------------------- ICP

@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    rel_objective_tol: float = 1e-6
    max_correspondence_distance: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1 or not self.max_correspondence_distance > 0:
            raise ValueError("ICP iteration count and gate must be positive")
        if not 0 < self.rel_objective_tol < 1:
            raise ValueError("rel_objective_tol must lie in (0, 1)")


@dataclass
class IcpResult:
    transform: RigidTransform
    trace: list  # objective value after each iteration
    pair_counts: list

    @property
    def iterations(self) -> int:
        return len(self.trace)


def icp_align(source, target, init: RigidTransform = RigidTransform.identity(),
              cfg: IcpConfig = IcpConfig(), index: Optional[NeighborIndex] = None) -> IcpResult:
    """Point-to-point ICP taking ``source`` onto ``target``.

    Each iteration matches every transformed source point to its nearest
    target point inside the gate and re-solves the closed-form alignment
    from the original source coordinates.
    """
    sp, tp = _points(source), _points(target)
    if len(sp) == 0 or len(tp) == 0:
        raise ValueError("ICP needs non-empty clouds")
    index = index if index is not None else NeighborIndex(tp)
    # objective values below this are rounding noise of an exact fit
    f_zero = (64 * np.finfo(float).eps * max(1.0, float(np.abs(tp).max()))) ** 2
    T = init
    trace, counts = [], []
    for k in range(cfg.max_iterations):
        ids, d = index.nearest_many(T.apply_points(sp), cfg.max_correspondence_distance)
        m = np.isfinite(d)
        if not m.any():
            raise NoCorrespondencesError(
                f"no source point lies within {cfg.max_correspondence_distance} m of the target")
        src, dst = sp[m], tp[ids[m]]
        T = best_fit_transform(dst, src)
        f = objective_eq4(dst, src, T)
        trace.append(f)
        counts.append(int(m.sum()))
        if f <= f_zero:
            break
        if k > 0 and abs(trace[-2] - f) / trace[-2] < cfg.rel_objective_tol:
            break
    return IcpResult(T, trace, counts)
