"""Synthetic operating-room scene seen by a spinning Lidar and an RGB-D camera.

Geometry is analytic (room box, bed box, person capsule, Lidar body
cylinder) and every ray is intersected exactly, so surface-distance oracles
are available to tests.

Frames (all Z-up, gravity aligned):

* room   -- floor corner at the origin, walls at x in [0, W], y in [0, D].
* lidar  -- origin at the Lidar's optical centre on its body axis, rotated
  by the Lidar yaw.
* kinect -- origin on the floor directly below the camera, rotated by the
  camera yaw, so z is height above the floor.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import PointCloud, RigidTransform, compose, invert
from . import io as fio


class SceneConfigError(ValueError):
    pass


WALL_COLOR = (170, 170, 170)
FLOOR_COLOR = (120, 120, 120)
BED_COLOR = (245, 245, 245)
SKIN_COLOR = (224, 172, 140)
LIDAR_COLOR = (20, 20, 20)

# material ids used internally
_ROOM, _BED, _PERSON, _LIDAR = 0, 1, 2, 3


@dataclass(frozen=True)
class SceneConfig:
    room_size: tuple = (10.0, 8.0, 3.0)
    lidar_position: tuple = (9.0, 7.0, 1.2)
    lidar_yaw_deg: float = 80.0
    kinect_position: tuple = (6.5, 4.5, 1.6)  # camera centre, room frame
    kinect_yaw_deg: float = 38.0
    kinect_pitch_deg: float = -12.0
    bed_center: tuple = (8.4, 5.3)
    bed_yaw_deg: float = 0.0
    bed_size: tuple = (2.0, 1.0, 0.8)  # length, width, height
    person_radius: float = 0.15
    person_length: float = 1.6
    lidar_radius: float = 0.05
    lidar_height: float = 0.3
    lidar_color: tuple = LIDAR_COLOR
    lidar_azimuth_step_deg: float = 0.5
    lidar_rings: int = 16
    lidar_elevation_deg: tuple = (-45.0, 45.0)
    kinect_grid: tuple = (320, 240)
    kinect_fov_deg: tuple = (57.0, 43.0)
    kinect_range: tuple = (0.5, 4.5)
    lidar_noise: float = 0.01
    kinect_noise: float = 0.002
    color_noise: float = 6.0  # per-channel intensity sigma
    # per-seed perturbation of the nominal layout
    jitter_position: float = 0.25
    jitter_yaw_deg: float = 6.0
    seed: int = 0

    def __post_init__(self):
        dims = list(self.room_size) + list(self.bed_size) + [
            self.person_radius, self.person_length, self.lidar_radius,
            self.lidar_height, self.lidar_azimuth_step_deg]
        if any(not d > 0 for d in dims) or self.lidar_rings < 1:
            raise SceneConfigError("all dimensions and resolutions must be positive")
        if min(self.kinect_grid) < 1 or not 0 <= self.kinect_range[0] < self.kinect_range[1]:
            raise SceneConfigError("bad kinect grid or range")
        if self.lidar_noise < 0 or self.kinect_noise < 0 or self.color_noise < 0:
            raise SceneConfigError("noise sigmas must be non-negative")


@dataclass(frozen=True)
class Layout:
    """Resolved (jittered) poses in the room frame."""

    lidar_position: np.ndarray
    lidar_yaw: float
    kinect_position: np.ndarray
    kinect_yaw: float
    kinect_pitch: float
    bed_center: np.ndarray
    bed_yaw: float

    @property
    def room_from_lidar(self) -> RigidTransform:
        return RigidTransform.from_yaw(self.lidar_yaw, self.lidar_position)

    @property
    def room_from_kinect(self) -> RigidTransform:
        k = self.kinect_position
        return RigidTransform.from_yaw(self.kinect_yaw, (k[0], k[1], 0.0))

    @property
    def kinect_origin(self) -> np.ndarray:
        """Camera centre in the kinect frame."""
        return np.array([0.0, 0.0, self.kinect_position[2]])


@dataclass(frozen=True)
class GroundTruth:
    transform: RigidTransform  # lidar frame -> kinect frame
    feature_points: np.ndarray  # (N, 2, 3): lidar-frame, kinect-frame


@dataclass(frozen=True)
class Scene:
    lidar: PointCloud
    kinect: PointCloud
    truth: GroundTruth
    config: SceneConfig = field(default_factory=SceneConfig)
    layout: Layout = None


def resolve_layout(cfg: SceneConfig) -> Layout:
    rng = np.random.default_rng([cfg.seed, 0])
    jp, jy = cfg.jitter_position, np.deg2rad(cfg.jitter_yaw_deg)
    u = rng.uniform(-1.0, 1.0, size=6)
    lidar = np.array(cfg.lidar_position, float) + jp * np.array([u[0], u[1], 0.0])
    bed = np.array(cfg.bed_center, float) + 0.5 * jp * np.array([u[4], u[5]])
    return Layout(
        lidar_position=lidar,
        lidar_yaw=np.deg2rad(cfg.lidar_yaw_deg) + jy * u[2],
        kinect_position=np.array(cfg.kinect_position, float),
        kinect_yaw=np.deg2rad(cfg.kinect_yaw_deg) + 0.5 * jy * u[3],
        kinect_pitch=np.deg2rad(cfg.kinect_pitch_deg),
        bed_center=bed,
        bed_yaw=np.deg2rad(cfg.bed_yaw_deg),
    )


# ------------------------------------------------------- intersections

def _room_exit(o, d, size):
    """Distance to the inside of the room box for rays starting inside it."""
    size = np.asarray(size, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = np.where(d > 0, (size - o) / d, np.where(d < 0, -o / d, np.inf))
    return t_hi.min(axis=1)


def _box_entry(o, d, center, half, yaw):
    """Entry distance into an oriented (yaw only) box; inf on miss."""
    c, s = np.cos(yaw), np.sin(yaw)
    rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    lo_ = (o - center) @ rt.T
    ld = d @ rt.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - lo_) / ld
        t2 = (half - lo_) / ld
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # parallel rays outside the slab never hit
    outside = (ld == 0) & (np.abs(lo_) > half)
    tn = tmin.max(axis=1)
    tf = tmax.min(axis=1)
    hit = (tn <= tf) & (tn > 1e-9) & ~outside.any(axis=1)
    return np.where(hit, tn, np.inf)


def _cylinder_side(o, d, a, u, r, length):
    """Entry distance into the side of a finite cylinder axis a + s*u, s in [0, length]."""
    w = o - a
    dp = d - np.outer(d @ u, u)
    wp = w - np.outer(w @ u, u)
    qa = np.einsum("ij,ij->i", dp, dp)
    qb = 2 * np.einsum("ij,ij->i", dp, wp)
    qc = np.einsum("ij,ij->i", wp, wp) - r * r
    disc = qb * qb - 4 * qa * qc
    ok = (disc >= 0) & (qa > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ok, (-qb - sq) / (2 * qa), np.inf)
    s = (w @ u) + t * (d @ u)
    good = ok & (t > 1e-9) & (s >= 0) & (s <= length)
    return np.where(good, t, np.inf)


def _sphere(o, d, c, r):
    w = o - c
    b = np.einsum("ij,ij->i", d, w)
    cc = np.einsum("ij,ij->i", w, w) - r * r
    disc = b * b - cc
    ok = disc >= 0
    t = -b - np.sqrt(np.where(ok, disc, 0.0))
    return np.where(ok & (t > 1e-9), t, np.inf)


def _capsule(o, d, p0, p1, r):
    axis = p1 - p0
    length = np.linalg.norm(axis)
    u = axis / length
    return np.minimum(_cylinder_side(o, d, p0, u, r, length),
                      np.minimum(_sphere(o, d, p0, r), _sphere(o, d, p1, r)))


def _vertical_cylinder(o, d, base, r, height):
    u = np.array([0.0, 0.0, 1.0])
    t = _cylinder_side(o, d, base, u, r, height)
    for zc in (base[2], base[2] + height):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[:, 2]) / d[:, 2]
        p = o + tc[:, None] * d
        inside = (p[:, 0] - base[0]) ** 2 + (p[:, 1] - base[1]) ** 2 <= r * r
        tc = np.where(np.isfinite(tc) & (tc > 1e-9) & inside, tc, np.inf)
        t = np.minimum(t, tc)
    return t


def scene_shapes(cfg: SceneConfig, lay: Layout) -> dict:
    """Analytic scene description in the room frame."""
    L, W, H = cfg.bed_size
    bed_c = np.array([lay.bed_center[0], lay.bed_center[1], H / 2])
    along = np.array([np.cos(lay.bed_yaw), np.sin(lay.bed_yaw), 0.0])
    pc = np.array([lay.bed_center[0], lay.bed_center[1], H + cfg.person_radius])
    half_len = cfg.person_length / 2 - cfg.person_radius
    lidar_base = lay.lidar_position - np.array([0.0, 0.0, cfg.lidar_height / 2])
    return {
        "room": np.asarray(cfg.room_size, float),
        "bed": (bed_c, np.array([L / 2, W / 2, H / 2]), lay.bed_yaw),
        "person": (pc - half_len * along, pc + half_len * along, cfg.person_radius),
        "lidar": (lidar_base, cfg.lidar_radius, cfg.lidar_height),
    }


def cast_rays(o, d, shapes, include_lidar: bool):
    """Nearest hit distance and material per ray."""
    o = np.broadcast_to(o, d.shape)
    ts = [_room_exit(o, d, shapes["room"]),
          _box_entry(o, d, *shapes["bed"]),
          _capsule(o, d, *shapes["person"])]
    if include_lidar:
        ts.append(_vertical_cylinder(o, d, *shapes["lidar"]))
    ts = np.stack(ts, axis=1)
    mat = ts.argmin(axis=1)
    return ts[np.arange(len(d)), mat], mat


def room_corners(cfg: SceneConfig, lay: Layout) -> np.ndarray:
    W, D, H = cfg.room_size
    room = [(x, y, z) for z in (0.0, H) for x in (0.0, W) for y in (0.0, D)]
    L, Wb, Hb = cfg.bed_size
    c, s = np.cos(lay.bed_yaw), np.sin(lay.bed_yaw)
    bed = []
    for a in (-L / 2, L / 2):
        for b in (-Wb / 2, Wb / 2):
            bed.append((lay.bed_center[0] + c * a - s * b,
                        lay.bed_center[1] + s * a + c * b, Hb))
    return np.array(room + bed)


def _lidar_rays(cfg, lay):
    az = np.deg2rad(np.arange(0.0, 360.0, cfg.lidar_azimuth_step_deg))
    lo, hi = cfg.lidar_elevation_deg
    el = np.deg2rad(np.linspace(lo, hi, cfg.lidar_rings))
    A, E = np.meshgrid(az, el)  # ring-major ordering
    local = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)
    return lay.room_from_lidar.rotation @ local.T


def _kinect_rays(cfg, lay):
    w, h = cfg.kinect_grid
    fx = (w / 2) / np.tan(np.deg2rad(cfg.kinect_fov_deg[0]) / 2)
    fy = (h / 2) / np.tan(np.deg2rad(cfg.kinect_fov_deg[1]) / 2)
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cam = np.stack([np.ones_like(u), -(u - w / 2) / fx, -(v - h / 2) / fy], -1).reshape(-1, 3)
    cam /= np.linalg.norm(cam, axis=1, keepdims=True)
    cp, sp = np.cos(lay.kinect_pitch), np.sin(lay.kinect_pitch)
    pitch = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    return lay.room_from_kinect.rotation @ pitch @ cam.T


def generate_scene(cfg: SceneConfig = SceneConfig()) -> Scene:
    lay = resolve_layout(cfg)
    size = np.asarray(cfg.room_size, float)
    lp = lay.lidar_position
    if np.any(lp <= 0) or np.any(lp >= size):
        raise SceneConfigError("lidar lies outside the room")
    kp = lay.kinect_position
    if np.any(kp <= 0) or np.any(kp >= size):
        raise SceneConfigError("kinect lies outside the room")
    shapes = scene_shapes(cfg, lay)
    noise_rng, knoise_rng, cnoise_rng = (np.random.default_rng([cfg.seed, k]) for k in (1, 2, 3))

    # lidar sees everything but its own body
    d = _lidar_rays(cfg, lay).T
    t, _ = cast_rays(lp, d, shapes, include_lidar=False)
    t = t + cfg.lidar_noise * noise_rng.standard_normal(t.shape)
    lidar_room = lp + t[:, None] * d

    d = _kinect_rays(cfg, lay).T
    t, mat = cast_rays(kp, d, shapes, include_lidar=True)
    if not np.isfinite(t).any():
        raise SceneConfigError("kinect is not facing any geometry")
    t = t + cfg.kinect_noise * knoise_rng.standard_normal(t.shape)
    lo, hi = cfg.kinect_range
    keep = np.isfinite(t) & (t >= lo) & (t <= hi)
    if not keep.any():
        raise SceneConfigError("kinect sees no geometry inside its depth range")
    kin_room = kp + t[keep, None] * d[keep]
    mat = mat[keep]
    palette = np.array([WALL_COLOR, BED_COLOR, SKIN_COLOR, cfg.lidar_color], np.uint8)
    colors = palette[mat]
    floor = (mat == _ROOM) & (kin_room[:, 2] < 1e-6 + 5 * cfg.kinect_noise)
    colors[floor] = FLOOR_COLOR
    if cfg.color_noise > 0:
        jitter = cfg.color_noise * cnoise_rng.standard_normal(colors.shape)
        colors = np.clip(np.rint(colors + jitter), 0, 255).astype(np.uint8)

    to_lidar = invert(lay.room_from_lidar)
    to_kinect = invert(lay.room_from_kinect)
    truth_t = compose(to_kinect, lay.room_from_lidar)
    corners = room_corners(cfg, lay)
    feats = np.stack([to_lidar.apply_points(corners), to_kinect.apply_points(corners)], axis=1)
    return Scene(
        lidar=PointCloud(to_lidar.apply_points(lidar_room)),
        kinect=PointCloud(to_kinect.apply_points(kin_room), colors),
        truth=GroundTruth(truth_t, feats),
        config=cfg,
        layout=lay,
    )


def export_scene(scene: Scene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fio.write_ply(scene.lidar, out / "lidar.ply")
    fio.write_ply(scene.kinect, out / "kinect.ply")
    fio.write_transform(scene.truth.transform, out / "truth.transform")
    fio.write_features(scene.truth.feature_points, out / "features.txt")


@dataclass(frozen=True)
class LoadedScene:
    lidar: PointCloud
    kinect: PointCloud
    truth: GroundTruth


def load_scene(scene_dir) -> LoadedScene:
    d = Path(scene_dir)
    return LoadedScene(
        lidar=fio.read_ply(d / "lidar.ply"),
        kinect=fio.read_ply(d / "kinect.ply"),
        truth=GroundTruth(fio.read_transform(d / "truth.transform"),
                          fio.read_features(d / "features.txt")),
    )


def with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    return replace(cfg, seed=seed)
